"""Defense configurations and their LLC-side decision logic.

Five compositions are modeled:

  C1  insecure baseline (plain MESI, no shaping, no feedback)
  C2  TORC only: remote-line LLC hits are delayed to miss-equivalent time
  C3  TORC + DSRC: presence feedback (REMOTE-EM) on speculative hits to
      remote E/M lines; TORC delay applied to non-speculative accesses
      only, while the delayed feedback itself is shaped to miss time
  C4  TORC + DSRM: equalized feedback, REMOTE-EM on both remote E/M hits
      and misses for spec-flagged loads; the optimized schedule drops the
      delay on the initial speculative leg so only the redo pays miss time
  C5  TORC + DSRC on the start-with-S protocol variant, which never
      creates remote Exclusive lines through loads

TORC's "dummy memory access" is modeled as a release-cycle computation
(the shaped response is held in a bounded per-core buffer until the cycle
a real miss would have returned), not as an actual memory transaction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .protocol import ProtocolVariant, ResponseKind


class SpdmKind(enum.Enum):
    """Speculation protection decision model: when does a load count as
    speculative at issue?"""

    BRANCH_SHADOW = "branch-shadow"  # an older unresolved branch exists
    ROB_HEAD = "rob-head"            # the load is not at the ROB head


class DefenseId(enum.Enum):
    C1_INSECURE = "c1"
    C2_TORC = "c2"
    C3_TORC_DSRC = "c3"
    C4_TORC_DSRM = "c4"
    C5_TORC_DSRC_SSMESI = "c5"


_LABELS = {
    DefenseId.C1_INSECURE: "insecure",
    DefenseId.C2_TORC: "torc",
    DefenseId.C3_TORC_DSRC: "torc+dsrc",
    DefenseId.C4_TORC_DSRM: "torc+dsrm",
    DefenseId.C5_TORC_DSRC_SSMESI: "torc+dsrc+ss-mesi",
}


@dataclass(frozen=True)
class DefenseConfig:
    id: DefenseId
    spdm: SpdmKind = SpdmKind.BRANCH_SHADOW
    dsrm_optimized: bool = True

    @property
    def label(self) -> str:
        return _LABELS[self.id]

    @property
    def torc_active(self) -> bool:
        return self.id is not DefenseId.C1_INSECURE

    @property
    def dsrc_active(self) -> bool:
        """Any form of speculative remote-E/M protection (DSRC or DSRM)."""
        return self.id in (
            DefenseId.C3_TORC_DSRC,
            DefenseId.C4_TORC_DSRM,
            DefenseId.C5_TORC_DSRC_SSMESI,
        )

    @property
    def equalized(self) -> bool:
        """DSRM: feedback is independent of hit/miss for spec loads."""
        return self.id is DefenseId.C4_TORC_DSRM

    @property
    def variant(self) -> ProtocolVariant:
        if self.id is DefenseId.C5_TORC_DSRC_SSMESI:
            return ProtocolVariant.SS_MESI
        return ProtocolVariant.MESI

    @property
    def torc_covers_speculative(self) -> bool:
        """Whether TORC delays remote hits on spec-flagged accesses too.

        C3 and C4 restrict TORC to non-speculative accesses (the
        speculative path is handled by feedback instead); C2 and C5 shape
        every remote hit.
        """
        return self.id in (DefenseId.C2_TORC, DefenseId.C5_TORC_DSRC_SSMESI)

    @property
    def uses_spdm(self) -> bool:
        # C1/C2 have no speculation-dependent behavior at all.
        return self.dsrc_active


def parse_defense_id(text: str) -> DefenseId:
    try:
        return DefenseId(text.strip().lower())
    except ValueError:
        raise ValueError(f"unknown defense config {text!r}; expected c1..c5") from None


def parse_spdm(text: str) -> SpdmKind:
    try:
        return SpdmKind(text.strip().lower())
    except ValueError:
        raise ValueError(
            f"unknown SPDM {text!r}; expected branch-shadow or rob-head"
        ) from None


def feedback_policy(
    hit: bool, remote_em: bool, spec_flag: bool, config: DefenseConfig
) -> ResponseKind:
    """LLC response kind as a pure function of the decision inputs.

    C3/C5: REMOTE_EM iff spec_flag and the hit found a remote E/M line.
    C4:    REMOTE_EM iff spec_flag and (miss, or remote E/M hit); hits on
           the requester's own lines or on Shared lines return data, since
           they reveal nothing that is not already the requester's.
    C1/C2: always data.
    """
    if not config.dsrc_active or not spec_flag:
        return ResponseKind.DATA
    if config.equalized:
        if (not hit) or (hit and remote_em):
            return ResponseKind.REMOTE_EM
        return ResponseKind.DATA
    if hit and remote_em:
        return ResponseKind.REMOTE_EM
    return ResponseKind.DATA


class TorcBufferFullStall(RuntimeError):
    """Internal signal: no buffer slot frees up (should be unreachable
    while outstanding loads are bounded by the load queue)."""


@dataclass
class TorcBuffer:
    """Bounded per-core buffer holding delayed responses until release.

    Entries carry (address, data token, one coherence bit, release cycle).
    Capacity matches the maximum number of outstanding load requests.  If
    all slots are occupied when a new delayed response arrives, the
    response stalls until the earliest release frees a slot; that is
    backpressure, not failure.
    """

    capacity: int = 32
    entries: list[tuple[int, int | None, bool, int]] = field(default_factory=list)

    def admit(
        self,
        address: int,
        token: int | None,
        coherence_bit: bool,
        arrival: int,
        release: int,
    ) -> int:
        """Insert a delayed response; returns its effective release cycle."""
        live = sorted(r for (_, _, _, r) in self.entries if r > arrival)
        self.entries = [e for e in self.entries if e[3] > arrival]
        stall = 0
        if len(live) >= self.capacity:
            # Stall until the (n-capacity+1)-th oldest entry releases.
            free_at = live[len(live) - self.capacity]
            stall = max(0, free_at - arrival)
        effective = release + stall
        self.entries.append((address, token, coherence_bit, effective))
        return effective

    def occupancy(self, cycle: int) -> int:
        return sum(1 for (_, _, _, r) in self.entries if r > cycle)
