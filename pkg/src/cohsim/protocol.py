"""Directory-based MESI coherence state machine with sharer bit-vectors.

This module holds the pure protocol-level pieces: coherence states, the
per-line sharer vector, directory entries, cache request/response records,
and the stable-state transition functions for loads (GETS) and stores
(GETX).  Structural concerns (sets, ways, replacement, latency) live in
``hierarchy``; this module never looks at the clock.

Two fill variants are supported: plain MESI (load misses fill Exclusive)
and the start-with-S variant (load misses fill Shared), which removes the
load path's ability to ever create a remote Exclusive line.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class CoherenceState(enum.Enum):
    MODIFIED = "M"
    EXCLUSIVE = "E"
    SHARED = "S"
    INVALID = "I"


class ProtocolVariant(enum.Enum):
    MESI = "mesi"
    SS_MESI = "ss-mesi"  # load misses fill Shared instead of Exclusive


class RequestKind(enum.Enum):
    GETS = "gets"
    GETX = "getx"
    FLUSH = "flush"
    REDO_GETS = "redo-gets"


class ResponseKind(enum.Enum):
    DATA = "data"
    REMOTE_EM = "remote-em"  # dataless presence feedback


class UpgradeKind(enum.Enum):
    """Latency class of a store's coherence action."""

    SILENT = "silent"        # E->M in place, no coherence traffic
    BROADCAST = "broadcast"  # S->M, other sharers invalidated
    FILL = "fill"            # requester did not hold the line


class ConfigurationError(ValueError):
    """Raised for requests or parameters outside the configured space."""


@dataclass
class SharerVector:
    """Fixed-width bitmap of which cores' private caches hold a line."""

    width: int = 8
    bits: int = 0

    def has(self, core: int) -> bool:
        self._check(core)
        return bool(self.bits >> core & 1)

    def add(self, core: int) -> None:
        self._check(core)
        self.bits |= 1 << core

    def remove(self, core: int) -> None:
        self._check(core)
        self.bits &= ~(1 << core)

    def popcount(self) -> int:
        return self.bits.bit_count()

    def cores(self) -> list[int]:
        return [c for c in range(self.width) if self.bits >> c & 1]

    def only(self, core: int) -> bool:
        return self.bits == 1 << core

    def _check(self, core: int) -> None:
        if not 0 <= core < self.width:
            raise ConfigurationError(f"core {core} outside 0..{self.width - 1}")


@dataclass
class DirectoryEntry:
    """One LLC-resident line: address, stable state, sharer vector.

    An entry exists exactly while at least one private cache holds the
    line, so the sharer-vector invariants (E/M: one bit, S: >= 1 bit)
    stay total; see the hierarchy module for the eviction paths that
    maintain this.
    """

    address: int
    state: CoherenceState
    sharers: SharerVector = field(default_factory=SharerVector)

    def snapshot(self) -> tuple:
        return (self.address, self.state, self.sharers.width, self.sharers.bits)


@dataclass(frozen=True)
class CacheRequest:
    kind: RequestKind
    address: int
    requester: int
    spec_flag: bool = False  # speculation protection flag

    def __post_init__(self):
        # A redo is by definition confirmed non-speculative.
        if self.kind is RequestKind.REDO_GETS and self.spec_flag:
            raise ValueError("REDO_GETS must carry spec_flag=False")


@dataclass(frozen=True)
class CacheResponse:
    kind: ResponseKind
    latency: int
    data: int | None = None  # opaque address-derived token

    def __post_init__(self):
        if self.kind is ResponseKind.REMOTE_EM and self.data is not None:
            raise ValueError("REMOTE_EM carries no data token")


def is_remote(entry: DirectoryEntry, requester: int) -> bool:
    """True iff the line was inserted by some other core only.

    Precondition: ``entry.state`` is not Invalid (invalid lines are not
    kept in the directory at all).
    """
    return not entry.sharers.has(requester)


def load_fill_state(variant: ProtocolVariant) -> CoherenceState:
    """Stable state a load miss fills with under the given variant."""
    if variant is ProtocolVariant.SS_MESI:
        return CoherenceState.SHARED
    return CoherenceState.EXCLUSIVE


@dataclass(frozen=True)
class GetsHitResult:
    response: ResponseKind
    remote: bool           # requester's bit was unset
    remote_em: bool        # remote and state was E or M
    state_changed: bool
    new_state: CoherenceState
    add_requester: bool    # whether the requester joins the sharer set


def gets_hit_transition(
    entry: DirectoryEntry,
    requester: int,
    spec_flag: bool,
    dsrc_active: bool,
) -> GetsHitResult:
    """Stable-state outcome of a GETS that hit in the LLC directory.

    The caller applies the mutation; when the result is REMOTE_EM the
    directory must be left untouched (no state, sharer, or replacement
    update).  Whether DSRC is active comes from the defense configuration.
    """
    remote = is_remote(entry, requester)
    remote_em = remote and entry.state in (
        CoherenceState.EXCLUSIVE,
        CoherenceState.MODIFIED,
    )
    if remote_em and spec_flag and dsrc_active:
        # Speculative change to a remote E/M line is disallowed; presence
        # feedback goes back instead and the line is untouched.
        return GetsHitResult(
            response=ResponseKind.REMOTE_EM,
            remote=remote,
            remote_em=True,
            state_changed=False,
            new_state=entry.state,
            add_requester=False,
        )
    if remote_em:
        # Non-speculative (or undefended) read of a remote E/M line:
        # classic MESI downgrade to Shared.
        return GetsHitResult(
            response=ResponseKind.DATA,
            remote=remote,
            remote_em=True,
            state_changed=True,
            new_state=CoherenceState.SHARED,
            add_requester=True,
        )
    # Shared or local line: the requester simply joins the sharer set.
    return GetsHitResult(
        response=ResponseKind.DATA,
        remote=remote,
        remote_em=False,
        state_changed=not entry.sharers.has(requester),
        new_state=entry.state,
        add_requester=True,
    )


@dataclass(frozen=True)
class GetxResult:
    upgrade: UpgradeKind
    invalidations: int      # sharers other than the requester that lose the line
    writeback: bool         # a foreign Modified copy had to be written back


def getx_transition(entry: DirectoryEntry | None, requester: int) -> GetxResult:
    """Classify a store's coherence action against the directory.

    The caller applies the mutation (requester becomes the sole Modified
    holder; other private copies are invalidated).
    """
    if entry is None:
        return GetxResult(UpgradeKind.FILL, 0, False)
    holds = entry.sharers.has(requester)
    if holds and entry.state in (CoherenceState.EXCLUSIVE, CoherenceState.MODIFIED):
        # Silent upgrade: sole owner, zero extra coherence traffic.
        return GetxResult(UpgradeKind.SILENT, 0, False)
    if holds:
        # Shared: every other sharer must be invalidated.
        return GetxResult(UpgradeKind.BROADCAST, entry.sharers.popcount() - 1, False)
    writeback = entry.state is CoherenceState.MODIFIED
    return GetxResult(UpgradeKind.FILL, entry.sharers.popcount(), writeback)
