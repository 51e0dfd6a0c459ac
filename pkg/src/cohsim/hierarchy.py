"""Three-level inclusive cache hierarchy with a deterministic timing model.

Private L1/L2 per core, one shared LLC holding the coherence directory,
flat main memory behind it.  Lookups are sequential and non-overlapped: a
request pays each traversed level's latency in full, which makes every
outcome an exact integer cycle count.  Defense hooks (feedback and TORC
shaping) are consulted at the LLC.

Directory transactions are atomic at a single simulated instant; latency
only decides when the response reaches the core.  A directory entry exists
exactly while some private cache holds the line: when the last private
copy is evicted the entry is dropped (with a memory writeback if it was
Modified), so the sharer-vector invariants stay total.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from . import protocol
from .defense import DefenseConfig, TorcBuffer, feedback_policy
from .protocol import (
    CacheResponse,
    CoherenceState,
    ConfigurationError,
    DirectoryEntry,
    ProtocolVariant,
    RequestKind,
    ResponseKind,
    SharerVector,
    UpgradeKind,
)


@dataclass(frozen=True)
class TimingModel:
    """Per-level access latencies in cycles."""

    t_l1: int = 2
    t_l2: int = 16
    t_llc: int = 40
    t_mem: int = 140

    def __post_init__(self):
        if not (0 < self.t_l1 < self.t_l2 < self.t_llc < self.t_mem):
            raise ConfigurationError(
                "latencies must satisfy 0 < t_l1 < t_l2 < t_llc < t_mem"
            )

    @property
    def llc_hit(self) -> int:
        """Core-to-LLC round trip under sequential lookup."""
        return self.t_l1 + self.t_l2 + self.t_llc

    @property
    def miss(self) -> int:
        """Full walk plus the memory leg (before any jitter)."""
        return self.llc_hit + self.t_mem


@dataclass(frozen=True)
class CacheLevelConfig:
    size: int
    associativity: int
    line_size: int = 64

    def __post_init__(self):
        if self.size % (self.associativity * self.line_size):
            raise ConfigurationError(
                f"size {self.size} not divisible by ways*line "
                f"({self.associativity}*{self.line_size})"
            )

    @property
    def n_sets(self) -> int:
        return self.size // (self.associativity * self.line_size)


@dataclass(frozen=True)
class HierarchyParams:
    l1: CacheLevelConfig = CacheLevelConfig(32 * 1024, 8)
    l2: CacheLevelConfig = CacheLevelConfig(256 * 1024, 8)
    llc: CacheLevelConfig = CacheLevelConfig(2 * 1024 * 1024, 16)
    cores: int = 8
    address_bits: int = 48


class TreePLRU:
    """Tree pseudo-LRU over a power-of-two number of ways."""

    def __init__(self, ways: int):
        if ways & (ways - 1) or ways <= 0:
            raise ConfigurationError("tree-PLRU needs a power-of-two way count")
        self.ways = ways
        self.bits = [0] * ways  # node 1..ways-1 used; 0 points left

    def touch(self, way: int) -> None:
        idx = way + self.ways
        while idx > 1:
            parent = idx >> 1
            self.bits[parent] = 0 if idx & 1 else 1  # point away from `way`
            idx = parent

    def victim(self) -> int:
        idx = 1
        while idx < self.ways:
            idx = (idx << 1) | self.bits[idx]
        return idx - self.ways

    def snapshot(self) -> tuple[int, ...]:
        return tuple(self.bits)


class Level(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LLC = "llc"
    MEMORY = "memory"


class EventKind(enum.Enum):
    ACCESS = "access"
    FILL = "fill"
    EVICT = "evict"
    WRITEBACK = "writeback"
    FLUSH = "flush"
    UPGRADE = "upgrade"
    TORC_DELAY = "torc-delay"
    REMOTE_EM = "remote-em"
    REDO = "redo"


@dataclass
class EventRecord:
    kind: EventKind
    cycle: int
    address: int
    core: int | None = None
    level: Level | None = None
    latency: int | None = None
    response: ResponseKind | None = None
    spec_flag: bool | None = None
    delay: int | None = None
    upgrade: UpgradeKind | None = None
    invalidations: int | None = None
    redo: bool = False
    tag: object = None  # opaque issuer tag (e.g. (core, op index))


@dataclass(frozen=True)
class AccessOutcome:
    hit_level: Level
    response: CacheResponse
    total_latency: int
    remote: bool = False
    shaped: bool = False
    delay: int = 0


class PrivateCache:
    """Set-associative presence cache (tags only; state is directory-side)."""

    def __init__(self, cfg: CacheLevelConfig):
        self.cfg = cfg
        self.sets: list[dict[int, int]] = [dict() for _ in range(cfg.n_sets)]
        self.plru = [TreePLRU(cfg.associativity) for _ in range(cfg.n_sets)]

    def _set_of(self, line: int) -> int:
        return (line // self.cfg.line_size) % self.cfg.n_sets

    def contains(self, line: int) -> bool:
        return any(a == line for a in self.sets[self._set_of(line)].values())

    def touch(self, line: int) -> None:
        s = self._set_of(line)
        for way, a in self.sets[s].items():
            if a == line:
                self.plru[s].touch(way)
                return

    def insert(self, line: int) -> int | None:
        """Install a line; returns the evicted line address, if any."""
        s = self._set_of(line)
        slot = self.sets[s]
        if any(a == line for a in slot.values()):
            self.touch(line)
            return None
        evicted = None
        for way in range(self.cfg.associativity):
            if way not in slot:
                slot[way] = line
                self.plru[s].touch(way)
                return None
        way = self.plru[s].victim()
        evicted = slot[way]
        slot[way] = line
        self.plru[s].touch(way)
        return evicted

    def remove(self, line: int) -> bool:
        s = self._set_of(line)
        for way, a in list(self.sets[s].items()):
            if a == line:
                del self.sets[s][way]
                return True
        return False

    def lines(self) -> list[int]:
        return [a for s in self.sets for a in s.values()]


class SharedCache:
    """The LLC: set-associative directory of DirectoryEntry records."""

    def __init__(self, cfg: CacheLevelConfig, sharer_width: int):
        self.cfg = cfg
        self.sharer_width = sharer_width
        self.sets: list[dict[int, DirectoryEntry]] = [dict() for _ in range(cfg.n_sets)]
        self.plru = [TreePLRU(cfg.associativity) for _ in range(cfg.n_sets)]

    def _set_of(self, line: int) -> int:
        return (line // self.cfg.line_size) % self.cfg.n_sets

    def lookup(self, line: int) -> DirectoryEntry | None:
        for entry in self.sets[self._set_of(line)].values():
            if entry.address == line:
                return entry
        return None

    def touch(self, line: int) -> None:
        s = self._set_of(line)
        for way, entry in self.sets[s].items():
            if entry.address == line:
                self.plru[s].touch(way)
                return

    def victim_for(self, line: int) -> DirectoryEntry | None:
        """Entry that would be displaced by installing `line`, if the set is full."""
        s = self._set_of(line)
        slot = self.sets[s]
        if len(slot) < self.cfg.associativity:
            return None
        return slot[self.plru[s].victim()]

    def insert(self, entry: DirectoryEntry) -> None:
        s = self._set_of(entry.address)
        slot = self.sets[s]
        for way in range(self.cfg.associativity):
            if way not in slot:
                slot[way] = entry
                self.plru[s].touch(way)
                return
        raise RuntimeError("insert into full set; evict the victim first")

    def remove(self, line: int) -> bool:
        s = self._set_of(line)
        for way, entry in list(self.sets[s].items()):
            if entry.address == line:
                del self.sets[s][way]
                return True
        return False

    def entries(self) -> list[DirectoryEntry]:
        return [e for s in self.sets for e in s.values()]

    def snapshot(self) -> tuple:
        """Bit-level view of directory state including replacement metadata."""
        return (
            tuple(
                tuple(sorted((w, e.snapshot()) for w, e in s.items()))
                for s in self.sets
            ),
            tuple(p.snapshot() for p in self.plru),
        )


class Hierarchy:
    """Caches + directory + timing + defense hooks for one simulation."""

    def __init__(
        self,
        config: DefenseConfig,
        timing: TimingModel | None = None,
        params: HierarchyParams | None = None,
        rng: random.Random | None = None,
        noise_jitter: int = 0,
    ):
        self.config = config
        self.timing = timing or TimingModel()
        self.params = params or HierarchyParams()
        self.rng = rng or random.Random(0)
        self.noise_jitter = noise_jitter
        self.line_size = self.params.l1.line_size
        self.l1 = [PrivateCache(self.params.l1) for _ in range(self.params.cores)]
        self.l2 = [PrivateCache(self.params.l2) for _ in range(self.params.cores)]
        self.llc = SharedCache(self.params.llc, self.params.cores)
        self.torc_buffers = [TorcBuffer() for _ in range(self.params.cores)]
        self.events: list[EventRecord] = []

    # -- helpers -----------------------------------------------------------

    def line_of(self, address: int) -> int:
        if not 0 <= address < (1 << self.params.address_bits):
            raise ConfigurationError(
                f"address {address:#x} outside the configured "
                f"{self.params.address_bits}-bit space"
            )
        return address - (address % self.line_size)

    def _mem_latency(self) -> int:
        t = self.timing.t_mem
        if self.noise_jitter:
            t += self.rng.randint(-self.noise_jitter, self.noise_jitter)
        return max(1, t)

    def _log(self, record: EventRecord) -> None:
        self.events.append(record)

    def holder_level(self, core: int, line: int) -> Level | None:
        if self.l1[core].contains(line):
            return Level.L1
        if self.l2[core].contains(line):
            return Level.L2
        return None

    # -- eviction machinery ------------------------------------------------

    def _drop_private_copy(self, core: int, line: int, now: int) -> None:
        """Remove the line from one core's private caches and update the
        directory; dropping the last copy retires the LLC entry."""
        self.l1[core].remove(line)
        self.l2[core].remove(line)
        entry = self.llc.lookup(line)
        if entry is None or not entry.sharers.has(core):
            return
        entry.sharers.remove(core)
        if entry.sharers.popcount() == 0:
            if entry.state is CoherenceState.MODIFIED:
                self._log(EventRecord(EventKind.WRITEBACK, now, line, core=core))
            self.llc.remove(line)
            self._log(EventRecord(EventKind.EVICT, now, line, level=Level.LLC))
        elif entry.state in (CoherenceState.EXCLUSIVE, CoherenceState.MODIFIED):
            # Cannot happen while E/M imply a sole sharer, but keep the
            # directory self-healing if a future path relaxes that.
            entry.state = CoherenceState.SHARED

    def _evict_llc_entry(self, entry: DirectoryEntry, now: int) -> None:
        """Recall an LLC victim from every private holder (inclusive)."""
        for core in entry.sharers.cores():
            self.l1[core].remove(entry.address)
            self.l2[core].remove(entry.address)
        if entry.state is CoherenceState.MODIFIED:
            self._log(EventRecord(EventKind.WRITEBACK, now, entry.address))
        self.llc.remove(entry.address)
        self._log(EventRecord(EventKind.EVICT, now, entry.address, level=Level.LLC))

    def _install_llc(self, line: int, state: CoherenceState, core: int, now: int) -> DirectoryEntry:
        victim = self.llc.victim_for(line)
        if victim is not None:
            self._evict_llc_entry(victim, now)
        sharers = SharerVector(width=self.params.cores)
        sharers.add(core)
        entry = DirectoryEntry(address=line, state=state, sharers=sharers)
        self.llc.insert(entry)
        self._log(EventRecord(EventKind.FILL, now, line, core=core, level=Level.LLC))
        return entry

    def _fill_private(self, core: int, line: int, now: int) -> None:
        """Install into L2 then L1, cascading inclusive evictions."""
        evicted = self.l2[core].insert(line)
        if evicted is not None:
            self.l1[core].remove(evicted)
            self._log(
                EventRecord(EventKind.EVICT, now, evicted, core=core, level=Level.L2)
            )
            self._drop_private_copy(core, evicted, now)
        l1_evicted = self.l1[core].insert(line)
        if l1_evicted is not None:
            # Still resident in L2; the directory is unaffected.
            self._log(
                EventRecord(EventKind.EVICT, now, l1_evicted, core=core, level=Level.L1)
            )

    # -- load path (GETS) ---------------------------------------------------

    def access_load(
        self,
        address: int,
        core: int,
        spec_flag: bool,
        now: int,
        redo: bool = False,
        tag: object = None,
    ) -> AccessOutcome:
        """One GETS (or REDO_GETS) through the hierarchy, atomically at `now`."""
        line = self.line_of(address)
        timing = self.timing
        if redo:
            spec_flag = False  # a redo is confirmed non-speculative

        if self.l1[core].contains(line):
            self.l1[core].touch(line)
            self.l2[core].touch(line)
            out = AccessOutcome(
                Level.L1,
                CacheResponse(ResponseKind.DATA, timing.t_l1, data=line),
                timing.t_l1,
            )
            self._log_access(out, core, line, spec_flag, now, redo, tag)
            return out

        if self.l2[core].contains(line):
            self.l2[core].touch(line)
            lat = timing.t_l1 + timing.t_l2
            self.l1[core].insert(line)
            out = AccessOutcome(
                Level.L2, CacheResponse(ResponseKind.DATA, lat, data=line), lat
            )
            self._log_access(out, core, line, spec_flag, now, redo, tag)
            return out

        entry = self.llc.lookup(line)
        llc_arrival = now + timing.llc_hit
        if entry is not None:
            out = self._llc_hit(entry, core, spec_flag, now, llc_arrival, line)
        else:
            out = self._llc_miss(core, spec_flag, now, llc_arrival, line)
        self._log_access(out, core, line, spec_flag, now, redo, tag)
        return out

    def _llc_hit(
        self,
        entry: DirectoryEntry,
        core: int,
        spec_flag: bool,
        now: int,
        llc_arrival: int,
        line: int,
    ) -> AccessOutcome:
        timing = self.timing
        result = protocol.gets_hit_transition(
            entry, core, spec_flag, self.config.dsrc_active
        )
        if result.response is ResponseKind.REMOTE_EM:
            # Presence feedback; the directory (including replacement
            # metadata) is left bit-identical.
            if self.config.equalized and self.config.dsrm_optimized:
                total = timing.llc_hit  # feedback returns after the lookup
                delay = 0
            else:
                # Shaped to miss-equivalent time, held in the TORC buffer.
                total, delay = self._shape_to_miss(line, None, True, now, llc_arrival, core)
            self._log(
                EventRecord(
                    EventKind.REMOTE_EM,
                    now,
                    line,
                    core=core,
                    latency=total,
                    spec_flag=spec_flag,
                )
            )
            return AccessOutcome(
                Level.LLC,
                CacheResponse(ResponseKind.REMOTE_EM, total),
                total,
                remote=True,
                shaped=delay > 0,
                delay=delay,
            )

        # DATA: apply the stable-state mutation.
        if result.add_requester:
            entry.sharers.add(core)
        entry.state = result.new_state
        self.llc.touch(line)
        self._fill_private(core, line, now)

        shaped = False
        delay = 0
        total = timing.llc_hit
        if (
            result.remote
            and self.config.torc_active
            and (self.config.torc_covers_speculative or not spec_flag)
        ):
            total, delay = self._shape_to_miss(line, line, False, now, llc_arrival, core)
            shaped = True
            self._log(
                EventRecord(
                    EventKind.TORC_DELAY, now, line, core=core, delay=delay
                )
            )
        return AccessOutcome(
            Level.LLC,
            CacheResponse(ResponseKind.DATA, total, data=line),
            total,
            remote=result.remote,
            shaped=shaped,
            delay=delay,
        )

    def _llc_miss(
        self, core: int, spec_flag: bool, now: int, llc_arrival: int, line: int
    ) -> AccessOutcome:
        timing = self.timing
        kind = feedback_policy(False, False, spec_flag, self.config)
        if kind is ResponseKind.REMOTE_EM:
            # Equalized feedback on a miss: no fetch, no fill, no state.
            if self.config.dsrm_optimized:
                total = timing.llc_hit
                delay = 0
            else:
                total, delay = self._shape_to_miss(line, None, True, now, llc_arrival, core)
            self._log(
                EventRecord(
                    EventKind.REMOTE_EM,
                    now,
                    line,
                    core=core,
                    latency=total,
                    spec_flag=spec_flag,
                )
            )
            return AccessOutcome(
                Level.LLC,
                CacheResponse(ResponseKind.REMOTE_EM, total),
                total,
                shaped=delay > 0,
                delay=delay,
            )
        total = timing.llc_hit + self._mem_latency()
        fill_state = protocol.load_fill_state(self.config.variant)
        self._install_llc(line, fill_state, core, now)
        self._fill_private(core, line, now)
        return AccessOutcome(
            Level.MEMORY,
            CacheResponse(ResponseKind.DATA, total, data=line),
            total,
        )

    def _shape_to_miss(
        self,
        line: int,
        token: int | None,
        coherence_bit: bool,
        now: int,
        llc_arrival: int,
        core: int,
    ) -> tuple[int, int]:
        """Delay an LLC response so it returns when a miss would have.

        Returns (total latency, injected delay).  The response occupies a
        TORC buffer slot from LLC arrival until release; a full buffer
        pushes the release out further (backpressure).
        """
        release = now + self.timing.llc_hit + self._mem_latency()
        effective = self.torc_buffers[core].admit(
            line, token, coherence_bit, llc_arrival, release
        )
        total = effective - now
        return total, total - self.timing.llc_hit

    def _log_access(
        self,
        out: AccessOutcome,
        core: int,
        line: int,
        spec_flag: bool,
        now: int,
        redo: bool,
        tag: object,
    ) -> None:
        self._log(
            EventRecord(
                EventKind.ACCESS,
                now,
                line,
                core=core,
                level=out.hit_level,
                latency=out.total_latency,
                response=out.response.kind,
                spec_flag=spec_flag,
                delay=out.delay or None,
                redo=redo,
                tag=tag,
            )
        )

    # -- store path (GETX) --------------------------------------------------

    def access_store(
        self, address: int, core: int, now: int, tag: object = None
    ) -> AccessOutcome:
        """One GETX through the hierarchy, atomically at `now`.

        Latency model: the walk to wherever the line is found, plus one
        core-to-LLC round trip and one LLC-latency invalidation-ack wave
        for broadcast upgrades, plus the memory leg on true misses.
        """
        line = self.line_of(address)
        timing = self.timing
        entry = self.llc.lookup(line)
        result = protocol.getx_transition(entry, core)

        held = self.holder_level(core, line)
        if held is Level.L1:
            walk = timing.t_l1
            level = Level.L1
        elif held is Level.L2:
            walk = timing.t_l1 + timing.t_l2
            level = Level.L2
        elif entry is not None:
            walk = timing.llc_hit
            level = Level.LLC
        else:
            walk = timing.llc_hit + self._mem_latency()
            level = Level.MEMORY

        if result.upgrade is UpgradeKind.SILENT:
            extra = 0
        elif result.upgrade is UpgradeKind.BROADCAST:
            extra = timing.llc_hit + (timing.t_llc if result.invalidations else 0)
        else:  # FILL
            extra = timing.t_llc if result.invalidations else 0

        if result.writeback:
            self._log(EventRecord(EventKind.WRITEBACK, now, line, core=core))

        if entry is not None:
            for other in entry.sharers.cores():
                if other != core:
                    self.l1[other].remove(line)
                    self.l2[other].remove(line)
                    entry.sharers.remove(other)
            entry.state = CoherenceState.MODIFIED
            entry.sharers.add(core)
            self.llc.touch(line)
        else:
            self._install_llc(line, CoherenceState.MODIFIED, core, now)
        self._fill_private(core, line, now)

        total = walk + extra
        self._log(
            EventRecord(
                EventKind.UPGRADE,
                now,
                line,
                core=core,
                level=level,
                latency=total,
                upgrade=result.upgrade,
                invalidations=result.invalidations,
                tag=tag,
            )
        )
        return AccessOutcome(
            level,
            CacheResponse(ResponseKind.DATA, total, data=line),
            total,
        )

    # -- flush ---------------------------------------------------------------

    def flush(self, address: int, now: int, core: int | None = None) -> None:
        """Invalidate the line everywhere; Modified data is written back."""
        line = self.line_of(address)
        entry = self.llc.lookup(line)
        if entry is not None:
            if entry.state is CoherenceState.MODIFIED:
                self._log(EventRecord(EventKind.WRITEBACK, now, line, core=core))
            for holder in entry.sharers.cores():
                self.l1[holder].remove(line)
                self.l2[holder].remove(line)
            self.llc.remove(line)
        self._log(EventRecord(EventKind.FLUSH, now, line, core=core))

    # -- consistency checks (used by the fuzz suites) ------------------------

    def check_invariants(self) -> None:
        """Assert single-writer, sharer consistency, and inclusivity."""
        for entry in self.llc.entries():
            holders = [
                c
                for c in range(self.params.cores)
                if self.l1[c].contains(entry.address) or self.l2[c].contains(entry.address)
            ]
            popcount = entry.sharers.popcount()
            if entry.state in (CoherenceState.EXCLUSIVE, CoherenceState.MODIFIED):
                assert popcount == 1, (
                    f"{entry.state.value} line {entry.address:#x} has "
                    f"{popcount} sharers"
                )
            elif entry.state is CoherenceState.SHARED:
                assert popcount >= 1, f"S line {entry.address:#x} has no sharers"
            else:
                raise AssertionError("Invalid entry resident in the directory")
            assert sorted(entry.sharers.cores()) == holders, (
                f"line {entry.address:#x}: sharer vector "
                f"{entry.sharers.cores()} vs private holders {holders}"
            )
        valid = {e.address for e in self.llc.entries()}
        for c in range(self.params.cores):
            for line in self.l1[c].lines():
                assert line in self.l2[c].lines(), (
                    f"L1 line {line:#x} missing from L2 (core {c})"
                )
            for line in self.l2[c].lines():
                assert line in valid, (
                    f"private line {line:#x} (core {c}) missing from the LLC"
                )
