"""Simplified out-of-order core and the multi-core simulation driver.

The core model covers exactly what the timing probes exercise: a reorder
buffer with in-order commit (width 8), out-of-order load issue over one
demand memory port, a per-PC two-bit branch predictor, squash-and-refetch
on misprediction, load/memory fences, cycle-timer reads, and the redo path
for loads that received presence feedback instead of data.

Scheduling conventions (all documented constants):

  * dispatch: up to 8 instructions per cycle along the predicted path
  * a producer completing at cycle c makes consumers eligible at cycle c
  * ALU / timer / fence execute in 1 cycle once eligible
  * branch resolution is 2 cycles after issue (issue awaits the condition)
  * one demand memory-op issue per core per cycle; redos reissue through
    a dedicated replay path and do not contend with demand issues
  * loads perform their coherence transaction atomically at issue; stores
    and flushes apply theirs at commit (never on the wrong path)
  * loads deposit 0 into their destination (dataflow, not data values)

The engine is event-driven over a cycle heap, so idle gaps cost nothing.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Sequence

from .defense import DefenseConfig, SpdmKind
from .hierarchy import (
    EventRecord,
    Hierarchy,
    HierarchyParams,
    TimingModel,
)
from .program import MEMORY_OPS, Op, ProbeProgram
from .protocol import ResponseKind

import random

ROB_SIZE = 192
LOAD_QUEUE = 32
DISPATCH_WIDTH = 8
COMMIT_WIDTH = 8
BRANCH_RESOLVE_DELAY = 2  # cycles from issue to resolution


class DeadlockError(RuntimeError):
    """No event can make progress; carries a per-core diagnostic."""


class EntryStatus(enum.Enum):
    DISPATCHED = "dispatched"
    ISSUED = "issued"
    AWAITING_REDO = "awaiting-redo"
    EXECUTED = "executed"
    COMMITTED = "committed"
    SQUASHED = "squashed"


@dataclass
class ROBEntry:
    seq: int
    pc: int
    op: Op
    dest: str | None
    src: str | None
    addr_reg: str | None
    target: int | None
    dispatch_cycle: int
    status: EntryStatus = EntryStatus.DISPATCHED
    predicted_taken: bool | None = None
    taken: bool | None = None
    issue_cycle: int | None = None
    complete_cycle: int | None = None   # execution completion / resolution
    commit_cycle: int | None = None
    global_complete: int | None = None  # store/flush effect visibility
    value: int = 0
    address: int | None = None
    spec_flag: bool = False
    feedback_cycle: int | None = None   # REMOTE_EM arrival
    redo_issue_cycle: int | None = None

    @property
    def squashed(self) -> bool:
        return self.status is EntryStatus.SQUASHED


def spdm_flag(
    rob: Sequence[ROBEntry], load: ROBEntry, model: SpdmKind, cycle: int
) -> bool:
    """Whether the load counts as speculative at `cycle` under the model.

    BranchShadow: an older branch in the ROB has not yet resolved.
    RobHead: the load is not at the ROB head (some older entry has not
    committed).
    """
    older = (e for e in rob if e.seq < load.seq and not e.squashed)
    if model is SpdmKind.BRANCH_SHADOW:
        return any(
            e.op is Op.BRANCH
            and (e.complete_cycle is None or e.complete_cycle > cycle)
            for e in older
        )
    return any(e.commit_cycle is None or e.commit_cycle > cycle for e in older)


class BranchPredictor:
    """Per-PC two-bit saturating counters, initialized weakly taken."""

    INIT = 2

    def __init__(self):
        self.counters: dict[int, int] = {}

    def predict(self, pc: int) -> bool:
        return self.counters.get(pc, self.INIT) >= 2

    def update(self, pc: int, taken: bool) -> None:
        c = self.counters.get(pc, self.INIT)
        self.counters[pc] = min(3, c + 1) if taken else max(0, c - 1)


@dataclass(frozen=True)
class RedoEvent:
    core: int
    pc: int
    seq: int
    address: int
    feedback_cycle: int
    issue_cycle: int
    complete_cycle: int

    @property
    def latency(self) -> int:
        """The redo access's shaped latency."""
        return self.complete_cycle - self.issue_cycle


@dataclass
class CoreTrace:
    """Per-core execution record of one program run."""

    core: int
    entries: list[ROBEntry]
    timers: list[tuple[int, int]]   # committed (pc, cycle value) in order
    redos: list[RedoEvent]
    remote_em_count: int
    squash_count: int
    start_cycle: int
    end_cycle: int
    events: list[EventRecord]

    @property
    def delta_t(self) -> int | None:
        """Cycles between the first two committed timer reads."""
        if len(self.timers) < 2:
            return None
        return self.timers[1][1] - self.timers[0][1]


class _CoreRun:
    """Mutable fetch/ROB state for one core during run_programs."""

    def __init__(self, core: int, program: ProbeProgram, regs: dict[str, int], start: int):
        self.core = core
        self.program = program
        self.presets = dict(regs)
        self.entries: list[ROBEntry] = []
        self.pc = 0
        self.fetching = len(program) > 0
        self.next_fetch = start
        self.port_used: set[int] = set()
        self.resolutions: dict[int, list[int]] = {}
        self.commit_ptr = 0
        self.commit_count = 0
        self.commit_count_cycle = -1
        self.timers: list[tuple[int, int]] = []
        self.redos: list[RedoEvent] = []
        self.remote_em_count = 0

    def done(self) -> bool:
        if self.fetching:
            return False
        return all(
            e.status in (EntryStatus.COMMITTED, EntryStatus.SQUASHED)
            for e in self.entries
        )

    def producer(self, reg: str, before_seq: int) -> ROBEntry | None:
        """Youngest non-squashed older entry writing `reg`."""
        for e in reversed(self.entries[:before_seq]):
            if not e.squashed and e.dest == reg:
                return e
        return None

    def reg_ready(self, reg: str | None, before_seq: int, cycle: int) -> bool:
        if reg is None:
            return True
        prod = self.producer(reg, before_seq)
        if prod is None:
            return True  # preset or implicit zero, ready from the start
        return prod.complete_cycle is not None and prod.complete_cycle <= cycle

    def reg_value(self, reg: str | None, before_seq: int) -> int:
        if reg is None:
            return 0
        prod = self.producer(reg, before_seq)
        if prod is not None:
            return prod.value
        return self.presets.get(reg, 0)

    def inflight_loads(self, cycle: int) -> int:
        return sum(
            1
            for e in self.entries
            if e.op is Op.LOAD
            and not e.squashed
            and e.issue_cycle is not None
            and (e.complete_cycle is None or e.complete_cycle > cycle)
        )


class Simulator:
    """One deterministic simulation instance: cores + hierarchy + clock.

    Instances carry no shared mutable state, so independent simulations
    may run concurrently; within one instance everything is
    single-threaded.  With noise_jitter == 0 the instance is seed-free
    deterministic.
    """

    MAX_STEPS = 10_000_000

    def __init__(
        self,
        config: DefenseConfig,
        timing: TimingModel | None = None,
        params: HierarchyParams | None = None,
        seed: int = 0,
        noise_jitter: int = 0,
    ):
        self.config = config
        self.params = params or HierarchyParams()
        self.hierarchy = Hierarchy(
            config,
            timing=timing,
            params=self.params,
            rng=random.Random(seed),
            noise_jitter=noise_jitter,
        )
        self.timing = self.hierarchy.timing
        self.predictors = [BranchPredictor() for _ in range(self.params.cores)]
        self.now = 0

    # -- phase-style direct accesses (planting, warming) ---------------------

    def plain_load(self, core: int, address: int, spec_flag: bool = False):
        out = self.hierarchy.access_load(address, core, spec_flag, self.now)
        self.now += out.total_latency
        return out

    def plain_store(self, core: int, address: int):
        out = self.hierarchy.access_store(address, core, self.now)
        self.now += out.total_latency
        return out

    def flush_line(self, address: int, core: int | None = None) -> None:
        self.hierarchy.flush(address, self.now, core=core)
        self.now += 1

    # -- program execution ----------------------------------------------------

    def run_program(
        self, core: int, program: ProbeProgram, regs: dict[str, int] | None = None
    ) -> CoreTrace:
        traces = self.run_programs({core: program}, {core: regs or {}})
        return traces[core]

    def run_programs(
        self,
        programs: dict[int, ProbeProgram],
        regs: dict[int, dict[str, int]] | None = None,
    ) -> dict[int, CoreTrace]:
        """Run one program per core concurrently on the shared hierarchy.

        Same-cycle ties are broken by core id, then program order.
        """
        regs = regs or {}
        start = self.now
        events_start = len(self.hierarchy.events)
        runs = {
            core: _CoreRun(core, prog, regs.get(core, {}), start)
            for core, prog in sorted(programs.items())
        }
        for core in runs:
            if not 0 <= core < self.params.cores:
                raise ValueError(f"core {core} outside 0..{self.params.cores - 1}")

        heap: list[int] = [start]
        seen: set[int] = {start}
        steps = 0
        while heap:
            cycle = heapq.heappop(heap)
            seen.discard(cycle)
            steps += 1
            if steps > self.MAX_STEPS:
                raise RuntimeError("simulation exceeded the step budget")

            def push(c: int) -> None:
                if c not in seen:
                    heapq.heappush(heap, c)
                    seen.add(c)

            for run in runs.values():
                self._process_resolutions(run, cycle, push)
            for run in runs.values():
                self._commit_scan(run, cycle, push)
            for run in runs.values():
                self._fetch(run, cycle, push)
            for run in runs.values():
                self._issue_scan(run, cycle, push)

            if all(run.done() for run in runs.values()):
                break
        else:
            if not all(run.done() for run in runs.values()):
                raise DeadlockError(self._deadlock_report(runs))

        ends = {}
        for core, run in runs.items():
            end = start
            for e in run.entries:
                for c in (e.commit_cycle, e.complete_cycle, e.global_complete):
                    if c is not None:
                        end = max(end, c)
            ends[core] = end
        self.now = max(ends.values(), default=start) + 1

        run_events = self.hierarchy.events[events_start:]
        return {
            core: CoreTrace(
                core=core,
                entries=run.entries,
                timers=run.timers,
                redos=run.redos,
                remote_em_count=run.remote_em_count,
                squash_count=sum(1 for e in run.entries if e.squashed),
                start_cycle=start,
                end_cycle=ends[core],
                events=[ev for ev in run_events if ev.core == core],
            )
            for core, run in runs.items()
        }

    # -- pipeline stages -------------------------------------------------------

    def _process_resolutions(self, run: _CoreRun, cycle: int, push) -> None:
        for seq in run.resolutions.pop(cycle, []):
            entry = run.entries[seq]
            if entry.squashed:
                continue
            entry.status = EntryStatus.EXECUTED
            self.predictors[run.core].update(entry.pc, entry.taken)
            if entry.taken != entry.predicted_taken:
                self._squash_younger(run, entry, cycle)
                run.pc = entry.target if entry.taken else entry.pc + 1
                run.fetching = run.pc < len(run.program)
                if run.fetching:
                    run.next_fetch = cycle + 1
                    push(cycle + 1)

    def _squash_younger(self, run: _CoreRun, branch: ROBEntry, cycle: int) -> None:
        for e in run.entries[branch.seq + 1 :]:
            if not e.squashed and e.status is not EntryStatus.COMMITTED:
                e.status = EntryStatus.SQUASHED

    def _commit_scan(self, run: _CoreRun, cycle: int, push) -> None:
        if run.commit_count_cycle != cycle:
            run.commit_count_cycle = cycle
            run.commit_count = 0
        while run.commit_ptr < len(run.entries):
            entry = run.entries[run.commit_ptr]
            if entry.squashed or entry.status is EntryStatus.COMMITTED:
                run.commit_ptr += 1
                continue
            if entry.complete_cycle is None or entry.complete_cycle > cycle:
                break
            if run.commit_count >= COMMIT_WIDTH:
                push(cycle + 1)
                break
            entry.commit_cycle = cycle
            entry.status = EntryStatus.COMMITTED
            run.commit_count += 1
            run.commit_ptr += 1
            if entry.op is Op.STORE:
                out = self.hierarchy.access_store(
                    entry.address, run.core, cycle, tag=(run.core, entry.pc)
                )
                entry.global_complete = cycle + out.total_latency
                push(entry.global_complete)
            elif entry.op is Op.FLUSH:
                self.hierarchy.flush(entry.address, cycle, core=run.core)
                entry.global_complete = cycle
            else:
                entry.global_complete = entry.complete_cycle
            if entry.op is Op.READ_TIMER:
                run.timers.append((entry.pc, entry.value))

    def _fetch(self, run: _CoreRun, cycle: int, push) -> None:
        if not run.fetching or run.next_fetch > cycle:
            return
        live = sum(
            1
            for e in run.entries
            if not e.squashed and e.status is not EntryStatus.COMMITTED
        )
        count = 0
        while count < DISPATCH_WIDTH and run.fetching and live < ROB_SIZE:
            ins = run.program[run.pc]
            entry = ROBEntry(
                seq=len(run.entries),
                pc=run.pc,
                op=ins.op,
                dest=ins.dest,
                src=ins.src,
                addr_reg=ins.addr,
                target=ins.target,
                dispatch_cycle=cycle,
            )
            if ins.op is Op.BRANCH:
                entry.predicted_taken = self.predictors[run.core].predict(run.pc)
                run.pc = ins.target if entry.predicted_taken else run.pc + 1
            else:
                run.pc += 1
            run.entries.append(entry)
            count += 1
            live += 1
            if run.pc >= len(run.program):
                run.fetching = False
        if run.fetching:
            run.next_fetch = cycle + 1
            push(cycle + 1)

    def _issue_scan(self, run: _CoreRun, cycle: int, push) -> None:
        for entry in run.entries:
            if entry.squashed:
                continue
            if entry.status is EntryStatus.AWAITING_REDO:
                self._try_redo(run, entry, cycle, push)
                continue
            if entry.issue_cycle is not None or entry.dispatch_cycle > cycle:
                continue
            if not self._fences_allow(run, entry, cycle):
                continue
            handler = {
                Op.ALU: self._issue_alu,
                Op.READ_TIMER: self._issue_timer,
                Op.BRANCH: self._issue_branch,
                Op.FENCE_LOADS: self._issue_fence_loads,
                Op.FENCE_MEM: self._issue_fence_mem,
                Op.LOAD: self._issue_memory,
                Op.STORE: self._issue_memory,
                Op.FLUSH: self._issue_memory,
            }[entry.op]
            handler(run, entry, cycle, push)

    def _fences_allow(self, run: _CoreRun, entry: ROBEntry, cycle: int) -> bool:
        """Older load fences gate every younger issue; older memory fences
        additionally gate younger memory ops."""
        is_mem = entry.op in MEMORY_OPS
        for e in run.entries[: entry.seq]:
            if e.squashed:
                continue
            if e.op is Op.FENCE_LOADS or (is_mem and e.op is Op.FENCE_MEM):
                if e.complete_cycle is None or e.complete_cycle > cycle:
                    return False
        return True

    def _issue_alu(self, run, entry, cycle, push) -> None:
        if not run.reg_ready(entry.src, entry.seq, cycle):
            return
        entry.issue_cycle = cycle
        entry.value = run.reg_value(entry.src, entry.seq)
        entry.complete_cycle = cycle + 1
        entry.status = EntryStatus.ISSUED
        push(cycle + 1)

    def _issue_timer(self, run, entry, cycle, push) -> None:
        entry.issue_cycle = cycle
        entry.value = cycle
        entry.complete_cycle = cycle + 1
        entry.status = EntryStatus.ISSUED
        push(cycle + 1)

    def _issue_branch(self, run, entry, cycle, push) -> None:
        if not run.reg_ready(entry.src, entry.seq, cycle):
            return
        entry.issue_cycle = cycle
        entry.value = run.reg_value(entry.src, entry.seq)
        entry.taken = entry.value != 0
        entry.complete_cycle = cycle + BRANCH_RESOLVE_DELAY
        entry.status = EntryStatus.ISSUED
        run.resolutions.setdefault(entry.complete_cycle, []).append(entry.seq)
        push(entry.complete_cycle)

    def _issue_fence_loads(self, run, entry, cycle, push) -> None:
        for e in run.entries[: entry.seq]:
            if e.squashed:
                continue
            if e.op in (Op.LOAD, Op.READ_TIMER, Op.FENCE_LOADS, Op.FENCE_MEM):
                if e.complete_cycle is None or e.complete_cycle > cycle:
                    return
        entry.issue_cycle = cycle
        entry.complete_cycle = cycle + 1
        entry.status = EntryStatus.ISSUED
        push(cycle + 1)

    def _issue_fence_mem(self, run, entry, cycle, push) -> None:
        for e in run.entries[: entry.seq]:
            if e.squashed:
                continue
            if e.op in (Op.FENCE_LOADS, Op.FENCE_MEM):
                if e.complete_cycle is None or e.complete_cycle > cycle:
                    return
            if e.op in MEMORY_OPS:
                if e.global_complete is None or e.global_complete > cycle:
                    return
        entry.issue_cycle = cycle
        entry.complete_cycle = cycle + 1
        entry.status = EntryStatus.ISSUED
        push(cycle + 1)

    def _issue_memory(self, run, entry, cycle, push) -> None:
        if not run.reg_ready(entry.addr_reg, entry.seq, cycle):
            return
        if cycle in run.port_used:
            push(cycle + 1)
            return
        if entry.op is Op.LOAD and run.inflight_loads(cycle) >= LOAD_QUEUE:
            return  # a load completion (already scheduled) frees a slot
        run.port_used.add(cycle)
        entry.issue_cycle = cycle
        entry.address = run.reg_value(entry.addr_reg, entry.seq)
        if entry.op is Op.LOAD:
            entry.spec_flag = spdm_flag(
                run.entries, entry, self.config.spdm, cycle
            ) and self.config.uses_spdm
            out = self.hierarchy.access_load(
                entry.address,
                run.core,
                entry.spec_flag,
                cycle,
                tag=(run.core, entry.pc),
            )
            if out.response.kind is ResponseKind.REMOTE_EM:
                run.remote_em_count += 1
                entry.feedback_cycle = cycle + out.total_latency
                entry.status = EntryStatus.AWAITING_REDO
                push(entry.feedback_cycle)
            else:
                entry.value = 0
                entry.complete_cycle = cycle + out.total_latency
                entry.status = EntryStatus.ISSUED
                push(entry.complete_cycle)
        else:
            # Stores and flushes execute quickly; their coherence action
            # happens at commit, so wrong-path ones never touch the caches.
            entry.complete_cycle = cycle + 1
            entry.status = EntryStatus.ISSUED
            push(cycle + 1)

    def _try_redo(self, run: _CoreRun, entry: ROBEntry, cycle: int, push) -> None:
        if entry.feedback_cycle is None or entry.feedback_cycle > cycle:
            return
        if spdm_flag(run.entries, entry, self.config.spdm, cycle):
            return  # still protected; resolution/commit events re-trigger
        out = self.hierarchy.access_load(
            entry.address,
            run.core,
            False,
            cycle,
            redo=True,
            tag=(run.core, entry.pc),
        )
        assert out.response.kind is ResponseKind.DATA
        entry.redo_issue_cycle = cycle
        entry.value = 0
        entry.complete_cycle = cycle + out.total_latency
        entry.status = EntryStatus.ISSUED
        run.redos.append(
            RedoEvent(
                core=run.core,
                pc=entry.pc,
                seq=entry.seq,
                address=entry.address,
                feedback_cycle=entry.feedback_cycle,
                issue_cycle=cycle,
                complete_cycle=entry.complete_cycle,
            )
        )
        push(entry.complete_cycle)

    def _deadlock_report(self, runs: dict[int, _CoreRun]) -> str:
        lines = ["no event can make progress:"]
        for core, run in sorted(runs.items()):
            pending = [
                f"  core {core} seq {e.seq} pc {e.pc} {e.op.value} ({e.status.value})"
                for e in run.entries
                if e.status
                not in (EntryStatus.COMMITTED, EntryStatus.SQUASHED)
            ]
            if run.fetching:
                pending.append(f"  core {core} still fetching at pc {run.pc}")
            lines.extend(pending or [f"  core {core}: idle"])
        return "\n".join(lines)
