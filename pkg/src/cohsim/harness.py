"""Attack and experiment drivers.

Builds the LRBS probe (delay load, dependent branch, probing load issued
in the branch shadow, fenced timer reads, trailing flushes), runs it
against a defense configuration, drives the covert channel on top of it,
enumerates transmitter subsets for the constant-receiver-time security
property, and computes workload statistics over synthetic access traces.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field, replace

from .core import CoreTrace, RedoEvent, Simulator
from .defense import DefenseConfig
from .hierarchy import EventKind, EventRecord, HierarchyParams, Level, TimingModel
from .program import (
    Op,
    ProbeProgram,
    alu,
    branch,
    fence_loads,
    fence_mem,
    flush,
    load,
    read_timer,
    store,
)
from .protocol import UpgradeKind

LBB_REG = "lbb_addr"
LAB_REG = "lab_base"


def build_lrbs_probe(with_flushes: bool = True) -> ProbeProgram:
    """The LRBS probe in the DSL.

    The delay load (LBB) misses and keeps the branch unresolved; the
    probing load (LAB) issues into that shadow.  The LAB address is
    forwarded through a short ALU chain, which keeps its issue late enough
    that miss-equivalent presence feedback never arrives before the branch
    has resolved; the measured separation under a leaky configuration is
    then exactly the redo's shaped latency.  Timer reads are fenced on
    both sides exactly like the rdtsc/lfence pairs of the native probe.
    """
    body = [
        fence_mem(),             #  0: serialize older memory instructions
        fence_loads(),           #  1
        read_timer("t0"),        #  2: start timer
        fence_loads(),           #  3
        load("v", LBB_REG),      #  4: LBB, delay load
        alu("a1", LAB_REG),      #  5: LAB address forwarding chain
        alu("a2", "a1"),         #  6
        alu("a3", "a2"),         #  7
        alu("c", "v"),           #  8: condition depends on the LBB value
        branch("c", 11),         #  9: resolves not-taken on the right path
        load("d", "a3"),         # 10: LAB, issued in the branch shadow
        fence_loads(),           # 11: branch target joins here
        read_timer("t1"),        # 12: end timer
        alu("dt", "t1"),         # 13
    ]
    if with_flushes:
        body += [
            flush("a3"),         # 14: clear the LAB line
            flush(LBB_REG),      # 15: clear the LBB line
        ]
    return ProbeProgram(tuple(body))


def lrbs_registers(lbb_address: int, lab_address: int) -> dict[str, int]:
    return {LBB_REG: lbb_address, LAB_REG: lab_address}


@dataclass(frozen=True)
class LrbsScenario:
    config: DefenseConfig
    secret: int
    lbb_address: int = 0x10000
    lab_address: int = 0x20000
    training_iterations: int = 4
    measurement_runs: int = 100
    probe_core: int = 0
    accessor_core: int = 1
    timing: TimingModel | None = None
    params: HierarchyParams | None = None
    seed: int = 0
    noise_jitter: int = 0

    def __post_init__(self):
        if self.secret not in (0, 1):
            raise ValueError("secret must be 0 or 1")
        if self.lbb_address // 64 == self.lab_address // 64:
            raise ValueError("LBB and LAB must live on distinct lines")
        if self.probe_core == self.accessor_core:
            raise ValueError("probe and secret accessor must be on different cores")


@dataclass
class ExperimentResult:
    scenario: LrbsScenario
    median_cycles: float
    cycles: list[int]
    redo_count: int
    remote_em_count: int
    last_trace: CoreTrace

    @property
    def redo_latency(self) -> int | None:
        """Shaped latency of the probing load's redo, from the event log."""
        if not self.last_trace.redos:
            return None
        return self.last_trace.redos[-1].latency


def run_lrbs(scenario: LrbsScenario) -> ExperimentResult:
    """Train, plant the secret, time the probe; fresh instance per run."""
    program = build_lrbs_probe()
    regs = lrbs_registers(scenario.lbb_address, scenario.lab_address)
    cycles: list[int] = []
    redo_count = 0
    remote_em_count = 0
    last = None
    for i in range(scenario.measurement_runs):
        sim = Simulator(
            scenario.config,
            timing=scenario.timing,
            params=scenario.params,
            seed=scenario.seed * 1_000_003 + i,
            noise_jitter=scenario.noise_jitter,
        )
        for _ in range(scenario.training_iterations):
            sim.run_program(scenario.probe_core, program, regs)
        if scenario.secret:
            sim.plain_load(scenario.accessor_core, scenario.lab_address)
        trace = sim.run_program(scenario.probe_core, program, regs)
        if trace.delta_t is None:
            raise RuntimeError("probe did not commit two timer reads")
        cycles.append(trace.delta_t)
        redo_count += len(trace.redos)
        remote_em_count += trace.remote_em_count
        last = trace
    return ExperimentResult(
        scenario=scenario,
        median_cycles=statistics.median(cycles),
        cycles=cycles,
        redo_count=redo_count,
        remote_em_count=remote_em_count,
        last_trace=last,
    )


# -- covert channel -----------------------------------------------------------


@dataclass
class ChannelRun:
    payload: tuple[int, ...]
    epoch_length: int = 1_000_000
    repetitions: int = 16
    decoded: tuple[int, ...] | None = None
    error_rate: float | None = None
    closed: bool = False
    threshold: float | None = None
    calibration: tuple[float, float] | None = None


def run_covert_channel(
    run: ChannelRun,
    config: DefenseConfig,
    *,
    timing: TimingModel | None = None,
    params: HierarchyParams | None = None,
    seed: int = 0,
    noise_jitter: int = 0,
    lbb_address: int = 0x10000,
    lab_address: int = 0x20000,
    training_iterations: int = 4,
    transmitter_core: int = 1,
    receiver_core: int = 0,
) -> ChannelRun:
    """Transmit the payload bit by bit; decode by nearest calibration median.

    One epoch per repetition on the shared simulated clock: the
    transmitter encodes its bit by accessing (or not) the probed line, the
    receiver then runs the probe.  Equal calibration medians mean the
    channel is closed; the error rate is then reported against a
    random-guess decoder.
    """
    base = LrbsScenario(
        config,
        0,
        lbb_address=lbb_address,
        lab_address=lab_address,
        training_iterations=training_iterations,
        measurement_runs=max(run.repetitions, 1),
        probe_core=receiver_core,
        accessor_core=transmitter_core,
        timing=timing,
        params=params,
        seed=seed,
        noise_jitter=noise_jitter,
    )
    cal0 = run_lrbs(base).median_cycles
    cal1 = run_lrbs(replace(base, secret=1, seed=seed + 1)).median_cycles
    run.calibration = (cal0, cal1)

    if cal0 == cal1:
        run.closed = True
        run.threshold = cal0
        guesser = random.Random(seed ^ 0x5EED)
        run.decoded = tuple(guesser.randint(0, 1) for _ in run.payload)
        run.error_rate = _error_rate(run.payload, run.decoded)
        return run

    run.threshold = (cal0 + cal1) / 2
    program = build_lrbs_probe()
    regs = lrbs_registers(lbb_address, lab_address)
    sim = Simulator(
        config,
        timing=timing,
        params=params,
        seed=seed + 2,
        noise_jitter=noise_jitter,
    )
    for _ in range(training_iterations):
        sim.run_program(receiver_core, program, regs)

    decoded = []
    epoch = 0
    for bit in run.payload:
        samples = []
        for _ in range(run.repetitions):
            sim.now = max(sim.now, epoch * run.epoch_length)
            epoch += 1
            if bit:
                sim.plain_load(transmitter_core, lab_address)
            trace = sim.run_program(receiver_core, program, regs)
            samples.append(trace.delta_t)
        median = statistics.median(samples)
        decoded.append(1 if abs(median - cal1) <= abs(median - cal0) else 0)
    run.decoded = tuple(decoded)
    run.error_rate = _error_rate(run.payload, run.decoded)
    return run


def _error_rate(payload: tuple[int, ...], decoded: tuple[int, ...]) -> float:
    if not payload:
        return 0.0
    return sum(1 for a, b in zip(payload, decoded) if a != b) / len(payload)


# -- security property (constant receiver time over all transmit subsets) -----


@dataclass(frozen=True)
class SecurityPropertyCase:
    addresses: tuple[int, ...]
    config: DefenseConfig
    timing: TimingModel | None = None
    params: HierarchyParams | None = None
    receiver_core: int = 0
    transmitter_core: int = 1
    lbb_address: int = 0x10000
    training_address: int = 0x11000

    def __post_init__(self):
        if not 1 <= len(self.addresses) <= 8:
            raise ValueError("address group size must be 1..8")
        lines = {a // 64 for a in self.addresses}
        lines |= {self.lbb_address // 64, self.training_address // 64}
        if len(lines) != len(self.addresses) + 2:
            raise ValueError("addresses, LBB, and training line must be distinct lines")


@dataclass
class PropertyReport:
    case: SecurityPropertyCase
    totals: list[tuple[int, int]]  # (transmitter subset mask, receiver total)
    constant: bool
    expected_total: int | None
    per_access_overhead: int
    passed: bool


def _fast_branch_probe() -> ProbeProgram:
    """Receiver probe: LRBS shape, no trailing flushes.

    Run with a pre-warmed LBB line so the branch resolves quickly; the
    probing load still issues inside its shadow, so the redo (if any)
    happens as soon as the feedback arrives.
    """
    return build_lrbs_probe(with_flushes=False)


def receiver_overhead(
    config: DefenseConfig,
    timing: TimingModel | None = None,
    params: HierarchyParams | None = None,
) -> int:
    """Per-access core overhead of the receiver probe.

    Measured once with both probe lines warmed to L1 hits: the probe's
    time minus the L1 latency is pure pipeline plumbing, independent of
    the memory path and of the defense configuration.
    """
    sim = Simulator(config, timing=timing, params=params)
    t = sim.timing
    program = _fast_branch_probe()
    regs = lrbs_registers(0x10000, 0x11000)
    sim.plain_load(0, 0x10000)
    sim.plain_load(0, 0x11000)
    for _ in range(4):
        sim.run_program(0, program, regs)
    trace = sim.run_program(0, program, regs)
    return trace.delta_t - t.t_l1


def check_security_property(case: SecurityPropertyCase) -> PropertyReport:
    """Enumerate every transmitter subset; receiver times every address.

    Pass requires a single constant total over all 2^N subsets and, where
    the composition promises an analytic value, an exact match to it:
    one miss time per address for the start-with-S composition, one LLC
    round trip plus one miss time per address for optimized equalization
    (both plus the measured per-access pipeline overhead).
    """
    config = case.config
    n = len(case.addresses)
    program = _fast_branch_probe()
    overhead = receiver_overhead(config, case.timing, case.params)

    totals: list[tuple[int, int]] = []
    for mask in range(1 << n):
        sim = Simulator(config, timing=case.timing, params=case.params)
        sim.plain_load(case.receiver_core, case.lbb_address)
        train_regs = lrbs_registers(case.lbb_address, case.training_address)
        for _ in range(4):
            sim.run_program(case.receiver_core, program, train_regs)
        for i in range(n):
            if mask >> i & 1:
                sim.plain_load(case.transmitter_core, case.addresses[i])
        total = 0
        for address in case.addresses:
            regs = lrbs_registers(case.lbb_address, address)
            trace = sim.run_program(case.receiver_core, program, regs)
            total += trace.delta_t
        totals.append((mask, total))

    constant = len({t for _, t in totals}) == 1
    t = Simulator(config, timing=case.timing, params=case.params).timing
    t_c = t.llc_hit
    t_m = t.miss
    from .defense import DefenseId

    expected: int | None = None
    if config.id is DefenseId.C5_TORC_DSRC_SSMESI:
        expected = n * (t_m + overhead)
    elif config.id is DefenseId.C4_TORC_DSRM and config.dsrm_optimized:
        expected = n * (t_c + t_m + overhead)
    matched = expected is None or all(total == expected for _, total in totals)
    return PropertyReport(
        case=case,
        totals=totals,
        constant=constant,
        expected_total=expected,
        per_access_overhead=overhead,
        passed=constant and matched,
    )


# -- synthetic trace workloads -------------------------------------------------


class TraceParseError(ValueError):
    def __init__(self, message: str, lineno: int):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class TraceOp:
    core: int
    kind: str       # 'L', 'S', or 'B'
    address: int
    index: int      # position in the trace file
    lineno: int


def parse_trace(text: str) -> list[TraceOp]:
    """Parse a `core op(L|S|B) address` trace; `#` starts a comment."""
    ops: list[TraceOp] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise TraceParseError(
                f"expected 'core op address', got {line!r}", lineno
            )
        core_text, kind, addr_text = parts
        try:
            core = int(core_text)
        except ValueError:
            raise TraceParseError(f"bad core id {core_text!r}", lineno) from None
        kind = kind.upper()
        if kind not in ("L", "S", "B"):
            raise TraceParseError(f"op must be L, S, or B, got {kind!r}", lineno)
        try:
            address = int(addr_text, 0)
        except ValueError:
            raise TraceParseError(f"bad address {addr_text!r}", lineno) from None
        if core < 0:
            raise TraceParseError(f"negative core id {core}", lineno)
        ops.append(TraceOp(core, kind, address, len(ops), lineno))
    return ops


def trace_programs(
    ops: list[TraceOp],
) -> tuple[dict[int, ProbeProgram], dict[int, dict[str, int]], dict[tuple[int, int], int]]:
    """Compile per-core trace ops into probe programs.

    Loads and stores become independent register-addressed memory ops;
    branches become taken-to-next-instruction branches on an
    always-one register, which exist purely to open speculation shadows.
    Returns (programs, presets, (core, pc) -> trace op index).
    """
    per_core: dict[int, list[TraceOp]] = {}
    for op in ops:
        per_core.setdefault(op.core, []).append(op)
    programs: dict[int, ProbeProgram] = {}
    presets: dict[int, dict[str, int]] = {}
    tagmap: dict[tuple[int, int], int] = {}
    for core, core_ops in sorted(per_core.items()):
        body = []
        regs = {"one": 1}
        for op in core_ops:
            pc = len(body)
            tagmap[(core, pc)] = op.index
            if op.kind == "L":
                regs[f"a{pc}"] = op.address
                body.append(load(f"v{pc}", f"a{pc}"))
            elif op.kind == "S":
                regs[f"a{pc}"] = op.address
                body.append(store(f"a{pc}"))
            else:
                body.append(branch("one", pc + 1))
        programs[core] = ProbeProgram(tuple(body))
        presets[core] = regs
    return programs, presets, tagmap


@dataclass
class TraceStats:
    config: DefenseConfig
    total_accesses: int
    llc_accesses: int
    redo_count: int
    broadcast_upgrades: int
    torc_delay_cycles: int
    redo_cycles: int
    total_cycles: int
    redo_ops: frozenset[int]  # trace op indices whose load redid
    remote_em_count: int

    @property
    def llc_fraction(self) -> float:
        return self.llc_accesses / self.total_accesses if self.total_accesses else 0.0

    @property
    def redo_fraction(self) -> float:
        return self.redo_count / self.llc_accesses if self.llc_accesses else 0.0

    @property
    def upgrade_fraction(self) -> float:
        return (
            self.broadcast_upgrades / self.total_accesses
            if self.total_accesses
            else 0.0
        )

    @property
    def overhead_cycles(self) -> int:
        return self.torc_delay_cycles + self.redo_cycles

    @property
    def overhead_ratio(self) -> float:
        """Overhead cycles over non-overhead cycles.

        Delay cycles of concurrently in-flight accesses each count at face
        value, so a dense synthetic trace can accumulate more overhead
        than wall time; the ratio is infinite in that regime.
        """
        other = self.total_cycles - self.overhead_cycles
        if other <= 0:
            return float("inf") if self.overhead_cycles else 0.0
        return self.overhead_cycles / other


def run_trace_workload(
    trace: str | list[TraceOp],
    config: DefenseConfig,
    *,
    timing: TimingModel | None = None,
    params: HierarchyParams | None = None,
    seed: int = 0,
    noise_jitter: int = 0,
) -> TraceStats:
    """Execute a synthetic trace and report the overhead statistics."""
    ops = parse_trace(trace) if isinstance(trace, str) else trace
    programs, presets, tagmap = trace_programs(ops)
    if not programs:
        return TraceStats(config, 0, 0, 0, 0, 0, 0, 0, frozenset(), 0)
    sim = Simulator(
        config, timing=timing, params=params, seed=seed, noise_jitter=noise_jitter
    )
    events_start = len(sim.hierarchy.events)
    traces = sim.run_programs(programs, presets)
    events = sim.hierarchy.events[events_start:]

    total = 0
    llc = 0
    torc_delay = 0
    redo_cycles = 0
    for ev in events:
        if ev.kind is EventKind.ACCESS:
            if ev.redo:
                redo_cycles += ev.latency
            else:
                total += 1
                if ev.level in (Level.LLC, Level.MEMORY):
                    llc += 1
            if ev.delay:
                torc_delay += ev.delay
        elif ev.kind is EventKind.UPGRADE:
            total += 1
            if ev.level in (Level.LLC, Level.MEMORY):
                llc += 1

    broadcast = sum(
        1
        for ev in events
        if ev.kind is EventKind.UPGRADE and ev.upgrade is UpgradeKind.BROADCAST
    )
    redo_ops = set()
    redo_count = 0
    for trace_result in traces.values():
        for redo in trace_result.redos:
            redo_count += 1
            redo_ops.add(tagmap[(redo.core, redo.pc)])
    total_cycles = sum(t.end_cycle - t.start_cycle for t in traces.values())
    return TraceStats(
        config=config,
        total_accesses=total,
        llc_accesses=llc,
        redo_count=redo_count,
        broadcast_upgrades=broadcast,
        torc_delay_cycles=torc_delay,
        redo_cycles=redo_cycles,
        total_cycles=total_cycles,
        redo_ops=frozenset(redo_ops),
        remote_em_count=sum(t.remote_em_count for t in traces.values()),
    )
