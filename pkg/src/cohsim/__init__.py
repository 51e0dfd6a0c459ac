"""Deterministic multi-core cache-coherence timing-defense simulator.

Models a three-level inclusive MESI hierarchy with sharer bit-vectors,
an out-of-order core with speculative load issue, and five defense
compositions (insecure baseline, TORC, TORC+DSRC, TORC+DSRM,
TORC+DSRC+SS-MESI).  The harness drives the LRBS probe against them,
runs a covert channel, checks the constant-receiver-time security
property, and computes overhead statistics on synthetic traces.
"""

from .core import (
    BranchPredictor,
    CoreTrace,
    DeadlockError,
    EntryStatus,
    RedoEvent,
    ROBEntry,
    Simulator,
    spdm_flag,
)
from .defense import (
    DefenseConfig,
    DefenseId,
    SpdmKind,
    TorcBuffer,
    feedback_policy,
    parse_defense_id,
    parse_spdm,
)
from .harness import (
    ChannelRun,
    ExperimentResult,
    LrbsScenario,
    PropertyReport,
    SecurityPropertyCase,
    TraceOp,
    TraceParseError,
    TraceStats,
    build_lrbs_probe,
    check_security_property,
    lrbs_registers,
    parse_trace,
    run_covert_channel,
    run_lrbs,
    run_trace_workload,
)
from .hierarchy import (
    AccessOutcome,
    CacheLevelConfig,
    EventKind,
    EventRecord,
    Hierarchy,
    HierarchyParams,
    Level,
    TimingModel,
    TreePLRU,
)
from .program import (
    Instruction,
    Op,
    ProbeParseError,
    ProbeProgram,
    format_probe,
    parse_probe,
)
from .protocol import (
    CacheRequest,
    CacheResponse,
    CoherenceState,
    ConfigurationError,
    DirectoryEntry,
    ProtocolVariant,
    RequestKind,
    ResponseKind,
    SharerVector,
    UpgradeKind,
    is_remote,
)

__version__ = "0.1.0"
