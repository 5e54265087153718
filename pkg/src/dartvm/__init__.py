"""dartvm: a durable transactional state engine.

Runs DartScript programs in a deterministic statement VM, captures
statement-granular snapshots as deltas, persists them to a versioned
append-only store, and can restore, resume, replicate, or time-travel to
any persisted state.
"""

from . import errors
from .capture import (
    CaptureConfig,
    CaptureStats,
    EveryKStatements,
    EveryTMillis,
    FaultPlan,
    adapt_period,
    collect_frames,
    guard,
    run_with_capture,
)
from .deltas import IDGRAPH, SERIAL, AutoSelector, build_id_graph, serialize_state
from .encoding import PidMap, state_fingerprint
from .heap import Heap, Ref
from .lang import parse
from .recovery import (
    build_vm,
    diff_versions,
    materialize,
    replay_to_statement,
    resume,
)
from .rng import EngineRng
from .store import Store, StoreSession, export_pack, import_pack
from .vm import VM, StateView

__version__ = "0.1.0"

__all__ = [
    "AutoSelector",
    "CaptureConfig",
    "CaptureStats",
    "EngineRng",
    "EveryKStatements",
    "EveryTMillis",
    "FaultPlan",
    "Heap",
    "IDGRAPH",
    "PidMap",
    "Ref",
    "SERIAL",
    "StateView",
    "Store",
    "StoreSession",
    "VM",
    "adapt_period",
    "build_id_graph",
    "build_vm",
    "collect_frames",
    "diff_versions",
    "errors",
    "export_pack",
    "guard",
    "import_pack",
    "materialize",
    "parse",
    "replay_to_statement",
    "resume",
    "run_with_capture",
    "serialize_state",
    "state_fingerprint",
]
