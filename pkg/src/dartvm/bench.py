"""Synthetic workloads across the object-volatility spectrum, plus the
measurement harness for execution-time overhead and storage growth.

Generators emit straight-line DartScript with the randomness baked in
(deterministic given the seed), a constant statement count per iteration,
and enough padding that a statement-count trigger lands one snapshot per
iteration. Every measured run also passes a restore-fidelity check: a few
random versions are materialized and compared against pure re-execution.
"""

from __future__ import annotations

import json
import random
import shutil
import statistics
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import lang
from .capture import CaptureConfig, EveryKStatements, run_with_capture
from .recovery import materialize, replay_to_statement
from .store import RT_CHECKPOINT, Store
from .vm import VM

_MIB = 1024 * 1024
_CHUNK = _MIB  # dataset blobs are split into 1 MiB objects


@dataclass
class WorkloadSpec:
    name: str
    source: str
    stmts_per_iter: int
    iters: int
    seed: int
    params: dict = field(default_factory=dict)


def _blob_list_literal(sizes, tag_start: int) -> str:
    parts = [f"blob({size}, {tag_start + i})" for i, size in enumerate(sizes)]
    return "[" + ", ".join(parts) + "]"


def _chunks(total: int) -> list[int]:
    sizes = [_CHUNK] * (total // _CHUNK)
    if total % _CHUNK:
        sizes.append(total % _CHUNK)
    return sizes or [0]


def static_plus_model(dataset_bytes: int, model_bytes: int, iters: int,
                      seed: int = 1) -> WorkloadSpec:
    """kmeans-like: a large static dataset plus a small model rewritten
    wholesale every iteration."""
    lines = [
        f"let data = {_blob_list_literal(_chunks(dataset_bytes), 10_000)}",
        f"let model = blob({model_bytes}, 1)",
        "let pad = 0",
    ]
    for i in range(iters):
        lines.append(f"let model = blob({model_bytes}, {20_000 + i})")
        lines.append("let pad = 0")
    return WorkloadSpec(
        "static_plus_model", "\n".join(lines) + "\n", 2, iters, seed,
        {"dataset_bytes": dataset_bytes, "model_bytes": model_bytes, "iters": iters})


def shuffle(items: int, item_bytes: int, iters: int, seed: int = 1) -> WorkloadSpec:
    """tsne-like: a fixed population of objects moved around between
    iterations; contents never change, only positions."""
    rng = random.Random(seed)
    swaps = max(1, items // 2)
    lines = [
        f"let xs = {_blob_list_literal([item_bytes] * items, 30_000)}",
        "let t = 0",
    ]
    for _ in range(iters):
        for _ in range(swaps):
            i, j = rng.randrange(items), rng.randrange(items)
            lines.append(f"let t = xs[{i}]")
            lines.append(f"set xs[{i}] = xs[{j}]")
            lines.append(f"set xs[{j}] = t")
    return WorkloadSpec(
        "shuffle", "\n".join(lines) + "\n", 3 * swaps, iters, seed,
        {"items": items, "item_bytes": item_bytes, "iters": iters})


def volatility(objects: int, object_bytes: int, p: float, iters: int,
               seed: int = 1) -> WorkloadSpec:
    """Tunable fraction p of objects fully rewritten per iteration; p=0 is a
    frozen state, p=1 rewrites everything."""
    rng = random.Random(seed)
    tag = 50_000
    lines = [
        f"let objs = {_blob_list_literal([object_bytes] * objects, 40_000)}",
        "let pad = 0",
    ]
    for _ in range(iters):
        for i in range(objects):
            if rng.random() < p:
                lines.append(f"set objs[{i}] = blob({object_bytes}, {tag})")
                tag += 1
            else:
                lines.append("let pad = 0")
    return WorkloadSpec(
        "volatility", "\n".join(lines) + "\n", objects, iters, seed,
        {"objects": objects, "object_bytes": object_bytes, "p": p, "iters": iters})


def deep_update(model_bytes: int, iters: int, seed: int = 1,
                layers: int = 8) -> WorkloadSpec:
    """dcgan-like: the model dominates the state and every layer is
    rewritten each iteration; deltas stay close to full snapshots."""
    layer = max(1, model_bytes // layers)
    lines = [
        f"let model = {_blob_list_literal([layer] * layers, 60_000)}",
        f"let extras = blob({max(1, model_bytes // 16)}, 2)",
    ]
    tag = 70_000
    for _ in range(iters):
        for l in range(layers):
            lines.append(f"set model[{l}] = blob({layer}, {tag})")
            tag += 1
    return WorkloadSpec(
        "deep_update", "\n".join(lines) + "\n", layers, iters, seed,
        {"model_bytes": model_bytes, "iters": iters, "layers": layers})


WORKLOADS = {
    "static-plus-model": static_plus_model,
    "shuffle": shuffle,
    "volatility": volatility,
    "deep-update": deep_update,
}


# --- measurement -----------------------------------------------------------------

@dataclass
class RunMeasurement:
    wall_s: float
    persisted_versions: list[int]
    total_bytes: int
    delta_bytes: int          # deltas only, periodic checkpoints excluded
    cumulative_series: list[tuple[int, int]]
    strategy_by_version: dict[int, str]


def _run_baseline(spec: WorkloadSpec) -> float:
    program = lang.parse(spec.source)
    t0 = time.perf_counter()
    VM(program, spec.seed).run()
    return time.perf_counter() - t0


def _run_captured(spec: WorkloadSpec, config: CaptureConfig,
                  store_dir: Path) -> RunMeasurement:
    t0 = time.perf_counter()
    outcome = run_with_capture(spec.source, spec.seed, store_dir, config,
                               meta={"workload": spec.name})
    wall = time.perf_counter() - t0
    if outcome.error is not None:
        raise outcome.error
    store = Store(store_dir)
    cumulative = []
    total = 0
    delta_total = 0
    strategies = {e.version: e.strategy for e in outcome.stats.entries if e.persisted}
    for v in store.versions:
        entry = store.index[v]
        total += entry.length
        if entry.kind != RT_CHECKPOINT:
            delta_total += entry.length
        cumulative.append((v, total))
    return RunMeasurement(wall, store.versions, total, delta_total, cumulative,
                          strategies)


def _check_fidelity(spec: WorkloadSpec, store_dir: Path, sample: int = 3,
                    seed: int = 9) -> bool:
    """Re-execution oracle: a materialized version must fingerprint the same
    as a fresh run replayed to its statement index."""
    store = Store(store_dir)
    versions = store.versions
    rng = random.Random(seed)
    picks = versions if len(versions) <= sample else rng.sample(versions, sample)
    for v in picks:
        restored = materialize(store, v).state
        replayed = replay_to_statement(store, store.index[v].statement_index,
                                       spec.source)
        if restored.fingerprint() != replayed.state_fingerprint():
            return False
    return True


@dataclass
class BenchReport:
    workload: str
    params: dict
    repetitions: int
    baseline_s: float
    delta_s: float
    full_s: float
    delta_overhead_pct: float
    full_overhead_pct: float
    delta_storage_bytes: int
    full_storage_bytes: int
    delta_series: list[tuple[int, int]]
    full_series: list[tuple[int, int]]
    strategy_by_version: dict[int, str]
    fidelity_ok: bool

    def to_dict(self) -> dict:
        return {
            "workload": self.workload,
            "params": self.params,
            "repetitions": self.repetitions,
            "baseline_s": self.baseline_s,
            "delta_s": self.delta_s,
            "full_s": self.full_s,
            "delta_overhead_pct": self.delta_overhead_pct,
            "full_overhead_pct": self.full_overhead_pct,
            "delta_storage_bytes": self.delta_storage_bytes,
            "full_storage_bytes": self.full_storage_bytes,
            "delta_series": self.delta_series,
            "full_series": self.full_series,
            "strategy_by_version": self.strategy_by_version,
            "fidelity_ok": self.fidelity_ok,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["version,delta_cumulative_bytes,full_cumulative_bytes"]
        full = dict(self.full_series)
        for v, cum in self.delta_series:
            lines.append(f"{v},{cum},{full.get(v, '')}")
        return "\n".join(lines) + "\n"


def _fresh_dir(workdir: Path, label: str) -> Path:
    return Path(workdir) / f"{label}-{uuid.uuid4().hex[:8]}"


def run_bench(spec: WorkloadSpec, config: CaptureConfig, repetitions: int,
              workdir, keep_stores: bool = False) -> BenchReport:
    """Baseline (no capture), delta capture, and full-snapshot capture
    (checkpoint_every=1); medians over repetitions."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    baselines, delta_walls, full_walls = [], [], []
    delta_m = full_m = None
    delta_dirs: list[Path] = []
    for _ in range(repetitions):
        baselines.append(_run_baseline(spec))
        d_dir = _fresh_dir(workdir, f"{spec.name}-delta")
        delta_m = _run_captured(spec, _clone_config(config), d_dir)
        delta_walls.append(delta_m.wall_s)
        delta_dirs.append(d_dir)
        f_dir = _fresh_dir(workdir, f"{spec.name}-full")
        full_cfg = _clone_config(config)
        full_cfg.checkpoint_every = 1
        full_m = _run_captured(spec, full_cfg, f_dir)
        full_walls.append(full_m.wall_s)
        if not keep_stores:
            shutil.rmtree(f_dir, ignore_errors=True)
    fidelity = _check_fidelity(spec, delta_dirs[-1])
    if not keep_stores:
        for d in delta_dirs:
            shutil.rmtree(d, ignore_errors=True)
    baseline = statistics.median(baselines)
    delta_wall = statistics.median(delta_walls)
    full_wall = statistics.median(full_walls)
    return BenchReport(
        workload=spec.name,
        params=spec.params,
        repetitions=repetitions,
        baseline_s=baseline,
        delta_s=delta_wall,
        full_s=full_wall,
        delta_overhead_pct=100.0 * (delta_wall - baseline) / baseline,
        full_overhead_pct=100.0 * (full_wall - baseline) / baseline,
        delta_storage_bytes=delta_m.total_bytes,
        full_storage_bytes=full_m.total_bytes,
        delta_series=delta_m.cumulative_series,
        full_series=full_m.cumulative_series,
        strategy_by_version=delta_m.strategy_by_version,
        fidelity_ok=fidelity,
    )


def _clone_config(config: CaptureConfig) -> CaptureConfig:
    trig = config.trigger
    trig = EveryKStatements(trig.k) if isinstance(trig, EveryKStatements) else type(trig)(trig.t)
    return CaptureConfig(
        trigger=trig,
        strategy=config.strategy,
        overhead_budget=config.overhead_budget,
        checkpoint_every=config.checkpoint_every,
        queue_depth=config.queue_depth,
        record_fingerprints=config.record_fingerprints,
        faults=config.faults,
        fsync=config.fsync,
        clock_ns=config.clock_ns,
    )


def sweep_volatility(p_grid, objects: int, object_bytes: int, iters: int,
                     workdir, seed: int = 1) -> list[dict]:
    """Delta bytes per strategy per p; the crossover table of the volatility
    trade-off. One leading checkpoint, deltas after."""
    rows = []
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    for p in p_grid:
        spec = volatility(objects, object_bytes, p, iters, seed)
        row = {"p": p, "objects": objects, "object_bytes": object_bytes}
        for strategy in ("serial", "idgraph"):
            cfg = CaptureConfig(trigger=EveryKStatements(spec.stmts_per_iter),
                                strategy=strategy, checkpoint_every=10 ** 9,
                                fsync="batch")
            d = _fresh_dir(workdir, f"sweep-{strategy}")
            m = _run_captured(spec, cfg, d)
            row[f"{strategy}_delta_bytes"] = m.delta_bytes
            shutil.rmtree(d, ignore_errors=True)
        rows.append(row)
    return rows
