"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s`. Everything here is exact
(fingerprint equality, byte inequalities) except where a criterion itself
states a bound; nothing is tolerance-tuned at runtime.
"""

import random

import pytest

from progen import random_program

from dartvm import lang
from dartvm.bench import deep_update, run_bench, shuffle, static_plus_model, volatility
from dartvm.capture import (
    CaptureConfig,
    CaptureSession,
    CaptureStats,
    EveryKStatements,
    FaultPlan,
    adapt_period,
    run_with_capture,
)
from dartvm.errors import CorruptRecord
from dartvm.recovery import materialize, resume
from dartvm.store import RT_DELTA, Store, StoreSession, export_pack, import_pack
from dartvm.vm import VM

KIB = 1024
MIB = 1024 * 1024


def _line(n: int, desc: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"\nACCEPTANCE {n:02d} [{status}] {desc}{suffix}", flush=True)
    assert ok, f"criterion {n} failed: {desc} {detail}"


def _cfg(every: int, strategy: str, **kw) -> CaptureConfig:
    kw.setdefault("queue_depth", 0)
    kw.setdefault("fsync", "batch")
    return CaptureConfig(trigger=EveryKStatements(every), strategy=strategy, **kw)


# -- 1. restore fidelity --------------------------------------------------------

def test_criterion_01_restore_fidelity(tmp_path):
    """500 random programs, snapshots every 5 statements, both strategies:
    materialize(v) fingerprints equal the live fingerprints, exactly."""
    programs = 500
    checked = 0
    for i in range(programs):
        src = random_program(10_000 + i, statements=35)
        seed = i * 7 + 1
        for strategy in ("serial", "idgraph"):
            store_dir = tmp_path / f"s{i}-{strategy}"
            out = run_with_capture(
                src, seed, store_dir,
                _cfg(5, strategy, record_fingerprints=True))
            assert out.error is None, f"program {i} failed: {out.error}"
            store = Store(store_dir)
            for entry in out.stats.entries:
                if not entry.persisted:
                    continue
                restored = materialize(store, entry.version).state.fingerprint()
                assert restored.hex() == entry.fingerprint, \
                    f"program {i} ({strategy}) v{entry.version}"
                checked += 1
    _line(1, "restore fidelity on 500 random programs, both strategies", True,
          f"{checked} version restores checked")


# -- 2. shared-reference preservation ----------------------------------------------

def test_criterion_02_shared_reference_preservation(tmp_path):
    src = ("let a = blob(64, 1)\nlet b = blob(64, 2)\nlet c = blob(64, 3)\n"
           "let o1 = [a, c]\nlet o2 = [b, c]\n")
    out = run_with_capture(src, 1, tmp_path / "s", _cfg(5, "serial"))
    state = materialize(Store(tmp_path / "s"), out.persisted_versions[-1]).state
    bindings = state.frames[0][1]
    c_via_o1 = state.heap.node(bindings["o1"].oid).data[1]
    c_via_o2 = state.heap.node(bindings["o2"].oid).data[1]
    same_object = c_via_o1 == c_via_o2
    c_content = bytes(state.heap.node(c_via_o1.oid).data)
    copies = sum(1 for node in state.heap.objects.values()
                 if node.kind == "blob" and bytes(node.data) == c_content)
    state.heap.blob_set(c_via_o1.oid, 0, 0xEE)
    visible = state.heap.node(c_via_o2.oid).data[0] == 0xEE
    _line(2, "shared reference o1=[a,c], o2=[b,c] preserved across restore",
          same_object and copies == 1 and visible,
          f"one object: {same_object and copies == 1}, mutation visible: {visible}")


# -- 3. crash-resume equivalence -----------------------------------------------------

def test_criterion_03_crash_resume_equivalence(tmp_path):
    runs = 200
    programs = 20
    rng = random.Random(99)
    completed = 0
    for p in range(programs):
        src = random_program(20_000 + p, statements=30)
        seed = p + 1
        program = lang.parse(src)
        ref_vm = VM(program, seed).run()
        ref = ref_vm.state_fingerprint()
        total = ref_vm.statement_index
        for t in range(runs // programs):
            kill_at = rng.randint(1, total)  # uniform statement boundary
            store_dir = tmp_path / f"c{p}-{t}"
            session = StoreSession.create(store_dir, lang.canonical_source(src))
            vm = VM(lang.parse(src), seed)
            cap = CaptureSession(session, _cfg(3, "serial"))
            while not vm.finished and vm.statement_index < kill_at:
                vm.step()
                cap.hook(vm)
            cap.kill()
            session.abandon()
            store = Store(store_dir, require_checkpoint=False)
            if not store.versions:
                continue  # killed before the first ack; nothing to resume
            resumed = resume(store_dir, store.latest_version)
            assert resumed.state_fingerprint() == ref, \
                f"program {p} killed at {kill_at}"
            completed += 1
    _line(3, f"crash-resume equivalence over {runs} random kill points", True,
          f"{completed} resumes matched the uninterrupted run")


# -- 4. delta storage reduction ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_04_delta_storage_reduction(tmp_path):
    spec = static_plus_model(64 * MIB, 1 * MIB, 50)
    totals = {}
    for label, strategy, cp_every in (
            ("serial", "serial", 16),
            ("idgraph", "idgraph", 16),
            ("full", "serial", 1)):
        store_dir = tmp_path / label
        out = run_with_capture(
            spec.source, spec.seed, store_dir,
            _cfg(spec.stmts_per_iter, strategy, checkpoint_every=cp_every))
        assert out.error is None
        store = Store(store_dir)
        assert len(store.versions) >= 50, f"{label}: {len(store.versions)}"
        totals[label] = sum(store.index[v].length for v in store.versions)
        import shutil

        shutil.rmtree(store_dir)
    ratio_serial = totals["serial"] / totals["full"]
    ratio_idgraph = totals["idgraph"] / totals["full"]
    ok = ratio_serial <= 0.15 and ratio_idgraph <= 0.15
    _line(4, "StaticPlusModel(64MiB,1MiB,50): delta storage <= 0.15x full",
          ok, f"serial {ratio_serial:.3f}, idgraph {ratio_idgraph:.3f}")


# -- 5. overhead ordering ------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_overhead_ordering(tmp_path):
    workloads = [
        static_plus_model(8 * MIB, 512 * KIB, 10),
        shuffle(16, 128 * KIB, 10),
        volatility(16, 64 * KIB, 0.3, 10),
        deep_update(2 * MIB, 10),
    ]
    ordered = 0
    details = []
    for spec in workloads:
        report = run_bench(spec, _cfg(spec.stmts_per_iter, "auto"),
                           repetitions=3, workdir=tmp_path / spec.name)
        assert report.fidelity_ok, spec.name
        holds = report.delta_overhead_pct <= report.full_overhead_pct
        ordered += holds
        details.append(f"{spec.name}: delta {report.delta_overhead_pct:.1f}% "
                       f"vs full {report.full_overhead_pct:.1f}%"
                       + ("" if holds else " (tied/inverted)"))
    _line(5, "overhead ordering delta <= full on >= 3 of 4 workloads",
          ordered >= 3, "; ".join(details))


# -- 6. volatility trade-off -----------------------------------------------------------------

def test_criterion_06_volatility_tradeoff(tmp_path):
    # p = 1.0 whole-object rewrites: serialization is the compact extreme
    spec_hi = volatility(8, 8 * KIB, 1.0, 6)
    sizes = {}
    for strategy in ("serial", "idgraph"):
        store_dir = tmp_path / f"hi-{strategy}"
        run_with_capture(spec_hi.source, spec_hi.seed, store_dir,
                         _cfg(spec_hi.stmts_per_iter, strategy,
                              checkpoint_every=10 ** 9))
        store = Store(store_dir)
        sizes[strategy] = sum(store.index[v].length for v in store.versions
                              if store.index[v].kind == RT_DELTA)
    extreme_ok = sizes["serial"] <= 1.1 * sizes["idgraph"]

    # mid-volatility shuffle: the id graph captures position changes precisely
    spec_mid = shuffle(16, 16 * KIB, 6)
    mid_sizes = {}
    for strategy in ("serial", "idgraph"):
        store_dir = tmp_path / f"mid-{strategy}"
        run_with_capture(spec_mid.source, spec_mid.seed, store_dir,
                         _cfg(spec_mid.stmts_per_iter, strategy,
                              checkpoint_every=10 ** 9))
        store = Store(store_dir)
        mid_sizes[strategy] = sum(store.index[v].length for v in store.versions
                                  if store.index[v].kind == RT_DELTA)
    mid_ok = mid_sizes["idgraph"] < mid_sizes["serial"]
    _line(6, "volatility trade-off: serial <= 1.1x idgraph at p=1.0; "
             "idgraph < serial on mid-p shuffle",
          extreme_ok and mid_ok,
          f"p=1.0 serial/idgraph: {sizes['serial']}/{sizes['idgraph']}, "
          f"shuffle idgraph/serial: {mid_sizes['idgraph']}/{mid_sizes['serial']}")


# -- 7. failsafe -------------------------------------------------------------------------------

def test_criterion_07_failsafe(tmp_path):
    src = "let xs = []\nlet m = {\"k\": 0}\n" + \
        "push xs 1\nset m[\"k\"] = len(xs)\n" * 110
    seed = 5
    clean = run_with_capture(src, seed, tmp_path / "clean",
                             _cfg(2, "serial", record_fingerprints=True))
    attempts = len(clean.stats.entries)
    assert attempts >= 100, f"only {attempts} snapshot attempts"
    faulty = run_with_capture(
        src, seed, tmp_path / "faulty",
        _cfg(2, "serial", record_fingerprints=True,
             faults=FaultPlan(serialize_p=0.3, seed=77)))
    output_unchanged = (faulty.error is None
                        and faulty.vm.state_fingerprint()
                        == clean.vm.state_fingerprint())
    store = Store(tmp_path / "faulty")
    injected = sum(1 for e in faulty.stats.entries if not e.persisted)
    fps = {e.version: e.fingerprint for e in faulty.stats.entries if e.persisted}
    restores_ok = all(
        materialize(store, v).state.fingerprint().hex() == fps[v]
        for v in store.versions)
    bases_ok = all(
        store.index[v].base_version is None or store.index[v].base_version in store.index
        for v in store.versions)
    _line(7, "failsafe under 30% injected serializer failures",
          output_unchanged and restores_ok and bases_ok and injected > 0,
          f"{attempts} attempts, {injected} skipped, "
          f"{len(store.versions)} persisted and restored")


# -- 8. durability and corruption -----------------------------------------------------------------

def test_criterion_08_durability_and_corruption(tmp_path):
    src = "let xs = []\n" + "push xs 1\n" * 60
    rng = random.Random(123)
    # kill-after-ack: acked versions must restore after an unclean stop
    kills_ok = 0
    for trial in range(10):
        store_dir = tmp_path / f"k{trial}"
        session = StoreSession.create(store_dir, lang.canonical_source(src),
                                      fsync="always")
        vm = VM(lang.parse(src), 1)
        cap = CaptureSession(session, CaptureConfig(
            trigger=EveryKStatements(4), strategy="serial", queue_depth=0,
            record_fingerprints=True))
        stop_after = rng.randint(1, 12)
        while not vm.finished:
            vm.step()
            cap.hook(vm)
            cap.flush_acks()
            if len(cap.stats.persisted_versions()) >= stop_after:
                break
        acked = {e.version: e.fingerprint for e in cap.stats.entries if e.persisted}
        cap.kill()
        session.abandon()
        store = Store(store_dir, require_checkpoint=False)
        assert set(acked) <= set(store.versions)
        for v, fp in acked.items():
            assert materialize(store, v).state.fingerprint().hex() == fp
        kills_ok += 1

    # random single-byte corruption: CorruptRecord, never silent garbage
    out = run_with_capture(src, 1, tmp_path / "corr",
                           _cfg(4, "serial", record_fingerprints=True))
    store = Store(tmp_path / "corr")
    victim = rng.choice(store.versions[1:])
    entry = store.index[victim]
    seg = tmp_path / "corr" / "segments" / entry.segment
    data = bytearray(seg.read_bytes())
    flip_at = entry.offset + rng.randrange(entry.length)
    data[flip_at] ^= 1 << rng.randrange(8)
    seg.write_bytes(bytes(data))
    reopened = Store(tmp_path / "corr", require_checkpoint=False)
    with pytest.raises(CorruptRecord):
        materialize(reopened, victim)
    fps = {e.version: e.fingerprint for e in out.stats.entries if e.persisted}
    silent = 0
    for v in fps:
        if v == victim:
            continue
        try:
            restored = materialize(reopened, v).state.fingerprint().hex()
        except CorruptRecord:
            continue  # reported, not silent
        if restored != fps[v]:
            silent += 1
    _line(8, "kill-after-ack durability and corruption reporting",
          kills_ok == 10 and silent == 0,
          f"{kills_ok} kill trials; corrupted v{victim} raised CorruptRecord; "
          f"0 silent decodes")


# -- 9. replication --------------------------------------------------------------------------------

def test_criterion_09_replication(tmp_path):
    src = random_program(31_337, statements=40)
    out = run_with_capture(src, 9, tmp_path / "origin", _cfg(4, "idgraph"))
    assert out.error is None
    origin = Store(tmp_path / "origin")
    mid = origin.versions[len(origin.versions) // 2]
    ref = resume(tmp_path / "origin", mid).state_fingerprint()
    pack = tmp_path / "state.dartpack"
    export_pack(origin, pack, origin.versions[0], origin.versions[-1])
    import_pack(pack, tmp_path / "replica")
    replica_final = resume(tmp_path / "replica", mid).state_fingerprint()
    _line(9, "export -> import -> resume matches the origin's resumed run",
          replica_final == ref)


# -- 10. adaptive controller ------------------------------------------------------------------------

def test_criterion_10_adaptive_controller():
    import math

    # exact formula at several synthetic operating points
    formula_ok = True
    for c, v, rho in ((9000.0, 100.0, 0.1), (2500.0, 2.0, 0.5),
                      (123.0, 7.0, 0.03), (1e9, 1.0, 0.9), (0.001, 50.0, 1.0)):
        config = CaptureConfig(trigger=EveryKStatements(10), overhead_budget=rho)
        stats = CaptureStats()
        stats.ewma_cost_micros = c
        stats.vm_micros_total = v * 1000
        stats.vm_statements = 1000
        expected = min(max(math.ceil(c / (rho * v)), 1), 10 ** 6)
        formula_ok &= adapt_period(stats, config) == expected

    # long-run synthetic simulation: capture fraction <= 1.5 * rho
    sim_ok = True
    for rho in (0.02, 0.1, 0.25):
        config = CaptureConfig(trigger=EveryKStatements(5), overhead_budget=rho)
        stats = CaptureStats()
        vm_micros = capture_micros = 0.0
        statements = 0
        k = config.trigger.k
        c, v = 3000.0, 4.0
        for _ in range(150):
            statements += k
            vm_micros += k * v
            capture_micros += c
            stats.observe_cost(c)
            stats.vm_micros_total = vm_micros
            stats.vm_statements = statements
            k = adapt_period(stats, config)
        fraction = capture_micros / vm_micros
        sim_ok &= fraction <= 1.5 * rho
    _line(10, "controller k = ceil(c/(rho*v)) clamped; simulated fraction <= 1.5*rho",
          formula_ok and sim_ok)
