import random

import pytest

from conftest import SHARED_REF_SRC, capture_run, fingerprints_per_step
from progen import random_program

from dartvm import lang
from dartvm.errors import DigestMismatch, TargetUnreachable, UnknownVersion
from dartvm.recovery import (
    build_vm,
    diff_versions,
    materialize,
    replay_to_statement,
    resume,
)
from dartvm.store import Store
from dartvm.vm import VM


def test_materialize_unknown_version(tmp_path):
    capture_run("let x = 1\nlet y = 2\nlet z = 3\nlet w = 4\nlet q = 5",
                tmp_path / "s", every=2)
    with pytest.raises(UnknownVersion):
        materialize(tmp_path / "s", 99)


def test_materialize_every_version_matches_live(tmp_path):
    src = random_program(42, statements=45)
    out = capture_run(src, tmp_path / "s", seed=9, every=3, strategy="idgraph")
    store = Store(tmp_path / "s")
    for e in out.stats.entries:
        if e.persisted:
            mat = materialize(store, e.version)
            assert mat.state.fingerprint().hex() == e.fingerprint
            assert mat.state.statement_index == e.statement_index


def test_shared_reference_preserved_after_restore(tmp_path):
    """The o1=[a,c], o2=[b,c] scenario: restored c is one object; mutating
    it through o1 is observable through o2."""
    out = capture_run(SHARED_REF_SRC, tmp_path / "s", every=5)
    store = Store(tmp_path / "s")
    v = out.persisted_versions[-1]
    state = materialize(store, v).state
    bindings = state.frames[0][1]
    o1 = state.heap.node(bindings["o1"].oid)
    o2 = state.heap.node(bindings["o2"].oid)
    c_via_o1 = o1.data[1]
    c_via_o2 = o2.data[1]
    assert c_via_o1 == c_via_o2  # same oid: one object, not copies c1/c2
    # exactly one restored object carries c's content
    c_content = bytes(state.heap.node(c_via_o1.oid).data)
    matching = [oid for oid, node in state.heap.objects.items()
                if node.kind == "blob" and bytes(node.data) == c_content]
    assert len(matching) == 1
    # a mutation through o1's child is visible through o2's child
    state.heap.blob_set(c_via_o1.oid, 0, 0xAB)
    assert state.heap.node(c_via_o2.oid).data[0] == 0xAB


def test_resume_completes_like_uninterrupted_run(tmp_path):
    src = random_program(7, statements=35)
    ref = VM(lang.parse(src), 5).run().state_fingerprint()
    out = capture_run(src, tmp_path / "s", seed=5, every=4)
    for v in (out.persisted_versions[0], out.persisted_versions[-1]):
        vm = resume(tmp_path / "s", v)
        assert vm.state_fingerprint() == ref


def test_resume_rejects_edited_program(tmp_path):
    capture_run("let x = 1\nlet y = 2\nlet z = 3\nlet w = 4\nlet q = 5",
                tmp_path / "s", every=2)
    with pytest.raises(DigestMismatch):
        resume(tmp_path / "s", 1, source="let x = 999\n")


def test_resume_with_capture_appends_versions(tmp_path):
    from dartvm.capture import CaptureConfig, EveryKStatements

    src = "let xs = []\n" + "push xs 1\n" * 20
    out = capture_run(src, tmp_path / "s", every=4)
    latest = out.persisted_versions[-1]
    mid = out.persisted_versions[1]
    cfg = CaptureConfig(trigger=EveryKStatements(4), strategy="serial",
                        queue_depth=0, record_fingerprints=True)
    vm = resume(tmp_path / "s", mid, capture_config=cfg)
    store = Store(tmp_path / "s")
    new_versions = [v for v in store.versions if v > latest]
    assert new_versions, "resumed run persisted nothing"
    assert store.index[new_versions[0]].base_version == mid
    for v in new_versions:
        materialize(store, v)
    ref = VM(lang.parse(src), 1).run().state_fingerprint()
    assert vm.state_fingerprint() == ref


def test_kill_and_resume_at_random_boundaries(tmp_path):
    """Process-kill simulation at random acked versions, then resume: the
    final state matches the uninterrupted run."""
    from dartvm.capture import CaptureConfig, CaptureSession, EveryKStatements
    from dartvm.store import StoreSession

    rng = random.Random(3)
    src = random_program(33, statements=40)
    ref = VM(lang.parse(src), 2).run().state_fingerprint()
    for trial in range(6):
        store_dir = tmp_path / f"s{trial}"
        session = StoreSession.create(store_dir, lang.canonical_source(src))
        vm = VM(lang.parse(src), 2)
        cap = CaptureSession(session, CaptureConfig(
            trigger=EveryKStatements(3), strategy="serial", queue_depth=0))
        kill_after = rng.randint(1, 8)
        while not vm.finished:
            vm.step()
            cap.hook(vm)
            if len(cap.stats.persisted_versions()) + len(cap._pending_stats) >= kill_after:
                break
        cap.kill()
        session.abandon()
        store = Store(store_dir, require_checkpoint=False)
        if not store.versions:
            continue
        vm2 = resume(store_dir, store.latest_version)
        assert vm2.state_fingerprint() == ref


def test_replay_at_snapshot_equals_materialize(tmp_path):
    src = random_program(15, statements=30)
    out = capture_run(src, tmp_path / "s", seed=4, every=5)
    store = Store(tmp_path / "s")
    v = out.persisted_versions[-1]
    idx = store.index[v].statement_index
    vm = replay_to_statement(tmp_path / "s", idx)
    assert vm.state_fingerprint() == materialize(store, v).state.fingerprint()


def test_replay_between_snapshots_matches_instrumented_run(tmp_path):
    src = random_program(19, statements=30)
    fps = fingerprints_per_step(src, seed=6)
    capture_run(src, tmp_path / "s", seed=6, every=7)
    for target in (0, 1, 3, 9, 12, len(fps) - 1):
        vm = replay_to_statement(tmp_path / "s", target)
        assert vm.state_fingerprint() == fps[target], f"target {target}"


def test_replay_beyond_end_unreachable(tmp_path):
    capture_run("let x = 1\nlet y = 2\nlet z = 3\nlet w = 4\nlet q = 5",
                tmp_path / "s", every=2)
    with pytest.raises(TargetUnreachable):
        replay_to_statement(tmp_path / "s", 10_000)


def test_build_vm_can_continue_stepping(tmp_path):
    src = "let xs = []\nrepeat 6 { push xs 1 }\nlet done = true"
    out = capture_run(src, tmp_path / "s", every=3)
    mat = materialize(tmp_path / "s", out.persisted_versions[0])
    vm = build_vm(lang.parse(src), mat.state)
    assert not vm.finished
    vm.run()
    assert vm.state_fingerprint() == VM(lang.parse(src), 1).run().state_fingerprint()


# --- diff reports -----------------------------------------------------------------

def test_diff_same_version_is_empty(tmp_path):
    out = capture_run(SHARED_REF_SRC, tmp_path / "s", every=5)
    v = out.persisted_versions[0]
    report = diff_versions(tmp_path / "s", v, v)
    assert report.is_empty()
    assert "no changes" in report.to_text()


def test_diff_one_push_lists_exactly_that_object(tmp_path):
    src = "let x = [1]\nlet other = [2]\nlet pad = 0\nlet pad = 0\npush x 9\nlet pad = 0\n"
    out = capture_run(src, tmp_path / "s", every=3, strategy="idgraph")
    v1, v2 = out.persisted_versions[0], out.persisted_versions[1]
    report = diff_versions(tmp_path / "s", v1, v2)
    assert len(report.changed_objects) == 1
    assert report.changed_objects[0].kind == "list"
    assert not report.added_roots and not report.removed_roots


def test_diff_root_deletion_reported(tmp_path):
    src = "let x = [1]\nlet y = [2]\nlet pad = 0\ndel y\nlet pad = 0\nlet pad = 0\n"
    out = capture_run(src, tmp_path / "s", every=3)
    v1, v2 = out.persisted_versions[0], out.persisted_versions[1]
    report = diff_versions(tmp_path / "s", v1, v2)
    assert any("y" in r for r in report.removed_roots)
    assert report.removed_objects  # y's list object vanished


def test_diff_unknown_version(tmp_path):
    capture_run("let x = 1\nlet y = 2\nlet z = 3\nlet w = 4\nlet q = 5",
                tmp_path / "s", every=2)
    with pytest.raises(UnknownVersion):
        diff_versions(tmp_path / "s", 1, 99)
