import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dartvm import VM, CaptureConfig, EveryKStatements, lang  # noqa: E402
from dartvm.capture import run_with_capture  # noqa: E402


@pytest.fixture
def store_dir(tmp_path):
    return tmp_path / "store"


def run_src(source: str, seed: int = 1) -> VM:
    return VM(lang.parse(source), seed).run()


def fingerprints_per_step(source: str, seed: int = 1) -> list[bytes]:
    """The state fingerprint after every statement of an uninterrupted run."""
    vm = VM(lang.parse(source), seed)
    out = [vm.state_fingerprint()]
    while not vm.finished:
        vm.step()
        out.append(vm.state_fingerprint())
    return out


def capture_run(source: str, store_dir, seed: int = 1, every: int = 5,
                strategy: str = "serial", **kwargs):
    # unbounded queue: tests need every snapshot persisted deterministically
    kwargs.setdefault("queue_depth", 0)
    config = CaptureConfig(trigger=EveryKStatements(every), strategy=strategy,
                           record_fingerprints=True, **kwargs)
    return run_with_capture(source, seed, store_dir, config)


# the paper-style shared-reference scenario: o1=[a,c], o2=[b,c]
SHARED_REF_SRC = """
let a = blob(32, 1)
let b = blob(32, 2)
let c = blob(32, 3)
let o1 = [a, c]
let o2 = [b, c]
"""
