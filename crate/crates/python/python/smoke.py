"""Smoke test for the Python bindings.

Build the extension first:

    cargo build --release -p committee-distill-py --features extension-module

then run `python3 crates/python/python/smoke.py`. The script copies the built
library next to a temporary module path and runs the toy pipeline end to end.
"""

import importlib
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[3]

TOY = """
version = 1
ipc = 2
committee = [
    { arch = "tiny-cnn", width = 4 },
    { arch = "tiny-cnn", width = 6 },
]

[dataset]
generate = "toy10-16"

[squeeze]
epochs = 1
batch_size = 50

[prior]
iterations = 2
epochs = 1

[recover]
iterations = 3

[posteval]
student_arch = "tiny-cnn"
student_width = 4
epochs = 2
"""


def find_library():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libcommittee_distill_py.so"
        if lib.exists():
            return lib
    sys.exit("build the extension first (see the module docstring)")


def main():
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(find_library(), tmp / "committee_distill_py.so")
    sys.path.insert(0, str(tmp))
    cd = importlib.import_module("committee_distill_py")

    w = cd.ppg_weights([64.00, 51.62], 4.0)
    assert abs(sum(w) - 1.0) < 1e-12 and w[0] > w[1], w
    assert cd.cosine_lr(0, 10, 0.1) == 0.1 and cd.cosine_lr(10, 10, 0.1) == 0.0
    assert cd.PriorTable.fixture("cifar100").alpha("resnet18-like") == 64.00

    cfg = cd.PipelineConfig.from_toml(TOY)
    assert cfg.member_ids == ["tiny-cnn-w4", "tiny-cnn-w6"]
    try:
        cd.PipelineConfig.from_toml(TOY.replace("iterations = 3", "iterations = 3\nbogus = 1"))
    except cd.ConfigError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    ws = cd.Workspace(str(tmp / "out"))
    try:
        ws.recover(cfg)
    except cd.DependencyError:
        pass
    else:
        raise AssertionError("recover ran without teachers")

    ws.squeeze(cfg)
    ws.prior(cfg)
    manifest = ws.recover(cfg)
    results = ws.eval(cfg)
    report = ws.report(cfg)
    assert manifest["stage"] == "recover"
    assert 0.0 <= results[0]["final_test_top1"] <= 100.0
    assert report["diversity"]["overall_mean"] <= 1.0
    print("recover run", manifest["run_id"], "student top-1", results[0]["final_test_top1"])
    print("ledger rows", len(ws.ledger()))
    shutil.rmtree(tmp)
    print("ok")


if __name__ == "__main__":
    main()
