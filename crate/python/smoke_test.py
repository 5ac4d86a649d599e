"""Smoke test for the tcn_gesture_py extension.

Build first with `cargo build --release -p tcn-gesture-py`; the script loads
the shared library from target/release (or from TCN_GESTURE_PY_LIB).
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_extension():
    default = ROOT / "target" / "release" / "libtcn_gesture_py.so"
    path = Path(os.environ.get("TCN_GESTURE_PY_LIB", default))
    if not path.exists():
        sys.exit(f"extension not found at {path}; run cargo build --release -p tcn-gesture-py")
    loader = importlib.machinery.ExtensionFileLoader("tcn_gesture_py", str(path))
    spec = importlib.util.spec_from_loader("tcn_gesture_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    tg = load_extension()

    ref = tg.TcnConfig(4, 5, 5, channels=64, input_dim=512)
    params, flops = ref.count(48)
    assert params == 363722 and flops == 17458656, (params, flops)

    mix2 = tg.TcnConfig(4, 4, 2, channels=8, input_dim=4, classes=3)
    assert mix2.receptive_field() == mix2.probe(seed=1)
    assert mix2.receptive_field()[0] == 12

    # uniform log-probs over 3 classes and 2 frames: target [1] has 3 alignments
    lp = [[math.log(1 / 3)] * 3 for _ in range(2)]
    loss, grad = tg.ctc_loss(lp, [1])
    assert abs(loss - math.log(3.0)) < 1e-12, loss
    assert len(grad) == 2 and len(grad[0]) == 3

    two = [(0, 10, 1), (20, 30, 1)]
    assert abs(tg.map_score([(5, 1, 0.9), (15, 1, 0.8)], two) - 51 / 101) < 1e-12

    frames, h, w, labels, nuclei = tg.generate_clip(1, seed=3)
    assert len(frames) % (h * w) == 0 and labels and nuclei

    model = tg.Model(seed=2)
    mean = sum(frames) / len(frames)
    std = math.sqrt(sum((v - mean) ** 2 for v in frames) / len(frames))
    probs = model.predict([(v - mean) / std for v in frames], h, w)
    assert len(probs) == len(frames) // (h * w)
    assert all(abs(sum(row) - 1.0) < 1e-4 for row in probs)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.thgm")
        model.save(path)
        again = tg.Model.load(path)
        assert again.num_params == model.num_params

    stream = tg.Stream(model, delta=1)
    emitted = 0
    for t in range(len(frames) // (h * w)):
        out = stream.push(frames[t * h * w:(t + 1) * h * w], h, w)
        if out is not None:
            attributed, row, _event = out
            assert attributed == t - 1 and len(row) == model.classes
            emitted += 1
    stream.finish()
    assert emitted == len(frames) // (h * w) - 1

    print("python smoke test passed")


if __name__ == "__main__":
    main()
