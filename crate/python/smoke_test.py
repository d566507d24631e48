#!/usr/bin/env python3
"""End-to-end smoke test for the voxreg_py extension module.

Build the module first, then run this script from the repository root:

    cargo build -p voxreg-py --release
    python3 python/smoke_test.py

The script copies the built cdylib next to a temp directory under the
importable name `voxreg_py` and exercises the public surface.
"""

import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / "release" / "libvoxreg_py.so",
        REPO / "target" / "debug" / "libvoxreg_py.so",
        REPO / "target" / "release" / "libvoxreg_py.dylib",
        REPO / "target" / "debug" / "libvoxreg_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("no built extension found; run `cargo build -p voxreg-py --release` first")
    stage = Path(tempfile.mkdtemp(prefix="voxreg_py_"))
    shutil.copy2(built, stage / "voxreg_py.so")
    sys.path.insert(0, str(stage))
    import voxreg_py

    return voxreg_py


def check(name, ok):
    print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if not ok:
        sys.exit(1)


def mean_dice(scores):
    return sum(scores.values()) / len(scores)


def main():
    vx = import_module()

    size = 12
    pair = vx.synth_pair(size=size, num_labels=3, max_displacement=1.5, seed=7)
    n = size**3
    check(
        "synth_pair shapes",
        len(pair.fixed) == n
        and len(pair.moving) == n
        and len(pair.field_gt) == 3 * n
        and pair.dims == (size, size, size),
    )

    again = vx.synth_pair(size=size, num_labels=3, max_displacement=1.5, seed=7)
    check("synth_pair deterministic", again.fixed == pair.fixed and again.field_gt == pair.field_gt)

    self_dice = vx.dice(pair.fixed_labels, pair.fixed_labels, pair.dims)
    check("dice of a map with itself is 1", all(v == 1.0 for v in self_dice.values()))

    baseline = mean_dice(vx.dice(pair.fixed_labels, pair.moving_labels, pair.dims))
    check("moving pair starts misaligned", baseline < 1.0)

    # The pair construction warps fixed by field_gt to produce moving, so
    # warping moving by the negated field approximately undoes it.
    back = [-v for v in pair.field_gt]
    recovered = vx.warp_labels(pair.moving_labels, back, pair.dims)
    undone = mean_dice(vx.dice(pair.fixed_labels, recovered, pair.dims))
    check(f"negated ground-truth field realigns ({baseline:.3f} -> {undone:.3f})", undone > baseline)

    model = vx.Model(base_channels=2, seed=1)
    check("model has parameters", model.param_count() > 0)

    field = model.register(pair.fixed, pair.moving, pair.dims)
    check("fresh model predicts the zero field", all(v == 0.0 for v in field))

    warped = vx.warp(pair.moving, field, pair.dims)
    check("zero field leaves the volume untouched", warped == pair.moving)

    # White noise keeps every window's variance well above the loss's
    # guard epsilon, where the affine identity holds tightly.
    rng = random.Random(42)
    noise = [2.0 * rng.random() for _ in range(n)]
    scaled = [2.0 * v + 3.0 for v in noise]
    loss = vx.ncc(noise, scaled, pair.dims, window=5)
    check(f"ncc of an affine-rescaled copy is -1 ({loss:.6f})", math.isclose(loss, -1.0, abs_tol=1e-4))

    sd, folds = vx.sdlogj([0.0] * (3 * n), pair.dims)
    check("zero field has zero sdlogj and no folds", sd == 0.0 and folds == 0.0)

    check("hd95 of a map with itself is 0", vx.hd95(pair.fixed_labels, pair.fixed_labels, pair.dims, 1) == 0.0)

    with tempfile.TemporaryDirectory() as td:
        path = str(Path(td) / "model.vckpt")
        model.save(path)
        loaded = vx.Model.load(path)
        check(
            "checkpoint round-trip preserves the model",
            loaded.param_count() == model.param_count()
            and loaded.register(pair.fixed, pair.moving, pair.dims) == field,
        )

    print("smoke test ok")


if __name__ == "__main__":
    main()
