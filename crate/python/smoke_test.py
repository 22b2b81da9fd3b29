#!/usr/bin/env python3
"""End-to-end smoke test for the caml_py extension module.

Builds nothing itself: expects `cargo build --release -p caml-py` (or a
debug build) to have produced libcaml_py.so, which it imports under the
name caml_py and drives through the bank, the correlation math, the
metrics, and a miniature generate/train/evaluate round trip.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / "release" / "libcaml_py.so",
        REPO / "target" / "debug" / "libcaml_py.so",
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("libcaml_py.so not found; run: cargo build --release -p caml-py")
    stage = Path(tempfile.mkdtemp(prefix="caml_py_"))
    shutil.copy2(lib, stage / "caml_py.so")
    sys.path.insert(0, str(stage))
    import caml_py

    return caml_py


def approx(a, b, tol=1e-6):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    caml = load_module()
    checks = 0

    # warm-up schedule anchors
    approx(caml.warmup_weight(0, 800, 1.0), math.exp(-5.0), 1e-9)
    # beta must round-trip f64 -> f32 -> f64 exactly, so pick a dyadic value
    assert caml.warmup_weight(800, 800, 0.75) == 0.75
    assert caml.warmup_weight(400, 800, 1.0) < caml.warmup_weight(600, 800, 1.0)
    checks += 1
    print("ok warm-up schedule")

    # correlation rows are stochastic and sharpen with temperature
    z = [[1.0, 0.0, 0.2], [0.1, -0.9, 0.4]]
    zp = [[1.0, 0.1, 0.0], [-0.5, 0.5, 0.7], [0.0, -1.0, 0.3]]
    soft = caml.omni_correlation(z, zp, temperature=1.0)
    sharp = caml.omni_correlation(z, zp, temperature=10.0)
    for row_soft, row_sharp in zip(soft, sharp):
        approx(sum(row_soft), 1.0)
        approx(sum(row_sharp), 1.0)
        assert max(row_sharp) >= max(row_soft)
    # two prototypes with cosines 1 and 0.9 at t=10: softmax of (10, 9)
    sim = caml.omni_correlation(
        [[1.0, 0.0]], [[1.0, 0.0], [0.9, math.sqrt(0.19)]], temperature=10.0
    )
    approx(sim[0][0], math.e / (math.e + 1.0))
    checks += 1
    print("ok omni-correlation")

    # consistency loss: uniform 4-column inputs give ln 4
    uniform = [[0.25] * 4 for _ in range(3)]
    approx(caml.occ_loss(uniform, uniform), math.log(4.0))
    checks += 1
    print("ok consistency loss anchor")

    # objective assembly, including the cold-start case
    cold = caml.total_loss(1.0, 0.5, None, 0, t_max=100)
    assert cold["l_o"] == 0.0 and cold["lambda_o"] > 0.0
    warm = caml.total_loss(1.0, 0.5, 0.2, 100, t_max=100)
    approx(warm["total"], 1.0 + 1.0 * 0.5 + 0.1 * 0.2, 1e-6)
    checks += 1
    print("ok total loss")

    # prototype bank: FIFO capacity, warm gate, seeded sampling
    bank = caml.PrototypeBank([0, 1], 2, 4, 2)
    assert not bank.is_warm()
    bank.enqueue(0, 0, [1.0, 0.0, 0.0, 0.0])
    bank.enqueue(0, 1, [0.0, 2.0, 0.0, 0.0])  # normalized on entry
    bank.enqueue(0, 1, [0.0, 0.0, 3.0, 0.0])
    bank.enqueue(0, 1, [0.0, 0.0, 0.0, 4.0])  # evicts the class-0 entry
    assert bank.queue_len(0) == 2 and bank.class_count(0) == 0
    assert not bank.is_warm()
    bank.enqueue(1, 0, [1.0, 1.0, 0.0, 0.0])
    assert bank.is_warm() and bank.total_entries() == 3
    rows, classes = bank.sample_prototypes(2, seed=9)
    assert classes == [0, 0, 1, 1] and len(rows) == 4
    for row in rows:
        approx(sum(v * v for v in row), 1.0)
    checks += 1
    print("ok prototype bank")

    # metrics on hand-built masks
    dims = (3, 3, 3)
    empty = [0] * 27
    cube = [1] * 27
    assert caml.dice(cube, cube, dims) == 1.0
    assert caml.jaccard(empty, empty, dims) == 1.0
    one = list(empty)
    one[13] = 1  # the center voxel
    hd95, asd = caml.surface_metrics(one, one, dims)
    assert hd95 == 0.0 and asd == 0.0
    approx(caml.dice(cube, one, dims), 2 * 1 / (27 + 1))
    checks += 1
    print("ok metrics")

    # the factorized attention does strictly less score work than joint
    fac, joint = caml.attention_score_entries(4, 64, 4)
    assert fac == 4 * 64 * 64 * 4 + 64 * 4 * 4 * 4
    assert fac < joint == (4 * 64) ** 2 * 4
    checks += 1
    print("ok attention accounting")

    # miniature pipeline: generate, train a few iterations, evaluate
    with tempfile.TemporaryDirectory(prefix="caml_smoke_") as tmp:
        tmp = Path(tmp)
        total, labeled = caml.generate_data(
            tmp / "data", seed=3, samples=4, dims=(8, 8, 8), labeled_fraction=0.5
        )
        assert (total, labeled) == (4, 2)
        rows = caml.train(
            tmp / "data" / "manifest.txt",
            tmp / "run",
            iterations=3,
            crop=(8, 8, 8),
            batch_size=2,
            top_i=4,
            proto_j=2,
            bank_slots=8,
            seed=1,
        )
        assert len(rows) == 3 and rows[0]["iteration"] == 0
        assert all(math.isfinite(r["total"]) for r in rows)
        assert (tmp / "run" / "fv.ckpt").exists()
        assert (tmp / "run" / "run.csv").exists()
        scores = caml.evaluate(
            tmp / "run",
            tmp / "data" / "manifest.txt",
            window=(8, 8, 8),
            stride=(8, 8, 8),
            split="labeled",
        )
        assert len(scores) == 2
        for s in scores:
            assert 0.0 <= s["dice"] <= 1.0
            assert s["jaccard"] <= s["dice"] + 1e-12
    checks += 1
    print("ok generate/train/evaluate pipeline")

    print(f"smoke test passed ({checks} check groups)")


if __name__ == "__main__":
    main()
