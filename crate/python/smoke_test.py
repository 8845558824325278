"""Smoke test for the flexipath_py extension.

Build and run:
    cargo build -p flexipath-py --features extension-module
    cp target/debug/libflexipath_py.so python/flexipath_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import flexipath_py as fp


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAILED: {what}")
    print(f"ok  {what}")


def main():
    pyr = fp.Pyramid(3, 512, "dots")
    check(pyr.num_levels == 4 and pyr.mpp == [0.25, 0.5, 1.0, 2.0], "pyramid levels and mpp")
    check(len(pyr.level(1)) == 3 * 256 * 256, "level raster size")

    m = fp.sample_mask("mae", 14, 0.75, 16, 0)
    check(sum(m) == round(0.75 * 196), "MAE mask count")
    m = fp.sample_mask("ibot", 7, 0.3, 32, 1)
    check(sum(m) == round(0.3 * 49), "iBOT mask count")

    d = [math.sin(i) for i in range(64)]
    zero = [0.0] * 64
    energy = 64 * sum(v * v for v in d)
    got = fp.fourier_loss(d, zero, 8, 8, 0.5, 1.0, 1.0)
    check(abs(got - energy) / energy < 1e-9, "Parseval at unit weights")

    kernel = [float(i % 7) for i in range(256)]
    check(fp.pi_resize(kernel, 1, 1, 16) == kernel, "PI-resize identity at the base patch")
    check(len(fp.pi_resize(kernel, 1, 1, 32)) == 1024, "PI-resize to 32")

    head = fp.AdditiveMil(4, 2, seed=5)
    feats = [[0.1 * i, -0.2, 0.3, 0.05 * i] for i in range(6)]
    logits, contrib, attn = head.forward(feats)
    check(abs(sum(attn) - 1.0) < 1e-5, "attention sums to one")
    check(all(abs(sum(c[k] for c in contrib) - logits[k]) < 1e-5 for k in range(2)), "bag logits are summed contributions")

    check(fp.macro_f1([0, 1, 0, 1], [0, 0, 1, 1], 2) == 0.5, "macro-F1 worked example")
    check(fp.auroc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75, "AUROC worked example")
    a = fp.bootstrap("accuracy", [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], [0, 1, 1], 200, 3)
    check(a == fp.bootstrap("accuracy", [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], [0, 1, 1], 200, 3), "bootstrap determinism")
    try:
        fp.auroc([0.1, 0.2], [True, True])
        check(False, "single-class AUROC raises")
    except ValueError:
        check(True, "single-class AUROC raises")

    cfg = fp.default_config()
    check("lambda1 = 5.0" in cfg and "lambda2 = 1.0" in cfg, "default loss weights")
    lr0, _ = fp.schedule_at(cfg, 10, 0)
    lrw, _ = fp.schedule_at(cfg, 10, 50)
    check(lr0 == 0.0 and lrw == 0.002, "warmup schedule")

    desk = fp.default_config("desk")
    desk = desk.replace("num_pyramids = 64", "num_pyramids = 2").replace("batch_size = 32", "batch_size = 2")
    desk = desk.replace("patch_sizes = [8, 16, 32]", "patch_sizes = [32]").replace(
        "patch_size_weights = [1.0, 1.0, 1.0]", "patch_size_weights = [1.0]"
    )
    with tempfile.TemporaryDirectory() as out:
        path, digest, steps = fp.pretrain(desk, out, max_steps=1)
        check(steps == 1 and len(digest) == 64, "one pre-training step")
        bb = fp.Backbone.load(path)
        before = bb.weights_hash()
        cls = bb.cls_embeddings([pyr.level(0)[: 3 * 224 * 224]], 224, 32)
        check(len(cls) == 1 and len(cls[0]) == bb.embed_dim, "CLS embedding width")
        check(bb.weights_hash() == before, "backbone untouched by featurization")
    try:
        fp.Backbone.load("/nonexistent/checkpoint.bin")
        check(False, "missing checkpoint raises")
    except FileNotFoundError:
        check(True, "missing checkpoint raises")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
