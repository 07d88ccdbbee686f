"""Acceptance gate: one block of tests per criterion, ``test_cNN_*``.

``conftest.py`` folds the outcomes into one PASS/FAIL line per criterion at
the end of the run. The end-to-end criteria (9, 10) run the synthetic CLI
pipeline twice; set ``LULCSEG_SKIP_E2E=1`` to skip them locally.
"""

import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from lulcseg import cli, nn, pipeline
from lulcseg.augment import AugmentOp, apply, transform
from lulcseg.checkpoint import load_checkpoint, save_checkpoint
from lulcseg.config import PipelineConfig
from lulcseg.gradcheck import grad_check
from lulcseg.metrics import ConfusionMatrix, accumulate, class_metrics, merge, weighted_report
from lulcseg.model import BackboneConfig, FastFCN, JPUConfig, TrainConfig, train_step
from lulcseg.nn import ConvLayer, ConvSpec
from lulcseg.raster import ClassMask, Raster, decode_mask, encode_mask
from lulcseg.synth import generate_dataset
from lulcseg.tiling import extract_tiles, plan_grid, stitch

from oracles import metrics_direct
from test_model import kink_free_coords

CRITERIA = {
    1: "tiling arithmetic (182 tiles, 64 px strip)",
    2: "round trips (mask codec, tile/stitch, checkpoint)",
    3: "augmentation group laws",
    4: "gradient fidelity",
    5: "strided conv equals subsampled conv",
    6: "JPU/dilated shape law and JPU faster",
    7: "metric oracle equivalence and merge homomorphism",
    8: "undefined class renders as 1",
    9: "desk-scale end-to-end pipeline",
    10: "determinism of end-to-end reports",
}

E2E_BUDGET_S = 15 * 60


# 1 -----------------------------------------------------------------------------

def test_c01_tiling_arithmetic():
    t0 = time.perf_counter()
    g = plan_grid(7168, 6720, 512)
    elapsed = time.perf_counter() - t0
    assert (len(g), g.cols, g.rows) == (182, 14, 13)
    assert g.dropped_bottom == 64 and g.dropped_right == 0
    assert elapsed < 1.0


# 2 -----------------------------------------------------------------------------

def test_c02_round_trips(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    for _ in range(100):
        h, w = rng.integers(1, 129, size=2)
        m = ClassMask(rng.integers(0, 6, (h, w)))
        assert decode_mask(encode_mask(m)) == m

    for _ in range(20):
        w, h = int(rng.integers(64, 2049)), int(rng.integers(64, 1537))
        t = int(rng.integers(16, min(w, h, 512) + 1))
        src = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        g = plan_grid(w, h, t)
        out = stitch(extract_tiles(Raster(src), g), g)
        assert out.data.tobytes() == np.ascontiguousarray(src[: g.covered_height, : g.covered_width]).tobytes()

    model = FastFCN(seed=5)
    x = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    train_step(model, x, rng.integers(0, 6, (2, 32, 32)), TrainConfig(learning_rate=0.01))
    save_checkpoint(tmp_path / "c.npz", model, TrainConfig(), {"epoch": 1})
    loaded, _ = load_checkpoint(tmp_path / "c.npz")
    for a, b in zip(model.params(), loaded.params()):
        assert a.value.tobytes() == b.value.tobytes()
    assert time.perf_counter() - t0 < 30.0


# 3 -----------------------------------------------------------------------------

def test_c03_augmentation_group_laws():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    for _ in range(50):
        size = int(rng.integers(8, 65))
        img = Raster(rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
        mask = ClassMask(rng.integers(0, 6, (size, size)))
        pair = (img, mask)

        def times(op, n):
            p = pair
            for _ in range(n):
                p = apply(op, *p)
            return p

        assert times(AugmentOp.FlipH, 2) == pair
        assert times(AugmentOp.FlipV, 2) == pair
        assert times(AugmentOp.Rot90, 4) == pair
        assert times(AugmentOp.Rot90, 2) == apply(AugmentOp.Rot180, *pair)
        before = np.bincount(mask.labels.ravel(), minlength=6)
        for op in AugmentOp:
            assert np.array_equal(np.bincount(apply(op, *pair)[1].labels.ravel(), minlength=6), before)
    assert time.perf_counter() - t0 < 10.0


# 4 -----------------------------------------------------------------------------

OP_TOL, E2E_TOL, EPS = 1e-3, 1e-2, 1e-3


def _layer(spec, rng):
    return ConvLayer(spec, rng.uniform(-1, 1, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
                     rng.uniform(-1, 1, spec.out_channels), dtype=np.float64)


@pytest.mark.parametrize("spec", [ConvSpec(3, 4, 3, 1, 1, 1), ConvSpec(3, 4, 3, 2, 1, 1), ConvSpec(3, 4, 3, 1, 2, 2)],
                         ids=["regular", "strided", "dilated"])
def test_c04_conv_gradients(spec):
    rng = np.random.default_rng(40)
    layer = _layer(spec, rng)
    x = rng.uniform(-1, 1, (2, 3, 8, 7))
    r = rng.uniform(-1, 1, nn.conv2d_forward(x, layer).shape)
    gx, gw, gb = nn.conv2d_backward(x, layer, r)
    f = lambda _: float((nn.conv2d_forward(x, layer) * r).sum())
    for target, analytic in ((x, gx), (layer.weight.value, gw), (layer.bias.value, gb)):
        assert grad_check(f, target, analytic, EPS) <= OP_TOL


def test_c04_pointwise_and_pool_gradients():
    rng = np.random.default_rng(41)
    x = rng.uniform(-1, 1, (2, 3, 4, 5))
    r = rng.uniform(-1, 1, (2, 3, 9, 7))
    assert grad_check(lambda z: float((nn.upsample_bilinear(z, 9, 7) * r).sum()), x,
                      nn.upsample_bilinear_backward(r, 4, 5), EPS) <= OP_TOL

    v = rng.uniform(-1, 1, 200)
    v = v[np.abs(v) > 10 * EPS].reshape(1, 1, 1, -1)
    rv = rng.uniform(-1, 1, v.shape)
    assert grad_check(lambda z: float((nn.relu(z) * rv).sum()), v, nn.relu_backward(v, rv), EPS) <= OP_TOL

    x = rng.uniform(-1, 1, (2, 2, 6, 6))
    out, arg = nn.maxpool2(x)
    rp = rng.uniform(-1, 1, out.shape)
    assert grad_check(lambda z: float((nn.maxpool2(z)[0] * rp).sum()), x,
                      nn.maxpool2_backward(rp, arg, x.shape), EPS) <= OP_TOL

    logits = rng.uniform(-1, 1, (2, 5, 4, 4))
    target = rng.integers(0, 6, (2, 4, 4))
    res = nn.softmax_xent(logits, target)
    assert grad_check(lambda z: nn.softmax_xent(z, target).loss, logits, res.grad, EPS) <= OP_TOL


def test_c04_composed_model_gradient():
    t0 = time.perf_counter()
    m = FastFCN(BackboneConfig(stage_channels=(4, 6, 8, 10, 12)), JPUConfig(fused_width=4), seed=4).astype(np.float64)
    rng = np.random.default_rng(42)
    x = rng.uniform(-1, 1, (1, 3, 32, 32))
    masks = rng.integers(0, 6, (1, 32, 32))
    m.loss_and_grad(x, masks, 0.2)
    grads = {id(p): p.grad.copy() for p in m.params()}
    loss = lambda *_: m.loss(x, masks, 0.2)[0]
    worst, probed = 0.0, 0
    for name, layer in m.named_layers().items():
        for p in (layer.weight, layer.bias):
            coords = kink_free_coords(m, p, loss, rng, eps=EPS, tries=200)
            probed += len(coords)
            if coords:
                worst = max(worst, grad_check(loss, p.value, grads[id(p)], EPS, coords))
    assert probed >= 100
    assert worst <= E2E_TOL
    assert time.perf_counter() - t0 < 120.0


# 5 -----------------------------------------------------------------------------

def test_c05_strided_equals_subsampled():
    rng = np.random.default_rng(5)
    for _ in range(50):
        h, w = rng.integers(1, 40, size=2)
        cin, cout = rng.integers(1, 6, size=2)
        x = rng.uniform(-1, 1, (2, cin, h, w)).astype(np.float32)
        wt, b = rng.uniform(-1, 1, (cout, cin, 1, 1)), rng.uniform(-1, 1, cout)
        strided = nn.conv2d_forward(x, ConvLayer(ConvSpec(cin, cout, 1, stride=2), wt, b))
        regular = nn.conv2d_forward(x, ConvLayer(ConvSpec(cin, cout, 1, stride=1), wt, b))
        assert strided.tobytes() == np.ascontiguousarray(nn.subsample2(regular)).tobytes()


# 6 -----------------------------------------------------------------------------

def test_c06_shape_law():
    m = FastFCN(seed=6)
    for h in (64, 128, 256, 512):
        for w in (64, 128, 256, 512):
            x = np.zeros((1, 3, h, w), np.float32)
            jpu = m.jpu_forward(*m.backbone_forward(x)[2:])
            dil = m.dilated_reference_forward(x)
            assert jpu.shape == dil.shape == (1, 128, h // 8, w // 8)


def test_c06_jpu_faster_at_512(tmp_path):
    rows = pipeline.bench(PipelineConfig(out=tmp_path), size=512, repeats=5)
    by = {r["path"]: r for r in rows}
    print(f"jpu {by['jpu']['min_s']:.4f}s vs dilated {by['dilated']['min_s']:.4f}s (min of 5)")
    assert by["jpu"]["min_s"] < by["dilated"]["min_s"]


# 7 -----------------------------------------------------------------------------

def test_c07_metric_oracle_equivalence():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        h, w = rng.integers(1, 33, size=2)
        gt, pred = rng.integers(0, 6, (h, w)), rng.integers(0, 6, (h, w))
        if not (gt != 0).any():
            continue
        rows, weighted = metrics_direct(gt, pred, 5)
        report = weighted_report(accumulate(gt, pred))
        for c, row in zip(report.classes, rows):
            for name in ("percentage", "accuracy", "iou", "precision", "recall"):
                assert getattr(c, name) == row[name]
        for name in ("accuracy", "iou", "precision", "recall"):
            assert getattr(report.weighted, name) == weighted[name]
        checked += 1


def test_c07_merge_homomorphism_on_scenes():
    rng = np.random.default_rng(70)
    for _, _, mask in generate_dataset(10, seed=7, size=160, region_scale=64):
        gt = mask.labels
        pred = np.where(rng.random(gt.shape) < 0.1, rng.integers(0, 6, gt.shape), gt)
        g = plan_grid(160, 160, 48)
        cm = ConfusionMatrix.empty()
        for tg, tp in zip(extract_tiles(gt, g), extract_tiles(pred, g)):
            cm = merge(cm, accumulate(tg, tp))
        whole = accumulate(stitch(extract_tiles(gt, g), g), stitch(extract_tiles(pred, g), g))
        assert cm == whole
        assert weighted_report(cm) == weighted_report(whole)


# 8 -----------------------------------------------------------------------------

def test_c08_absent_class_renders_as_one():
    gt = np.array([[1, 1, 2, 3], [5, 5, 2, 3]])
    pred = np.array([[1, 2, 2, 3], [5, 5, 2, 1]])
    report = weighted_report(accumulate(gt, pred))
    meadow = report.classes[3]
    assert meadow.percentage == 0.0
    assert [meadow.rendered(n) for n in ("accuracy", "iou", "precision", "recall")] == [1.0] * 4
    assert class_metrics(accumulate(gt, pred), 4).iou is None


# 9, 10 ---------------------------------------------------------------------------

needs_e2e = pytest.mark.skipif(os.environ.get("LULCSEG_SKIP_E2E") == "1", reason="LULCSEG_SKIP_E2E=1")


def run_pipeline(base: Path) -> float:
    t0 = time.perf_counter()
    common = ["--profile", "synthetic", "--data", str(base / "data"), "--out", str(base / "out")]
    for cmd in ("synth", "tile", "augment", "train", "predict", "evaluate"):
        code = cli.main([cmd, *common])
        assert code == 0, f"{cmd} exited with {code}"
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    runs = []
    for name in ("run1", "run2"):
        base = tmp_path_factory.mktemp(name)
        runs.append((base, run_pipeline(base)))
    return runs


@needs_e2e
@pytest.mark.slow
def test_c09_end_to_end(e2e_runs):
    base, elapsed = e2e_runs[0]
    summary = json.loads((base / "out" / "evaluate" / "summary.json").read_text())
    epochs = PipelineConfig(**cli.SYNTHETIC_PROFILE).train.epochs
    print(f"mIoU {summary['mean_iou']:.4f}, weighted accuracy {summary['weighted']['accuracy']:.4f}, "
          f"boundary err {summary['boundary_error_rate']:.4f} vs interior {summary['interior_error_rate']:.4f}, "
          f"{elapsed:.0f}s, {epochs} epochs")
    assert epochs <= 15
    with open(base / "out" / "split.json") as fh:
        split = json.load(fh)
    assert split["test"] and not set(split["test"]) & set(split["train"])
    assert len(split["train"]) + len(split["test"]) == 40
    assert summary["mean_iou"] >= 0.90
    assert summary["weighted"]["accuracy"] >= 0.93
    assert summary["boundary_error_rate"] >= 2 * summary["interior_error_rate"]
    assert summary["tile_merge_consistent"]
    assert elapsed < E2E_BUDGET_S


@needs_e2e
@pytest.mark.slow
def test_c10_determinism(e2e_runs):
    (a, _), (b, _) = e2e_runs
    ev_a, ev_b = a / "out" / "evaluate", b / "out" / "evaluate"
    files = sorted(p.relative_to(ev_a) for p in ev_a.rglob("*") if p.is_file())
    assert Path("reports.csv") in files and Path("summary.json") in files
    for rel in files:
        assert (ev_a / rel).read_bytes() == (ev_b / rel).read_bytes(), rel
    with open(ev_a / "reports.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 8 * 6
