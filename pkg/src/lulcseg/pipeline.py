"""File-level pipeline stages: synth/ingest, tile, augment, train, predict, evaluate, bench.

On-disk layout (``root`` is ``PipelineConfig.dataset_root``, ``out`` is
``PipelineConfig.out``)::

    root/images/<scene>.png          scene image (RGB)
    root/gt/<scene>.png              palette-coloured ground truth
    out/split.json                   train/test scene lists
    out/tiles/<scene>/manifest.json  grid sidecar
    out/tiles/<scene>/image/<scene>_r<row>_c<col>.png
    out/tiles/<scene>/gt/<scene>_r<row>_c<col>.png
    out/augmented/<scene>/{image,gt}/<tile>_aug<k>.png   (k >= 1 only)
    out/train/checkpoint.npz, loss_log.csv, epoch_log.csv
    out/predict/<scene>/tiles/<tile>.png, out/predict/<scene>/<scene>_mosaic.png
    out/evaluate/reports.csv, aggregate.csv, aggregate.txt, summary.json,
    out/evaluate/error_maps/<scene>.png
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import augment as aug
from . import metrics, synth, tiling
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .model import FastFCN, image_to_tensor, predict_batch, train_step
from .raster import (ClassMask, DEFAULT_PALETTE, Palette, decode_mask, encode_mask, load_raster,
                     save_raster)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class DataError(Exception):
    """Input data missing, unpaired, or inconsistent."""


def palette_for(cfg: PipelineConfig) -> Palette:
    return Palette.from_file(cfg.palette_file) if cfg.palette_file else DEFAULT_PALETTE


def _pool_map(cfg: PipelineConfig, fn, items):
    items = list(items)
    if cfg.workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
        return list(ex.map(fn, items))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# dataset discovery -----------------------------------------------------------

def _find(folder: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = folder / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def list_scenes(root: Path) -> list[tuple[str, Path, Path]]:
    """``(scene, image_path, gt_path)`` for every paired scene, sorted by id."""
    img_dir, gt_dir = root / "images", root / "gt"
    if not img_dir.is_dir() or not gt_dir.is_dir():
        raise DataError(f"{root} must contain images/ and gt/ folders")
    images = {p.stem: p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    gts = {p.stem: p for p in gt_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    unpaired = sorted(set(images) ^ set(gts))
    if unpaired:
        raise DataError(f"unpaired scenes in {root}: {', '.join(unpaired[:10])}")
    if not images:
        raise DataError(f"no scenes found in {root}")
    return [(s, images[s], gts[s]) for s in sorted(images)]


def make_split(scenes: list[str], test_fraction: float, seed: int) -> dict:
    """Scene-level split, seeded; neither side is left empty when possible."""
    n = len(scenes)
    n_test = min(max(1, int(round(test_fraction * n))), n - 1) if n > 1 else 0
    order = np.random.default_rng(seed).permutation(n)
    test = sorted(scenes[i] for i in order[:n_test])
    train = sorted(scenes[i] for i in order[n_test:])
    return {"seed": seed, "test_fraction": test_fraction, "train": train, "test": test}


def read_split(cfg: PipelineConfig) -> dict:
    path = cfg.out / "split.json"
    if not path.exists():
        raise DataError(f"{path} not found; run the tile stage first")
    return json.loads(path.read_text())


# synth / ingest --------------------------------------------------------------

def synth_dataset(cfg: PipelineConfig, proportions=None) -> list[str]:
    palette = palette_for(cfg)
    root = cfg.dataset_root
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    scenes = synth.generate_dataset(cfg.synth_scenes, cfg.seed, cfg.synth_size, cfg.synth_region_scale,
                                    proportions)
    for scene, image, mask in scenes:
        save_raster(image, root / "images" / f"{scene}.png")
        save_raster(encode_mask(mask, palette), root / "gt" / f"{scene}.png")
    return [s for s, _, _ in scenes]


def ingest(cfg: PipelineConfig, src: Path, label_suffix: str = "_label") -> list[str]:
    """Copy a GID-style folder (``<id>.tif`` + ``<id>_label.tif``) into the dataset layout.

    Images lose any fourth band; ground truth is checked against the palette.
    """
    src = Path(src)
    palette = palette_for(cfg)
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    labels = {p.stem[: -len(label_suffix)]: p for p in files if p.stem.endswith(label_suffix)}
    images = {p.stem: p for p in files if not p.stem.endswith(label_suffix)}
    unpaired = sorted(set(images) ^ set(labels))
    if unpaired:
        raise DataError(f"unpaired scenes under {src}: {', '.join(unpaired[:10])}")
    if not images:
        raise DataError(f"no scenes found under {src}")
    root = cfg.dataset_root
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    for scene in sorted(images):
        image = load_raster(images[scene]).to_rgb()
        gt = load_raster(labels[scene]).to_rgb()
        if (image.width, image.height) != (gt.width, gt.height):
            raise DataError(f"{scene}: image {image.width}x{image.height} vs GT {gt.width}x{gt.height}")
        decode_mask(gt, palette, strict=True)
        save_raster(image, root / "images" / f"{scene}.png")
        save_raster(gt, root / "gt" / f"{scene}.png")
    return sorted(images)


# tile -------------------------------------------------------------------------

def tile_dataset(cfg: PipelineConfig) -> dict:
    scenes = list_scenes(cfg.dataset_root)
    palette = palette_for(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    split = make_split([s for s, _, _ in scenes], cfg.test_fraction, cfg.seed)
    _write_json(cfg.out / "split.json", split)

    def one(entry):
        scene, img_path, gt_path = entry
        image = load_raster(img_path).to_rgb()
        gt = load_raster(gt_path).to_rgb()
        if (image.width, image.height) != (gt.width, gt.height):
            raise DataError(f"{scene}: image {image.width}x{image.height} vs GT {gt.width}x{gt.height}")
        decode_mask(gt, palette, strict=True)
        grid = tiling.plan_grid(image.width, image.height, cfg.tile_size)
        base = cfg.out / "tiles" / scene
        for sub in ("image", "gt"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        for ref, it, gtt in zip(grid.refs(), tiling.extract_tiles(image, grid), tiling.extract_tiles(gt, grid)):
            name = tiling.tile_name(scene, ref)
            save_raster(it, base / "image" / f"{name}.png")
            save_raster(gtt, base / "gt" / f"{name}.png")
        tiling.write_manifest(base / "manifest.json", grid, scene=scene)
        return scene, len(grid)

    counts = dict(_pool_map(cfg, one, scenes))
    return {"scenes": len(counts), "tiles": sum(counts.values()), "per_scene": counts}


def scene_tiles(cfg: PipelineConfig, scene: str) -> tuple[tiling.TileGrid, list[str]]:
    manifest = cfg.out / "tiles" / scene / "manifest.json"
    if not manifest.exists():
        raise DataError(f"missing tiles for scene {scene}; run the tile stage first")
    grid, _ = tiling.read_manifest(manifest)
    return grid, [tiling.tile_name(scene, r) for r in grid.refs()]


# augment ---------------------------------------------------------------------

def augment_tiles(cfg: PipelineConfig) -> int:
    """Materialise every non-identity op of the set for the training split."""
    ops = aug.parse_augment_set(cfg.augment_set)
    split = read_split(cfg)
    palette = palette_for(cfg)
    shutil.rmtree(cfg.out / "augmented", ignore_errors=True)

    def one(scene):
        _, names = scene_tiles(cfg, scene)
        src = cfg.out / "tiles" / scene
        dst = cfg.out / "augmented" / scene
        written = 0
        for name in names:
            image = load_raster(src / "image" / f"{name}.png")
            gt = load_raster(src / "gt" / f"{name}.png")
            mask = decode_mask(gt, palette)
            for k, op in enumerate(ops):
                if op is aug.AugmentOp.Identity:
                    continue
                ai, am = aug.apply(op, image, mask)
                (dst / "image").mkdir(parents=True, exist_ok=True)
                (dst / "gt").mkdir(parents=True, exist_ok=True)
                save_raster(ai, dst / "image" / f"{name}_aug{k}.png")
                save_raster(encode_mask(am, palette), dst / "gt" / f"{name}_aug{k}.png")
                written += 1
        return written

    return sum(_pool_map(cfg, one, split["train"]))


# train -----------------------------------------------------------------------

def training_samples(cfg: PipelineConfig) -> list[tuple[Path, Path]]:
    """(image, gt) paths: per scene, per tile, every op of the set in order."""
    ops = aug.parse_augment_set(cfg.augment_set)
    split = read_split(cfg)
    samples = []
    for scene in split["train"]:
        _, names = scene_tiles(cfg, scene)
        for name in names:
            for k, op in enumerate(ops):
                if op is aug.AugmentOp.Identity:
                    base, fname = cfg.out / "tiles" / scene, f"{name}.png"
                else:
                    base, fname = cfg.out / "augmented" / scene, f"{name}_aug{k}.png"
                if not (base / "image" / fname).exists():
                    raise DataError(f"missing training tile {base / 'image' / fname}; run augment first")
                samples.append((base / "image" / fname, base / "gt" / fname))
    return samples


def _load_batch(samples, palette):
    images = np.stack([load_raster(i).data for i, _ in samples])
    masks = np.stack([decode_mask(load_raster(g), palette).labels for _, g in samples])
    return images, masks


def train_model(cfg: PipelineConfig, resume: Path | None = None) -> dict:
    tc = cfg.train
    palette = palette_for(cfg)
    samples = training_samples(cfg)
    if not samples:
        raise DataError("no training tiles")
    out = cfg.out / "train"
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.npz"
    step_log, epoch_log = out / "loss_log.csv", out / "epoch_log.csv"

    if resume is not None:
        model, meta = load_checkpoint(resume)
        start_epoch = int(meta["state"].get("epoch", 0))
        step = int(meta["state"].get("step", 0))
        if resume != ckpt_path:
            shutil.copyfile(resume, ckpt_path)
        _truncate_log(step_log, lambda row: int(row["step"]) < step)
        _truncate_log(epoch_log, lambda row: int(row["epoch"]) < start_epoch)
    else:
        model = FastFCN(cfg.backbone, cfg.jpu, len(palette) - 1, seed=tc.seed)
        start_epoch, step = 0, 0
        for path, header in ((step_log, "step,epoch,loss,lr\n"), (epoch_log, "epoch,mean_loss,lr\n")):
            path.write_text(header)

    for epoch in range(start_epoch, tc.epochs):
        perm = np.random.default_rng([tc.seed, epoch]).permutation(len(samples))
        weighted_sum, seen = 0.0, 0
        with open(step_log, "a") as fh:
            for i in range(0, len(perm), tc.batch_size):
                batch = [samples[j] for j in perm[i : i + tc.batch_size]]
                images, masks = _load_batch(batch, palette)
                loss = train_step(model, image_to_tensor(images), masks, tc)
                fh.write(f"{step},{epoch},{loss:.10g},{tc.learning_rate:g}\n")
                weighted_sum += loss * len(batch)
                seen += len(batch)
                step += 1
        mean_loss = weighted_sum / seen
        with open(epoch_log, "a") as fh:
            fh.write(f"{epoch},{mean_loss:.10g},{tc.learning_rate:g}\n")
        log.info("epoch %d mean loss %.4f", epoch, mean_loss)
        save_checkpoint(ckpt_path, model, tc, {"epoch": epoch + 1, "step": step})
    if start_epoch >= tc.epochs:
        save_checkpoint(ckpt_path, model, tc, {"epoch": start_epoch, "step": step})
    return {"checkpoint": str(ckpt_path), "steps": step, "samples": len(samples)}


def _truncate_log(path: Path, keep):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
        fh.seek(0)
        header = fh.readline()
    with open(path, "w") as fh:
        fh.write(header)
        for row in rows:
            if keep(row):
                fh.write(",".join(row.values()) + "\n")


# predict ---------------------------------------------------------------------

def predict_scenes(cfg: PipelineConfig, checkpoint: Path) -> dict:
    model, _ = load_checkpoint(checkpoint)
    palette = palette_for(cfg)
    if model.num_classes != len(palette) - 1:
        raise DataError(f"checkpoint predicts {model.num_classes} classes, palette has {len(palette) - 1}")
    if cfg.tile_size % 32:
        raise DataError(f"tile size {cfg.tile_size} is not divisible by 32")
    split = read_split(cfg)

    def one(scene):
        grid, names = scene_tiles(cfg, scene)
        if grid.tile_size != cfg.tile_size:
            raise DataError(f"{scene}: tiles are {grid.tile_size}px, config says {cfg.tile_size}")
        images = np.stack([load_raster(cfg.out / "tiles" / scene / "image" / f"{n}.png").data for n in names])
        labels = predict_batch(model, images, batch_size=cfg.train.batch_size)
        dst = cfg.out / "predict" / scene
        (dst / "tiles").mkdir(parents=True, exist_ok=True)
        masks = [ClassMask(l) for l in labels]
        for name, m in zip(names, masks):
            save_raster(encode_mask(m, palette), dst / "tiles" / f"{name}.png")
        mosaic = tiling.stitch(masks, grid)
        save_raster(encode_mask(mosaic, palette), dst / f"{scene}_mosaic.png")
        return len(names)

    counts = _pool_map(cfg, one, split["test"])
    return {"scenes": len(counts), "tiles": sum(counts)}


# evaluate ----------------------------------------------------------------------

def boundary_band(labels: np.ndarray, width: int = 3) -> np.ndarray:
    """Pixels with a different label within ``width`` pixels (square window)."""
    size = 2 * width + 1
    lab = labels.astype(np.int16)
    return ndimage.maximum_filter(lab, size=size, mode="nearest") != ndimage.minimum_filter(
        lab, size=size, mode="nearest"
    )


def evaluate_scenes(cfg: PipelineConfig, band_width: int = 3) -> dict:
    palette = palette_for(cfg)
    k = len(palette) - 1
    names = palette.names[1:]
    split = read_split(cfg)
    out = cfg.out / "evaluate"
    (out / "error_maps").mkdir(parents=True, exist_ok=True)

    def one(scene):
        grid, tile_names = scene_tiles(cfg, scene)
        mosaic_path = cfg.out / "predict" / scene / f"{scene}_mosaic.png"
        if not mosaic_path.exists():
            raise DataError(f"missing prediction for scene {scene}; run predict first")
        pred = decode_mask(load_raster(mosaic_path), palette)
        gt_path = _find(cfg.dataset_root / "gt", scene)
        if gt_path is None:
            raise DataError(f"missing ground truth for scene {scene}")
        gt_full = decode_mask(load_raster(gt_path).to_rgb(), palette)
        gt = ClassMask(gt_full.labels[: grid.covered_height, : grid.covered_width])
        cm = metrics.accumulate(gt, pred, k)

        tile_cm = metrics.ConfusionMatrix.empty(k)
        for name in tile_names:
            tp = decode_mask(load_raster(cfg.out / "predict" / scene / "tiles" / f"{name}.png"), palette)
            tg = decode_mask(load_raster(cfg.out / "tiles" / scene / "gt" / f"{name}.png"), palette)
            tile_cm = metrics.merge(tile_cm, metrics.accumulate(tg, tp, k))

        save_raster(metrics.error_map(gt, pred), out / "error_maps" / f"{scene}.png")
        counted = gt.labels != 0
        wrong = counted & (gt.labels != pred.labels)
        band = boundary_band(gt.labels, band_width) & counted
        interior = counted & ~band
        return (metrics.weighted_report(cm, scene), tile_cm == cm,
                (int(wrong[band].sum()), int(band.sum()), int(wrong[interior].sum()), int(interior.sum())))

    results = _pool_map(cfg, one, split["test"])
    if not results:
        raise DataError("no test scenes to evaluate")
    reports = [r for r, _, _ in results]
    agg = metrics.aggregate_images(reports, "aggregate")
    (out / "reports.csv").write_text(metrics.reports_to_csv(reports, names))
    (out / "aggregate.csv").write_text(metrics.reports_to_csv([agg], names))
    (out / "aggregate.txt").write_text(
        "\n".join(metrics.format_table(r, names) for r in reports + [agg])
    )
    bw, bn, iw, inn = (sum(v[i] for _, _, v in results) for i in range(4))
    summary = {
        "scenes": len(reports),
        "mean_iou": agg.mean_iou,
        "weighted": {m: agg.weighted.rendered(m) for m in metrics.METRICS},
        "tile_merge_consistent": all(ok for _, ok, _ in results),
        "boundary_band_width": band_width,
        "boundary_error_rate": bw / bn if bn else None,
        "interior_error_rate": iw / inn if inn else None,
    }
    _write_json(out / "summary.json", summary)
    return summary


# bench -----------------------------------------------------------------------

def bench(cfg: PipelineConfig, size: int = 512, repeats: int = 3, batch: int = 1) -> list[dict]:
    """Time and trace peak allocation of the JPU path against the dilated path."""
    model = FastFCN(cfg.backbone, cfg.jpu, seed=cfg.seed)
    x = np.random.default_rng(cfg.seed).uniform(-1, 1, (batch, 3, size, size)).astype(np.float32)

    def jpu_path():
        feats = model.backbone_forward(x)
        return model.jpu_forward(*feats[2:])

    rows = []
    for name, fn in (("jpu", jpu_path), ("dilated", lambda: model.dilated_reference_forward(x))):
        fn()  # warm-up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            y = fn()
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        fn()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append({
            "path": name, "size": size, "repeats": repeats,
            "mean_s": float(np.mean(times)), "min_s": float(np.min(times)), "std_s": float(np.std(times)),
            "peak_bytes": int(peak), "out_shape": "x".join(str(d) for d in y.shape),
        })
    out = cfg.out / "bench"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows
