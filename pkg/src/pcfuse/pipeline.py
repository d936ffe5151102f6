"""Training, evaluation and inference orchestration behind the CLI."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .geometry import (GeometryError, PointCloud, as_points, bbox_diagonal, denormalize, fps_indices,
                       normalize_unit, write_xyz)
from .metrics import CSV_HEADER, MetricReport, aggregate, chamfer, evaluate_pair
from .models.completion import CompletionModel, ModelConfig
from .models.denoise import (DenoiserConfig, ScoreDenoiser, denoise, denoise_loss, learned_score_fn)
from .models.losses import completion_loss
from .numerics import Adam, CheckpointError, load, save
from .synth import ShapeSpec, _random_params, generate_shape, load_index, load_sample
from .synth import CorpusConfig

Log = Callable[[str], None]


class NumericError(RuntimeError):
    """Raised when a training loss stops being finite."""


def _quiet(_msg: str) -> None:
    pass


# -- checkpoints with a config sidecar ----------------------------------------
def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_model(path, model, kind: str) -> None:
    path = Path(path)
    save(path, model.state_dict())
    _sidecar(path).write_text(json.dumps({"kind": kind, "config": model.cfg.to_dict()},
                                         indent=1, sort_keys=True))


def load_model(path, kind: str, config=None):
    """Rebuild a model from a checkpoint; ``config`` overrides the sidecar."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if config is None:
        side = _sidecar(path)
        if not side.exists():
            raise CheckpointError(f"{path}: missing config sidecar {side.name}")
        meta = json.loads(side.read_text())
        if meta.get("kind") != kind:
            raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
        config = meta["config"]
    if kind == "completion":
        cfg = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config)
        model = CompletionModel(cfg)
    else:
        cfg = config if isinstance(config, DenoiserConfig) else DenoiserConfig(**config)
        model = ScoreDenoiser(cfg)
    model.load_state_dict(load(path))
    return model


# -- completion data ----------------------------------------------------------
@dataclass
class Prepared:
    id: str
    model_input: np.ndarray  # (proxy_count, 3) FPS subset of the partial
    partial: np.ndarray
    clean: np.ndarray
    coarse_target: np.ndarray
    views: np.ndarray | None


def model_input(partial: np.ndarray, proxy_count: int) -> np.ndarray:
    if partial.shape[0] < proxy_count:
        raise GeometryError(f"partial cloud has {partial.shape[0]} points, model needs {proxy_count}")
    return partial[fps_indices(partial, proxy_count, 0)]


def prepare_split(cfg: RunConfig, split: str, with_views: bool) -> list[Prepared]:
    root = Path(cfg.corpus)
    index = load_index(root)
    if index.get("schema_version") != 1:
        raise GeometryError(f"{root}: unsupported corpus schema {index.get('schema_version')!r}")
    ccfg = CorpusConfig(**index["config"])
    mcfg = cfg.model_config()
    if with_views and ccfg.resolution != mcfg.image_size:
        raise GeometryError(f"corpus views are {ccfg.resolution}px but the model expects {mcfg.image_size}px")
    out = []
    for meta in index["samples"]:
        if meta["split"] != split:
            continue
        s = load_sample(root, meta, ccfg, with_views=with_views)
        clean, partial = s.clean.points, s.partial.points
        out.append(Prepared(
            id=s.id,
            model_input=model_input(partial, mcfg.proxy_count),
            partial=partial,
            clean=clean,
            coarse_target=clean[fps_indices(clean, min(mcfg.query_count, clean.shape[0]), 0)],
            views=s.views.as_array() if with_views else None,
        ))
    return out


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def predict(model: CompletionModel, items: list[Prepared], batch_size: int = 8) -> list[np.ndarray]:
    preds = []
    for idx in _batches(np.arange(len(items)), batch_size):
        x = np.stack([items[i].model_input for i in idx])
        views = np.stack([items[i].views for i in idx]) if model.has_fusion else None
        _, dense = model(x, views)
        preds.extend(dense.data)
    return preds


def evaluate_predictions(preds, items: list[Prepared], cfg: RunConfig) -> list[MetricReport]:
    def one(pair):
        return evaluate_pair(pair[0], pair[1].clean, cfg.threshold, cfg.emd_mode)
    # map keeps the input order, so results do not depend on scheduling
    with ThreadPoolExecutor(max_workers=max(1, cfg.eval_workers)) as pool:
        return list(pool.map(one, zip(preds, items)))


def write_reports(out: Path, ids: list[str], reports: list[MetricReport]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for sid, r in zip(ids, reports):
            w.writerow([sid] + [repr(float(v)) for v in r.csv_row(sid)[1:]])
    mirror = [{"id": sid, **r.to_dict()} for sid, r in zip(ids, reports)]
    (out / "per_sample.json").write_text(json.dumps(mirror, indent=1, sort_keys=True))
    agg = aggregate(reports)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=1, sort_keys=True))
    return agg


# -- training -----------------------------------------------------------------
def train_completion(cfg: RunConfig, out=None, log: Log = _quiet) -> dict:
    out = Path(out or cfg.out)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    fusion = cfg.fusion
    train = prepare_split(cfg, "train", with_views=fusion)
    test = prepare_split(cfg, "test", with_views=fusion)
    if not train:
        raise GeometryError(f"{cfg.corpus}: training split is empty")
    model = CompletionModel(cfg.model_config())
    opt = Adam(model.parameters(), cfg.optim.lr, cfg.optim.betas, cfg.optim.eps)
    order_rng = np.random.default_rng([cfg.seed, 2])
    losses, checkpoints = [], []
    total_steps = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(order_rng.permutation(len(train)), cfg.batch_size):
            opt.lr = cfg.optim.lr_at(step, total_steps)
            step += 1
            batch = [train[i] for i in idx]
            x = np.stack([b.model_input for b in batch])
            views = np.stack([b.views for b in batch]) if fusion else None
            coarse, dense = model(x, views)
            loss = completion_loss(coarse, dense, [b.clean for b in batch],
                                   [b.coarse_target for b in batch])
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.project_constraints()
            total += loss.item() * len(batch)
        losses.append(total / len(train))
        ck = ckdir / f"epoch_{epoch:03d}.pcfw"
        save_model(ck, model, "completion")
        checkpoints.append(str(ck.relative_to(out)))
        log(f"epoch {epoch}/{cfg.epochs} loss {losses[-1]:.6f}")
    t_train = time.perf_counter() - t0
    final = out / "model.pcfw"
    save_model(final, model, "completion")
    manifest = {"kind": "completion", "config": cfg.to_dict(), "epoch_loss": losses,
                "checkpoints": checkpoints, "final_checkpoint": final.name}
    t1 = time.perf_counter()
    if test:
        reports = evaluate_predictions(predict(model, test, cfg.batch_size), test, cfg)
        manifest["test_aggregate"] = write_reports(out / "eval", [t.id for t in test], reports)
        manifest["per_sample_csv"] = "eval/per_sample.csv"
    manifest["wall_clock_s"] = {"train": t_train, "eval": time.perf_counter() - t1}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def evaluate(cfg: RunConfig, out, checkpoint=None, baseline: str | None = None) -> dict:
    """Per-sample CSV + aggregate JSON for a checkpoint or a baseline on the test split."""
    if (checkpoint is None) == (baseline is None):
        raise ValueError("give exactly one of a checkpoint or a baseline")
    out = Path(out)
    if baseline is not None:
        if baseline not in ("copy-partial", "ground-truth"):
            raise ValueError(f"unknown baseline {baseline!r}")
        items = prepare_split(cfg, "test", with_views=False)
        preds = [t.partial if baseline == "copy-partial" else t.clean for t in items]
    else:
        model = load_model(checkpoint, "completion")
        cfg.fusion = model.has_fusion
        cfg.model = model.cfg
        items = prepare_split(cfg, "test", with_views=model.has_fusion)
        preds = predict(model, items, cfg.batch_size)
    if not items:
        raise GeometryError(f"{cfg.corpus}: test split is empty")
    reports = evaluate_predictions(preds, items, cfg)
    return write_reports(out, [t.id for t in items], reports)


# -- denoiser -----------------------------------------------------------------
def denoise_shapes(cfg: RunConfig, split: str) -> list[np.ndarray]:
    dcfg = cfg.denoise_train
    n = dcfg.train_shapes if split == "train" else dcfg.test_shapes
    rng = np.random.default_rng([cfg.seed, 3 if split == "train" else 4])
    shapes = []
    for i in range(n):
        family = dcfg.families[i % len(dcfg.families)]
        params = _random_params(family, rng)
        shapes.append(generate_shape(ShapeSpec(family, params, dcfg.points, int(rng.integers(2**31)))).points)
    return shapes


def add_noise(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return clean + sigma * rng.standard_normal(clean.shape)


def train_denoiser(cfg: RunConfig, out=None, log: Log = _quiet) -> dict:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    dcfg = cfg.denoise_train
    train, test = denoise_shapes(cfg, "train"), denoise_shapes(cfg, "test")
    model = ScoreDenoiser(cfg.denoiser)
    opt = Adam(model.parameters(), dcfg.lr, cfg.optim.betas, cfg.optim.eps)
    sigma = cfg.denoiser.sigma
    losses, checkpoints = [], []
    for epoch in range(1, dcfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, 5, epoch])
        order = rng.permutation(len(train))
        total = 0.0
        for i in order:
            noisy = add_noise(train[i], sigma, rng)
            loss = denoise_loss(noisy, train[i], model)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite denoiser loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / len(train))
        ck = out / "checkpoints" / f"epoch_{epoch:03d}.pcfw"
        ck.parent.mkdir(exist_ok=True)
        save_model(ck, model, "denoiser")
        checkpoints.append(str(ck.relative_to(out)))
        log(f"epoch {epoch}/{dcfg.epochs} loss {losses[-1]:.6e}")
    t_train = time.perf_counter() - t0
    save_model(out / "denoiser.pcfw", model, "denoiser")
    held_out = evaluate_denoiser(model, test, cfg)
    manifest = {"kind": "denoiser", "config": cfg.to_dict(), "epoch_loss": losses,
                "checkpoints": checkpoints, "final_checkpoint": "denoiser.pcfw",
                "held_out": held_out,
                "wall_clock_s": {"train": t_train, "eval": time.perf_counter() - t0 - t_train}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def evaluate_denoiser(model: ScoreDenoiser, shapes: list[np.ndarray], cfg: RunConfig) -> list[dict]:
    rng = np.random.default_rng([cfg.seed, 6])
    rows = []
    for clean in shapes:
        noisy = add_noise(clean, cfg.denoiser.sigma, rng)
        den = denoise(noisy, cfg.schedule, learned_score_fn(model, noisy))
        rows.append({"cd_l1_noisy": chamfer(noisy, clean, "L1"),
                     "cd_l1_denoised": chamfer(den, clean, "L1"),
                     "bbox_ratio": bbox_diagonal(den) / bbox_diagonal(clean)})
    return rows


# -- inference ----------------------------------------------------------------
def _in_frame(pts: np.ndarray) -> bool:
    return pts.size > 0 and np.abs(pts).max() <= 0.5 + 1e-6


def reconstruct(model: CompletionModel, partial, views=None) -> np.ndarray:
    """Dense completion of one partial cloud, returned in the input's frame."""
    pts = as_points(partial)
    rec = None
    if not _in_frame(pts):
        cloud, rec = normalize_unit(pts)
        pts = cloud.points
    if model.has_fusion and views is None:
        raise GeometryError("model requires views")
    arr = None if views is None else np.asarray(views.as_array() if hasattr(views, "as_array") else views)
    _, dense = model(model_input(pts, model.cfg.proxy_count)[None], None if arr is None else arr[None])
    out = dense.data[0]
    return out if rec is None else denormalize(PointCloud(out), rec).points


def denoise_cloud(model: ScoreDenoiser, cloud, schedule) -> np.ndarray:
    pts = as_points(cloud)
    return denoise(pts, schedule, learned_score_fn(model, pts))


def write_cloud(path, pts: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_xyz(path, PointCloud(pts))
