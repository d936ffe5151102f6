"""Score-based point-cloud denoising.

A densely connected edge-conv network gives each noisy point a feature h_i;
a score MLP maps (x - x_i, h_i) to a displacement estimate S_i(x). Training
matches S_i to the vector from x to its nearest clean point over a discrete
neighbourhood of x_i. Inference is gradient ascent with the ensemble score
(the mean of S_j over the nearest anchors).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import GeometryError, as_points, knn_query
from ..numerics import MLP, Module, Tensor
from ..numerics import T
from .completion import EdgeConv, batched_knn

ScoreFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class DenoiserConfig:
    knn_k: int = 16  # graph degree in the feature extractor; 8 is too few to see the normal through sigma noise
    k_score: int = 8  # neighbourhood size for training samples and the ensemble
    sigma: float = 0.02
    growth: int = 24
    stages: int = 3
    score_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.k_score < 1:
            raise ValueError("k_score must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def feat_dim(self) -> int:
        return self.growth * self.stages

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepSchedule:
    steps: int = 30
    alpha0: float = 0.2
    decay: float = 0.95
    alphas: list[float] | None = field(default=None)

    def __post_init__(self):
        if self.alphas is not None:
            self.steps = len(self.alphas)
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if any(a <= 0 for a in self.step_sizes()):
            raise ValueError("step sizes must be positive")

    def step_sizes(self) -> list[float]:
        if self.alphas is not None:
            return list(self.alphas)
        return [self.alpha0 * self.decay ** t for t in range(1, self.steps + 1)]


class DenoiseFeatureNet(Module):
    """Edge-conv stages with concatenative skips; stage one sees only x_j - x_i."""

    def __init__(self, rng, cfg: DenoiserConfig):
        self.k = cfg.knn_k
        self.unit = cfg.sigma
        g = cfg.growth
        self.convs = [EdgeConv(rng, 3, g, relative_only=True)]
        for s in range(1, cfg.stages):
            self.convs.append(EdgeConv(rng, s * g, g))

    def __call__(self, pts: np.ndarray) -> Tensor:
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        if pts.shape[1] <= self.k:
            raise GeometryError(f"need more than knn_k={self.k} points, got {pts.shape[1]}")
        x = Tensor(pts / self.unit)
        feats = [T.relu(self.convs[0](x, batched_knn(pts, self.k)))]
        for conv in self.convs[1:]:
            h = feats[0] if len(feats) == 1 else T.concat(feats, axis=-1)
            feats.append(T.relu(conv(h, batched_knn(h.data, self.k))))
        return T.concat(feats, axis=-1)


class ScoreNet(Module):
    """Works in units of the noise scale: offsets are divided by sigma, outputs multiplied back."""

    def __init__(self, rng, cfg: DenoiserConfig):
        self.unit = cfg.sigma
        self.mlp = MLP(rng, [3 + cfg.feat_dim, cfg.score_hidden, cfg.score_hidden, 3])

    def __call__(self, offsets, feats: Tensor) -> Tensor:
        """``offsets`` (..., 3) = x - x_i, ``feats`` (..., F) = h_i, same leading shape."""
        offsets = T.as_tensor(offsets) * (1.0 / self.unit)
        return self.mlp(T.concat([offsets, feats], axis=-1)) * self.unit


class ScoreDenoiser(Module):
    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.features = DenoiseFeatureNet(rng, cfg)
        self.score = ScoreNet(rng, cfg)

    def extract(self, noisy) -> Tensor:
        """(N, F) features of a single cloud."""
        f = self.features(as_points(noisy))
        return T.reshape(f, f.shape[1:])


def extract_denoise_features(noisy, model: ScoreDenoiser) -> np.ndarray:
    return model.extract(noisy).data


def local_score(x, anchor_index: int, features: np.ndarray, noisy, model: ScoreDenoiser) -> np.ndarray:
    """S_i(x) = Score(x - x_i, h_i) for one or many query points."""
    pts = as_points(noisy)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = np.broadcast_to(features[anchor_index], (x.shape[0], features.shape[1]))
    out = model.score(x - pts[anchor_index], Tensor(h)).data
    return out[0] if out.shape[0] == 1 else out


def ground_truth_score(x, clean) -> np.ndarray:
    """Vector from each x to its nearest clean point (lowest index on ties)."""
    c = as_points(clean)
    if c.shape[0] == 0:
        raise GeometryError("clean cloud is empty")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx = knn_query(c, x, 1)[:, 0]
    return c[idx] - x


def denoise_loss(noisy, clean, model: ScoreDenoiser, k_score: int | None = None) -> Tensor:
    """Mean over anchors of the mean squared score error on {x_i} + its k nearest neighbours."""
    pts = as_points(noisy)
    k = model.cfg.k_score if k_score is None else k_score
    n = pts.shape[0]
    if n <= k:
        raise GeometryError(f"need more than k_score={k} points")
    nbr = knn_query(pts, pts, k, exclude_self=True)
    samples_idx = np.concatenate([np.arange(n)[:, None], nbr], axis=1)  # (N, k+1)
    samples = pts[samples_idx]
    offsets = samples - pts[:, None, :]
    c = as_points(clean)
    _, near = cKDTree(c).query(samples.reshape(-1, 3))
    target = (c[near] - samples.reshape(-1, 3)).reshape(samples.shape)
    h = model.extract(pts)  # (N, F)
    hb = T.broadcast_to(T.reshape(h, (n, 1, h.shape[-1])), (n, k + 1, h.shape[-1]))
    pred = model.score(offsets, hb)
    err = T.square(pred - target).sum(axis=-1)  # (N, k+1)
    return err.mean()


def ensemble_score(x, noisy, features: np.ndarray, model: ScoreDenoiser,
                   k_score: int | None = None) -> np.ndarray:
    """Mean of S_j(x) over the k nearest anchors j of every query x."""
    anchors = as_points(noisy)
    k = model.cfg.k_score if k_score is None else k_score
    k = min(k, anchors.shape[0])
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if k == anchors.shape[0]:
        idx = np.broadcast_to(np.arange(k), (x.shape[0], k))
    else:
        idx = knn_query(anchors, x, k)
    offsets = x[:, None, :] - anchors[idx]
    s = model.score(offsets, Tensor(features[idx])).data
    return s.mean(axis=1)


def learned_score_fn(model: ScoreDenoiser, noisy) -> ScoreFn:
    """Score field with features extracted once from ``noisy`` and frozen."""
    anchors = as_points(noisy).copy()
    feats = extract_denoise_features(anchors, model)
    return lambda pts: ensemble_score(pts, anchors, feats, model)


def sphere_score(center, radius: float) -> ScoreFn:
    """Exact displacement to the sphere surface: (r - |x - c|) * unit(x - c)."""
    center = np.asarray(center, dtype=np.float64)

    def fn(pts):
        d = pts - center
        r = np.linalg.norm(d, axis=1, keepdims=True)
        return (radius - r) * d / r

    return fn


def denoise(noisy, schedule: StepSchedule, score_fn: ScoreFn) -> np.ndarray:
    x = as_points(noisy).copy()
    for alpha in schedule.step_sizes():
        x = x + alpha * score_fn(x)
    return x
