"""Point-proxy transformer completion network.

Pipeline: edge-conv extractor -> point proxies -> geometry-aware encoder ->
(optional image fusion) -> adaptive queries -> geometry-aware decoder ->
folding head. All tensors carry a leading batch axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..geometry import GeometryError
from ..numerics import MLP, Linear, Module, MultiHeadAttention, Parameter, ShapeError, Tensor
from ..numerics import T
from .fusion import CrossModalFusion, ImageEncoder


@dataclass
class ModelConfig:
    proxy_count: int = 128
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 3
    decoder_layers: int = 3
    query_count: int = 64
    fold_grid: int = 4
    knn_k: int = 8
    ff_mult: int = 2
    edge_dim: int = 32
    fold_hidden: int = 64
    fold_extent: float = 0.05
    lambda_init: float = 8.0
    mix_scale: float = 8.0
    coord_gain: float = 4.0
    anchor_centres: bool = True
    fusion: bool = False
    image_size: int = 64
    patch: int = 8
    img_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for k in ("proxy_count", "embed_dim", "heads", "encoder_layers", "decoder_layers",
                  "query_count", "fold_grid", "knn_k"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    @property
    def dense_count(self) -> int:
        return self.query_count * self.fold_grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- graph helpers ------------------------------------------------------------
def batched_knn(x: np.ndarray, k: int) -> np.ndarray:
    """(B, N, k) self-excluded neighbour indices; ties by lowest index."""
    b, n, _ = x.shape
    if n <= k:
        raise GeometryError(f"need more than knn_k={k} points, got {n}")
    diff = x[:, :, None, :] - x[:, None, :, :]
    d2 = np.einsum("bnmd,bnmd->bnm", diff, diff)
    d2[:, np.arange(n), np.arange(n)] = np.inf
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


def edge_features(x: Tensor, idx: np.ndarray, relative_only: bool = False) -> Tensor:
    """Per-edge features (B, N, k, 2C): concat(x_i, x_j - x_i); (B, N, k, C) if relative only."""
    b, n, c = x.shape
    k = idx.shape[-1]
    nbr = T.gather_rows(x, idx)
    centre = T.broadcast_to(T.reshape(x, (b, n, 1, c)), (b, n, k, c))
    diff = nbr - centre
    return diff if relative_only else T.concat([centre, diff], axis=-1)


class EdgeConv(Module):
    def __init__(self, rng, d_in: int, d_out: int, relative_only: bool = False):
        width = d_in if relative_only else 2 * d_in
        self.mlp = MLP(rng, [width, d_out, d_out])
        self.relative_only = relative_only

    def __call__(self, x: Tensor, idx: np.ndarray) -> Tensor:
        e = self.mlp(edge_features(x, idx, self.relative_only))
        return T.max_pool_set(e, axis=-2, keepdims=False)


class PointExtractor(Module):
    """Two edge-conv stages; the second graph is rebuilt in feature space."""

    def __init__(self, rng, cfg: ModelConfig):
        self.k = cfg.knn_k
        self.conv1 = EdgeConv(rng, 3, cfg.edge_dim)
        self.conv2 = EdgeConv(rng, cfg.edge_dim, cfg.embed_dim)

    def __call__(self, coords: np.ndarray) -> Tensor:
        x = Tensor(coords)
        h1 = T.relu(self.conv1(x, batched_knn(coords, self.k)))
        return self.conv2(h1, batched_knn(h1.data, self.k))


# -- transformer blocks -------------------------------------------------------
class DistanceBias(Module):
    """Attention logit bias ``-lam * |a_i - b_j|``; ``lam`` is kept >= 0 by projection."""

    def __init__(self, init: float):
        self.lam = Parameter(np.array([init]))

    def __call__(self, a, b) -> Tensor:
        return T.pairwise_distance(a, b) * (-1.0 * self.lam)

    def project(self) -> None:
        np.maximum(self.lam.data, 0.0, out=self.lam.data)


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.embed_dim
        self.attn = MultiHeadAttention(rng, d, cfg.heads)
        self.geo = DistanceBias(cfg.lambda_init)
        self.ff = MLP(rng, [d, cfg.ff_mult * d, d])

    def __call__(self, x: Tensor, coords: np.ndarray) -> Tensor:
        h = T.layer_norm(x)
        x = x + self.attn(h, h, h, self.geo(coords, coords))
        return x + self.ff(T.layer_norm(x))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.embed_dim
        self.self_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.self_geo = DistanceBias(cfg.lambda_init)
        self.cross_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.cross_geo = DistanceBias(cfg.lambda_init)
        self.ff = MLP(rng, [d, cfg.ff_mult * d, d])

    def __call__(self, q: Tensor, qc: Tensor, mem: Tensor, mem_coords: np.ndarray) -> Tensor:
        h = T.layer_norm(q)
        q = q + self.self_attn(h, h, h, self.self_geo(qc, qc))
        h = T.layer_norm(q)
        q = q + self.cross_attn(h, mem, mem, self.cross_geo(qc, mem_coords))
        return q + self.ff(T.layer_norm(q))


class QueryGenerator(Module):
    """Coarse centres and query embeddings from encoder features.

    The N -> M row reduction is a learned mixing matrix whose columns are a
    softmax over proxies of a linear score, so the result does not depend on
    proxy order. ``C = proj(mix @ lin(V)) / gain``; ``Q = MLP([gain * C, maxpool(lin2(V))])``.
    The gain moves coordinates between shape scale and unit scale in both directions.
    """

    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.embed_dim
        self.mix_score = Linear(rng, d, cfg.query_count, bias=False)
        self.coord_lin = Linear(rng, d, d, bias=False)
        self.coord_proj = Linear(rng, d, 3)
        self.pool_lin = Linear(rng, d, d)
        self.query_mlp = MLP(rng, [3 + d, d, d])
        self.m = cfg.query_count
        self.mix_scale = cfg.mix_scale
        self.gain = cfg.coord_gain

    def __call__(self, v: Tensor, coords=None) -> tuple[Tensor, Tensor]:
        b, _, d = v.shape
        v = T.layer_norm(v)
        mix = T.softmax(T.swapaxes(self.mix_score(v), -1, -2) * self.mix_scale)  # (B, M, N)
        centres = self.coord_proj(T.matmul(mix, self.coord_lin(v))) * (1.0 / self.gain)  # (B, M, 3)
        if coords is not None:
            centres = centres + T.matmul(mix, Tensor(coords))
        pooled = T.max_pool_set(self.pool_lin(v), axis=-2, keepdims=True)  # (B, 1, D)
        pooled = T.broadcast_to(pooled, (b, self.m, d))
        q = self.query_mlp(T.concat([centres * self.gain, pooled], axis=-1))
        return q, centres


def folding_grid(g: int, extent: float) -> np.ndarray:
    ticks = np.linspace(-extent, extent, g)
    gu, gv = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gu.ravel(), gv.ravel()], axis=1)


class FoldingHead(Module):
    """Deform a fixed g x g grid around each coarse centre.

    The first layer acts on concat(qfeat, grid); it is evaluated as
    ``qfeat @ W_q + grid @ W_g + b``, which is the same affine map. The grid
    enters divided by its extent so both inputs start at unit scale, and the
    offsets leave multiplied by it, so the perceptron never has to emit tiny numbers.
    """

    def __init__(self, rng, cfg: ModelConfig):
        d, hdim = cfg.embed_dim, cfg.fold_hidden
        self.layer1 = Linear(rng, d + 2, hdim)
        self.layer2 = Linear(rng, hdim, 3)
        self.grid = folding_grid(cfg.fold_grid, cfg.fold_extent)
        self.grid_in = self.grid / cfg.fold_extent
        self.extent = cfg.fold_extent

    def __call__(self, qfeat: Tensor, centres: Tensor) -> Tensor:
        b, m, d = qfeat.shape
        g2 = self.grid.shape[0]
        qfeat = T.layer_norm(qfeat)
        w = self.layer1.weight
        hq = T.matmul(qfeat, w[:d])  # (B, M, H)
        hg = T.matmul(Tensor(self.grid_in), w[d:]) + self.layer1.bias  # (G2, H)
        h = T.reshape(hq, (b, m, 1, -1)) + hg  # (B, M, G2, H)
        off = self.layer2(T.relu(h)) * self.extent  # (B, M, G2, 3)
        pts = T.reshape(centres, (b, m, 1, 3)) + off
        return T.reshape(pts, (b, m * g2, 3))


# -- full model ---------------------------------------------------------------
class CompletionModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.extractor = PointExtractor(rng, cfg)
        self.phi = MLP(rng, [3, cfg.embed_dim, cfg.embed_dim])
        self.encoder = [EncoderLayer(rng, cfg) for _ in range(cfg.encoder_layers)]
        self.queries = QueryGenerator(rng, cfg)
        self.decoder = [DecoderLayer(rng, cfg) for _ in range(cfg.decoder_layers)]
        self.head = FoldingHead(rng, cfg)
        if cfg.fusion:
            # separate stream: the point branch initialises identically with or without fusion
            frng = np.random.default_rng([cfg.seed, 1])
            self.image_encoder = ImageEncoder(frng, cfg.image_size, cfg.patch, cfg.img_dim)
            self.fusion = CrossModalFusion(frng, cfg.embed_dim, cfg.img_dim, cfg.heads)

    @property
    def has_fusion(self) -> bool:
        return self.cfg.fusion

    def project_constraints(self) -> None:
        for layer in self.encoder:
            layer.geo.project()
        for layer in self.decoder:
            layer.self_geo.project()
            layer.cross_geo.project()

    # individual stages, exposed for tests and tools
    def extract(self, coords: np.ndarray) -> Tensor:
        return self.extractor(coords * self.cfg.coord_gain)

    def make_proxies(self, feats: Tensor, coords: np.ndarray) -> Tensor:
        if feats.shape[:-1] != coords.shape[:-1]:
            raise ShapeError(f"proxy features {feats.shape} and coords {coords.shape} differ")
        return make_point_proxies(feats, coords * self.cfg.coord_gain, self.phi)

    def encode(self, proxies: Tensor, coords: np.ndarray) -> Tensor:
        v = proxies
        for layer in self.encoder:
            v = layer(v, coords)
        return v

    def decode(self, q: Tensor, centres: Tensor, v: Tensor, coords: np.ndarray) -> Tensor:
        mem = T.layer_norm(v)
        for layer in self.decoder:
            q = layer(q, centres, mem, coords)
        return q

    def __call__(self, coords, views=None) -> tuple[Tensor, Tensor]:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim == 2:
            coords = coords[None]
        if coords.shape[1] <= self.cfg.knn_k:
            raise GeometryError(f"need more than knn_k={self.cfg.knn_k} input points")
        if np.abs(coords).max() > 0.5 + 1e-6:
            raise GeometryError("input cloud is not normalized to the unit-diagonal frame")
        feats = self.extract(coords)
        v = self.encode(self.make_proxies(feats, coords), coords)
        if views is not None and self.has_fusion:
            views = np.asarray(views, dtype=np.float64)
            if views.ndim == 3:
                views = views[None]
            v = self.fusion(v, self.image_encoder(views))
        q, centres = self.queries(v, coords if self.cfg.anchor_centres else None)
        qfeat = self.decode(q, centres, v, coords)
        return centres, self.head(qfeat, centres)


def make_point_proxies(feats: Tensor, coords, phi: MLP) -> Tensor:
    """F = F' + phi(p)."""
    pos = phi(T.as_tensor(coords))
    if pos.shape != feats.shape:
        raise ShapeError(f"point proxies: feature shape {feats.shape} vs positional {pos.shape}")
    return feats + pos
