"""Image tokens from the three depth views and residual cross-attention into V."""
from __future__ import annotations

import numpy as np

from ..numerics import MLP, Linear, Module, MultiHeadAttention, Parameter, ShapeError, Tensor
from ..numerics import T
from ..numerics.nn import uniform_init


def patchify(views: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, 3 * (H/p) * (W/p), p*p), view-major then row-major patches."""
    b, nv, h, w = views.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size {h}x{w} is not divisible by patch {patch}")
    x = views.reshape(b, nv, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(b, nv * (h // patch) * (w // patch), patch * patch)


class ImageEncoder(Module):
    """Linear patch embedding plus learned view and 2-D position embeddings."""

    def __init__(self, rng, image_size: int, patch: int, img_dim: int):
        if image_size % patch:
            raise ShapeError(f"image size {image_size} is not divisible by patch {patch}")
        self.patch = patch
        self.image_size = image_size
        self.per_view = (image_size // patch) ** 2
        self.embed = Linear(rng, patch * patch, img_dim, bias=False)
        self.view_emb = Parameter(uniform_init(rng, img_dim, (3, 1, img_dim)))
        self.pos_emb = Parameter(uniform_init(rng, img_dim, (1, self.per_view, img_dim)))

    def __call__(self, views) -> Tensor:
        views = np.asarray(views, dtype=np.float64)
        if views.ndim == 3:
            views = views[None]
        if views.shape[1] != 3:
            raise ShapeError(f"expected three views, got {views.shape[1]}")
        if views.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(
                f"views are {views.shape[2]}x{views.shape[3]}, encoder expects "
                f"{self.image_size}x{self.image_size}")
        b = views.shape[0]
        tok = self.embed(Tensor(patchify(views, self.patch)))  # (B, 3P, D)
        tok = T.reshape(tok, (b, 3, self.per_view, -1)) + self.view_emb + self.pos_emb
        return T.reshape(tok, (b, 3 * self.per_view, -1))


def encode_images(views, encoder: ImageEncoder) -> Tensor:
    return encoder(views)


class CrossModalFusion(Module):
    """F_fused = MHA(V, MLP(F_img), MLP(F_img)) + V, one MLP shared by keys and values."""

    def __init__(self, rng, embed_dim: int, img_dim: int, heads: int):
        self.img_mlp = MLP(rng, [img_dim, embed_dim, embed_dim])
        self.attn = MultiHeadAttention(rng, embed_dim, heads)

    def __call__(self, v: Tensor, tokens: Tensor) -> Tensor:
        kv = self.img_mlp(tokens)
        return self.attn(v, kv, kv) + v


def fuse(v: Tensor, tokens: Tensor, fusion: CrossModalFusion) -> Tensor:
    return fusion(v, tokens)
