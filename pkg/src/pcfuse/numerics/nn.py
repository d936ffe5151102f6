"""Parameters, modules and the neural building blocks used by every model."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=T.DTYPE), requires_grad=True, name=name)


class Module:
    """Minimal parameter container.

    Attributes that are Parameters, Modules or lists of Modules are walked
    in attribute-definition order, which makes the flattened parameter list
    (and therefore checkpoints) deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        diffs = [
            f"{n}: checkpoint {tuple(state[n].shape)} vs model {own[n].shape}"
            for n in own
            if n in state and tuple(state[n].shape) != own[n].shape
        ]
        if missing or unexpected or diffs:
            lines = []
            if missing:
                lines.append("missing: " + ", ".join(missing))
            if unexpected:
                lines.append("unexpected: " + ", ".join(unexpected))
            lines.extend(diffs)
            raise ShapeError("incompatible checkpoint\n  " + "\n  ".join(lines))
        for n, p in own.items():
            p.data = np.array(state[n], dtype=T.DTYPE)

    def zero_(self, *names: str) -> None:
        """Set the named parameters (or all of them) to zero in place."""
        for n, p in self.named_parameters():
            if not names or any(n == k or n.startswith(k + ".") for k in names):
                p.data[...] = 0.0


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        if bias:
            self.bias = Parameter(uniform_init(rng, d_in, (d_out,)))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear: input {x.shape} does not match weight {self.weight.shape}")
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Affine layers with ReLU between them; the final layer stays affine."""

    def __init__(self, rng: np.random.Generator, widths: list[int], bias: bool = True):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.layers = [Linear(rng, a, b, bias) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self.layers)


def mlp_forward(x: Tensor, layers: list[Linear]) -> Tensor:
    if x.shape[-1] != layers[0].d_in:
        raise ShapeError(
            f"mlp: input width {x.shape[-1]} does not match first layer {layers[0].weight.shape}"
        )
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = T.relu(x)
    return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads.

    The projections carry no bias so that a zero value projection gives an
    exactly zero output. ``bias`` (shape (..., Lq, Lk)) is added to every
    head's logits before the softmax.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 kdim: int | None = None):
        if dim % heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
        kdim = dim if kdim is None else kdim
        self.dim, self.heads = dim, heads
        self.q_proj = Linear(rng, dim, dim, bias=False)
        self.k_proj = Linear(rng, kdim, dim, bias=False)
        self.v_proj = Linear(rng, kdim, dim, bias=False)
        self.out_proj = Linear(rng, dim, dim, bias=False)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
        return multi_head_attention(q, k, v, self.heads, self, bias)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    return T.swapaxes(x, -2, -3)  # (..., heads, n, dh)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: MultiHeadAttention, bias: Tensor | None = None,
                         return_weights: bool = False):
    if params.dim % heads:
        raise ShapeError(f"embedding dim {params.dim} is not divisible by {heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key {k.shape} and value {v.shape} lengths differ")
    dh = params.dim // heads
    qh = _split_heads(params.q_proj(q), heads)
    kh = _split_heads(params.k_proj(k), heads)
    vh = _split_heads(params.v_proj(v), heads)
    logits = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    if bias is not None:
        # (..., Lq, Lk) -> (..., 1, Lq, Lk) shared across heads
        logits = logits + T.reshape(bias, bias.shape[:-2] + (1,) + bias.shape[-2:])
    w = T.softmax(logits)
    out = T.matmul(w, vh)  # (..., heads, Lq, dh)
    out = T.swapaxes(out, -2, -3)
    *lead, lq, _, _ = out.shape
    out = params.out_proj(T.reshape(out, (*lead, lq, params.dim)))
    return (out, w) if return_weights else out
