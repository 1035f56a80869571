"""Reusable layers: linear maps, instance normalization, patching, RoPE, MHSA, FFN."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, gelu, layer_norm, matmul, softmax

NORM_EPS = 1e-5
INIT_STD = 0.02
# additive logit bias used for hard (causal) masks; exp() of it underflows to 0
NEG_INF = -1e9


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples truncated to two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = Tensor(trunc_normal(rng, (d_out, d_in), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last extent {self.d_in}, got shape {x.shape}")
        y = matmul(x, self.weight.transpose())
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.offset = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, self.eps)


class FFN(Module):
    """Position-wise two-layer MLP with GELU."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.fc2 = Linear(d_ff, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def ffn_forward(x: Tensor, block: FFN) -> Tensor:
    return block(x)


# -- instance normalization ------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # B x C x 1
    std: np.ndarray  # B x C x 1, already includes eps
    eps: float = NORM_EPS


def instance_norm(x, observed: np.ndarray | None = None, eps: float = NORM_EPS) -> tuple[np.ndarray, NormStats]:
    """Standardize every (batch, channel) row of a B x C x L array.

    With an ``observed`` mask the statistics use observed points only and the
    unobserved entries of the result are set to zero.
    """
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if a.ndim != 3:
        raise ShapeError(f"instance_norm expects B x C x L, got {a.shape}")
    if a.shape[-1] < 2:
        raise DataError("instance_norm needs at least 2 points per row")
    if observed is None:
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        std = np.sqrt(var) + eps
        return ((a - mu) / std).astype(a.dtype), NormStats(mu.astype(a.dtype), std.astype(a.dtype), eps)
    obs = np.asarray(observed, dtype=bool)
    if obs.shape != a.shape:
        raise ShapeError(f"observed mask {obs.shape} does not match series {a.shape}")
    count = obs.sum(axis=-1, keepdims=True)
    if (count < 2).any():
        b, c, _ = np.argwhere(count < 2)[0]
        raise DataError(f"row (batch={b}, channel={c}) has fewer than 2 observed points")
    w = obs.astype(a.dtype)
    mu = (a * w).sum(axis=-1, keepdims=True) / count
    var = (((a - mu) * w) ** 2).sum(axis=-1, keepdims=True) / count
    std = np.sqrt(var) + eps
    out = np.where(obs, (a - mu) / std, 0.0)
    return out.astype(a.dtype), NormStats(mu.astype(a.dtype), std.astype(a.dtype), eps)


def denormalize(y, stats: NormStats):
    """Invert :func:`instance_norm`: ``y * std + mean`` per row."""
    if isinstance(y, Tensor):
        return y * stats.std + stats.mean
    return np.asarray(y) * stats.std + stats.mean


def normalize_with(x, stats: NormStats) -> np.ndarray:
    """Apply existing stats to new values (e.g. targets beyond the lookback)."""
    return (np.asarray(x) - stats.mean) / stats.std


# -- patching ------------------------------------------------------------------------


def unfold_patches(x, patch_len: int):
    """B x C x L -> B x C x N x P, non-overlapping; token i covers [iP, (i+1)P)."""
    shape = x.shape
    if shape[-1] % patch_len:
        raise ConfigError(f"series length {shape[-1]} is not divisible by patch length {patch_len}")
    n = shape[-1] // patch_len
    return x.reshape(*shape[:-1], n, patch_len)


def fold_patches(x):
    """Inverse of :func:`unfold_patches`."""
    shape = x.shape
    return x.reshape(*shape[:-2], shape[-2] * shape[-1])


def patch_embed(x_norm, patch_len: int, embed: Linear) -> Tensor:
    x = x_norm if isinstance(x_norm, Tensor) else Tensor(x_norm)
    return embed(unfold_patches(x, patch_len))


# -- rotary position embedding ------------------------------------------------------


class RoPECache:
    """cos/sin tables for rotating consecutive pairs by ``pos * base**(-2i/d)``."""

    def __init__(self, positions, head_dim: int, base: float = 10000.0, dtype=np.float32):
        if head_dim % 2:
            raise ConfigError(f"RoPE needs an even head dimension, got {head_dim}")
        if np.isscalar(positions):
            positions = np.arange(int(positions))
        pos = np.asarray(positions, dtype=np.float64)
        inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
        angles = pos[:, None] * inv_freq[None, :]
        self.head_dim = head_dim
        self.base = base
        self.cos = np.cos(angles).astype(dtype)
        self.sin = np.sin(angles).astype(dtype)

    @property
    def n_positions(self) -> int:
        return self.cos.shape[0]


def _rotate(a: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = a[..., 0::2], a[..., 1::2]
    out = np.empty_like(a)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: Tensor, cache: RoPECache) -> Tensor:
    """Rotate the last axis of ``x`` (... x N x d_h) by position-dependent angles."""
    if x.shape[-1] % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {x.shape[-1]}")
    if x.shape[-1] != cache.head_dim:
        raise ShapeError(f"RoPE cache built for d_h={cache.head_dim}, input has {x.shape[-1]}")
    n = x.shape[-2]
    if n > cache.n_positions:
        raise ShapeError(f"RoPE cache holds {cache.n_positions} positions, input has {n}")
    cos = cache.cos[:n].astype(x.dtype, copy=False)
    sin = cache.sin[:n].astype(x.dtype, copy=False)
    # rotation is orthogonal: the adjoint rotates by the negative angle
    return Tensor._make(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


# -- attention ---------------------------------------------------------------------------


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., N, D) -> (..., H, N, D/H)."""
    *lead, n, d = x.shape
    return x.reshape(*lead, n, n_heads, d // n_heads).swapaxes(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, N, d_h) -> (..., N, H*d_h)."""
    *lead, h, n, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k) + bias) v on head-split tensors."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    weights = softmax(scores, bias)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def causal_bias(n: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)


class MHSA(Module):
    """Multi-head self-attention with RoPE on Q/K, output projection and residual."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, causal: bool = False, dtype=np.float32):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={n_heads}")
        self.w_q = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_k = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_v = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_p = Linear(d_model, d_model, rng, dtype=dtype)
        self.n_heads = n_heads
        self.causal = causal

    def __call__(self, x: Tensor, rope: RoPECache | None) -> Tensor:
        h = self.n_heads
        q = split_heads(self.w_q(x), h)
        k = split_heads(self.w_k(x), h)
        v = split_heads(self.w_v(x), h)
        if rope is not None:
            q = apply_rope(q, rope)
            k = apply_rope(k, rope)
        bias = causal_bias(x.shape[-2], x.dtype) if self.causal else None
        out = merge_heads(scaled_dot_attention(q, k, v, bias))
        return self.w_p(out) + x


def mhsa_forward(x: Tensor, layer: MHSA, rope: RoPECache | None) -> Tensor:
    return layer(x, rope)
