"""Hierarchical hypergraph forecaster: patch tokens -> MHSA -> intra/inter hypergraph attention -> EdgeToNode -> head."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError
from .hypergraph import (
    TOPK_AXES,
    EdgeToNodeBlock,
    HyperGraphStructure,
    InterHGABlock,
    IntraHGABlock,
    flatten_channels,
)
from .layers import MHSA, Linear, Module, NormStats, RoPECache, denormalize, instance_norm, patch_embed
from .tensor import Tensor, no_grad

TASKS = ("forecast", "impute")
ABLATIONS = ("none", "no_mhsa_rope", "no_intra", "no_inter")
LOSS_TOKENS = ("all", "last")
IMPUTE_RATIOS = (0.125, 0.25, 0.375, 0.5)

# which config keys live in which section of a config file
_SECTIONS = {
    "model": (
        "n_layers", "d_model", "d_ff", "n_heads", "patch_len", "lookback", "edge_num", "alpha",
        "causal", "task", "topk_axis", "ablation", "dtype",
    ),
    "train": (
        "lr", "lr_schedule", "batch_size", "epochs", "seed", "loss_tokens", "grad_clip",
        "mask_ratios", "max_train_windows",
    ),
}


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 1024
    d_ff: int = 2048
    n_heads: int = 8
    patch_len: int = 48
    lookback: int = 672
    edge_num: int = 7
    alpha: float = -1e4
    causal: bool = True
    task: str = "forecast"
    topk_axis: str = "node"
    ablation: str = "none"
    dtype: str = "float32"
    lr: float = 1e-4
    lr_schedule: str = "cosine"
    batch_size: int = 32
    epochs: int = 10
    seed: int = 1
    loss_tokens: str = "all"
    grad_clip: float = 5.0
    mask_ratios: tuple = IMPUTE_RATIOS
    max_train_windows: int = 0  # 0 = use every training window

    def __post_init__(self):
        self.mask_ratios = tuple(float(r) for r in self.mask_ratios)

    @property
    def n_patches(self) -> int:
        return self.lookback // self.patch_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def validate(self) -> "ModelConfig":
        positive = ("d_model", "d_ff", "n_heads", "patch_len", "lookback", "edge_num", "batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layers < 0 or self.epochs < 0:
            raise ConfigError("n_layers and epochs must be non-negative")
        if self.edge_num <= 3:
            raise ConfigError(f"edge_num must be greater than 3, got {self.edge_num}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lookback % self.patch_len:
            raise ConfigError(f"lookback={self.lookback} is not divisible by patch_len={self.patch_len}")
        if self.ablation != "no_mhsa_rope" and self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head dimension, got {self.head_dim}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.topk_axis not in TOPK_AXES:
            raise ConfigError(f"topk_axis must be one of {TOPK_AXES}, got {self.topk_axis!r}")
        if self.loss_tokens not in LOSS_TOKENS:
            raise ConfigError(f"loss_tokens must be one of {LOSS_TOKENS}, got {self.loss_tokens!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if not all(0 < r < 1 for r in self.mask_ratios):
            raise ConfigError(f"mask ratios must lie in (0, 1), got {self.mask_ratios}")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- key=value persistence -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section, keys in _SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                val = getattr(self, key)
                if isinstance(val, tuple):
                    val = ",".join(repr(v) for v in val)
                elif isinstance(val, bool):
                    val = "true" if val else "false"
                lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                kwargs[key] = _parse_value(key, raw, getattr(cls, key, None) if key != "mask_ratios" else IMPUTE_RATIOS)
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path: str) -> "ModelConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


# -- parameter budget ------------------------------------------------------------------


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form trainable-parameter count for ``cfg``."""
    d, f = cfg.d_model, cfg.d_ff

    def lin(i, o):
        return i * o + o

    ffn = lin(d, f) + lin(f, d)
    norms = 2 * (2 * d)
    hga = 3 * lin(d, d) + ffn + norms
    block = 4 * lin(d, d) + ffn + norms  # EdgeToNode
    if cfg.ablation != "no_mhsa_rope":
        block += 4 * lin(d, d)
    if cfg.ablation != "no_intra":
        block += cfg.edge_num * d + hga
    if cfg.ablation != "no_inter":
        block += hga
    total = lin(cfg.patch_len, d) + lin(d, cfg.patch_len) + cfg.n_layers * block
    if cfg.ablation != "no_inter":
        total += lin(cfg.lookback, d)
    return total


# -- model ---------------------------------------------------------------------------------


class HGTSBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        d, f, h = cfg.d_model, cfg.d_ff, cfg.n_heads
        self.mhsa = MHSA(d, h, rng, causal=cfg.causal, dtype=dt) if cfg.ablation != "no_mhsa_rope" else None
        self.intra = IntraHGABlock(d, f, h, cfg.edge_num, rng, dtype=dt) if cfg.ablation != "no_intra" else None
        self.inter = InterHGABlock(d, f, h, rng, dtype=dt) if cfg.ablation != "no_inter" else None
        self.edge_to_node = EdgeToNodeBlock(d, f, h, rng, dtype=dt)


@dataclass
class ForwardResult:
    tokens: Tensor  # B x (C*N) x D
    head: Tensor  # B x C x (N*P), normalized domain
    output: Tensor  # B x C x (N*P), input scale
    stats: NormStats
    structures: list[dict[str, HyperGraphStructure]] = field(default_factory=list)


@dataclass
class ForecastOutput:
    predictions: np.ndarray  # B x C x T, input scale
    normalized_steps: list[np.ndarray]  # per generation step, B x C x P
    structures: list | None = None


class HGTSFormer(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.embed = Linear(cfg.patch_len, cfg.d_model, rng, dtype=dt)
        self.qg_proj = Linear(cfg.lookback, cfg.d_model, rng, dtype=dt) if cfg.ablation != "no_inter" else None
        self.blocks = [HGTSBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.head = Linear(cfg.d_model, cfg.patch_len, rng, dtype=dt)
        self.rope = RoPECache(cfg.n_patches, cfg.head_dim, dtype=dt) if cfg.ablation != "no_mhsa_rope" else None

    # -- persistence helpers --------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import IntegrityError

        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise IntegrityError(f"parameter names differ: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise IntegrityError(f"{name}: stored shape {arr.shape} but config implies {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    # -- forward ----------------------------------------------------------------

    def forward(self, x, observed: np.ndarray | None = None, return_structures: bool = False) -> ForwardResult:
        cfg = self.cfg
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=cfg.np_dtype)
        if x.ndim != 3 or x.shape[-1] != cfg.lookback:
            raise ShapeError(f"expected B x C x {cfg.lookback} input, got {x.shape}")
        b, c, _ = x.shape
        n, d = cfg.n_patches, cfg.d_model
        xn, stats = instance_norm(x, observed)
        xt = Tensor(xn)
        tokens = patch_embed(xt, cfg.patch_len, self.embed).reshape(b * c, n, d)
        q_g = self.qg_proj(xt) if self.qg_proj is not None else None
        structures = []
        for block in self.blocks:
            record = {}
            if block.mhsa is not None:
                tokens = block.mhsa(tokens, self.rope)
            if block.intra is not None:
                edges, record["intra"] = block.intra(tokens, cfg.alpha, cfg.topk_axis)
                inter_nodes = flatten_channels(edges, b)
            else:
                edges = None
                inter_nodes = tokens.mean(axis=1).reshape(b, c, d)
            if block.inter is not None:
                channel_edges, record["inter"] = block.inter(inter_nodes, q_g, cfg.alpha, cfg.topk_axis)
            else:
                channel_edges = edges.mean(axis=1).reshape(b, c, d)
            flat = flatten_channels(tokens, b)
            tokens = block.edge_to_node(flat, channel_edges).reshape(b * c, n, d)
            if return_structures:
                structures.append(record)
        head = self.head(tokens).reshape(b, c, n * cfg.patch_len)
        return ForwardResult(
            tokens=tokens.reshape(b, c * n, d),
            head=head,
            output=denormalize(head, stats),
            stats=stats,
            structures=structures,
        )

    __call__ = forward

    def predict_next(self, context: np.ndarray) -> np.ndarray:
        """Last token's next-patch prediction in input scale: B x C x P."""
        with no_grad():
            out = self.forward(context).output.data
        return out[..., -self.cfg.patch_len :]


def forward(x_window, model: HGTSFormer, observed_mask=None) -> ForwardResult:
    return model.forward(x_window, observed_mask)


def training_targets(window: np.ndarray, lookback: int, patch_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a B x C x (L+P) window into the model input and the next-patch target."""
    window = np.asarray(window)
    if window.shape[-1] < lookback + patch_len:
        from .errors import DataError

        raise DataError(f"window of length {window.shape[-1]} is shorter than lookback+patch {lookback + patch_len}")
    return window[..., :lookback], window[..., patch_len : lookback + patch_len]


def mse_loss(pred: Tensor, target, loss_mask: np.ndarray | None = None) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    if loss_mask is None:
        return (diff * diff).mean()
    w = np.asarray(loss_mask, dtype=pred.dtype)
    if w.shape != pred.shape:
        raise ShapeError(f"loss mask {w.shape} vs prediction {pred.shape}")
    count = float(w.sum())
    if count == 0:
        raise ValueError("loss mask selects no elements")
    return (diff * diff * w).sum() * (1.0 / count)


def rolling_forecast(
    model: HGTSFormer,
    context: np.ndarray,
    horizon: int,
    step_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> ForecastOutput:
    """Autoregressive rollout: predict one patch, append, slide, repeat until ``horizon`` points."""
    cfg = model.cfg
    if not cfg.causal:
        raise ConfigError("rolling forecast needs a causal model")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    context = np.asarray(context, dtype=cfg.np_dtype)
    if context.shape[-1] != cfg.lookback:
        raise ShapeError(f"context length {context.shape[-1]} differs from lookback {cfg.lookback}")
    step = step_fn or model.predict_next
    p = cfg.patch_len
    preds, normalized = [], []
    ctx = context
    for _ in range(math.ceil(horizon / p)):
        nxt = np.asarray(step(ctx), dtype=ctx.dtype)
        preds.append(nxt)
        _, stats = instance_norm(ctx)
        normalized.append((nxt - stats.mean) / stats.std)
        ctx = np.concatenate([ctx[..., p:], nxt], axis=-1)
    return ForecastOutput(np.concatenate(preds, axis=-1)[..., :horizon], normalized)


def impute(model: HGTSFormer, series: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Fill unobserved points of B x C x L series; observed values are returned verbatim."""
    if model.cfg.causal:
        raise ConfigError("imputation needs a non-causal model")
    series = np.asarray(series)
    observed = np.asarray(observed, dtype=bool)
    with no_grad():
        out = model.forward(series, observed).output.data
    return np.where(observed, series, out.astype(series.dtype))


def ablation_variant(cfg: ModelConfig, which: str) -> HGTSFormer:
    if which not in ABLATIONS[1:]:
        raise ValueError(f"unknown ablation {which!r}; expected one of {ABLATIONS[1:]}")
    return HGTSFormer(cfg.replace(ablation=which))
