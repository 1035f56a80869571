"""Training loop, evaluation protocols and metrics."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, make_imputation_mask, sample_windows, window_starts
from .errors import ConfigError, DivergenceError
from .layers import normalize_with
from .model import (
    IMPUTE_RATIOS,
    HGTSFormer,
    ModelConfig,
    count_parameters,
    impute,
    mse_loss,
    rolling_forecast,
    training_targets,
)
from .optim import Adam, clip_grad_norm, cosine_lr
from .tensor import no_grad

log = logging.getLogger(__name__)

HORIZONS = (96, 192, 336, 720)

__all__ = [
    "HORIZONS",
    "MetricReport",
    "TrainRun",
    "count_parameters",
    "evaluate_forecast",
    "evaluate_imputation",
    "forecast_batch_loss",
    "train",
]


@dataclass
class MetricReport:
    key: str  # "horizon" or "ratio"
    rows: list[tuple[float, float, float]] = field(default_factory=list)  # (key, mse, mae)
    examples: dict = field(default_factory=dict)

    @property
    def avg_mse(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def avg_mae(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def row(self, key) -> tuple[float, float]:
        for k, mse, mae in self.rows:
            if k == key:
                return mse, mae
        raise KeyError(key)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.key, "mse", "mae"])
            for k, mse, mae in self.rows:
                w.writerow([_fmt_key(k), repr(mse), repr(mae)])
            w.writerow(["avg", repr(self.avg_mse), repr(self.avg_mae)])


def _fmt_key(k) -> str:
    return str(int(k)) if float(k).is_integer() else repr(float(k))


@dataclass
class TrainRun:
    config: ModelConfig
    epoch_losses: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str | None = None
    sec_per_iter: float = float("nan")
    seed: int = 0
    model: HGTSFormer | None = field(default=None, repr=False)

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch] if self.val_mse else float("nan")

    def metrics_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mse"])
            for i, (tl, vl) in enumerate(zip(self.epoch_losses, self.val_mse)):
                w.writerow([i, repr(tl), repr(vl)])


# -- per-batch objectives ---------------------------------------------------------------


def forecast_batch_loss(model: HGTSFormer, window: np.ndarray):
    """Next-patch MSE in the per-window normalized domain."""
    cfg = model.cfg
    inp, target = training_targets(window, cfg.lookback, cfg.patch_len)
    res = model.forward(inp)
    target_n = normalize_with(target, res.stats)
    if cfg.loss_tokens == "last":
        p = cfg.patch_len
        return mse_loss(res.head[..., -p:], target_n[..., -p:])
    return mse_loss(res.head, target_n)


def impute_batch_loss(model: HGTSFormer, window: np.ndarray, observed: np.ndarray):
    """Reconstruction MSE over hidden points only, normalized domain."""
    res = model.forward(np.where(observed, window, 0.0), observed)
    target_n = normalize_with(window, res.stats)
    return mse_loss(res.head, target_n, ~observed)


def _window_width(cfg: ModelConfig) -> int:
    return cfg.lookback + cfg.patch_len if cfg.task == "forecast" else cfg.lookback


def validation_mse(model: HGTSFormer, data: Dataset, stride: int = 1, batch_size: int = 64, split: str = "val") -> float:
    cfg = model.cfg
    width = _window_width(cfg)
    lookback = cfg.lookback if cfg.task == "forecast" else 0
    span = data.split.span(split, lookback)
    total, count = 0.0, 0
    rng = np.random.default_rng(cfg.seed + 7919)
    with no_grad():
        for i, batch in enumerate(sample_windows(data.values, span, width, stride, batch_size)):
            w = batch.values.astype(cfg.np_dtype)
            if cfg.task == "forecast":
                loss = forecast_batch_loss(model, w)
            else:
                ratio = cfg.mask_ratios[i % len(cfg.mask_ratios)]
                observed, _ = make_imputation_mask(w.shape, ratio, rng)
                loss = impute_batch_loss(model, w, observed)
            total += loss.item() * len(batch)
            count += len(batch)
    if count == 0:
        raise ConfigError(f"{split} split is too short for windows of length {width}")
    return total / count


# -- training ------------------------------------------------------------------------------------


def train(
    cfg: ModelConfig,
    data: Dataset,
    out_dir: str | None = None,
    val_stride: int | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainRun:
    """Adam + per-epoch cosine schedule; keeps the parameters with the lowest validation MSE."""
    cfg.validate()
    model = HGTSFormer(cfg)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    run = TrainRun(config=cfg, seed=cfg.seed, model=model)
    width = _window_width(cfg)
    span = data.split.span("train")
    if span[1] - span[0] < width:
        raise ConfigError(f"train split ({span[1] - span[0]} points) is shorter than a window ({width})")
    if val_stride is None:
        val_stride = 1 if cfg.task == "forecast" else cfg.patch_len
    mask_rng = np.random.default_rng(cfg.seed + 104729)
    best_state = None
    iters, elapsed = 0, 0.0
    ckpt_path = os.path.join(out_dir, "best.ckpt") if out_dir else None

    for epoch in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        losses = []
        batches = sample_windows(
            data.values, span, width, 1, cfg.batch_size, shuffle=True, seed=cfg.seed * 1000 + epoch,
            limit=cfg.max_train_windows,
        )
        for batch in batches:
            t0 = time.perf_counter()
            w = batch.values.astype(cfg.np_dtype)
            if cfg.task == "forecast":
                loss = forecast_batch_loss(model, w)
            else:
                ratio = cfg.mask_ratios[mask_rng.integers(len(cfg.mask_ratios))]
                observed, _ = make_imputation_mask(w.shape, ratio, mask_rng)
                loss = impute_batch_loss(model, w, observed)
            value = loss.item()
            if not math.isfinite(value):
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "last_finite.ckpt"), model, {"epoch": epoch})
                raise DivergenceError(f"non-finite loss at epoch {epoch}, iteration {iters}")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            losses.append(value)
            iters += 1
            elapsed += time.perf_counter() - t0
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        val = validation_mse(model, data, stride=val_stride)
        run.epoch_losses.append(epoch_loss)
        run.val_mse.append(val)
        if best_state is None or val < run.val_mse[run.best_epoch]:
            run.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_path:
                save_checkpoint(ckpt_path, model, {"epoch": epoch, "val_mse": repr(val)})
                run.best_checkpoint = ckpt_path
        log.info("epoch %d  lr %.3g  train %.5f  val %.5f", epoch, opt.lr, epoch_loss, val)
        if on_epoch:
            on_epoch(epoch, epoch_loss, val)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif ckpt_path:
        save_checkpoint(ckpt_path, model, {"epoch": -1})
        run.best_checkpoint = ckpt_path
    run.sec_per_iter = elapsed / iters if iters else float("nan")
    return run


# -- evaluation --------------------------------------------------------------------------------------

ForecastFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]
ImputeFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_forecaster(model: HGTSFormer) -> ForecastFn:
    def predict(contexts, horizon, starts):
        return rolling_forecast(model, contexts.astype(model.cfg.np_dtype), horizon).predictions

    return predict


def repeat_last_forecaster(contexts: np.ndarray, horizon: int, starts) -> np.ndarray:
    return np.repeat(contexts[..., -1:], horizon, axis=-1)


def evaluate_forecast(
    predictor: ForecastFn | HGTSFormer,
    data: Dataset,
    lookback: int,
    horizons: Sequence[int] = HORIZONS,
    split: str = "test",
    batch_size: int = 32,
    keep_examples: int = 1,
) -> MetricReport:
    """Rolling-forecast MSE/MAE per horizon over windows at stride = horizon."""
    if isinstance(predictor, HGTSFormer):
        if not predictor.cfg.causal:
            raise ConfigError("forecast evaluation needs a causal checkpoint")
        predictor = model_forecaster(predictor)
    report = MetricReport("horizon")
    lo, hi = data.split.span(split, lookback)
    for horizon in horizons:
        starts = window_starts(lo, hi, lookback + horizon, stride=horizon)
        if len(starts) == 0:
            log.warning("horizon %d exceeds the %s range; skipped", horizon, split)
            continue
        se = ae = 0.0
        n = 0
        for i in range(0, len(starts), batch_size):
            chunk = starts[i : i + batch_size]
            ctx = np.stack([data.values[:, s : s + lookback] for s in chunk])
            truth = np.stack([data.values[:, s + lookback : s + lookback + horizon] for s in chunk])
            pred = np.asarray(predictor(ctx, horizon, chunk), dtype=np.float64)
            err = pred - truth
            se += float(np.sum(err * err))
            ae += float(np.sum(np.abs(err)))
            n += err.size
            if i == 0 and keep_examples:
                report.examples[horizon] = {
                    "context": ctx[:keep_examples],
                    "truth": truth[:keep_examples],
                    "pred": pred[:keep_examples],
                }
        report.rows.append((horizon, se / n, ae / n))
    return report


def model_imputer(model: HGTSFormer) -> ImputeFn:
    def fill(series, observed):
        return impute(model, series.astype(model.cfg.np_dtype), observed)

    return fill


def mean_fill_imputer(series: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Fill with the train mean, which is 0 on standardized data."""
    return np.where(observed, series, 0.0)


def evaluate_imputation(
    imputer: ImputeFn | HGTSFormer,
    data: Dataset,
    window: int = 1024,
    ratios: Sequence[float] = IMPUTE_RATIOS,
    split: str = "test",
    stride: int | None = None,
    seed: int = 2024,
    batch_size: int = 16,
    shared_channels: bool = False,
    keep_examples: int = 1,
) -> MetricReport:
    """MSE/MAE on hidden points only, one row per mask ratio."""
    if isinstance(imputer, HGTSFormer):
        if imputer.cfg.causal:
            raise ConfigError("imputation evaluation needs a non-causal checkpoint")
        window = imputer.cfg.lookback
        imputer = model_imputer(imputer)
    for r in ratios:
        if not 0 < r < 1:
            raise ValueError(f"mask ratio must lie in (0, 1), got {r}")
    stride = stride or max(1, window // 16)
    span = data.split.span(split)
    report = MetricReport("ratio")
    for ratio in ratios:
        rng = np.random.default_rng([seed, int(round(ratio * 1e6))])
        se = ae = 0.0
        n = 0
        for i, batch in enumerate(sample_windows(data.values, span, window, stride, batch_size)):
            series = batch.values
            observed, hidden = make_imputation_mask(series.shape, ratio, rng, shared_channels)
            filled = np.asarray(imputer(np.where(observed, series, 0.0), observed), dtype=np.float64)
            err = (filled - series)[hidden]
            se += float(np.sum(err * err))
            ae += float(np.sum(np.abs(err)))
            n += err.size
            if i == 0 and keep_examples:
                report.examples[ratio] = {
                    "truth": series[:keep_examples],
                    "observed": observed[:keep_examples],
                    "filled": filled[:keep_examples],
                }
        if n == 0:
            raise ConfigError(f"{split} split is shorter than one imputation window ({window})")
        report.rows.append((ratio, se / n, ae / n))
    return report
