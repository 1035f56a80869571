"""Command-line entry point: ``hgts train | forecast | impute | inspect | verify``.

Exit codes: 0 success, 1 verification failure, 2 config or usage error
(including an existing --out without --force), 3 data error, 4 numeric
divergence, 5 unreadable or inconsistent checkpoint.  Human messages go to
stderr; stdout carries one produced path per line (or JSON for verify).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone

import numpy as np

from . import __version__, plots
from .checkpoint import load_model, save_checkpoint
from .data import Dataset, guess_preset, load_csv, prepare_dataset, window_starts
from .errors import ConfigError, DataError, DivergenceError, FormatError, IntegrityError, NumericError
from .harness import HORIZONS, evaluate_forecast, evaluate_imputation, train
from .hypergraph import dump_structure_csv
from .model import IMPUTE_RATIOS, ModelConfig

log = logging.getLogger("hgts")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")


class OutputMissing(RuntimeError):
    pass


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(__file__), capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """manifest.txt: written before work starts, finalized with status and end time."""

    def __init__(self, out_dir: str, command: str, args: argparse.Namespace):
        self.path = os.path.join(out_dir, "manifest.txt")
        self.fields = {
            "command": command,
            "argv": " ".join(sys.argv[1:]),
            "version": version_string(),
            "seed": str(getattr(args, "seed", "") if getattr(args, "seed", None) is not None else ""),
            "started": _now(),
        }
        self.inputs: list[str] = [p for p in (getattr(args, k, None) for k in ("config", "data", "ckpt")) if p]
        self.outputs: list[str] = []
        self.config_text = ""

    def plan(self, *paths: str) -> None:
        self.outputs.extend(paths)

    def write(self, status: str = "running") -> None:
        lines = [f"{k} = {v}" for k, v in self.fields.items()]
        lines.append(f"status = {status}")
        lines += [f"input = {os.path.abspath(p)}" for p in self.inputs]
        lines += [f"output = {os.path.abspath(p)}" for p in self.outputs]
        if self.config_text:
            lines += ["", "# resolved config", self.config_text.strip()]
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def finish(self) -> None:
        missing = [p for p in self.outputs if not os.path.exists(p)]
        self.fields["finished"] = _now()
        self.write("failed" if missing else "ok")
        if missing:
            raise OutputMissing(f"expected outputs were not produced: {missing}")
        for p in [self.path, *self.outputs]:
            print(os.path.abspath(p))


def prepare_out(out_dir: str, force: bool) -> None:
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not force:
            raise ConfigError(f"{out_dir} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out_dir)
    os.makedirs(out_dir, exist_ok=True)


def load_data(path: str, preset: str | None) -> Dataset:
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    table = load_csv(path)
    preset = guess_preset(path) if preset == "auto" else (None if preset == "ratio" else preset)
    return prepare_dataset(table, preset=preset, name=os.path.basename(path))


def resolve_config(path: str) -> str:
    """Accept a file path or the name of a bundled config (``etth1`` or ``etth1.cfg``)."""
    if os.path.exists(path):
        return path
    name = path if path.endswith(".cfg") else path + ".cfg"
    bundled = os.path.join(CONFIG_DIR, name)
    if os.path.exists(bundled):
        return bundled
    raise ConfigError(f"config not found: {path}")


def _thread_limit():
    n = os.environ.get("HGTS_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise ConfigError(f"HGTS_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, limit))


# -- commands ----------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = ModelConfig.from_file(resolve_config(args.config))
    changes = {}
    if args.task:
        changes.update(task=args.task, causal=args.task == "forecast")
    for key in ("seed", "epochs", "max_train_windows", "batch_size", "lr"):
        val = getattr(args, key)
        if val is not None:
            changes[key] = val
    cfg = cfg.replace(**changes).validate()
    prepare_out(args.out, args.force)
    man = Manifest(args.out, "train", args)
    man.config_text = cfg.to_text()
    ckpt = os.path.join(args.out, "best.ckpt")
    metrics = os.path.join(args.out, "metrics.csv")
    curve = os.path.join(args.out, "loss_curve.svg")
    man.plan(ckpt, ckpt + ".cfg", metrics, curve)
    man.write()
    data = load_data(args.data, args.split)
    t0 = time.perf_counter()
    run = train(cfg, data, args.out)
    log.info("trained %d epochs in %.1fs (%.4f s/iter); best epoch %d val %.5f",
             cfg.epochs, time.perf_counter() - t0, run.sec_per_iter, run.best_epoch, run.best_val_mse)
    run.metrics_csv(metrics)
    epochs = np.arange(len(run.epoch_losses))
    plots.write(curve, plots.line_chart(
        [("train", epochs, np.array(run.epoch_losses)), ("validation", epochs, np.array(run.val_mse))],
        title="loss per epoch", xlabel="epoch", ylabel="MSE",
    ))
    man.fields["sec_per_iter"] = f"{run.sec_per_iter:.6f}"
    man.finish()
    return EXIT_OK


def _parse_list(text: str, kind):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def cmd_forecast(args) -> int:
    horizons = _parse_list(args.horizons, int)
    if not horizons or min(horizons) < 1:
        raise ConfigError(f"horizons must be positive integers, got {args.horizons}")
    model = load_model(args.ckpt)
    if not model.cfg.causal:
        raise ConfigError("forecast needs a causal (forecasting) checkpoint")
    prepare_out(args.out, args.force)
    man = Manifest(args.out, "forecast", args)
    man.config_text = model.cfg.to_text()
    table = os.path.join(args.out, "forecast_metrics.csv")
    man.plan(table)
    man.write()
    data = load_data(args.data, args.split)
    report = evaluate_forecast(model, data, model.cfg.lookback, horizons)
    report.to_csv(table)
    channels = {"none": [], "first": [0], "all": list(range(data.n_channels))}[args.plots]
    for horizon, ex in report.examples.items():
        for c in channels:
            path = os.path.join(args.out, f"forecast_h{horizon}_c{c}.svg")
            ctx, truth, pred = ex["context"][0, c], ex["truth"][0, c], ex["pred"][0, c]
            tail = min(len(ctx), 2 * horizon)
            x_ctx = np.arange(-tail, 0)
            x_fut = np.arange(horizon)
            plots.write(path, plots.line_chart(
                [
                    ("context", x_ctx, ctx[-tail:]),
                    ("truth", x_fut, truth),
                    ("prediction", x_fut, pred),
                ],
                title=f"{data.channels[c] if data.channels else c}: horizon {horizon}",
                xlabel="step", ylabel="standardized value",
            ))
            man.plan(path)
    for h, mse, mae in report.rows:
        log.info("horizon %d  mse %.4f  mae %.4f", h, mse, mae)
    man.finish()
    return EXIT_OK


def cmd_impute(args) -> int:
    ratios = _parse_list(args.ratios, float)
    bad = [r for r in ratios if not 0 < r < 1]
    if not ratios or bad:
        raise ConfigError(f"mask ratios must lie strictly between 0 and 1, got {args.ratios}")
    model = load_model(args.ckpt)
    if model.cfg.causal:
        raise ConfigError("impute needs a non-causal (imputation) checkpoint")
    prepare_out(args.out, args.force)
    man = Manifest(args.out, "impute", args)
    man.config_text = model.cfg.to_text()
    table = os.path.join(args.out, "impute_metrics.csv")
    man.plan(table)
    man.write()
    data = load_data(args.data, args.split)
    report = evaluate_imputation(model, data, ratios=ratios, seed=args.seed)
    report.to_csv(table)
    if args.plots != "none":
        for ratio, ex in report.examples.items():
            path = os.path.join(args.out, f"impute_r{ratio:g}_c0.svg")
            truth, observed, filled = ex["truth"][0, 0], ex["observed"][0, 0], ex["filled"][0, 0]
            x = np.arange(len(truth))
            hidden = ~observed
            plots.write(path, plots.line_chart(
                [("truth", x, truth), ("imputed", x, filled)],
                title=f"mask ratio {ratio:g}", xlabel="step", ylabel="standardized value",
                markers=(x[hidden], filled[hidden]),
            ))
            man.plan(path)
    for r, mse, mae in report.rows:
        log.info("ratio %.3f  mse %.4f  mae %.4f", r, mse, mae)
    man.finish()
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.ckpt)
    cfg = model.cfg
    prepare_out(args.out, args.force)
    man = Manifest(args.out, "inspect", args)
    man.config_text = cfg.to_text()
    man.write()
    data = load_data(args.data, args.split)
    lo, hi = data.split.span(args.split_name, 0)
    starts = window_starts(lo, hi, cfg.lookback, stride=1)
    if not 0 <= args.window_index < len(starts):
        raise DataError(f"window index {args.window_index} outside [0, {len(starts)}) for the {args.split_name} split")
    s = starts[args.window_index]
    window = data.values[None, :, s : s + cfg.lookback]
    from .tensor import no_grad

    with no_grad():
        res = model.forward(window, return_structures=True)
    for b, record in enumerate(res.structures):
        for kind, structure in record.items():
            prefix = f"block{b}_{kind}"
            paths = dump_structure_csv(structure, args.out, prefix)
            man.plan(*paths)
            # one heatmap per slice for the confidence matrix
            conf = structure.confidence
            for idx in np.ndindex(*conf.shape[:-2]):
                tag = "_".join(map(str, idx))
                path = os.path.join(args.out, f"{prefix}_conf_s{tag}.svg")
                plots.write(path, plots.heatmap(conf[idx], title=f"{prefix} confidence, slice {tag}"))
                man.plan(path)
    man.fields["window_start"] = str(int(s))
    man.finish()
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(args.suite)
    for r in results:
        print(r.line(), file=sys.stderr)
    summary = {
        "suite": args.suite,
        "passed": all(r.passed for r in results),
        "checks": [r.as_dict() for r in results],
    }
    print(json.dumps(summary))
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


# -- parser ------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--data", required=True, help="CSV with a timestamp column first")
        sp.add_argument(
            "--split", default="auto",
            help="auto (calendar split for ETT* file names, else 0.6/0.2/0.2), ett_hour, ett_minute or ratio",
        )
        if out:
            sp.add_argument("--out", required=True)
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty --out")

    t = sub.add_parser("train", help="train a model and keep the best checkpoint")
    t.add_argument("--config", required=True, help="config file or bundled name, e.g. etth1")
    common(t)
    t.add_argument("--task", choices=("forecast", "impute"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-train-windows", dest="max_train_windows", type=int,
                   help="cap on training windows per epoch (0 = all)")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="rolling forecast metrics per horizon")
    f.add_argument("--ckpt", required=True)
    common(f)
    f.add_argument("--horizons", default=",".join(map(str, HORIZONS)))
    f.add_argument("--plots", choices=("none", "first", "all"), default="first")
    f.set_defaults(func=cmd_forecast)

    i = sub.add_parser("impute", help="masked-point imputation metrics per ratio")
    i.add_argument("--ckpt", required=True)
    common(i)
    i.add_argument("--ratios", default=",".join(map(str, IMPUTE_RATIOS)))
    i.add_argument("--seed", type=int, default=2024)
    i.add_argument("--plots", choices=("none", "first"), default="first")
    i.set_defaults(func=cmd_impute)

    s = sub.add_parser("inspect", help="dump hypergraph structures for one window")
    s.add_argument("--ckpt", required=True)
    common(s)
    s.add_argument("--window-index", dest="window_index", type=int, default=0)
    s.add_argument("--split-name", dest="split_name", choices=("train", "val", "test"), default="test")
    s.set_defaults(func=cmd_inspect)

    v = sub.add_parser("verify", help="run the self-check suites")
    v.add_argument("--suite", choices=("grad", "invariants", "oracle", "all"), default="all")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, IntegrityError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OutputMissing as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
