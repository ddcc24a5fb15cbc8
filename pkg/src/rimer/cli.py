"""``rimer`` command line: train, eval, predict, gradcheck, bench.

Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence,
5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DEFAULT_FRACTIONS, WindowSpec, load_csv, split_normalize, write_csv
from .deq import DeqConfig
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    InputError,
    LoadError,
    NonConvergenceError,
    NonFiniteError,
    ReportError,
)
from .model import RimerConfig, build_model, forward, param_count, predict
from .report import report, write_report
from .train_eval import Adam, TrainOpts, evaluate, forecast_split, sequence_loss, train

log = logging.getLogger("rimer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_GRADCHECK = 0, 2, 3, 4, 5
GRADCHECK_TOL = {"explicit": 1e-4, "deq": 1e-3}
TOP_KEYS = ("model", "data", "train", "output")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class DataConfig:
    path: str
    lookback: int
    horizon: int
    stride: int = 1
    has_date_column: bool | None = None
    split: tuple = DEFAULT_FRACTIONS
    name: str | None = None

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.lookback, self.horizon, self.stride)


@dataclass
class RunConfig:
    model: RimerConfig
    data: DataConfig
    train: TrainOpts
    output_dir: Path
    source: Path


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    _reject_unknown(doc, TOP_KEYS, "config")
    for key in TOP_KEYS:
        if key not in doc:
            raise ConfigError(f"config is missing the {key!r} section")
    base = path.parent
    model = RimerConfig.from_dict(doc["model"])
    _reject_unknown(doc["data"], {f.name for f in fields(DataConfig)}, "data")
    try:
        data = DataConfig(**doc["data"])
        data.split = tuple(data.split)
        data.window_spec()
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from None
    data.path = str((base / data.path).resolve())
    opts = TrainOpts.from_dict(doc["train"])
    _reject_unknown(doc["output"], {"dir"}, "output")
    out_dir = (base / doc["output"].get("dir", "runs")).resolve()
    return RunConfig(model, data, opts, out_dir, path)


def _load_dataset(rc: RunConfig):
    if not Path(rc.data.path).exists():
        raise LoadError(f"data file {rc.data.path} does not exist")
    ds = load_csv(rc.data.path, rc.data.has_date_column, name=rc.data.name)
    return split_normalize(ds, rc.data.split)


def _protocol(rc: RunConfig, split: str) -> dict:
    spec = rc.data.window_spec()
    return {
        "dataset": rc.data.name or Path(rc.data.path).stem,
        "split": split,
        "lookback": spec.lookback,
        "horizon": spec.horizon,
        "stride": spec.stride,
        "split_fractions": list(rc.data.split),
    }


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    ds = _load_dataset(rc)
    model = build_model(rc.model, seed=rc.train.seed)
    spec = rc.data.window_spec()
    ckpt, history = train(model, ds, rc.train, spec)
    ckpt.extra["protocol"] = _protocol(rc, "val")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    pred, truth, _ = forecast_split(model, ds, "val", spec)
    metrics = evaluate(pred, truth)
    _write_json(rc.output_dir / "history.json", history)
    _write_json(rc.output_dir / "metrics.json", {"protocol": _protocol(rc, "val"), "metrics": metrics.to_dict()})
    print(json.dumps({"checkpoint": str(out), "epochs": len(history), "best_epoch": ckpt.epoch, "val": metrics.to_dict()}, sort_keys=True))
    return EXIT_OK


def _check_compatible(ckpt: Checkpoint, cfg: RimerConfig) -> None:
    mine = cfg.to_dict()
    for key, value in ckpt.config.items():
        if mine.get(key) != value:
            raise ConfigError(f"checkpoint/config mismatch in model.{key}: checkpoint {value!r}, config {mine.get(key)!r}")


def cmd_eval(args) -> int:
    rc = load_run_config(args.config)
    if args.baselines and not Path(args.baselines).exists():
        raise ConfigError(f"baselines file {args.baselines} does not exist")
    ckpt = load_checkpoint(args.ckpt)
    _check_compatible(ckpt, rc.model)
    ds = _load_dataset(rc)
    model = ckpt.to_model()
    spec = rc.data.window_spec()
    pred, truth, w = forecast_split(model, ds, args.split, spec)
    metrics = evaluate(pred, truth)
    protocol = _protocol(rc, args.split)
    _write_json(rc.output_dir / "metrics.json", {"protocol": protocol, "metrics": metrics.to_dict()})
    steps = np.arange(spec.horizon)
    rows = np.column_stack([
        np.repeat(np.arange(len(w)), spec.horizon),
        np.repeat(w.channels, spec.horizon),
        np.repeat(w.origins + spec.lookback, spec.horizon) + np.tile(steps, len(w)),
        pred.reshape(-1),
        truth.reshape(-1),
    ])
    _write_csv_rows(rc.output_dir / "forecast_vs_truth.csv", ["window", "channel", "time_index", "forecast", "truth"], rows)
    if args.baselines:
        text, doc = report({protocol["dataset"]: metrics}, args.baselines, protocol, strict=False)
        write_report(text, doc, rc.output_dir)
        print(text)
    else:
        print(json.dumps(metrics.to_dict(), sort_keys=True))
    return EXIT_OK


def _write_csv_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join([str(int(v)) for v in r[:3]] + [repr(float(v)) for v in r[3:]]) + "\n")


def cmd_predict(args) -> int:
    if args.horizon < 0:
        raise ConfigError(f"--horizon must be >= 0, got {args.horizon}")
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    ctx = load_csv(args.context)
    forecast = predict(model, ctx.values, args.horizon)
    steps = np.arange(1, args.horizon + 1)
    write_csv(args.out, ctx.columns, forecast, index_name="step", index=list(steps))
    return EXIT_OK


def _tiny(cfg: RimerConfig) -> RimerConfig:
    deq = replace(cfg.deq, damping=1.0, tol=1e-13, max_iter=200)
    return replace(cfg, d_model=8, n_heads=2, head_dim=4, n_layers=1, patch_len=4, dtype="float64", deq=deq)


def cmd_gradcheck(args) -> int:
    rc = load_run_config(args.config)
    cfg = _tiny(rc.model)
    model = build_model(cfg, seed=rc.train.seed)
    rng = np.random.default_rng(rc.train.seed)
    seq = rng.standard_normal((2, 4, cfg.patch_len))
    rep = nx.gradcheck(lambda: sequence_loss(model, seq), dict(model.named_parameters()))
    tol = GRADCHECK_TOL[cfg.state_mode]
    ok = rep.max_rel_err < tol
    print(json.dumps({
        "state_mode": cfg.state_mode,
        "max_rel_err": rep.max_rel_err,
        "worst_param": rep.worst_param,
        "n_coords": rep.n_coords,
        "tolerance": tol,
        "passed": ok,
    }, sort_keys=True))
    if not ok:
        print(f"gradcheck failed: max rel err {rep.max_rel_err:.3e} >= {tol:g} in {rep.worst_param}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = load_run_config(args.config)
    cfg = rc.model
    model = build_model(cfg, seed=rc.train.seed)
    P = cfg.patch_len
    spec = rc.data.window_spec()
    n_tok = spec.lookback // P + -(-spec.horizon // P)
    B = rc.train.batch_size
    seq = np.random.default_rng(rc.train.seed).standard_normal((B, n_tok, P)).astype(cfg.np_dtype)
    tokens = B * (n_tok - 1)

    def timed(fn, reps):
        fn()
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        return (time.perf_counter() - t0) / reps

    fwd = timed(lambda: forward(model, seq[:, :-1]), args.reps)
    model.requires_grad_(True)
    opt = Adam(model.parameters(), rc.train.learning_rate)

    def step():
        model.zero_grad()
        with nx.Tape() as tape:
            loss = sequence_loss(model, seq)
        nx.backward(tape, loss)
        opt.step()

    trn = timed(step, args.reps)
    print(json.dumps({
        "param_count": param_count(model),
        "batch_size": B,
        "tokens_per_batch": tokens,
        "forward_tokens_per_s": tokens / fwd,
        "train_tokens_per_s": tokens / trn,
    }, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rimer", description="RWKV-7 patch forecaster")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--baselines")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="forecast from a context CSV")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--context", required=True)
    r.add_argument("--horizon", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of a tiny float64 model")
    g.add_argument("--config", required=True)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="measure forward/train throughput")
    b.add_argument("--config", required=True)
    b.add_argument("--reps", type=int, default=5)
    b.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    n = os.environ.get("RIMER_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        limit = int(n)
    except ValueError:
        raise ConfigError(f"RIMER_THREADS must be an integer, got {n!r}") from None
    return threadpool_limits(limits=max(1, limit))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, ReportError) as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (LoadError, InputError, CheckpointError, OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (DivergenceError, NonFiniteError, NonConvergenceError) as exc:
        code, msg = EXIT_DIVERGENCE, f"divergence: {exc}"
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
