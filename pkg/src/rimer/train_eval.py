"""Training loop, forecast evaluation and the four reported error metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .data import SeriesDataset, WindowSpec, make_windows
from .errors import ConfigError, ContractError, DivergenceError
from .model import RimerModel, forward, rollout
from .wkv import clamp_mix

log = logging.getLogger(__name__)

MAPE_EPS = 1e-8


@dataclass
class TrainOpts:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if not self.adam_eps > 0 or not self.clip_norm > 0:
            raise ConfigError("adam_eps and clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainOpts":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r} in train")
        return cls(**d)


@dataclass
class Metrics:
    rmse: float
    mae: float
    mape_percent: float
    r_squared: float | None
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(predictions, truth) -> Metrics:
    """RMSE, MAE, MAPE (percent, |y| floored at 1e-8) and R^2 in float64.

    ``r_squared`` is ``None`` when the truth is constant.
    """
    yhat = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if y.size < 1 or y.size != yhat.size:
        raise ContractError(f"evaluate needs equal non-empty lengths, got {yhat.size} and {y.size}")
    err = yhat - y
    ss_res = float(np.sum(err * err))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return Metrics(
        rmse=math.sqrt(ss_res / y.size),
        mae=float(np.mean(np.abs(err))),
        mape_percent=100.0 * float(np.mean(np.abs(err) / np.maximum(np.abs(y), MAPE_EPS))),
        r_squared=1.0 - ss_res / ss_tot if np.ptp(y) > 0 else None,
        n_points=int(y.size),
    )


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place to global L2 norm ``<= max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def _sequences(ds: SeriesDataset, split: str, spec: WindowSpec, patch_len: int) -> np.ndarray:
    """Patchified ``(B, n_tok, P)`` training sequences covering lookback + horizon."""
    if spec.lookback % patch_len:
        raise ConfigError(f"lookback {spec.lookback} must be a multiple of patch_len {patch_len}")
    out_len = -(-spec.horizon // patch_len) * patch_len
    w = make_windows(ds, split, spec.lookback, out_len, spec.stride)
    seq = np.concatenate([w.inputs, w.targets], axis=1)
    return seq.reshape(len(w), (spec.lookback + out_len) // patch_len, patch_len)


def sequence_loss(model: RimerModel, seq: np.ndarray) -> nx.Tensor:
    """Teacher-forced next-patch MSE."""
    dt = model.cfg.np_dtype
    return nx.mse(forward(model, seq[:, :-1].astype(dt)), seq[:, 1:].astype(dt))


def mean_loss(model: RimerModel, seqs: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo:lo + batch_size]
        total += float(sequence_loss(model, chunk).data) * len(chunk)
    return total / len(seqs)


def train(model: RimerModel, ds: SeriesDataset, opts: TrainOpts, spec: WindowSpec):
    """Adam on next-patch MSE with global-norm clipping and early stopping.

    Returns ``(checkpoint, history)``; the model is left holding the
    best-validation weights, which are also what the checkpoint stores.
    """
    from .checkpoint import Checkpoint

    P = model.cfg.patch_len
    train_seq = _sequences(ds, "train", spec, P)
    val_seq = _sequences(ds, "val", spec, P)
    if len(train_seq) == 0 or len(val_seq) == 0:
        raise ConfigError(
            f"no windows of length {spec.lookback}+{spec.horizon} fit the train/val splits"
        )
    model.norm_stats = ds.stats
    params = model.parameters()
    model.requires_grad_(True)
    opt = Adam(params, opts.learning_rate, (opts.beta1, opts.beta2), opts.adam_eps)
    rng = np.random.default_rng(opts.seed)
    history: list[dict] = []
    best_val, best_state, best_epoch, stale = math.inf, model.state_dict(), 0, 0
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(train_seq))
        running, seen = 0.0, 0
        for b, lo in enumerate(range(0, len(order), opts.batch_size)):
            batch = train_seq[order[lo:lo + opts.batch_size]]
            model.zero_grad()
            with nx.Tape() as tape:
                loss = sequence_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            nx.backward(tape, loss)
            clip_grad_norm(params, opts.clip_norm)
            opt.step()
            for layer in model.layers:
                clamp_mix(layer.time_mix)
                clamp_mix(layer.channel_mix)
            running += value * len(batch)
            seen += len(batch)
        model.zero_grad()
        val = mean_loss(model, val_seq)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val})
        log.info("epoch %d train %.6f val %.6f", epoch, running / seen, val)
        if val < best_val:
            best_val, best_state, best_epoch, stale = val, model.state_dict(), epoch, 0
        else:
            stale += 1
            if stale >= opts.patience:
                break
    model.load_state_dict(best_state)
    model.requires_grad_(False)
    return Checkpoint.from_model(model, opts, epoch=best_epoch), history


def forecast_windows(model: RimerModel, inputs: np.ndarray, horizon: int, batch_size: int = 512) -> np.ndarray:
    """Roll out ``horizon`` normalized steps for each normalized lookback row."""
    P = model.cfg.patch_len
    if inputs.shape[1] % P:
        raise ConfigError(f"lookback {inputs.shape[1]} must be a multiple of patch_len {P}")
    n_out = -(-horizon // P)
    dt = model.cfg.np_dtype
    outs = []
    for lo in range(0, len(inputs), batch_size):
        chunk = inputs[lo:lo + batch_size].astype(dt).reshape(-1, inputs.shape[1] // P, P)
        outs.append(rollout(model, chunk, n_out).reshape(len(chunk), -1)[:, :horizon])
    return np.concatenate(outs, axis=0).astype(np.float64) if outs else np.empty((0, horizon))


def forecast_split(model: RimerModel, ds: SeriesDataset, split: str, spec: WindowSpec):
    """Forecasts and truth for every window of ``split``.

    Returns ``(pred, truth, windows)`` with pred/truth de-normalized to the
    original units, shape ``(n_windows, horizon)``.
    """
    w = make_windows(ds, split, spec.lookback, spec.horizon, spec.stride)
    if len(w) == 0:
        raise ConfigError(f"no {split} windows of length {spec.lookback}+{spec.horizon}")
    pred = forecast_windows(model, w.inputs, spec.horizon)
    stats = ds.stats
    shift, scale = stats.shift[w.channels][:, None], stats.scale[w.channels][:, None]
    return pred * scale + shift, w.targets * scale + shift, w


def evaluate_split(model: RimerModel, ds: SeriesDataset, split: str, spec: WindowSpec) -> Metrics:
    pred, truth, _ = forecast_split(model, ds, split, spec)
    return evaluate(pred, truth)
