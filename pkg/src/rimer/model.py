"""The Rimer forecaster: patch embedding, stacked RWKV-7 blocks, next-patch head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import partial

import numpy as np

from . import numerics as nx
from .data import NormStats
from .deq import DeqConfig, DeqParams, deq_step
from .errors import ConfigError, InputError, NonConvergenceError, NonFiniteError
from .numerics import Tensor
from .wkv import (
    INSERT_KEYS,
    W_MIN,
    ChannelMixParams,
    TimeMixParams,
    WkvState,
    channel_mix_seq,
    wkv_scan,
)

STATE_MODES = ("explicit", "deq")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class RimerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    patch_len: int = 24
    ffn_mult: int = 2
    state_mode: str = "explicit"
    deq: DeqConfig = field(default_factory=DeqConfig)
    dtype: str = "float32"
    w_min: float = W_MIN
    insert_key: str = "k_tilde"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.deq, dict):
            self.deq = _strict(DeqConfig, self.deq, "model.deq")
        for name in ("d_model", "n_layers", "n_heads", "head_dim", "patch_len", "ffn_mult"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError(
                f"n_heads*head_dim must equal d_model: {self.n_heads}*{self.head_dim} != {self.d_model}"
            )
        if self.state_mode not in STATE_MODES:
            raise ConfigError(f"state_mode must be one of {STATE_MODES}, got {self.state_mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.insert_key not in INSERT_KEYS:
            raise ConfigError(f"insert_key must be one of {INSERT_KEYS}, got {self.insert_key!r}")
        if not 0.0 <= self.w_min < 1.0:
            raise ConfigError(f"w_min must lie in [0, 1), got {self.w_min}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RimerConfig":
        return _strict(cls, d, "model")


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RimerLayer:
    ln1_gain: Tensor
    ln1_bias: Tensor
    time_mix: TimeMixParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    channel_mix: ChannelMixParams
    deq: DeqParams | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("ln1.gain", self.ln1_gain), ("ln1.bias", self.ln1_bias)]
        out += [(f"time_mix.{n}", t) for n, t in self.time_mix.named()]
        out += [("ln2.gain", self.ln2_gain), ("ln2.bias", self.ln2_bias)]
        out += [(f"channel_mix.{n}", t) for n, t in self.channel_mix.named()]
        if self.deq is not None:
            out += [(f"deq.{n}", t) for n, t in self.deq.named()]
        return out


@dataclass
class LayerState:
    wkv: WkvState
    cm_prev: Tensor


@dataclass
class RimerModel:
    cfg: RimerConfig
    embed_weight: Tensor
    embed_bias: Tensor
    layers: list[RimerLayer]
    ln_out_gain: Tensor
    ln_out_bias: Tensor
    head_weight: Tensor
    head_bias: Tensor
    norm_stats: NormStats | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embed.weight", self.embed_weight), ("embed.bias", self.embed_bias)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", t) for n, t in layer.named()]
        out += [
            ("ln_out.gain", self.ln_out_gain),
            ("ln_out.bias", self.ln_out_bias),
            ("head.weight", self.head_weight),
            ("head.bias", self.head_bias),
        ]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in named.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {n} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def requires_grad_(self, flag: bool = True) -> "RimerModel":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _uniform(rng, shape, fan_in, dtype):
    s = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype))


def build_model(cfg: RimerConfig, seed: int = 0) -> RimerModel:
    """Deterministically initialize a model; identical ``(cfg, seed)`` give identical weights."""
    if isinstance(cfg, dict):
        cfg = RimerConfig.from_dict(cfg)
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d, P = cfg.d_model, cfg.patch_len

    def ones():
        return Tensor(np.ones(d, dtype=dt))

    def zeros(n=d):
        return Tensor(np.zeros(n, dtype=dt))

    embed_w = _uniform(rng, (P, d), P, dt)
    embed_b = zeros()
    layers = []
    for _ in range(cfg.n_layers):
        tm = TimeMixParams.init(cfg.n_heads, cfg.head_dim, rng, dt, cfg.w_min, cfg.insert_key)
        cm = ChannelMixParams.init(d, cfg.ffn_mult, rng, dt)
        dq = DeqParams.init(cfg.n_heads, cfg.head_dim, rng, dt) if cfg.state_mode == "deq" else None
        layers.append(RimerLayer(ones(), zeros(), tm, ones(), zeros(), cm, dq))
    head_w = _uniform(rng, (d, P), d, dt)
    return RimerModel(cfg, embed_w, embed_b, layers, ones(), zeros(), head_w, zeros(P))


def expected_param_count(cfg: RimerConfig) -> int:
    """Closed-form number of scalar learnables for ``cfg``."""
    d, P, m = cfg.d_model, cfg.patch_len, cfg.ffn_mult
    per_layer = 4 * d + TimeMixParams.count(d) + ChannelMixParams.count(d, m)
    if cfg.state_mode == "deq":
        per_layer += DeqParams.count(cfg.n_heads, cfg.head_dim)
    return P * d + d + cfg.n_layers * per_layer + 2 * d + d * P + P


def param_count(model: RimerModel) -> int:
    return int(sum(t.size for t in model.parameters()))


def _step_fn(model: RimerModel, layer: RimerLayer):
    if model.cfg.state_mode == "deq":
        return partial(deq_step, params=layer.deq, cfg=model.cfg.deq, insert_key=model.cfg.insert_key)
    return None


def forward(model: RimerModel, tokens, states: list[LayerState] | None = None, return_states: bool = False):
    """Map patches ``(B, T, P)`` to next-patch predictions ``(B, T, P)``.

    With ``return_states`` the per-layer recurrent states are returned too;
    passing them back in continues the sequence exactly.
    """
    cfg = model.cfg
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=cfg.np_dtype))
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.patch_len:
        raise InputError(f"tokens must have shape (B, T, {cfg.patch_len}), got {tokens.shape}")
    x = nx.linear(tokens, model.embed_weight, model.embed_bias)
    new_states = []
    for i, layer in enumerate(model.layers):
        st = states[i] if states is not None else None
        try:
            h = nx.layer_norm(x, layer.ln1_gain, layer.ln1_bias, cfg.ln_eps)
            y, wkv_state = wkv_scan(h, layer.time_mix, st.wkv if st else None, _step_fn(model, layer))
            x = nx.add(x, y)
            h = nx.layer_norm(x, layer.ln2_gain, layer.ln2_bias, cfg.ln_eps)
            y, cm_prev = channel_mix_seq(h, layer.channel_mix, st.cm_prev if st else None)
            x = nx.add(x, y)
        except (NonFiniteError, NonConvergenceError) as exc:
            exc.layer = i
            exc.args = (f"layer {i}: {exc.args[0]}",) + tuple(exc.args[1:])
            raise
        if not np.isfinite(x.data).all():
            raise NonFiniteError(f"layer {i}: non-finite activations", where={"layer": i})
        new_states.append(LayerState(wkv_state, cm_prev))
    x = nx.layer_norm(x, model.ln_out_gain, model.ln_out_bias, cfg.ln_eps)
    out = nx.linear(x, model.head_weight, model.head_bias)
    return (out, new_states) if return_states else out


def rollout(model: RimerModel, context_tokens: np.ndarray, n_patches: int) -> np.ndarray:
    """Autoregressively extend normalized ``(B, n, P)`` context by ``n_patches`` patches."""
    B, _, P = context_tokens.shape
    if n_patches <= 0:
        return np.empty((B, 0, P), dtype=model.cfg.np_dtype)
    pred, states = forward(model, context_tokens, return_states=True)
    nxt = pred.data[:, -1:, :]
    outs = [nxt]
    for _ in range(n_patches - 1):
        pred, states = forward(model, nxt, states, return_states=True)
        nxt = pred.data[:, -1:, :]
        outs.append(nxt)
    return np.concatenate(outs, axis=1)


def predict(model: RimerModel, context, horizon_steps: int, stats: NormStats | None = None) -> np.ndarray:
    """Forecast ``horizon_steps`` raw values after ``context`` (``(L,)`` or ``(L, C)``).

    The context is left-truncated to a whole number of patches and
    normalized with the stored train statistics; channels are forecast
    independently.
    """
    context = np.asarray(context, dtype=np.float64)
    squeeze = context.ndim == 1
    if squeeze:
        context = context[:, None]
    L, C = context.shape
    P = model.cfg.patch_len
    if horizon_steps < 0:
        raise InputError(f"horizon must be >= 0, got {horizon_steps}")
    if L < P:
        raise InputError(f"context of {L} steps is shorter than one patch ({P})")
    stats = stats or model.norm_stats
    if stats is None:
        stats = NormStats(np.zeros(C), np.ones(C), np.zeros(C, dtype=bool))
    if stats.mean.shape[0] != C:
        raise InputError(f"context has {C} channels, statistics cover {stats.mean.shape[0]}")
    if horizon_steps == 0:
        out = np.empty((0, C))
        return out[:, 0] if squeeze else out
    n_ctx = L // P
    ctx = stats.normalize(context[L - n_ctx * P:])
    tokens = ctx.T.reshape(C, n_ctx, P)
    n_out = -(-horizon_steps // P)
    fut = rollout(model, tokens, n_out).reshape(C, n_out * P)[:, :horizon_steps]
    out = stats.denormalize(fut.T.astype(np.float64))
    return out[:, 0] if squeeze else out
