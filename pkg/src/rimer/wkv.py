"""RWKV-7 time mix and channel mix.

State layout is ``(..., H, N, N)`` with rows indexing the value dimension
and columns the key dimension.  One recurrence step is

    S' = S @ (diag(w) - outer(kappa_hat, a * kappa_hat)) + outer(v, key * a)

where ``key`` is the insertion key ``k_tilde`` by default, or the
replacement key ``kappa_hat`` when ``insert_key == "kappa"``.  The step never
materializes the transition matrix; :func:`transition_matrix` exists for
inspection and testing.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigError, NonConvergenceError, NonFiniteError
from .numerics import Tensor

W_MIN = 0.01
KAPPA_EPS = 1e-8
INSERT_KEYS = ("k_tilde", "kappa")


@dataclass
class TimeMixSignals:
    """Per-step signals, each of shape ``(..., H, N)``."""

    w: Tensor
    a: Tensor
    kappa_hat: Tensor
    k_tilde: Tensor
    v: Tensor
    r: Tensor

    def at(self, t: int) -> "TimeMixSignals":
        """Slice timestep ``t`` out of sequence signals shaped ``(..., T, H, N)``."""
        idx = (Ellipsis, t, slice(None), slice(None))
        return TimeMixSignals(*(nx.getitem(getattr(self, f.name), idx) for f in fields(self)))


@dataclass
class WkvState:
    """Recurrent memory of one time-mix block.

    ``x_prev`` is the last (normalized) input seen by the token shift; it is
    carried so that a split scan reproduces the unsplit scan exactly.
    """

    state: Tensor
    x_prev: Tensor | None = None


def _uniform(rng, shape, fan_in, dtype):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


@dataclass
class TimeMixParams:
    n_heads: int
    head_dim: int
    mu: Tensor
    w_weight: Tensor
    w_bias: Tensor
    a_weight: Tensor
    a_bias: Tensor
    kappa_weight: Tensor
    kappa_bias: Tensor
    k_weight: Tensor
    v_weight: Tensor
    r_weight: Tensor
    out_weight: Tensor
    w_min: float = W_MIN
    insert_key: str = "k_tilde"

    PARAM_NAMES = (
        "mu", "w_weight", "w_bias", "a_weight", "a_bias", "kappa_weight", "kappa_bias",
        "k_weight", "v_weight", "r_weight", "out_weight",
    )

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in self.PARAM_NAMES]

    @classmethod
    def init(cls, n_heads, head_dim, rng, dtype=np.float64, w_min=W_MIN, insert_key="k_tilde"):
        d = n_heads * head_dim
        if insert_key not in INSERT_KEYS:
            raise ConfigError(f"insert_key must be one of {INSERT_KEYS}, got {insert_key!r}")

        def mat():
            return Tensor(_uniform(rng, (d, d), d, dtype))

        def zeros():
            return Tensor(np.zeros(d, dtype=dtype))

        return cls(
            n_heads=n_heads,
            head_dim=head_dim,
            mu=Tensor(np.full(d, 0.5, dtype=dtype)),
            w_weight=mat(), w_bias=zeros(),
            a_weight=mat(), a_bias=zeros(),
            kappa_weight=mat(), kappa_bias=zeros(),
            k_weight=mat(), v_weight=mat(), r_weight=mat(),
            out_weight=mat(),
            w_min=w_min,
            insert_key=insert_key,
        )

    @staticmethod
    def count(d_model: int) -> int:
        return 7 * d_model * d_model + 4 * d_model


@dataclass
class ChannelMixParams:
    mu: Tensor
    up_weight: Tensor
    down_weight: Tensor

    PARAM_NAMES = ("mu", "up_weight", "down_weight")

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in self.PARAM_NAMES]

    @classmethod
    def init(cls, d_model, ffn_mult, rng, dtype=np.float64):
        if int(ffn_mult) != ffn_mult or ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be a positive integer, got {ffn_mult}")
        hidden = int(ffn_mult) * d_model
        return cls(
            mu=Tensor(np.full(d_model, 0.5, dtype=dtype)),
            up_weight=Tensor(_uniform(rng, (d_model, hidden), d_model, dtype)),
            down_weight=Tensor(_uniform(rng, (hidden, d_model), hidden, dtype)),
        )

    @staticmethod
    def count(d_model: int, ffn_mult: int) -> int:
        return 2 * ffn_mult * d_model * d_model + d_model


def clamp_mix(params) -> None:
    """Keep token-shift coefficients inside [0, 1] (call after optimizer steps)."""
    np.clip(params.mu.data, 0.0, 1.0, out=params.mu.data)


def token_shift(x: Tensor, x_prev: Tensor | None, mu: Tensor) -> Tensor:
    """``mu * x + (1 - mu) * x_prev`` with ``x_prev = 0`` when absent."""
    m = nx.broadcast_to(mu, x.shape)
    mixed = nx.mul(m, x)
    if x_prev is None:
        return mixed
    return nx.add(mixed, nx.mul(nx.sub(1.0, m), x_prev))


def _heads(t: Tensor, n_heads: int, head_dim: int) -> Tensor:
    return nx.reshape(t, t.shape[:-1] + (n_heads, head_dim))


def l2_normalize(x: Tensor, eps: float = KAPPA_EPS) -> Tensor:
    """Normalize the last axis to unit length; the norm is padded by ``eps``."""
    norm = nx.sqrt(nx.tsum(nx.square(x), axis=-1, keepdims=True))
    return nx.div(x, nx.broadcast_to(nx.add(norm, eps), x.shape))


def signals_from_shifted(xs: Tensor, params: TimeMixParams) -> TimeMixSignals:
    """Project an already token-shifted input ``(..., d)`` into per-head signals."""
    H, N = params.n_heads, params.head_dim
    w_gate = nx.sigmoid(nx.linear(xs, params.w_weight, params.w_bias))
    w = nx.add(nx.scale(w_gate, 1.0 - params.w_min), params.w_min)
    a = nx.sigmoid(nx.linear(xs, params.a_weight, params.a_bias))
    kappa = _heads(nx.linear(xs, params.kappa_weight, params.kappa_bias), H, N)
    return TimeMixSignals(
        w=_heads(w, H, N),
        a=_heads(a, H, N),
        kappa_hat=l2_normalize(kappa),
        k_tilde=_heads(nx.linear(xs, params.k_weight), H, N),
        v=_heads(nx.linear(xs, params.v_weight), H, N),
        r=_heads(nx.linear(xs, params.r_weight), H, N),
    )


def project_signals(x_t: Tensor, x_prev: Tensor | None, params: TimeMixParams) -> TimeMixSignals:
    """Token-shift then project one step (any leading batch shape)."""
    x_t = nx.as_tensor(x_t)
    if x_prev is not None:
        x_prev = nx.as_tensor(x_prev, like=x_t)
    return signals_from_shifted(token_shift(x_t, x_prev, params.mu), params)


def _col(t: Tensor) -> Tensor:
    return nx.reshape(t, t.shape + (1,))


def _row(t: Tensor) -> Tensor:
    return nx.reshape(t, t.shape[:-1] + (1, t.shape[-1]))


def transition_matrix(s: TimeMixSignals) -> Tensor:
    """``diag(w) - outer(kappa_hat, a * kappa_hat)`` with shape ``(..., N, N)``."""
    N = s.w.shape[-1]
    full = s.w.shape + (N,)
    eye = Tensor(np.broadcast_to(np.eye(N, dtype=s.w.dtype), full))
    diag = nx.mul(nx.broadcast_to(_row(s.w), full), eye)
    removal = nx.matmul(_col(s.kappa_hat), _row(nx.mul(s.a, s.kappa_hat)))
    return nx.sub(diag, removal)


def decay_term(state: Tensor, s: TimeMixSignals) -> Tensor:
    """``state @ transition_matrix(s)`` computed in O(N^2) per head."""
    decayed = nx.mul(state, nx.broadcast_to(_row(s.w), state.shape))
    projected = nx.matmul(state, _col(s.kappa_hat))
    return nx.sub(decayed, nx.matmul(projected, _row(nx.mul(s.a, s.kappa_hat))))


def insert_term(s: TimeMixSignals, insert_key: str = "k_tilde") -> Tensor:
    key = s.k_tilde if insert_key == "k_tilde" else s.kappa_hat
    return nx.matmul(_col(s.v), _row(nx.mul(key, s.a)))


def check_finite_state(state: Tensor) -> None:
    data = state.data
    if np.isfinite(data).all():
        return
    bad = ~np.isfinite(data).reshape(data.shape[:-2] + (-1,)).all(axis=-1)
    head = int(np.argwhere(bad)[0][-1])
    raise NonFiniteError(f"non-finite WKV state in head {head}", where={"head": head})


def wkv_step(state: Tensor, s: TimeMixSignals, insert_key: str = "k_tilde") -> Tensor:
    new = nx.add(decay_term(state, s), insert_term(s, insert_key))
    check_finite_state(new)
    return new


def wkv_readout(state: Tensor, s: TimeMixSignals) -> Tensor:
    """``state @ r`` per head, shape ``(..., H, N)``."""
    y = nx.matmul(state, _col(s.r))
    return nx.reshape(y, y.shape[:-1])


def zero_state(batch_shape: tuple[int, ...], n_heads: int, head_dim: int, dtype=np.float64) -> WkvState:
    return WkvState(Tensor(np.zeros(batch_shape + (n_heads, head_dim, head_dim), dtype=dtype)))


def _tag_timestep(exc: Exception, t: int) -> Exception:
    exc.timestep = t
    exc.args = (f"timestep {t}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
    return exc


StepFn = Callable[[Tensor, TimeMixSignals], Tensor]


def wkv_scan(
    x: Tensor,
    params: TimeMixParams,
    state0: WkvState | None = None,
    step: StepFn | None = None,
) -> tuple[Tensor, WkvState]:
    """Run the time-mix block over ``x: (..., T, d)``.

    Returns the projected block output ``(..., T, d)`` and the final state,
    which can seed a later call to continue the sequence.  ``step`` replaces
    the explicit recurrence (the implicit layer plugs in here).
    """
    x = nx.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ConfigError(f"wkv_scan needs a (..., T>=1, d) input, got {x.shape}")
    H, N = params.n_heads, params.head_dim
    batch, T, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    if d != H * N:
        raise ConfigError(f"input width {d} != n_heads*head_dim {H * N}")
    if state0 is None:
        state0 = zero_state(batch, H, N, x.dtype)
    if step is None:
        def step(st, sig):
            return wkv_step(st, sig, params.insert_key)

    if state0.x_prev is None:
        prev = Tensor(np.zeros(batch + (1, d), dtype=x.dtype))
    else:
        prev = nx.reshape(state0.x_prev, batch + (1, d))
    shifted_prev = nx.concat([prev, x[..., :-1, :]], axis=-2) if T > 1 else prev
    seq = signals_from_shifted(token_shift(x, shifted_prev, params.mu), params)

    state = state0.state
    outs = []
    for t in range(T):
        s_t = seq.at(t)
        try:
            state = step(state, s_t)
        except (NonFiniteError, NonConvergenceError) as exc:
            raise _tag_timestep(exc, t)
        outs.append(wkv_readout(state, s_t))
    y = nx.reshape(nx.stack(outs, axis=-3), batch + (T, d))
    y = nx.linear(y, params.out_weight)
    return y, WkvState(state, x[..., T - 1, :])


def channel_mix(x_t: Tensor, x_prev: Tensor | None, params: ChannelMixParams) -> Tensor:
    """Squared-ReLU feed-forward on the token-shifted input."""
    xs = token_shift(nx.as_tensor(x_t), x_prev, params.mu)
    hidden = nx.relu(nx.linear(xs, params.up_weight))
    return nx.linear(nx.square(hidden), params.down_weight)


def channel_mix_seq(x: Tensor, params: ChannelMixParams, x_prev: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Channel mix over ``(..., T, d)``; returns the output and the last input."""
    batch, T, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    prev = Tensor(np.zeros(batch + (1, d), dtype=x.dtype)) if x_prev is None else nx.reshape(x_prev, batch + (1, d))
    shifted_prev = nx.concat([prev, x[..., :-1, :]], axis=-2) if T > 1 else prev
    xs = token_shift(x, shifted_prev, params.mu)
    hidden = nx.relu(nx.linear(xs, params.up_weight))
    return nx.linear(nx.square(hidden), params.down_weight), x[..., T - 1, :]
