"""Implicit (equilibrium) variant of the WKV state update.

The new state is the fixed point of

    z = relu(W z + V x_decay + U x_insert)

where ``x_decay`` is the flattened decayed previous state and ``x_insert``
the flattened key-value insertion.  Each head owns its own ``M x M`` maps
with ``M = N*N``; weights may also be plain ``(M, M)`` matrices, in which
case ``z`` has shape ``(..., M)``.

Forward solves by damped Picard iteration.  Backward either solves the
adjoint equation ``g = grad_out + W^T (D g)`` (``D`` the relu mask at the
fixed point) or backpropagates through the last ``K`` solver steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, NonConvergenceError
from .numerics import Tensor
from .wkv import TimeMixSignals, decay_term, insert_term

BACKWARD_MODES = ("implicit_adjoint", "unrolled_K")
_NORM_FLOOR = 1e-8


@dataclass
class DeqConfig:
    damping: float = 0.5
    tol: float = 1e-6
    max_iter: int = 50
    backward_mode: str = "implicit_adjoint"
    unroll_k: int = 30

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError(f"damping must be in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"max_iter must be a positive integer, got {self.max_iter}")
        if self.backward_mode not in BACKWARD_MODES:
            raise ConfigError(f"backward_mode must be one of {BACKWARD_MODES}, got {self.backward_mode!r}")
        if int(self.unroll_k) != self.unroll_k or self.unroll_k < 1:
            raise ConfigError(f"unroll_k must be a positive integer, got {self.unroll_k}")


@dataclass
class DeqParams:
    """Learnable maps; entries may be ndarrays or :class:`Tensor` s."""

    W: object
    V: object
    U: object

    PARAM_NAMES = ("W", "V", "U")

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in self.PARAM_NAMES]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _arr(self.W), _arr(self.V), _arr(self.U)

    @classmethod
    def init(cls, n_heads: int, head_dim: int, rng, dtype=np.float64, w_norm: float = 0.5) -> "DeqParams":
        M = head_dim * head_dim
        s = 1.0 / np.sqrt(M)
        W = spectral_rescale(rng.uniform(-s, s, size=(n_heads, M, M)), w_norm, rng=rng)
        eye = np.tile(np.eye(M), (n_heads, 1, 1))
        return cls(Tensor(W.astype(dtype)), Tensor(eye.astype(dtype)), Tensor(eye.astype(dtype)))

    @staticmethod
    def count(n_heads: int, head_dim: int) -> int:
        return 3 * n_heads * head_dim**4


@dataclass
class DeqProblem:
    x_decay: np.ndarray
    x_insert: np.ndarray
    params: DeqParams

    def drive(self) -> np.ndarray:
        """The constant part ``V x_decay + U x_insert`` of the pre-activation."""
        _, V, U = self.params.arrays()
        return _apply(V, _arr(self.x_decay)) + _apply(U, _arr(self.x_insert))


@dataclass
class DeqSolution:
    z_star: np.ndarray
    iters: int
    residual: float
    residuals: list[float] = field(default_factory=list)
    abs_residuals: list[float] = field(default_factory=list)


@dataclass
class DeqGrads:
    W: np.ndarray
    V: np.ndarray
    U: np.ndarray
    x_decay: np.ndarray
    x_insert: np.ndarray


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _apply(A: np.ndarray, z: np.ndarray) -> np.ndarray:
    return (A @ z[..., None])[..., 0]


def _apply_t(A: np.ndarray, z: np.ndarray) -> np.ndarray:
    return (np.swapaxes(A, -1, -2) @ z[..., None])[..., 0]


def _outer_sum(u: np.ndarray, z: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum of ``outer(u, z)`` over every batch axis not present in ``shape``."""
    M = u.shape[-1]
    if len(shape) == 2:
        return u.reshape(-1, M).T @ z.reshape(-1, z.shape[-1])
    heads = shape[0]
    uh = np.moveaxis(u.reshape(-1, heads, M), 1, 0)
    zh = np.moveaxis(z.reshape(-1, heads, z.shape[-1]), 1, 0)
    return np.swapaxes(uh, -1, -2) @ zh


def _rel_residual(z: np.ndarray, fz: np.ndarray) -> tuple[float, float]:
    diff = np.linalg.norm(z - fz, axis=-1)
    rel = diff / np.maximum(np.linalg.norm(z, axis=-1), _NORM_FLOOR)
    return float(np.max(rel)), float(np.max(diff))


def spectral_rescale(W: np.ndarray, target: float = 0.5, iters: int = 20, rng=None) -> np.ndarray:
    """Scale each trailing ``M x M`` block so its power-iteration norm estimate equals ``target``."""
    rng = np.random.default_rng(0) if rng is None else rng
    W = np.array(W, dtype=np.float64)
    x = rng.standard_normal(W.shape[:-1])
    sigma = np.ones(W.shape[:-2])
    for _ in range(iters):
        y = _apply_t(W, _apply(W, x))
        x = y / np.maximum(np.linalg.norm(y, axis=-1, keepdims=True), 1e-300)
        sigma = np.sqrt(np.linalg.norm(_apply_t(W, _apply(W, x)), axis=-1))
    factor = target / np.maximum(sigma, 1e-300)
    return W * factor[..., None, None]


def deq_apply(z, p: DeqProblem, drive: np.ndarray | None = None) -> np.ndarray:
    """``relu(W z + V x_decay + U x_insert)``."""
    W = _arr(p.params.W)
    c = p.drive() if drive is None else drive
    return np.maximum(_apply(W, _arr(z)) + c, 0.0)


def deq_solve(p: DeqProblem, cfg: DeqConfig, z_init=None) -> DeqSolution:
    """Damped Picard iteration from ``z_init`` (zeros by default).

    Stops at the first iterate whose relative residual
    ``|z - f(z)| / max(|z|, 1e-8)`` is below ``cfg.tol`` for every instance,
    and returns that iterate (not ``f`` of it).
    """
    c = p.drive()
    z = np.zeros_like(c) if z_init is None else np.array(_arr(z_init), dtype=c.dtype)
    alpha = cfg.damping
    rels, abss = [], []
    for it in range(1, cfg.max_iter + 1):
        fz = deq_apply(z, p, drive=c)
        rel, ab = _rel_residual(z, fz)
        rels.append(rel)
        abss.append(ab)
        if rel < cfg.tol:
            return DeqSolution(z, it, rel, rels, abss)
        z = fz if alpha == 1.0 else (1.0 - alpha) * z + alpha * fz
    raise NonConvergenceError(
        f"fixed-point solve did not converge in {cfg.max_iter} iterations (residual {rels[-1]:.3e})",
        residual=rels[-1],
        iterations=cfg.max_iter,
    )


def _chain(p: DeqProblem, dW: np.ndarray, dc: np.ndarray) -> DeqGrads:
    W, V, U = p.params.arrays()
    x_d, x_i = _arr(p.x_decay), _arr(p.x_insert)
    return DeqGrads(
        W=dW,
        V=_outer_sum(dc, x_d, V.shape),
        U=_outer_sum(dc, x_i, U.shape),
        x_decay=_apply_t(V, dc),
        x_insert=_apply_t(U, dc),
    )


def deq_backward(p: DeqProblem, z_star, grad_out, cfg: DeqConfig) -> DeqGrads:
    """Gradients of ``<grad_out, z*>`` w.r.t. W, V, U, x_decay and x_insert."""
    W = _arr(p.params.W)
    z_star = _arr(z_star)
    grad_out = np.asarray(grad_out, dtype=z_star.dtype)
    c = p.drive()
    if cfg.backward_mode == "implicit_adjoint":
        mask = (_apply(W, z_star) + c) > 0
        g = grad_out
        for _ in range(cfg.max_iter):
            g_new = grad_out + _apply_t(W, mask * g)
            diff = np.linalg.norm(g_new - g, axis=-1)
            rel = float(np.max(diff / np.maximum(np.linalg.norm(g_new, axis=-1), _NORM_FLOOR)))
            g = g_new
            if rel < cfg.tol:
                break
        else:
            raise NonConvergenceError(
                f"adjoint solve did not converge in {cfg.max_iter} iterations (residual {rel:.3e})",
                residual=rel,
                iterations=cfg.max_iter,
            )
        u = mask * g
        return _chain(p, _outer_sum(u, z_star, W.shape), u)

    alpha = cfg.damping
    zs, masks = [], []
    z = z_star
    for _ in range(cfg.unroll_k):
        mask = (_apply(W, z) + c) > 0
        zs.append(z)
        masks.append(mask)
        z = (1.0 - alpha) * z + alpha * np.maximum(_apply(W, z) + c, 0.0)
    gz = grad_out
    dW = np.zeros_like(W)
    dc = np.zeros_like(c)
    for z_k, mask in zip(reversed(zs), reversed(masks)):
        u = alpha * mask * gz
        dW += _outer_sum(u, z_k, W.shape)
        dc += u
        gz = (1.0 - alpha) * gz + _apply_t(W, u)
    return _chain(p, dW, dc)


def deq_fixed_point(params: DeqParams, x_decay: Tensor, x_insert: Tensor, cfg: DeqConfig) -> Tensor:
    """Tape-aware solve: forward by :func:`deq_solve`, backward by :func:`deq_backward`."""
    prob = DeqProblem(x_decay.data, x_insert.data, DeqParams(*params.arrays()))
    sol = deq_solve(prob, cfg)

    def vjp(g):
        gr = deq_backward(prob, sol.z_star, g, cfg)
        return gr.W, gr.V, gr.U, gr.x_decay, gr.x_insert

    weights = tuple(nx.as_tensor(t) for t in (params.W, params.V, params.U))
    return nx.custom("deq", weights + (x_decay, x_insert), sol.z_star, vjp)


def deq_step(state_prev: Tensor, s: TimeMixSignals, params: DeqParams, cfg: DeqConfig, insert_key: str = "k_tilde") -> Tensor:
    """Drop-in replacement for :func:`rimer.wkv.wkv_step` using the fixed point."""
    shape = state_prev.shape
    flat = shape[:-2] + (shape[-2] * shape[-1],)
    x_decay = nx.reshape(decay_term(state_prev, s), flat)
    x_insert = nx.reshape(insert_term(s, insert_key), flat)
    z = deq_fixed_point(params, x_decay, x_insert, cfg)
    return nx.reshape(z, shape)
