import sys
from pathlib import Path

import numpy as np
import pytest

from rimer import numerics as nx
from rimer.model import RimerConfig, build_model
from rimer.numerics import Tensor
from rimer.wkv import TimeMixParams, TimeMixSignals

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
DATA = ROOT / "data"
BASELINES = ROOT / "baselines" / "reference_tables.json"


def random_signals(rng, H, N, lead=(), w_min=0.01):
    """Valid signals: w in [w_min, 1), a in [0, 1], unit kappa, |k|, |v| <= 1."""
    shape = lead + (H, N)
    kappa = rng.standard_normal(shape)
    kappa /= np.linalg.norm(kappa, axis=-1, keepdims=True)

    def ball():
        u = rng.standard_normal(shape)
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        return u * rng.uniform(0, 1, size=lead + (H, 1))

    return TimeMixSignals(
        w=Tensor(rng.uniform(w_min, 1.0, size=shape)),
        a=Tensor(rng.uniform(0.0, 1.0, size=shape)),
        kappa_hat=Tensor(kappa),
        k_tilde=Tensor(ball()),
        v=Tensor(ball()),
        r=Tensor(rng.standard_normal(shape)),
    )


def uniform_signals(N, w, a, kappa, k=None, v=None, r=None):
    """Single-head signals from explicit vectors (lead shape ``(1,)`` head axis)."""

    def t(x):
        x = np.zeros(N) if x is None else np.broadcast_to(np.asarray(x, dtype=np.float64), (N,))
        return Tensor(np.array(x, dtype=np.float64)[None, :])

    return TimeMixSignals(w=t(w), a=t(a), kappa_hat=t(kappa), k_tilde=t(k), v=t(v), r=t(r))


def random_time_mix(rng, H, N, insert_key="k_tilde", bias_scale=0.5):
    p = TimeMixParams.init(H, N, rng, np.float64, insert_key=insert_key)
    d = H * N
    for name in ("w_bias", "a_bias", "kappa_bias"):
        getattr(p, name).data[:] = rng.uniform(-bias_scale, bias_scale, d)
    p.mu.data[:] = rng.uniform(0, 1, d)
    return p


def tiny_config(**kw):
    base = dict(d_model=8, n_layers=1, n_heads=2, head_dim=4, patch_len=4, dtype="float64")
    base.update(kw)
    return RimerConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def no_tape():
    assert nx.active_tape() is None
    yield
    assert nx.active_tape() is None


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
