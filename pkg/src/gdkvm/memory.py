"""State-update rules for the key-value memory.

All step functions are pure: they take a :class:`MemoryState` and return a
new one. Keys are unit-normalised before every write so that ``I - b k k^T``
is a blend towards the projector orthogonal to ``k``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .attention import MemoryState
from .tensor_core import DimensionError, phi_kernel, sigmoid


class DegenerateKeyError(ValueError):
    """A zero key cannot be normalised for a write."""


class UpdateStrategy(enum.Enum):
    BASELINE = "baseline"
    SANITY = "sanity"
    NO_ALPHA = "noalpha"
    NO_BETA = "nobeta"
    GDR = "gdr"

    @classmethod
    def parse(cls, name: str) -> "UpdateStrategy":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown strategy {name!r}; choose from "
                             f"{', '.join(s.value for s in cls)}") from None

    @property
    def uses_alpha(self) -> bool:
        return self in (UpdateStrategy.NO_BETA, UpdateStrategy.GDR)

    @property
    def uses_beta(self) -> bool:
        return self in (UpdateStrategy.NO_ALPHA, UpdateStrategy.GDR)

    def coefficients(self, alpha: float, beta: float) -> tuple[float, float, float]:
        """``(decay, erase, write)`` so that the update reads
        ``S <- decay * (S - erase * (S k) k^T) + write * v k^T``."""
        return {
            UpdateStrategy.BASELINE: (1.0, 0.0, 1.0),
            UpdateStrategy.SANITY: (1.0, 1.0, 1.0),
            UpdateStrategy.NO_ALPHA: (1.0, beta, beta),
            UpdateStrategy.NO_BETA: (alpha, 0.0, 1.0),
            UpdateStrategy.GDR: (alpha, beta, beta),
        }[self]


@dataclass(frozen=True)
class GateValues:
    alpha: float
    beta: float

    def __post_init__(self):
        # projected gates are open-interval; the closed ends are allowed for reductions
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"gate values out of range: {self}")


@dataclass
class GateProjection:
    w_alpha: np.ndarray
    w_beta: np.ndarray
    b_alpha: float
    b_beta: float

    @classmethod
    def init(cls, ck: int, cv: int, rng: np.random.Generator | None = None,
             scale: float = 0.01, dtype=np.float32) -> "GateProjection":
        n = ck + cv
        if rng is None:
            wa = np.zeros(n, dtype=dtype)
            wb = np.zeros(n, dtype=dtype)
        else:
            wa = (scale * rng.standard_normal(n)).astype(dtype)
            wb = (scale * rng.standard_normal(n)).astype(dtype)
        # sigma(b_alpha) ~ 0.95: slow forgetting; sigma(b_beta) = 0.5
        return cls(wa, wb, float(np.log(0.95 / 0.05)), 0.0)


def state_summary(S: np.ndarray) -> np.ndarray:
    """Row means (``C_v``) followed by column means (``C_k``) of the state."""
    return np.concatenate([S.mean(axis=1), S.mean(axis=0)])


def project_gates(proj: GateProjection, state: MemoryState) -> GateValues:
    s = state_summary(state.S)
    if s.shape != proj.w_alpha.shape:
        raise DimensionError(f"summary length {s.shape[0]} != projection length {proj.w_alpha.shape[0]}")
    a = sigmoid(np.asarray(proj.w_alpha @ s + proj.b_alpha, dtype=np.float64))
    b = sigmoid(np.asarray(proj.w_beta @ s + proj.b_beta, dtype=np.float64))
    return GateValues(float(a), float(b))


def unit_key(k: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(k)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateKeyError("cannot write with a zero key")
    return k / norm


def _check(state: MemoryState, k: np.ndarray, v: np.ndarray) -> None:
    cv, ck = state.S.shape
    if k.shape != (ck,) or v.shape != (cv,):
        raise DimensionError(f"key {k.shape} / value {v.shape} vs state {state.S.shape}")


def _update(state: MemoryState, k, v, decay: float, erase: float, write: float) -> MemoryState:
    _check(state, k, v)
    k = unit_key(k)
    S = state.S
    S = decay * (S - erase * np.outer(S @ k, k)) + write * np.outer(v, k)
    return MemoryState(S, state.Z, state.frame_index + 1)


def delta_rule_step(state: MemoryState, k: np.ndarray, v: np.ndarray, beta: float) -> MemoryState:
    """``S (I - beta k k^T) + beta v k^T``."""
    return _update(state, k, v, 1.0, beta, beta)


def gdr_step(state: MemoryState, k: np.ndarray, v: np.ndarray, gates: GateValues) -> MemoryState:
    """``alpha S (I - beta k k^T) + beta v k^T``."""
    return _update(state, k, v, gates.alpha, gates.beta, gates.beta)


def apply_strategy(strategy: UpdateStrategy, state: MemoryState, k: np.ndarray, v: np.ndarray,
                   gates: GateValues) -> MemoryState:
    return _update(state, k, v, *strategy.coefficients(gates.alpha, gates.beta))


def readout(state: MemoryState, q: np.ndarray) -> np.ndarray:
    """Per-pixel ``S phi(q_p)`` for an ``HW x C_k`` query block."""
    cv, ck = state.S.shape
    if q.ndim != 2 or q.shape[1] != ck:
        raise DimensionError(f"query {q.shape} vs state {state.S.shape}")
    return phi_kernel(q) @ state.S.T


# ---------------------------------------------------------------------------
# Gate statistics
# ---------------------------------------------------------------------------

N_BINS = 64


@dataclass
class GateHistogram:
    edges_value: np.ndarray
    edges_grad: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    grad_alpha: np.ndarray | None
    grad_beta: np.ndarray | None
    grad_correlation: float


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    return float((x * y).sum() / den) if den > 0 else float("nan")


def gate_statistics(alphas, betas) -> GateHistogram:
    """Fixed 64-bin histograms of the gate traces and of their step differences.

    Values are binned on ``[0, 1]`` and differences on ``[-1, 1]``. A trace of
    length one has no differences; the gradient tables are then ``None``.
    """
    a = np.asarray(alphas, dtype=np.float64)
    b = np.asarray(betas, dtype=np.float64)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("gate trace must be non-empty and alpha/beta aligned")
    ev = np.linspace(0.0, 1.0, N_BINS + 1)
    eg = np.linspace(-1.0, 1.0, N_BINS + 1)
    ha = np.histogram(a, ev)[0]
    hb = np.histogram(b, ev)[0]
    if a.size < 2:
        return GateHistogram(ev, eg, ha, hb, None, None, float("nan"))
    da, db = np.diff(a), np.diff(b)
    return GateHistogram(ev, eg, ha, hb, np.histogram(da, eg)[0], np.histogram(db, eg)[0],
                         _pearson(da, db))


def gate_trace_rows(alphas, betas):
    """Rows ``(step, alpha, beta, grad_alpha, grad_beta)``; the first step has zero gradient."""
    a = np.asarray(alphas, dtype=np.float64)
    b = np.asarray(betas, dtype=np.float64)
    da = np.concatenate([[0.0], np.diff(a)])
    db = np.concatenate([[0.0], np.diff(b)])
    return [(i, a[i], b[i], da[i], db[i]) for i in range(a.size)]
