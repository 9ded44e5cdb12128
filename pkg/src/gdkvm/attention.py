"""Softmax matching, parallel linear matching and the recurrent matrix-state form.

Frames are indexed from 1 to ``T`` in the public functions (``t`` counts how
many frames of history are visible). Every frame contributes ``HW`` memory
positions; per-frame arrays are ``HW x C_k`` (keys, queries) and
``HW x C_v`` (values).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor_core import DimensionError, phi_kernel, softmax_rows


class DegenerateNormalizerError(ArithmeticError):
    """The linear-attention denominator vanished for some query pixel."""


@dataclass
class QKVSequence:
    queries: list[np.ndarray]
    keys: list[np.ndarray]
    values: list[np.ndarray]

    def __post_init__(self):
        if not self.keys:
            raise DimensionError("sequence needs at least one frame")
        if not (len(self.queries) == len(self.keys) == len(self.values)):
            raise DimensionError("queries, keys and values must have the same frame count")
        hw, ck = self.keys[0].shape
        cv = self.values[0].shape[1]
        for q, k, v in zip(self.queries, self.keys, self.values):
            if q.shape != (hw, ck) or k.shape != (hw, ck) or v.shape != (hw, cv):
                raise DimensionError("all frames must share HW, C_k and C_v")

    @property
    def frames(self) -> int:
        return len(self.keys)

    @property
    def dims(self) -> tuple[int, int, int]:
        hw, ck = self.keys[0].shape
        return hw, ck, self.values[0].shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, frames: int, hw: int, ck: int, cv: int,
               dtype=np.float32, scale: float = 0.5) -> "QKVSequence":
        def draw(c):
            return [(scale * rng.standard_normal((hw, c))).astype(dtype) for _ in range(frames)]
        vals = [rng.uniform(-1, 1, (hw, cv)).astype(dtype) for _ in range(frames)]
        return cls(draw(ck), draw(ck), vals)


@dataclass
class MemoryState:
    """Matrix state ``S`` (``C_v x C_k``) with optional normalizer ``Z`` (``C_k``)."""

    S: np.ndarray
    Z: np.ndarray | None = None
    frame_index: int = 0

    @classmethod
    def zeros(cls, ck: int, cv: int, normalize: bool = False, dtype=np.float32) -> "MemoryState":
        z = np.zeros(ck, dtype=dtype) if normalize else None
        return cls(np.zeros((cv, ck), dtype=dtype), z, 0)

    def copy(self) -> "MemoryState":
        return MemoryState(self.S.copy(), None if self.Z is None else self.Z.copy(), self.frame_index)


def _check_t(seq: QKVSequence, t: int) -> None:
    if not 1 <= t <= seq.frames:
        raise IndexError(f"frame index {t} outside 1..{seq.frames}")


def softmax_matching(seq: QKVSequence, t: int) -> np.ndarray:
    """Quadratic softmax read of frame ``t`` against every stored position up to ``t``."""
    _check_t(seq, t)
    keys = np.concatenate(seq.keys[:t], axis=0)
    vals = np.concatenate(seq.values[:t], axis=0)
    weights = softmax_rows(seq.queries[t - 1] @ keys.T)
    return weights @ vals


def linear_matching_parallel(
    seq: QKVSequence,
    t: int,
    feature_map: Callable[[np.ndarray], np.ndarray] = phi_kernel,
    similarity: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Kernelised attention computed by explicit summation over the history.

    ``similarity(Q, K)`` overrides the factorised ``phi(Q) phi(K)^T`` weights;
    passing ``lambda q, k: np.exp(q @ k.T)`` recovers softmax matching.
    """
    _check_t(seq, t)
    q = seq.queries[t - 1]
    fq = None if similarity is not None else feature_map(q)
    hw, _, cv = seq.dims
    num = np.zeros((hw, cv), dtype=q.dtype)
    den = np.zeros((hw, 1), dtype=q.dtype)
    for i in range(t):
        if similarity is None:
            w = fq @ feature_map(seq.keys[i]).T
        else:
            w = similarity(q, seq.keys[i])
        num += w @ seq.values[i]
        den += w.sum(axis=1, keepdims=True)
    if np.any(den <= 0) or not np.all(np.isfinite(den)):
        raise DegenerateNormalizerError("non-positive attention normalizer")
    return num / den


def linear_matching_recurrent(
    state: MemoryState,
    k: np.ndarray,
    v: np.ndarray,
    q: np.ndarray,
    normalize: bool = False,
    feature_map: Callable[[np.ndarray], np.ndarray] = phi_kernel,
) -> tuple[MemoryState, np.ndarray]:
    """Write one frame into the state, then read frame ``q`` out of it.

    The write accumulates ``v_p phi(k_p)^T`` over the frame's pixels; the read
    is ``S phi(q_p)`` per pixel, divided by ``Z^T phi(q_p)`` when ``normalize``.
    """
    cv, ck = state.S.shape
    if k.ndim != 2 or k.shape[1] != ck or q.shape[1:] != (ck,) or v.shape != (k.shape[0], cv):
        raise DimensionError(f"frame dims {k.shape}/{v.shape}/{q.shape} do not match state {state.S.shape}")
    fk = feature_map(k)
    S = state.S + v.T @ fk
    Z = None
    if normalize:
        Z = (state.Z if state.Z is not None else np.zeros(ck, dtype=S.dtype)) + fk.sum(axis=0)
    fq = feature_map(q)
    out = fq @ S.T
    if normalize:
        den = fq @ Z
        if np.any(den <= 0):
            raise DegenerateNormalizerError("non-positive attention normalizer")
        out = out / den[:, None]
    return MemoryState(S, Z, state.frame_index + 1), out


def run_recurrent(seq: QKVSequence, normalize: bool = True) -> list[np.ndarray]:
    """Outputs for every frame ``t = 1..T`` from one left-to-right pass."""
    hw, ck, cv = seq.dims
    state = MemoryState.zeros(ck, cv, normalize, dtype=seq.keys[0].dtype)
    outs = []
    for k, v, q in zip(seq.keys, seq.values, seq.queries):
        state, o = linear_matching_recurrent(state, k, v, q, normalize)
        outs.append(o)
    return outs


def run_softmax(seq: QKVSequence) -> list[np.ndarray]:
    return [softmax_matching(seq, t) for t in range(1, seq.frames + 1)]


def equivalence_trial(rng: np.random.Generator, max_frames: int = 16, max_hw: int = 64,
                      dtype=np.float32) -> float:
    """Max |parallel - recurrent| over all frames of one random instance."""
    frames = int(rng.integers(1, max_frames + 1))
    hw = int(rng.integers(1, max_hw + 1))
    ck = int(rng.integers(1, 17))
    cv = int(rng.integers(1, 17))
    seq = QKVSequence.random(rng, frames, hw, ck, cv, dtype=dtype)
    rec = run_recurrent(seq, normalize=True)
    worst = 0.0
    for t in range(1, frames + 1):
        par = linear_matching_parallel(seq, t)
        worst = max(worst, float(np.max(np.abs(par - rec[t - 1]))))
    return worst


@dataclass
class ScalingResult:
    lengths: list[int]
    recurrent_seconds: list[float]
    softmax_seconds: list[float]
    recurrent_slope: float = field(init=False)
    softmax_slope: float = field(init=False)

    def __post_init__(self):
        self.recurrent_slope = loglog_slope(self.lengths, self.recurrent_seconds)
        self.softmax_slope = loglog_slope(self.lengths, self.softmax_seconds)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def scaling_benchmark(lengths: Sequence[int], hw: int = 64, ck: int = 32, cv: int = 32,
                      seed: int = 0, repeats: int = 3, normalize: bool = False) -> ScalingResult:
    """Wall time to produce all ``T`` frame outputs with each formulation.

    The best of ``repeats`` runs is kept for every length, which suppresses
    scheduler noise without changing the asymptotics being measured.
    """
    import time

    from .tensor_core import make_rng

    rec_t, soft_t = [], []
    for T in lengths:
        seq = QKVSequence.random(make_rng(seed, "bench", T), T, hw, ck, cv)
        best_r = best_s = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            run_recurrent(seq, normalize=normalize)
            t1 = time.perf_counter()
            run_softmax(seq)
            t2 = time.perf_counter()
            best_r = min(best_r, t1 - t0)
            best_s = min(best_s, t2 - t1)
        rec_t.append(best_r)
        soft_t.append(best_s)
    return ScalingResult(list(lengths), rec_t, soft_t)
