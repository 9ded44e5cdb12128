import numpy as np
import pytest

from gdkvm.attention import (MemoryState, QKVSequence, equivalence_trial, linear_matching_parallel,
                             linear_matching_recurrent, loglog_slope, run_recurrent, softmax_matching)
from gdkvm.tensor_core import DimensionError, make_rng, phi_kernel


def softmax_oracle(seq, t):
    """Double loop over query pixels and every stored position."""
    q = seq.queries[t - 1].astype(np.float64)
    keys = [k.astype(np.float64) for k in seq.keys[:t]]
    vals = [v.astype(np.float64) for v in seq.values[:t]]
    out = np.zeros((q.shape[0], vals[0].shape[1]))
    for p in range(q.shape[0]):
        logits, stored = [], []
        for k, v in zip(keys, vals):
            for j in range(k.shape[0]):
                logits.append(float(q[p] @ k[j]))
                stored.append(v[j])
        w = np.exp(np.array(logits) - max(logits))
        w /= w.sum()
        out[p] = sum(wi * vi for wi, vi in zip(w, stored))
    return out


def one_frame(rng, hw=4, ck=3, cv=2):
    return QKVSequence.random(rng, 1, hw, ck, cv, dtype=np.float64)


class TestSoftmaxMatching:
    def test_single_position_returns_value(self):
        seq = QKVSequence.random(make_rng(1), 1, 1, 3, 2, dtype=np.float64)
        np.testing.assert_array_equal(softmax_matching(seq, 1), seq.values[0])

    def test_identical_keys_average(self):
        k = np.array([[0.3, -0.2], [0.3, -0.2]])
        v = np.array([[1.0, 4.0], [3.0, -2.0]])
        seq = QKVSequence([k], [k], [v])
        np.testing.assert_allclose(softmax_matching(seq, 1), [[2.0, 1.0]] * 2, atol=1e-12)

    def test_vs_double_loop(self):
        seq = QKVSequence.random(make_rng(2), 3, 4, 2, 2)
        for t in (1, 2, 3):
            np.testing.assert_allclose(softmax_matching(seq, t), softmax_oracle(seq, t), atol=1e-5)

    def test_convex_hull(self):
        seq = QKVSequence.random(make_rng(3), 4, 6, 3, 5, dtype=np.float64, scale=2.0)
        out = softmax_matching(seq, 4)
        vals = np.concatenate(seq.values)
        assert np.all(out >= vals.min(axis=0) - 1e-12) and np.all(out <= vals.max(axis=0) + 1e-12)

    def test_index_range(self):
        seq = one_frame(make_rng(4))
        with pytest.raises(IndexError):
            softmax_matching(seq, 0)
        with pytest.raises(IndexError):
            softmax_matching(seq, 2)


class TestLinearMatching:
    def test_single_frame_single_pixel(self):
        seq = QKVSequence.random(make_rng(5), 1, 1, 3, 2, dtype=np.float64)
        np.testing.assert_allclose(linear_matching_parallel(seq, 1), seq.values[0], atol=1e-12)

    def test_exp_similarity_recovers_softmax(self):
        rng = make_rng(6)
        seq = QKVSequence.random(rng, 3, 5, 1, 2, dtype=np.float64)
        out = linear_matching_parallel(seq, 3, similarity=lambda q, k: np.exp(q @ k.T))
        np.testing.assert_allclose(out, softmax_matching(seq, 3), atol=1e-12)

    def test_recurrent_equals_parallel_64(self):
        seq = QKVSequence.random(make_rng(7), 6, 9, 4, 3, dtype=np.float64)
        rec = run_recurrent(seq, normalize=True)
        for t in range(1, 7):
            np.testing.assert_allclose(rec[t - 1], linear_matching_parallel(seq, t), atol=1e-10)

    def test_recurrent_equals_parallel_32(self):
        rng = make_rng(8)
        assert max(equivalence_trial(rng) for _ in range(50)) < 1e-5

    def test_single_outer_product_readout(self):
        k = np.array([[0.2, -0.5, 1.0]])
        v = np.array([[2.0, -1.0]])
        st, out = linear_matching_recurrent(MemoryState.zeros(3, 2, dtype=np.float64), k, v, k)
        fk = phi_kernel(k)
        np.testing.assert_allclose(st.S, v.T @ fk)
        np.testing.assert_allclose(out, v * (fk @ fk.T)[0, 0], atol=1e-12)
        st, out = linear_matching_recurrent(MemoryState.zeros(3, 2, True, np.float64), k, v, k, normalize=True)
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_history_permutation_invariant(self):
        seq = QKVSequence.random(make_rng(9), 3, 4, 3, 2, dtype=np.float64)
        swapped = QKVSequence([seq.queries[1], seq.queries[0], seq.queries[2]],
                              [seq.keys[1], seq.keys[0], seq.keys[2]],
                              [seq.values[1], seq.values[0], seq.values[2]])
        np.testing.assert_allclose(linear_matching_parallel(seq, 3), linear_matching_parallel(swapped, 3),
                                   atol=1e-12)
        np.testing.assert_allclose(softmax_matching(seq, 3), softmax_matching(swapped, 3), atol=1e-12)

    def test_dimension_errors(self):
        with pytest.raises(DimensionError):
            linear_matching_recurrent(MemoryState.zeros(3, 2), np.ones((4, 2)), np.ones((4, 2)), np.ones((4, 3)))
        with pytest.raises(DimensionError):
            QKVSequence([np.ones((2, 3))], [np.ones((2, 3))], [np.ones((3, 2))])


def test_loglog_slope_exact():
    xs = [8, 16, 32, 64]
    assert loglog_slope(xs, [3 * x ** 2 for x in xs]) == pytest.approx(2.0)
    assert loglog_slope(xs, [0.5 * x for x in xs]) == pytest.approx(1.0)
