import numpy as np
import pytest

from gdkvm import autograd as ag
from gdkvm.memory import UpdateStrategy
from gdkvm.tensor_core import make_rng

RTOL = 1e-4


def check(build, shapes, seed=0, instances=10, positive=(), full_norm=False):
    """FD-check ``sum(build(*nodes) * R)`` for random inputs of the given shapes."""
    for inst in range(instances):
        rng = make_rng(seed, inst)
        params = {}
        for i, s in enumerate(shapes):
            x = rng.standard_normal(s)
            params[f"x{i}"] = np.abs(x) + 0.5 if i in positive else x
        out_shape = build(*[ag.Tape().constant(params[f"x{i}"]) for i in range(len(shapes))]).shape
        R = rng.standard_normal(out_shape)

        def f(p):
            tape = ag.Tape(full_norm_grad=full_norm)
            nodes = [tape.param(f"x{i}", p[f"x{i}"]) for i in range(len(shapes))]
            out = build(*nodes)
            return tape, ag.sum(out * tape.constant(R))

        tape, loss = f(params)
        grads = tape.backward(loss)
        num = ag.finite_difference(lambda p: float(f(p)[1].value), params)
        for k in params:
            assert ag.relative_error(grads[k], num[k]) <= RTOL, (k, inst)


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], ()),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], ()),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)], ()),
    "div": (lambda a, b: a / b, [(2, 3), (3,)], (1,)),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)], ()),
    "matvec": (lambda a, b: a @ b, [(3, 4), (4,)], ()),
    "sum": (lambda a: ag.sum(a, axis=(0, 2)), [(2, 3, 4)], ()),
    "mean": (lambda a: ag.mean(a, axis=1, keepdims=True), [(2, 3, 4)], ()),
    "reshape": (lambda a: ag.reshape(a, (6, 2)), [(3, 4)], ()),
    "transpose": (lambda a: ag.transpose(a, (2, 0, 1)), [(2, 3, 4)], ()),
    "concat": (lambda a, b: ag.concat([a, b], axis=-1), [(2, 3), (2, 2)], ()),
    "select": (lambda a: ag.select(a, 1), [(2, 3, 4)], ()),
    "sigmoid": (lambda a: ag.sigmoid(a), [(3, 5)], ()),
    "tanh": (lambda a: ag.tanh(a), [(3, 5)], ()),
    "phi": (lambda a: ag.phi(a), [(4, 5)], ()),
    "gap": (lambda a: ag.gap(a), [(2, 3, 4, 2)], ()),
    "expand": (lambda a: ag.expand(a, 3, 2), [(2, 4)], ()),
    "upsample2": (lambda a: ag.upsample2(a), [(1, 3, 2, 2)], ()),
    "avgpool": (lambda a: ag.avgpool(a, 2), [(1, 4, 6, 2)], ()),
    "conv3": (lambda x, w, b: ag.conv2d(x, w, b), [(2, 5, 4, 3), (3, 3, 3, 2), (2,)], ()),
    "conv3_stride2": (lambda x, w, b: ag.conv2d(x, w, b, stride=2), [(1, 7, 6, 2), (3, 3, 2, 2), (2,)], ()),
    "conv3_one_channel": (lambda x, w, b: ag.conv2d(x, w, b), [(2, 5, 4, 1), (3, 3, 1, 3), (3,)], ()),
    "conv3_one_channel_stride2": (lambda x, w, b: ag.conv2d(x, w, b, stride=2),
                                  [(1, 7, 6, 1), (3, 3, 1, 2), (2,)], ()),
    "conv1": (lambda x, w, b: ag.conv2d(x, w, b), [(1, 3, 3, 2), (1, 1, 2, 3), (3,)], ()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_fd(name):
    build, shapes, positive = PRIMITIVES[name]
    check(build, shapes, seed=hash(name) % 1000, positive=positive)


def test_normalize_rows_fd():
    check(lambda a: ag.normalize_rows(a), [(2, 5, 3)], full_norm=True)


def test_normalize_rows_straight_through():
    x = make_rng(1).standard_normal((4, 3)) + 2
    tape = ag.Tape()
    a = tape.param("a", x)
    loss = ag.sum(ag.normalize_rows(a))
    g = tape.backward(loss)["a"]
    np.testing.assert_allclose(g, 1 / np.linalg.norm(x, axis=-1, keepdims=True) * np.ones_like(x))


def test_bce_fd():
    rng = make_rng(2)
    y = (rng.uniform(size=(2, 3, 3, 1)) > 0.5).astype(np.float64)
    check(lambda z: ag.bce_with_logits(z, z.tape.constant(y)), [(2, 3, 3, 1)])


@pytest.mark.parametrize("strategy", list(UpdateStrategy))
def test_memory_scan_six_steps(strategy):
    """Gradient through the token scan, including decay, for each strategy's coefficient pattern."""
    rng = make_rng(3, strategy.value)
    n, p, ck, cv = 2, 6, 3, 2
    params = {"S": rng.standard_normal((n, cv, ck)), "K": rng.standard_normal((n, p, ck)),
              "V": rng.standard_normal((n, p, cv)), "a": rng.uniform(0.2, 0.9, n),
              "b": rng.uniform(0.2, 0.9, n)}
    R = rng.standard_normal((n, cv, ck))

    def f(pr):
        tape = ag.Tape(full_norm_grad=True)
        P = {k: tape.param(k, v) for k, v in pr.items()}
        S, K = P["S"], ag.normalize_rows(P["K"])
        one = tape.constant(np.ones(n))
        zero = tape.constant(np.zeros(n))
        if strategy.uses_alpha:
            S = S * ag.reshape(P["a"], (n, 1, 1))
        erase = {UpdateStrategy.BASELINE: zero, UpdateStrategy.SANITY: one,
                 UpdateStrategy.NO_BETA: zero}.get(strategy, P["b"])
        write = P["b"] if strategy.uses_beta else one
        out = ag.memory_scan(S, K, P["V"], erase, write)
        return tape, ag.sum(out * tape.constant(R))

    tape, loss = f(params)
    grads = tape.backward(loss)
    num = ag.finite_difference(lambda pr: float(f(pr)[1].value), params)
    for k in params:
        assert ag.relative_error(grads[k], num[k]) <= RTOL, k


def test_gdr_recurrence_fd():
    """Six frame-level GDR writes chained on one state."""
    rng = make_rng(4)
    ck, cv, p = 3, 2, 4
    params = {"S": rng.standard_normal((1, cv, ck)), "ga": rng.standard_normal(cv + ck),
              "gb": rng.standard_normal(cv + ck)}
    keys = [rng.standard_normal((1, p, ck)) for _ in range(6)]
    vals = [rng.standard_normal((1, p, cv)) for _ in range(6)]

    def f(pr):
        tape = ag.Tape(full_norm_grad=True)
        S = tape.param("S", pr["S"])
        ga, gb = tape.param("ga", pr["ga"]), tape.param("gb", pr["gb"])
        for k, v in zip(keys, vals):
            summary = ag.concat([ag.mean(S, axis=2), ag.mean(S, axis=1)], axis=-1)
            a = ag.sigmoid(summary @ ga)
            b = ag.sigmoid(summary @ gb)
            S = ag.memory_scan(S * ag.reshape(a, (1, 1, 1)), ag.normalize_rows(tape.constant(k)),
                               tape.constant(v), b, b)
        return tape, ag.sum(S * S)

    tape, loss = f(params)
    grads = tape.backward(loss)
    num = ag.finite_difference(lambda pr: float(f(pr)[1].value), params)
    for k in params:
        assert ag.relative_error(grads[k], num[k]) <= RTOL, k


def test_delta_write_readout_hand_gradient():
    """loss = w . (S1 q) with S1 = S0 (I - b k k^T) + b v k^T; dL/dv = b (k.q) w, dL/dS0 = w q^T (I - b k k^T)."""
    rng = make_rng(5)
    ck, cv = 4, 3
    k = rng.standard_normal(ck)
    k /= np.linalg.norm(k)
    q, w, v0, S0 = rng.standard_normal(ck), rng.standard_normal(cv), rng.standard_normal(cv), rng.standard_normal((cv, ck))
    b = 0.3
    tape = ag.Tape()
    S = tape.param("S", S0[None])
    v = tape.param("v", v0[None, None])
    out = ag.memory_scan(S, tape.constant(k[None, None]), v, tape.constant(np.array([b])), tape.constant(np.array([b])))
    loss = ag.sum((out @ tape.constant(q)) * tape.constant(w[None]))
    g = tape.backward(loss)
    np.testing.assert_allclose(g["v"][0, 0], b * (k @ q) * w, atol=1e-12)
    np.testing.assert_allclose(g["S"][0], np.outer(w, q) @ (np.eye(ck) - b * np.outer(k, k)), atol=1e-12)


def test_half_square_norm():
    x = make_rng(6).standard_normal((3, 4))
    tape = ag.Tape()
    a = tape.param("x", x)
    g = tape.backward(ag.sum(a * a) * 0.5)
    np.testing.assert_allclose(g["x"], x, atol=1e-15)


def test_non_scalar_root():
    tape = ag.Tape()
    with pytest.raises(ValueError):
        tape.backward(tape.param("x", np.ones(3)) * 2.0)


def test_replay_reproduces_forward():
    rng = make_rng(7)
    tape = ag.Tape()
    x = tape.param("x", rng.standard_normal((1, 6, 6, 2)))
    w = tape.param("w", rng.standard_normal((3, 3, 2, 3)))
    b = tape.param("b", rng.standard_normal(3))
    y = ag.tanh(ag.conv2d(x, w, b, stride=2))
    z = ag.sum(ag.phi(ag.upsample2(y)) * 0.3)
    values = tape.replay()
    for node in tape.nodes:
        np.testing.assert_array_equal(values[node.index], node.value)
    assert float(values[z.index]) == float(z.value)


def test_accumulation_order_independent():
    x0 = make_rng(8).standard_normal(5)
    tape = ag.Tape()
    x = tape.param("x", x0)
    g1 = tape.backward(ag.sum(x * 2.0 + x * x + ag.tanh(x)))["x"]
    tape = ag.Tape()
    x = tape.param("x", x0)
    g2 = tape.backward(ag.sum(ag.tanh(x) + x * x + x * 2.0))["x"]
    np.testing.assert_allclose(g1, g2, atol=1e-15)


def test_constants_get_no_gradient():
    tape = ag.Tape()
    c = tape.constant(np.ones(3))
    p = tape.param("p", np.full(3, 2.0))
    out = ag.sum(c * p)
    assert not c.requires and out.requires
    assert set(tape.backward(out)) == {"p"}


class TestClip:
    def test_scale_half(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0, 0.0], [0.0, 2.0 * np.sqrt(2.75)]])}
        assert ag.global_norm(g) == pytest.approx(6.0)
        out = ag.clip_global_norm(g, 3.0)
        np.testing.assert_allclose(out["a"], [1.5, 0.0])
        assert ag.global_norm(out) == pytest.approx(3.0)

    def test_unchanged(self):
        g = {"a": np.array([0.6, 0.8])}
        np.testing.assert_array_equal(ag.clip_global_norm(g, 3.0)["a"], g["a"])

    def test_vs_oracle_and_idempotent(self):
        rng = make_rng(9)
        for _ in range(20):
            g = {k: rng.standard_normal(rng.integers(1, 6, 2)) * rng.uniform(0, 5) for k in "abc"}
            norm = np.sqrt(sum((v ** 2).sum() for v in g.values()))
            once = ag.clip_global_norm(g, 3.0)
            assert ag.global_norm(once) == pytest.approx(min(norm, 3.0))
            twice = ag.clip_global_norm(once, 3.0)
            for k in g:
                np.testing.assert_allclose(twice[k], once[k], rtol=1e-12)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            ag.clip_global_norm({"a": np.ones(2)}, 0.0)


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = ag.AdamW(lr=0.1, weight_decay=0.0)
        out = opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_unit_grad_first_step(self):
        lr, wd, eps = 0.01, 0.1, 1e-8
        p0 = np.array([0.5, -1.5])
        out = ag.AdamW(lr=lr, weight_decay=wd, eps=eps).step({"w": p0}, {"w": np.ones(2)})["w"]
        # bias correction makes mhat = vhat = 1 on the first step
        np.testing.assert_allclose(out, p0 * (1 - lr * wd) - lr * 1 / (1 + eps), atol=1e-15)

    def test_second_step_formula(self):
        b1, b2, lr = 0.9, 0.999, 0.05
        g1, g2 = 0.3, -1.2
        opt = ag.AdamW(lr=lr, weight_decay=0.0)
        p = opt.step({"w": np.array([0.0])}, {"w": np.array([g1])})
        p = opt.step(p, {"w": np.array([g2])})
        m = (1 - b1) * (b1 * g1 + g2)
        v = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2)
        mhat, vhat = m / (1 - b1 ** 2), v / (1 - b2 ** 2)
        step1 = -lr * g1 / (abs(g1) + 1e-8)
        assert p["w"][0] == pytest.approx(step1 - lr * mhat / (np.sqrt(vhat) + 1e-8), abs=1e-12)

    def test_decay_only(self):
        p0 = np.array([2.0, -4.0])
        out = ag.AdamW(lr=0.1, weight_decay=0.5).step({"w": p0}, {"w": np.zeros(2)})["w"]
        np.testing.assert_allclose(out, p0 * (1 - 0.05))

    def test_step_from_one(self):
        with pytest.raises(ValueError):
            ag.adamw_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0.1, 0.0, (0.9, 0.999), 0)
