import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cityseg import numcore as nc
from cityseg.errors import FormatError, NumericError, ShapeError

rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-30, 30))


def test_softmax_constant_row_uniform():
    p = nc.softmax_forward(np.full((2, 5), 3.7))
    np.testing.assert_allclose(p, 0.2, rtol=0, atol=1e-15)


@given(rows, st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(z, c):
    p = nc.softmax_forward(z.copy())
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)
    np.testing.assert_allclose(nc.softmax_forward(z + c), p, atol=1e-12)


def test_softmax_mask():
    p = nc.softmax_forward(np.zeros((1, 4)), np.array([[True, True, False, True]]))
    np.testing.assert_allclose(p, [[1 / 3, 1 / 3, 0, 1 / 3]])


def test_linear_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(nc.linear_forward(x, np.eye(3), np.zeros(3)), x)
    with pytest.raises(ShapeError):
        nc.linear_forward(x, np.eye(4))
    with pytest.raises(ShapeError):
        nc.matmul(x, np.eye(4))


def test_sum_gradient_exact():
    x = np.random.default_rng(1).normal(size=12)
    assert nc.finite_diff_check(lambda v: (v.sum(), np.ones_like(v)), x) < 1e-9


def test_relative_error_denominator():
    # analytic 0 vs numeric 0 -> error 0; analytic 1e-9 vs numeric 0 -> 1e-9/1e-8
    assert nc.finite_diff_check(lambda v: (0.0, np.zeros_like(v)), np.ones(3)) == 0.0
    err = nc.finite_diff_check(lambda v: (0.0, np.full_like(v, 1e-9)), np.ones(3))
    assert err == pytest.approx(0.1)


def test_detects_wrong_gradient():
    x = np.random.default_rng(2).normal(size=5)
    assert nc.finite_diff_check(lambda v: ((v ** 2).sum(), v), x) > 0.4


def _two_layer(seed):
    r = np.random.default_rng(seed)
    W1, b1 = r.normal(size=(4, 6)), r.normal(size=6)
    W2, b2 = r.normal(size=(6, 3)), r.normal(size=3)
    g, beta = 1 + 0.3 * r.normal(size=6), 0.3 * r.normal(size=6)
    R = r.normal(size=(5, 3))
    x0 = r.normal(size=(5, 4))

    def f(x):
        h = nc.linear_forward(x, W1, b1)
        n, lc = nc.layernorm_forward(h, g, beta)
        a, gc = nc.gelu_forward(n)
        y = nc.linear_forward(a, W2, b2)
        dy = R
        da, _, _ = nc.linear_backward(a, W2, dy)
        dn = nc.gelu_backward(gc, da)
        dh, _, _ = nc.layernorm_backward(lc, dn)
        dx, _, _ = nc.linear_backward(x, W1, dh)
        return float((y * R).sum()), dx

    return f, x0


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_composite(seed):
    f, x0 = _two_layer(seed)
    assert nc.finite_diff_check(f, x0) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_softmax_cross_entropy_composite(seed):
    r = np.random.default_rng(seed)
    z0 = r.normal(size=(6, 5)) * 2
    t = r.integers(0, 5, 6)

    def f(z):
        p = nc.softmax_forward(z)
        loss = -np.log(p[np.arange(6), t]).mean()
        dp = np.zeros_like(p)
        dp[np.arange(6), t] = -1.0 / (6 * p[np.arange(6), t])
        return loss, nc.softmax_backward(p, dp)

    assert nc.finite_diff_check(f, z0) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_normalize_and_param_grads(seed):
    r = np.random.default_rng(seed)
    x0 = r.normal(size=(4, 5))
    R = r.normal(size=(4, 5))

    def f(x):
        y, c = nc.l2_normalize_forward(x)
        return float((y * R).sum()), nc.l2_normalize_backward(c, R)

    assert nc.finite_diff_check(f, x0) < 1e-4
    # layernorm gain/bias gradients
    xin = r.normal(size=(3, 5))

    def g(v):
        gain, bias = v[:5], v[5:]
        y, c = nc.layernorm_forward(xin, gain, bias)
        _, dg, db = nc.layernorm_backward(c, R[:3])
        return float((y * R[:3]).sum()), np.concatenate([dg, db])

    assert nc.finite_diff_check(g, r.normal(size=10)) < 1e-4


def test_zero_norm_row():
    with pytest.raises(NumericError):
        nc.l2_normalize_forward(np.zeros((1, 3)))


def test_check_finite():
    with pytest.raises(NumericError):
        nc.check_finite(np.array([1.0, np.inf]))


# ---------------------------------------------------------------- ParamStore

def _store():
    r = np.random.default_rng(4)
    return nc.ParamStore({"a.W": r.normal(size=(3, 2)), "b": r.normal(size=4), "s": np.array(2.5)})


def test_store_slots_and_checksum():
    s = _store()
    assert all(s.grads[k].shape == s.params[k].shape for k in s)
    c = s.checksum()
    assert c == s.checksum() == s.copy().checksum()
    s.params["b"][0] += 1e-12
    assert s.checksum() != c


def test_accumulate_and_zero():
    s = _store()
    s.accumulate({"b": np.ones(4), "unknown": np.ones(2)}, 0.5)
    assert np.all(s.grads["b"] == 0.5)
    s.zero_grad()
    assert np.all(s.grads["b"] == 0)


def test_cspm_round_trip(tmp_path):
    s = _store()
    s.save(tmp_path / "p.cspm")
    back = nc.ParamStore.load(tmp_path / "p.cspm")
    assert back.names() == s.names()
    for k in s:
        np.testing.assert_array_equal(back[k], s[k].astype(np.float32))
    assert back.to_bytes() == s.to_bytes()
    assert (tmp_path / "p.cspm").read_bytes()[:4] == b"CSPM"


def test_cspm_rejects_garbage():
    with pytest.raises(FormatError):
        nc.ParamStore.from_bytes(b"XXXX\x01\x00\x00\x00")
    raw = _store().to_bytes()
    with pytest.raises(FormatError):
        nc.ParamStore.from_bytes(raw[:-5])


def test_flat_round_trip():
    s = _store()
    v = s.flat()
    s2 = s.copy()
    s2.set_flat(v * 0 + 1)
    assert np.all(s2.flat() == 1)
    assert s.flat().size == s.size()
