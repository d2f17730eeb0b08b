import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgvae import autodiff as ad
from vgvae.autodiff import ContractError, DimensionError, DomainError, NumericError, Tape, Tensor

from conftest import pointwise_check


def grad_of(build, *leaves):
    for p in leaves:
        p.zero_grad()
    with Tape() as tape:
        out = build()
    ad.backward(tape, out)
    return [p.grad for p in leaves]


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal((eye @ Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_example():
    a = ad.parameter([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    (ga,) = grad_of(lambda: ad.tsum(ad.matmul(a, b)), a)
    np.testing.assert_allclose(ga, [[3.0, 4.0]])
    num = ad.numerical_grad(lambda: ad.tsum(ad.matmul(a, b)).item(), a, h=1e-6)
    np.testing.assert_allclose(num, [[3.0, 4.0]], rtol=1e-8)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert ad.elementwise("tanh", Tensor([0.0])).data[0] == 0.0
    assert ad.elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5
    x = ad.parameter([0.3])
    (g,) = grad_of(lambda: ad.tsum(ad.elementwise("tanh", x)), x)
    num = ad.numerical_grad(lambda: ad.tsum(ad.tanh(x)).item(), x, h=1e-6)
    assert abs(g[0] - (1 - np.tanh(0.3) ** 2)) < 1e-15
    assert abs(num[0] - g[0]) / g[0] < 1e-6


def test_elementwise_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DimensionError):
        ad.elementwise("add", Tensor([1.0]), Tensor([1.0, 2.0]))
    with pytest.raises(ContractError):
        ad.elementwise("cosh", Tensor([1.0]))


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = ad.add_row(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    np.testing.assert_array_equal((Tensor([1.0, 2.0]) * 2.0).data, [2.0, 4.0])


def test_log_softmax_examples():
    np.testing.assert_allclose(ad.log_softmax(Tensor([0.0, 0.0])).data, [-np.log(2)] * 2, rtol=0, atol=1e-15)
    big = ad.log_softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and abs(big[0]) < 1e-300 + 1e-15
    mpmath.mp.dps = 40
    vals = ad.log_softmax(Tensor([1.0, 2.0, 3.0])).data
    lse = mpmath.log(sum(mpmath.e**k for k in (1, 2, 3)))
    for v, k in zip(vals, (1, 2, 3)):
        assert abs(v - float(k - lse)) < 1e-15


def test_log_softmax_nan_rejected():
    with pytest.raises(NumericError):
        ad.log_softmax(Tensor([0.0, np.nan]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_log_softmax_normalised(xs):
    out = ad.log_softmax(Tensor(xs)).data
    assert abs(np.exp(out).sum() - 1.0) < 1e-12


def test_concat_examples():
    np.testing.assert_array_equal(ad.concat([Tensor([1.0]), Tensor([2.0])]).data, [1.0, 2.0])
    y, z = ad.parameter(np.zeros((1, 50))), ad.parameter(np.zeros((1, 50)))
    assert ad.concat([y, z], axis=1).shape == (1, 100)
    gy, gz = grad_of(lambda: ad.tsum(ad.concat([y, z], axis=1)), y, z)
    np.testing.assert_array_equal(gy, np.ones((1, 50)))
    np.testing.assert_array_equal(gz, np.ones((1, 50)))


def test_concat_errors():
    with pytest.raises(DimensionError):
        ad.concat([Tensor([1.0]), Tensor([2.0])], axis=1)
    with pytest.raises(DimensionError):
        ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=1)


def test_backward_examples():
    w = ad.parameter(np.zeros((2, 3)))
    (g,) = grad_of(lambda: ad.tsum(w), w)
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    w = ad.parameter([1.0, -2.0])
    (g,) = grad_of(lambda: ad.tsum(w * w), w)
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_backward_rejects_non_scalar():
    w = ad.parameter([1.0, 2.0])
    with Tape() as tape:
        out = w * w
    with pytest.raises(ContractError):
        ad.backward(tape, out)


def test_backward_accumulates_without_zeroing():
    w = ad.parameter([1.0, -2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.tsum(w * w)
        ad.backward(tape, loss)
    np.testing.assert_array_equal(w.grad, [4.0, -8.0])


def test_tensor_from_other_tape_rejected():
    w = ad.parameter([1.0])
    with Tape():
        h = w * w
    with Tape():
        with pytest.raises(ContractError):
            ad.tsum(h * w)


def _mlp(rng, widths):
    return [(ad.parameter(rng.uniform(-1, 1, (a, b))), ad.parameter(rng.uniform(-1, 1, b)))
            for a, b in zip(widths[:-1], widths[1:])]


def test_three_layer_mlp_gradients(rng):
    layers = _mlp(rng, [4, 6, 5, 1])
    x = Tensor(rng.standard_normal((3, 4)))

    def forward():
        h = x
        for i, (w, b) in enumerate(layers):
            h = ad.add_row(ad.matmul(h, w), b)
            if i < len(layers) - 1:
                h = ad.tanh(h)
        return ad.tsum(h)

    params = [p for layer in layers for p in layer]
    grad_of(forward, *params)
    for p in params:
        assert pointwise_check(lambda: forward().item(), p) < 1e-4


def test_linearity_of_accumulation(rng):
    w = ad.parameter(rng.standard_normal(4))
    (g1,) = grad_of(lambda: ad.tsum(ad.tanh(w)), w)
    g1 = g1.copy()
    (g2,) = grad_of(lambda: ad.tsum(ad.exp(w)), w)
    g2 = g2.copy()
    (g,) = grad_of(lambda: ad.tsum(ad.tanh(w)) + ad.tsum(ad.exp(w)), w)
    np.testing.assert_allclose(g, g1 + g2, rtol=1e-14)


def test_gradients_bit_reproducible(rng):
    w = ad.parameter(rng.standard_normal((3, 3)))

    def f():
        return ad.tsum(ad.log_softmax(ad.matmul(w, w)))

    (a,) = grad_of(f, w)
    a = a.copy()
    (b,) = grad_of(f, w)
    assert np.array_equal(a, b)


# random-configuration gradient checks for every primitive

def _unary_cases():
    return {
        "tanh": (ad.tanh, lambda r, s: r.standard_normal(s)),
        "sigmoid": (ad.sigmoid, lambda r, s: r.standard_normal(s) * 3),
        "relu": (ad.relu, lambda r, s: np.where(r.random(s) < 0.5, -1, 1) * r.uniform(0.1, 2, s)),
        "exp": (ad.exp, lambda r, s: r.standard_normal(s)),
        "log": (ad.log, lambda r, s: r.uniform(0.2, 3, s)),
        "softplus": (ad.softplus, lambda r, s: r.standard_normal(s) * 3),
        "neg": (ad.neg, lambda r, s: r.standard_normal(s)),
        "scale": (lambda x: ad.scale(x, -1.7), lambda r, s: r.standard_normal(s)),
        "add_scalar": (lambda x: ad.add_scalar(x, 0.3), lambda r, s: r.standard_normal(s)),
        "log_softmax": (ad.log_softmax, lambda r, s: r.standard_normal(s) * 2),
        "normalize_rows": (ad.normalize_rows, lambda r, s: r.standard_normal(s)),
        "columns": (lambda x: ad.columns(x, 1, 3), lambda r, s: r.standard_normal(s)),
        "take_rows": (lambda x: ad.take_rows(x, [0, 2, 0, 1]), lambda r, s: r.standard_normal(s)),
        "segment_mean": (lambda x: ad.segment_mean(x, [0, 1, 1], 2), lambda r, s: r.standard_normal(s)),
        "segment_sum": (lambda x: ad.segment_sum(x, [1, 1, 0], 3), lambda r, s: r.standard_normal(s)),
        "reshape": (lambda x: ad.reshape(x, (4, 3)), lambda r, s: r.standard_normal(s)),
        "pick": (lambda x: ad.pick(x, [0, 1, 2, 2], [3, 0, 1, 1]), lambda r, s: r.standard_normal(s)),
        "tsum_axis0": (lambda x: ad.tsum(x, axis=0), lambda r, s: r.standard_normal(s)),
        "tsum_axis1": (lambda x: ad.tsum(x, axis=1), lambda r, s: r.standard_normal(s)),
        "mean": (ad.mean, lambda r, s: r.standard_normal(s)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_primitive_gradients(name):
    op, sample = _unary_cases()[name]
    for seed in range(5):
        r = np.random.default_rng(seed)
        x = ad.parameter(sample(r, (3, 4)))
        weights = Tensor(r.standard_normal(op(Tensor(x.data)).shape))
        f = lambda: ad.tsum(ad.mul(op(x), weights))
        grad_of(f, x)
        assert pointwise_check(lambda: f().item(), x) < 1e-4, (name, seed)


_BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "row_dot": ad.row_dot,
    "concat0": lambda a, b: ad.concat([a, b], axis=0),
    "concat1": lambda a, b: ad.concat([a, b], axis=1),
    "matmul_t": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
}


@pytest.mark.parametrize("name", sorted(_BINARY))
def test_binary_primitive_gradients(name):
    op = _BINARY[name]
    for seed in range(5):
        r = np.random.default_rng(seed)
        a, b = ad.parameter(r.standard_normal((3, 4))), ad.parameter(r.standard_normal((3, 4)))
        weights = Tensor(r.standard_normal(op(Tensor(a.data), Tensor(b.data)).shape))
        f = lambda: ad.tsum(ad.mul(op(a, b), weights))
        grad_of(f, a, b)
        for p in (a, b):
            assert pointwise_check(lambda: f().item(), p) < 1e-4, (name, seed)


def test_add_row_gradient(rng):
    x, b = ad.parameter(rng.standard_normal((3, 4))), ad.parameter(rng.standard_normal(4))
    weights = Tensor(rng.standard_normal((3, 4)))
    f = lambda: ad.tsum(ad.mul(ad.tanh(ad.add_row(x, b)), weights))
    grad_of(f, x, b)
    assert pointwise_check(lambda: f().item(), x) < 1e-4
    assert pointwise_check(lambda: f().item(), b) < 1e-4


@pytest.mark.parametrize("mask", [None, [1.0, 0.0, 1.0]])
def test_lstm_step_gradients(rng, mask):
    B, H = 3, 4
    xp = ad.parameter(rng.standard_normal((B, 4 * H)))
    hc = ad.parameter(rng.standard_normal((B, 2 * H)))
    w = ad.parameter(rng.standard_normal((H, 4 * H)) * 0.5)
    b = ad.parameter(rng.standard_normal(4 * H))
    weights = Tensor(rng.standard_normal((B, 2 * H)))
    f = lambda: ad.tsum(ad.mul(ad.lstm_step(xp, hc, w, b, mask), weights))
    grad_of(f, xp, hc, w, b)
    for p in (xp, hc, w, b):
        assert pointwise_check(lambda: f().item(), p) < 1e-4


def test_lstm_step_mask_carries_state(rng):
    hc = Tensor(rng.standard_normal((2, 6)))
    out = ad.lstm_step(Tensor(rng.standard_normal((2, 12))), hc, Tensor(rng.standard_normal((3, 12))),
                       Tensor(np.zeros(12)), [0.0, 1.0])
    np.testing.assert_array_equal(out.data[0], hc.data[0])
    assert not np.array_equal(out.data[1], hc.data[1])


def test_lstm_step_matches_reference_equations(rng):
    H = 3
    x, h, c = rng.standard_normal((1, 4 * H)), rng.standard_normal((1, H)), rng.standard_normal((1, H))
    w, b = rng.standard_normal((H, 4 * H)), rng.standard_normal(4 * H)
    out = ad.lstm_step(Tensor(x), Tensor(np.hstack([h, c])), Tensor(w), Tensor(b)).data
    z = x + h @ w + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, o, g = sig(z[:, :H]), sig(z[:, H:2 * H]), sig(z[:, 2 * H:3 * H]), np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    np.testing.assert_allclose(out, np.hstack([o * np.tanh(c_new), c_new]), rtol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_log_softmax_gradient_property(seed):
    r = np.random.default_rng(seed)
    x = ad.parameter(r.standard_normal((2, 5)) * 4)
    weights = Tensor(r.standard_normal((2, 5)))
    f = lambda: ad.tsum(ad.mul(ad.log_softmax(x), weights))
    grad_of(f, x)
    assert pointwise_check(lambda: f().item(), x) < 1e-4


def test_values_without_tape_are_not_recorded():
    w = ad.parameter([1.0])
    out = w * w
    assert out.is_leaf and not out.requires_grad
