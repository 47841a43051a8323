import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objectnlq import tensor as T
from objectnlq.errors import NonFiniteError, ShapeError
from objectnlq.gradcheck import check_function
from objectnlq.layers import Attention
from objectnlq.tensor import Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 4)).astype(np.float32)
        out = T.matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_scalar_matrices(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self, rng, f64):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, ref, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_shift_invariance(self, rng, f64):
        x = rng.standard_normal(7)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 123.25)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_direct_formula(self, f64):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.array([math.exp(v) for v in x])
        ref /= ref.sum()
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, ref, atol=1e-7)

    def test_masked_entries_exactly_zero(self, rng):
        x = Tensor(rng.standard_normal((3, 5)))
        mask = np.array([[1, 1, 0, 0, 1], [0, 1, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        y = T.softmax(x, axis=-1, mask=mask).data
        assert (y[~mask] == 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-6)

    def test_fully_masked_row_errors(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.zeros((2, 3))), mask=np.array([[1, 0, 0], [0, 0, 0]], dtype=bool))


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor(np.full((2, 6), 3.5)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.standard_normal(5)
        out = T.layer_norm(Tensor(rng.standard_normal((3, 5))), Tensor(np.zeros(5)), Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (3, 5)).astype(np.float32))

    def test_statistics(self, rng, f64):
        out = T.layer_norm(Tensor(rng.standard_normal((1, 64)) * 4 + 2), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        assert abs(out.mean()) <= 1e-6
        assert abs(out.var() - 1) <= 1e-4

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0)


class TestPointwise:
    def test_values(self):
        assert T.pointwise(Tensor([0.0]), "sigmoid").data[0] == 0.5
        assert T.pointwise(Tensor([-1.0]), "relu").data[0] == 0.0

    def test_gelu_gradient_at_point(self, f64):
        x = Tensor([0.7], requires_grad=True)
        T.gelu(x).sum().backward()
        h = 1e-5
        g = lambda v: v * 0.5 * (1 + math.erf(v / math.sqrt(2)))
        fd = (g(0.7 + h) - g(0.7 - h)) / (2 * h)
        assert abs(x.grad[0] - fd) / abs(fd) <= 1e-4

    def test_sigmoid_extremes_are_finite(self):
        y = T.sigmoid(Tensor([-200.0, 200.0])).data
        assert y[0] >= 0 and y[1] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.pointwise(Tensor([1.0]), "tanh")


class TestConv1d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 7, 4)).astype(np.float32)
        k = np.eye(4)[None]
        np.testing.assert_allclose(T.conv1d(Tensor(x), Tensor(k)).data, x, rtol=1e-6)

    @pytest.mark.parametrize("T_len,stride,expected", [(8, 2, 4), (9, 2, 5), (7, 1, 7), (10, 3, 4)])
    def test_length_law(self, T_len, stride, expected):
        out = T.conv1d(Tensor(np.ones((1, T_len, 2))), Tensor(np.ones((3, 2, 5))), stride=stride)
        assert out.shape == (1, expected, 5)

    def test_against_sliding_dot(self, rng, f64):
        x = rng.standard_normal((10, 3))
        k = rng.standard_normal((3, 3, 2))
        for stride in (1, 2):
            out = T.conv1d(Tensor(x), Tensor(k), stride=stride).data
            t_out = -(-10 // stride)
            ref = np.zeros((t_out, 2))
            for j in range(t_out):
                for tap in range(3):
                    src = j * stride + tap - 1
                    if 0 <= src < 10:
                        ref[j] += x[src] @ k[tap]
            np.testing.assert_allclose(out, ref, atol=1e-6)


class TestAttention:
    def make(self, rng, d=8, heads=2):
        return Attention(rng, d, heads)

    def test_single_key_returns_value_row(self, rng, f64):
        att = self.make(rng)
        q = rand(rng, 1, 5, 8, grad=False)
        kv = rand(rng, 1, 1, 8, grad=False)
        out = att(q, kv, kv).data
        p = {k: v.data for k, v in att.params.items()}
        vrow = (kv.data[0, 0] @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"]
        np.testing.assert_allclose(out[0], np.broadcast_to(vrow, (5, 8)), atol=1e-12)

    def test_infinite_window_equals_full_length_window(self, rng, f64):
        att = self.make(rng)
        x = rand(rng, 1, 6, 8, grad=False)
        a = att(x, x, x, window=None).data
        b = att(x, x, x, window=2 * 6 + 1).data
        np.testing.assert_array_equal(a, b)

    def test_window_locality_probe(self, rng, f64):
        att = self.make(rng)
        x = rng.standard_normal((1, 6, 8))
        base = att(Tensor(x), Tensor(x), Tensor(x), window=3).data
        y = x.copy()
        y[0, 0] += 5.0
        probe = att(Tensor(y), Tensor(y), Tensor(y), window=3).data
        assert np.all(probe[0, 5] - base[0, 5] == 0.0)
        assert np.abs(probe[0, 1] - base[0, 1]).max() > 0

    def test_heads_must_divide_dim(self, rng):
        from objectnlq.errors import ConfigError

        att = Attention(rng, 6, 4)
        x = rand(rng, 1, 2, 6, grad=False)
        with pytest.raises(ConfigError):
            att(x, x, x)

    def test_mask_hygiene(self, rng):
        att = self.make(rng)
        x = rng.standard_normal((1, 7, 8)).astype(np.float32)
        mask = np.array([[1, 1, 1, 1, 1, 0, 0]], dtype=bool)
        a = att(Tensor(x), Tensor(x), Tensor(x), window=5, q_mask=mask, k_mask=mask).data
        y = x.copy()
        y[0, 5:] = rng.standard_normal((2, 8)) * 100
        b = att(Tensor(y), Tensor(y), Tensor(y), window=5, q_mask=mask, k_mask=mask).data
        assert np.all(a[0, :5] == b[0, :5])


class TestBackward:
    def test_sum_grads_are_ones(self, rng):
        x = rand(rng, 3, 4)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_product_rule(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(3.0, requires_grad=True)
        (x * y).backward()
        assert (float(x.grad), float(y.grad)) == (3.0, 2.0)

    def test_accumulates_across_calls(self):
        x = Tensor(2.0, requires_grad=True)
        (x * x).backward()
        (x * x).backward()
        assert float(x.grad) == 8.0

    def test_reused_node(self):
        x = Tensor(1.5, requires_grad=True)
        y = x * x
        (y + y * x).backward()
        assert float(x.grad) == pytest.approx(2 * 1.5 + 3 * 1.5**2)

    def test_non_scalar_loss(self, rng):
        with pytest.raises(ShapeError):
            rand(rng, 2, 2).backward()

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.log(Tensor([0.0]))
        with pytest.raises(NonFiniteError):
            Tensor([float("nan")])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        a, b = rand(rng, m, k), rand(rng, k, n)
        w = rng.standard_normal((m, n))
        err = check_function(lambda: (T.matmul(a, b) * Tensor(w)).sum(), [a, b])
    assert err <= 1e-4


@pytest.mark.parametrize(
    "name,build",
    [
        ("add_broadcast", lambda r: ((lambda a, b: lambda: (a + b).sum())(rand(r, 3, 4), rand(r, 4)), 2)),
        ("div", lambda r: ((lambda a, b: lambda: (a / (T.exp(b) + 1.0)).sum())(rand(r, 3), rand(r, 3)), 2)),
        ("softplus", lambda r: ((lambda a: lambda: T.softplus(a * 3.0).sum())(rand(r, 6)), 1)),
        ("square_exp", lambda r: ((lambda a: lambda: T.exp(T.square(a) * -0.5).sum())(rand(r, 6)), 1)),
    ],
)
def test_elementwise_gradients(name, build, rng, f64):
    fn, _ = build(rng)
    leaves = [n for n in _leaves(fn())]
    assert check_function(fn, leaves) <= 1e-4


def _leaves(out):
    seen, stack, found = set(), [out], []
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if not n._parents and n.requires_grad:
            found.append(n)
        stack.extend(n._parents)
    return found


def test_determinism(rng):
    x = rng.standard_normal((2, 9, 8)).astype(np.float32)
    outs = []
    for _ in range(2):
        att = Attention(np.random.default_rng(5), 8, 4)
        outs.append(att(Tensor(x), Tensor(x), Tensor(x), window=3).data.tobytes())
    assert outs[0] == outs[1]
