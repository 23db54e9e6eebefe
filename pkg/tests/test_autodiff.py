import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpnet import autodiff as ad
from stpnet.autodiff import Tensor, grad_check
from stpnet.errors import ContractViolation, InvalidArgumentError, NumericError

from oracles import attention_naive, conv2d_naive, maxpool_naive


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestTensorBasics:
    def test_shape_matches_data(self):
        x = Tensor(np.zeros((2, 3, 4)))
        assert x.shape == (2, 3, 4)
        assert x.size == 24

    def test_dtype_selectable(self):
        assert Tensor([1.0, 2.0], dtype=np.float32).dtype == np.float32
        assert Tensor([1.0, 2.0], dtype=np.float64).dtype == np.float64
        assert Tensor([1, 2]).dtype == np.float32

    def test_grad_has_data_shape(self):
        x = t64(np.ones((3, 2)), grad=True)
        (x * x).sum().backward()
        assert x.grad.shape == x.shape

    def test_backward_twice_is_an_error(self):
        x = t64([1.0, 2.0], grad=True)
        y = (x * x).sum()
        y.backward()
        with pytest.raises(ContractViolation):
            y.backward()

    def test_rerun_forward_allows_new_backward(self):
        x = t64([1.0, 2.0], grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_shared_subexpression_visited_once(self):
        x = t64(3.0, grad=True)
        y = x * x
        z = y + y
        z.backward()
        assert x.grad == pytest.approx(12.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_is_an_error(self):
        x = t64([0.0])
        with pytest.raises(NumericError):
            x / x

    def test_no_grad_skips_recording(self):
        x = t64([1.0], grad=True)
        with ad.no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_broadcast_grad_unbroadcasts(self):
        a = t64(np.ones((2, 3)), grad=True)
        b = t64(np.ones(3), grad=True)
        (a * b).sum().backward()
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


class TestConv2d:
    def test_scalar_kernel_scales(self):
        x = t64(np.ones((1, 1, 3, 3)))
        w = t64([[[[2.0]]]])
        np.testing.assert_array_equal(ad.conv2d(x, w).data, np.full((1, 1, 3, 3), 2.0))

    def test_dilated_corners_sum_to_117(self):
        x = t64(np.arange(1, 26).reshape(1, 1, 5, 5))
        w = t64(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, dilation=2)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 117.0

    def test_depthwise_shape(self, rng):
        x = t64(rng.standard_normal((1, 2, 4, 4)))
        w = t64(rng.standard_normal((2, 1, 3, 3)))
        assert ad.conv2d(x, w, padding=1, groups=2).shape == (1, 2, 4, 4)

    @pytest.mark.parametrize(
        "shape,wshape,kw",
        [
            ((2, 4, 9, 9), (3, 4, 3, 3), dict(padding=1)),
            ((1, 3, 9, 9), (2, 3, 3, 3), dict(padding=2, dilation=2)),
            ((2, 4, 8, 7), (4, 1, 3, 3), dict(padding=1, groups=4)),
            ((2, 4, 9, 9), (6, 2, 3, 3), dict(padding=1, groups=2)),
            ((1, 2, 9, 9), (3, 2, 3, 3), dict(stride=2, padding=1)),
            ((1, 2, 8, 8), (2, 2, 3, 3), dict(padding=6, dilation=6)),
        ],
    )
    def test_matches_direct_summation(self, rng, shape, wshape, kw):
        x = rng.standard_normal(shape)
        w = rng.standard_normal(wshape)
        b = rng.standard_normal(wshape[0])
        out = ad.conv2d(t64(x), t64(w), t64(b), **kw)
        np.testing.assert_allclose(out.data, conv2d_naive(x, w, b, **kw), atol=1e-10)

    def test_output_size_formula(self, rng):
        x = t64(rng.standard_normal((1, 1, 11, 10)))
        w = t64(rng.standard_normal((1, 1, 3, 3)))
        out = ad.conv2d(x, w, stride=2, padding=1, dilation=2)
        assert out.shape[2:] == ((11 + 2 - 4 - 1) // 2 + 1, (10 + 2 - 4 - 1) // 2 + 1)

    def test_bad_groups(self, rng):
        x = t64(rng.standard_normal((1, 3, 4, 4)))
        w = t64(rng.standard_normal((2, 1, 3, 3)))
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(x, w, groups=2)

    def test_kernel_larger_than_input(self, rng):
        x = t64(rng.standard_normal((1, 1, 2, 2)))
        w = t64(rng.standard_normal((1, 1, 3, 3)))
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(x, w)

    def test_grad_check_dense(self, rng):
        x = t64(rng.standard_normal((1, 2, 6, 6)), grad=True)
        w = t64(rng.standard_normal((3, 2, 3, 3)), grad=True)
        rep = grad_check(lambda: ad.conv2d(x, w).sum(), [x, w], eps=1e-5)
        assert rep.max_rel_error <= 1e-6, rep


class TestMaxPool:
    def test_basic(self):
        out = ad.maxpool2d(t64([[[[1, 2], [3, 4]]]]), 2)
        np.testing.assert_array_equal(out.data, [[[[4]]]])

    def test_constant(self):
        out = ad.maxpool2d(t64(np.full((1, 2, 4, 4), 7.0)), 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 7.0))

    def test_grad_routes_to_max(self):
        x = t64([[[[1, 2], [3, 4]]]], grad=True)
        ad.maxpool2d(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1]]]])

    def test_ties_go_to_first(self):
        x = t64(np.ones((1, 1, 2, 2)), grad=True)
        ad.maxpool2d(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_indivisible(self):
        with pytest.raises(InvalidArgumentError):
            ad.maxpool2d(t64(np.ones((1, 1, 3, 4))), 2)

    def test_matches_naive(self, rng):
        x = rng.standard_normal((2, 3, 8, 6))
        np.testing.assert_allclose(ad.maxpool2d(t64(x), 2).data, maxpool_naive(x, 2))


class TestBatchNorm:
    def _bn(self, x, training=True, rm=None, rv=None, gamma=None, beta=None):
        C = x.shape[1]
        rm = np.zeros(C) if rm is None else rm
        rv = np.ones(C) if rv is None else rv
        g = t64(np.ones(C) if gamma is None else gamma)
        b = t64(np.zeros(C) if beta is None else beta)
        return ad.batchnorm2d(t64(x), g, b, rm, rv, training)

    def test_train_normalizes(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        out = self._bn(x).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-6
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() <= 1e-4

    def test_constant_channel_gives_zeros(self):
        out = self._bn(np.full((2, 1, 3, 3), 5.0)).data
        np.testing.assert_array_equal(out, 0.0)

    def test_eval_hand_value(self):
        out = self._bn(
            np.full((1, 1, 1, 1), 4.0), training=False, rm=np.array([2.0]), rv=np.array([4.0]),
            gamma=np.array([3.0]), beta=np.array([1.0]),
        )
        assert out.data.item() == pytest.approx(3 * (4 - 2) / math.sqrt(4 + 1e-5) + 1, abs=1e-12)
        assert out.data.item() == pytest.approx(3.99999, abs=1e-5)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 2, 3, 3)) + 5
        rm, rv = np.zeros(2), np.ones(2)
        self._bn(x, rm=rm, rv=rv)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))

    def test_too_few_values(self):
        with pytest.raises(InvalidArgumentError):
            self._bn(np.ones((1, 1, 1, 1)))


class TestAttention:
    def test_single_token_returns_v(self, rng):
        q, k = t64(rng.standard_normal((1, 1, 4))), t64(rng.standard_normal((1, 1, 4)))
        v = t64(rng.standard_normal((1, 1, 4)))
        np.testing.assert_array_equal(ad.scaled_dot_attention(q, k, v, 2).data, v.data)

    def test_identical_keys_give_uniform_weights(self, rng):
        q = t64(rng.standard_normal((1, 5, 4)))
        k = t64(np.tile(rng.standard_normal((1, 1, 4)), (1, 5, 1)))
        v = t64(rng.standard_normal((1, 5, 4)))
        _, w = ad.scaled_dot_attention(q, k, v, 1, return_weights=True)
        np.testing.assert_allclose(w.data, 0.2, atol=1e-12)

    def test_hand_example(self):
        q = t64([[[1.0], [1.0]]])
        k = t64([[[0.0], [math.log(4.0)]]])
        v = t64([[[0.0], [1.0]]])
        out, w = ad.scaled_dot_attention(q, k, v, 1, return_weights=True)
        np.testing.assert_allclose(w.data[0, 0], [[0.2, 0.8], [0.2, 0.8]], atol=1e-12)
        np.testing.assert_allclose(out.data[0, :, 0], [0.8, 0.8], atol=1e-12)

    def test_rows_stochastic(self, rng):
        q, k, v = (t64(rng.standard_normal((2, 6, 8))) for _ in range(3))
        _, w = ad.scaled_dot_attention(q, k, v, 4, return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)

    def test_matches_naive(self, rng):
        q, k, v = (rng.standard_normal((2, 5, 8)) for _ in range(3))
        out = ad.scaled_dot_attention(t64(q), t64(k), t64(v), 2)
        np.testing.assert_allclose(out.data, attention_naive(q, k, v, 2), atol=1e-12)

    def test_indivisible_heads(self, rng):
        q = t64(rng.standard_normal((1, 2, 6)))
        with pytest.raises(InvalidArgumentError):
            ad.scaled_dot_attention(q, q, q, 4)

    def test_grad_check(self, rng):
        q, k, v = (t64(rng.standard_normal((1, 4, 8)), grad=True) for _ in range(3))
        r = rng.standard_normal((1, 4, 8))
        rep = grad_check(lambda: (ad.scaled_dot_attention(q, k, v, 2) * r).sum(), [q, k, v])
        assert rep.max_rel_error <= 1e-5, rep


class TestElementwise:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])

    def test_relu_sigmoid(self):
        assert ad.relu(t64(-3.0)).data == 0
        assert ad.sigmoid(t64(0.0)).data == 0.5

    def test_nearest_upsample(self):
        out = ad.upsample2x(t64([[[[1, 2], [3, 4]]]]), "nearest")
        np.testing.assert_array_equal(
            out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )

    def test_bilinear_corner_aligned(self):
        out = ad.upsample2x(t64([[[[0.0, 3.0]]]]), "bilinear")
        np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 1.0, 2.0, 3.0])
        one = ad.upsample2x(t64(np.full((1, 1, 1, 1), 5.0)), "bilinear")
        np.testing.assert_array_equal(one.data, np.full((1, 1, 2, 2), 5.0))

    def test_axis_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            ad.softmax(t64([1.0, 2.0]), axis=3)
        with pytest.raises(InvalidArgumentError):
            t64(np.ones((2, 2))).sum(axis=2)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_softmax_sums_to_one(self, xs):
        assert abs(ad.softmax(t64(xs)).data.sum() - 1.0) <= 1e-6


def _rand(rng, shape):
    return t64(rng.standard_normal(shape), grad=True)


# op name -> builder(rng, shape_variant) returning (f, params)
def _case(name, rng, variant):
    r = rng.standard_normal
    if name == "conv2d":
        s = [(1, 2, 5, 5), (2, 3, 6, 4), (1, 4, 7, 7)][variant]
        x, w, b = _rand(rng, s), _rand(rng, (3, s[1], 3, 3)), _rand(rng, (3,))
        d = variant + 1
        proj = r((s[0], 3) + tuple(n + 2 - 2 * d for n in s[2:]))
        return (lambda: (ad.conv2d(x, w, b, padding=1, dilation=d) * proj).sum()), [x, w, b]
    if name == "depthwise":
        s = [(1, 2, 5, 5), (2, 3, 4, 6), (1, 4, 6, 6)][variant]
        x, w = _rand(rng, s), _rand(rng, (s[1], 1, 3, 3))
        proj = r(s)
        return (lambda: (ad.conv2d(x, w, padding=1, groups=s[1]) * proj).sum()), [x, w]
    if name == "maxpool2d":
        s = [(1, 1, 4, 4), (2, 3, 6, 4), (1, 2, 8, 8)][variant]
        x = _rand(rng, s)
        proj = r((s[0], s[1], s[2] // 2, s[3] // 2))
        return (lambda: (ad.maxpool2d(x, 2) * proj).sum()), [x]
    if name == "batchnorm2d":
        s = [(2, 2, 3, 3), (3, 1, 4, 2), (1, 3, 5, 5)][variant]
        x, g, b = _rand(rng, s), _rand(rng, (s[1],)), _rand(rng, (s[1],))
        proj = r(s)
        return (lambda: (ad.batchnorm2d(x, g, b, np.zeros(s[1]), np.ones(s[1]), True) * proj).sum()), [x, g, b]
    if name == "layer_norm":
        s = [(3, 4), (2, 5, 6), (1, 7)][variant]
        x, g, b = _rand(rng, s), _rand(rng, s[-1:]), _rand(rng, s[-1:])
        proj = r(s)
        return (lambda: (ad.layer_norm(x, g, b) * proj).sum()), [x, g, b]
    if name == "attention":
        s = [(1, 3, 4), (2, 5, 8), (1, 6, 4)][variant]
        q, k, v = _rand(rng, s), _rand(rng, s), _rand(rng, s)
        proj = r(s)
        return (lambda: (ad.scaled_dot_attention(q, k, v, 2) * proj).sum()), [q, k, v]
    if name == "relu":
        x = _rand(rng, [(5,), (3, 4), (2, 2, 3)][variant])
        proj = r(x.shape)
        return (lambda: (ad.relu(x) * proj).sum()), [x]
    if name == "sigmoid":
        x = _rand(rng, [(5,), (3, 4), (2, 2, 3)][variant])
        proj = r(x.shape)
        return (lambda: (ad.sigmoid(x) * proj).sum()), [x]
    if name == "gelu":
        x = _rand(rng, [(5,), (3, 4), (2, 2, 3)][variant])
        proj = r(x.shape)
        return (lambda: (ad.gelu(x) * proj).sum()), [x]
    if name == "softplus":
        x = _rand(rng, [(5,), (3, 4), (2, 2, 3)][variant])
        proj = r(x.shape)
        return (lambda: (ad.softplus(x) * proj).sum()), [x]
    if name == "softmax":
        x = _rand(rng, [(5,), (3, 4), (2, 2, 3)][variant])
        proj = r(x.shape)
        return (lambda: (ad.softmax(x, axis=-1) * proj).sum()), [x]
    if name == "log_softmax":
        x = _rand(rng, [(5,), (3, 4), (2, 2, 3)][variant])
        proj = r(x.shape)
        return (lambda: (ad.log_softmax(x, axis=0) * proj).sum()), [x]
    if name == "linear":
        s = [(3, 4), (2, 3, 5), (1, 2)][variant]
        x, w, b = _rand(rng, s), _rand(rng, (3, s[-1])), _rand(rng, (3,))
        proj = r(s[:-1] + (3,))
        return (lambda: (ad.linear(x, w, b) * proj).sum()), [x, w, b]
    if name == "upsample_nearest":
        x = _rand(rng, [(1, 1, 2, 2), (2, 3, 3, 2), (1, 2, 1, 4)][variant])
        proj = r(x.shape[:2] + (2 * x.shape[2], 2 * x.shape[3]))
        return (lambda: (ad.upsample2x(x, "nearest") * proj).sum()), [x]
    if name == "upsample_bilinear":
        x = _rand(rng, [(1, 1, 2, 2), (2, 3, 3, 2), (1, 2, 1, 4)][variant])
        proj = r(x.shape[:2] + (2 * x.shape[2], 2 * x.shape[3]))
        return (lambda: (ad.upsample2x(x, "bilinear") * proj).sum()), [x]
    if name == "concat":
        a, b = _rand(rng, (2, 3)), _rand(rng, (2, 2 + variant))
        proj = r((2, 5 + variant))
        return (lambda: (ad.concat([a, b], axis=1) * proj).sum()), [a, b]
    if name == "mean":
        x = _rand(rng, [(4,), (3, 4), (2, 3, 4)][variant])
        axes = [None, 1, (0, 2)][variant]
        return (lambda: (ad.mean(x, axes) ** 2).sum()), [x]
    if name == "max":
        x = _rand(rng, [(4,), (3, 4), (2, 3, 4)][variant])
        axes = [None, 1, (1, 2)][variant]
        return (lambda: (x.max(axis=axes) ** 2).sum()), [x]
    if name == "arith":
        a, b = _rand(rng, (3, 4)), t64(rng.uniform(1, 2, (4,)), grad=True)
        m = Tensor(r((4, 2)))
        return (lambda: ((a * b - a / b + (a ** 2.0)) @ m).sum()), [a, b]
    if name == "exp_log_sqrt":
        x = t64(rng.uniform(0.5, 2.0, [(3,), (2, 2), (4, 1)][variant]), grad=True)
        return (lambda: (x.exp() + x.log() + x.sqrt()).sum()), [x]
    raise KeyError(name)


PRIMITIVES = [
    "conv2d", "depthwise", "maxpool2d", "batchnorm2d", "layer_norm", "attention", "relu",
    "sigmoid", "gelu", "softplus", "softmax", "log_softmax", "linear", "upsample_nearest",
    "upsample_bilinear", "concat", "mean", "max", "arith", "exp_log_sqrt",
]


@pytest.mark.parametrize("variant", [0, 1, 2])
@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_grad_check(name, variant):
    rng = np.random.default_rng(100 + variant)
    f, params = _case(name, rng, variant)
    rep = grad_check(f, params, eps=1e-5, tol=1e-4, n_samples=100, name=name)
    assert rep.passed, str(rep)


class TestGradCheck:
    def test_quadratic(self):
        th = t64([1.0, 2.0, 3.0], grad=True)
        rep = grad_check(lambda: (th * th).sum(), [th])
        assert rep.max_rel_error <= 1e-9
        assert rep.n_checked == 3

    def test_samples_at_least_100(self, rng):
        th = t64(rng.standard_normal(500), grad=True)
        assert grad_check(lambda: (th ** 3.0).sum(), [th]).n_checked == 100

    def test_nondeterministic_f_detected(self):
        th = t64([1.0], grad=True)
        state = {"n": 0}

        def f():
            state["n"] += 1
            return th * float(state["n"])

        with pytest.raises(ContractViolation):
            grad_check(f, [th])

    def test_rejects_float32(self):
        th = Tensor([1.0], dtype=np.float32, requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            grad_check(lambda: th.sum(), [th])

    def test_detects_wrong_gradient(self):
        th = t64([0.5, 1.5], grad=True)

        def f():
            from stpnet.autodiff.tensor import make_result

            return make_result(np.sum(th.data ** 2), (th,), lambda g: (g * th.data,), "bad").reshape(())

        assert not grad_check(f, [th]).passed


def test_forward_bit_identical(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    a = ad.conv2d(x, w, padding=6, dilation=6).data
    b = ad.conv2d(x, w, padding=6, dilation=6).data
    assert a.tobytes() == b.tobytes()
