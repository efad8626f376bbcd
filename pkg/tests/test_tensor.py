import numpy as np
import pytest

from fmjam import tensor as T
from fmjam.rng import Rng
from fmjam.tensor import (
    GaussianParams,
    NonFiniteError,
    Tensor,
    backward,
    gaussian_reparam,
    grad_check,
    stop_grad,
)


def test_backward_elementwise_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    grads = backward(loss, [x])
    np.testing.assert_allclose(grads[id(x)], [2.0, 4.0, 6.0])


def test_backward_stop_gradient_semantics():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (stop_grad(x) * x).sum()
    grads = backward(loss, [x])
    # d/dx of sg(x) * x is sg(x), not 2x
    np.testing.assert_allclose(grads[id(x)], [1.0, 2.0])


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * x, [x])


def test_unreachable_parameter_gets_exact_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    loss = (x * x).sum()
    grads = backward(loss, [x, y])
    assert np.all(grads[id(y)] == 0.0)


def test_param_behind_stop_grad_gets_exact_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (stop_grad(x * 2.0) ** 2).sum()
    grads = backward(loss, [x])
    assert np.all(grads[id(x)] == 0.0)


def test_backward_is_linear():
    rng = Rng(7, "linearity")
    x = Tensor(rng.normal((4,)), requires_grad=True)

    def l1(v):
        return (v * v).sum()

    def l2(v):
        return T.tanh(v).sum()

    a, b = 2.5, -1.75
    g1 = backward(l1(x), [x])[id(x)]
    g2 = backward(l2(x), [x])[id(x)]
    g_combined = backward(l1(x) * a + l2(x) * b, [x])[id(x)]
    np.testing.assert_allclose(g_combined, a * g1 + b * g2, rtol=1e-12)


def test_mlp_grads_match_central_differences():
    rng = Rng(3, "mlp")
    w1 = rng.normal((5, 8)) * 0.5
    w2 = rng.normal((8, 8)) * 0.5
    w3 = rng.normal((8, 1)) * 0.5
    x0 = rng.normal((2, 5))

    def net(flat_w1: Tensor) -> Tensor:
        h = T.tanh(Tensor(x0) @ flat_w1.reshape(5, 8))
        h = T.tanh(h @ Tensor(w2))
        return (h @ Tensor(w3)).sum()

    err = grad_check(net, Tensor(w1.reshape(-1)), eps=1e-5)
    assert err < 1e-6


def test_grad_check_identity():
    err = grad_check(lambda v: v.sum(), Tensor(np.array([0.3, -1.2])), eps=1e-5)
    assert err < 1e-10


def test_grad_check_tanh():
    err = grad_check(lambda v: T.tanh(v).sum(), Tensor(np.array([0.5])), eps=1e-5)
    assert err < 1e-8


def test_grad_check_reports_broken_gradient():
    # op whose backward is deliberately off by 2x
    def doubled_square(v: Tensor) -> Tensor:
        out = Tensor._result(v.data * v.data, (v,), "bad_square",
                             lambda g: (g * 4.0 * v.data,))
        return out.sum()

    err = grad_check(doubled_square, Tensor(np.array([0.7, -1.3])), eps=1e-5)
    assert err == pytest.approx(1.0, abs=1e-3)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda v: v.sum(), Tensor([1.0]), eps=0.0)


PRIMITIVES = [
    ("add", lambda v, c: (v + c).sum(), 0.0),
    ("sub", lambda v, c: (c - v).sum(), 0.0),
    ("mul", lambda v, c: (v * c).sum(), 0.0),
    ("div", lambda v, c: (v / (c * c + 0.5)).sum(), 0.0),
    ("div_rev", lambda v, c: (c / (v * v + 0.5)).sum(), 0.0),
    ("pow2", lambda v, c: (v ** 2).sum(), 0.0),
    ("square", lambda v, c: T.square(v).sum(), 0.0),
    ("exp", lambda v, c: T.exp(v).sum(), 0.0),
    ("log", lambda v, c: T.log(v * v + 1.0).sum(), 0.0),
    ("tanh", lambda v, c: T.tanh(v).sum(), 0.0),
    ("sigmoid", lambda v, c: T.sigmoid(v).sum(), 0.0),
    ("softplus", lambda v, c: T.softplus(v).sum(), 0.0),
    ("relu", lambda v, c: T.relu(v + 0.05).sum(), 0.3),
    ("sum_axis", lambda v, c: (T.tsum(v.reshape(2, 3), axis=1) ** 2).sum(), 0.0),
    ("mean", lambda v, c: (T.tmean(v.reshape(2, 3), axis=0) ** 2).sum(), 0.0),
    ("logsumexp", lambda v, c: T.logsumexp(v.reshape(2, 3), axis=1).sum(), 0.0),
    ("matmul", lambda v, c: (v.reshape(2, 3) @ c).sum(), 0.0),
    ("reshape_take", lambda v, c: (v.reshape(3, 2)[1:, :] ** 2).sum(), 0.0),
    ("concat", lambda v, c: T.concat([v.reshape(2, 3), v.reshape(2, 3) * 2.0], axis=1).sum(), 0.0),
    ("stack", lambda v, c: (T.stack([v.reshape(2, 3), v.reshape(2, 3)], axis=0) ** 2).sum(), 0.0),
    ("swapaxes", lambda v, c: ((v.reshape(2, 3).mT @ c.mT) ** 2).sum(), 0.0),
]


@pytest.mark.parametrize("name,fn,shift", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_every_primitive_passes_grad_check(name, fn, shift):
    rng = Rng(11, f"prim/{name}")
    const_shape = (3, 2) if name in ("matmul", "swapaxes") else (6,)
    const = Tensor(rng.normal(const_shape))
    for trial in range(10):
        x = Tensor(rng.normal((6,)) + shift)
        err = grad_check(lambda v: fn(v, const), x, eps=1e-5)
        assert err < 1e-6, f"{name} trial {trial}: rel err {err}"


def test_matmul_batched_gradient():
    rng = Rng(5, "batched")
    a = rng.normal((4, 3, 2))

    def fn(v):
        j = v.reshape(4, 3, 2)
        g = j.mT @ j  # (4, 2, 2)
        return (g * g).sum()

    err = grad_check(fn, Tensor(a.reshape(-1)), eps=1e-5)
    assert err < 1e-6


def test_forward_overflow_raises():
    x = Tensor([800.0])
    with pytest.raises(NonFiniteError):
        T.exp(x)


def test_log_of_zero_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_leaf_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_graph_visits_each_node_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    loss = (y + y).sum()  # diamond: y consumed twice
    grads = backward(loss, [x])
    np.testing.assert_allclose(grads[id(x)], [8.0])


def test_deep_graph_no_recursion_limit():
    x = Tensor([0.01], requires_grad=True)
    h = x
    for _ in range(5000):
        h = h + x * 0.001
    grads = backward(h.sum(), [x])
    assert np.isfinite(grads[id(x)]).all()


class TestGaussianReparam:
    def test_tiny_std_returns_mean(self):
        params = GaussianParams(Tensor([1.0, -2.0]), Tensor([1e-30, 1e-30]))
        out = gaussian_reparam(params, Rng(0, "reparam"))
        np.testing.assert_allclose(out.data, [1.0, -2.0], atol=1e-20)

    def test_law_of_large_numbers(self):
        params = GaussianParams(Tensor(np.zeros(100_000)), Tensor(np.ones(100_000)))
        out = gaussian_reparam(params, Rng(42, "lln")).data
        assert abs(out.mean()) < 0.02
        assert abs(out.var() - 1.0) < 0.05

    def test_same_seed_identical(self):
        params = GaussianParams(Tensor(np.zeros(16)), Tensor(np.ones(16)))
        a = gaussian_reparam(params, Rng(9, "s")).data
        b = gaussian_reparam(params, Rng(9, "s")).data
        assert np.array_equal(a, b)

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ValueError):
            GaussianParams(Tensor([0.0]), Tensor([0.0]))

    def test_grads_flow_to_mean_and_std_not_eps(self):
        mean = Tensor([0.5], requires_grad=True)
        std = Tensor([2.0], requires_grad=True)
        out = gaussian_reparam(GaussianParams(mean, std), Rng(1, "g"))
        grads = backward(out.sum(), [mean, std])
        np.testing.assert_allclose(grads[id(mean)], [1.0])
        eps_drawn = Rng(1, "g").normal((1,))
        np.testing.assert_allclose(grads[id(std)], eps_drawn)


class TestRng:
    def test_same_seed_same_sequence(self):
        a = Rng(123, "x")
        b = Rng(123, "x")
        assert np.array_equal(a.normal((8,)), b.normal((8,)))
        assert np.array_equal(a.permutation(10), b.permutation(10))

    def test_named_streams_independent(self):
        root = Rng(123)
        s1 = root.split("shuffle")
        s2 = root.split("mixup")
        assert not np.array_equal(s1.normal((8,)), s2.normal((8,)))

    def test_draws_on_one_stream_leave_others_unchanged(self):
        a = Rng(123).split("mixup")
        b = Rng(123).split("mixup")
        Rng(123).split("shuffle").normal((100,))
        a.normal((4,))
        b.normal((4,))
        assert np.array_equal(a.normal((4,)), b.normal((4,)))

    def test_state_roundtrip(self):
        rng = Rng(77, "ckpt")
        rng.normal((13,))
        st = rng.state()
        clone = Rng.from_state(st)
        assert np.array_equal(rng.normal((9,)), clone.normal((9,)))

    def test_full_model_determinism_forward_backward(self):
        def run():
            rng = Rng(2024, "det")
            w = Tensor(rng.normal((6, 6)), requires_grad=True)
            x = Tensor(rng.normal((3, 6)))
            loss = (T.tanh(x @ w) ** 2).sum()
            g = backward(loss, [w])[id(w)]
            return loss.item(), g

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)
