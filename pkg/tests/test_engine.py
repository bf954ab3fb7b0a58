import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnifuse.engine import (
    SGD,
    Adam,
    Conv2d,
    AvgPool2,
    Dense,
    NonFiniteGradient,
    Parameter,
    Rng,
    Sequential,
    act_backward,
    act_forward,
    dense_apply,
    grad_check,
    loss_and_grad,
    loss_eval,
    matmul,
    mlp,
)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_2x2(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_against_triple_loop(self, np_rng):
        a, b = np_rng.normal(size=(5, 4)), np_rng.normal(size=(4, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
    def test_oracle_small_shapes(self, m, k, n, seed):
        g = np.random.default_rng(seed)
        a, b = g.normal(size=(m, k)), g.normal(size=(k, n))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)
        np.testing.assert_array_equal(matmul(matmul(np.eye(m), a), np.eye(k)), a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestDense:
    def test_identity_layer(self):
        layer = Dense(3, 3, "identity")
        layer.W.value = np.eye(3)
        x = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_array_equal(dense_apply(layer, x), x)

    def test_elu_at_zero(self):
        z = np.zeros((1, 1))
        a = act_forward("elu", z)
        assert a[0, 0] == 0.0
        assert act_backward("elu", z, a, np.ones((1, 1)))[0, 0] == 1.0

    def test_3_to_2_hand_evaluation(self):
        layer = Dense(3, 2, "tanh")
        layer.W.value = np.array([[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6]])
        layer.b.value = np.array([0.05, -0.1])
        x = np.array([[1.0, 2.0, 3.0]])
        z0 = 1 * 0.1 + 2 * 0.3 + 3 * -0.5 + 0.05
        z1 = 1 * -0.2 + 2 * 0.4 + 3 * 0.6 - 0.1
        np.testing.assert_allclose(dense_apply(layer, x), [[np.tanh(z0), np.tanh(z1)]], atol=1e-15)

    def test_shape_and_nan_errors(self):
        layer = Dense(3, 2, rng=Rng(0))
        with pytest.raises(ValueError):
            layer.forward(np.ones((2, 4)))
        with pytest.raises(ValueError):
            layer.forward(np.array([[1.0, np.nan, 0.0]]))

    def test_glorot_range_and_zero_bias(self):
        layer = Dense(40, 20, rng=Rng(1))
        limit = np.sqrt(6 / 60)
        assert np.all(np.abs(layer.W.value) <= limit)
        assert np.all(layer.b.value == 0)

    def test_batchnorm_infer_uses_running_stats(self):
        layer = Dense(2, 2, batchnorm=True, rng=Rng(2))
        x = np.random.default_rng(0).normal(size=(50, 2))
        layer.forward(x, train=True)
        z = x @ layer.W.value + layer.b.value
        np.testing.assert_allclose(layer.running_mean, 0.1 * z.mean(axis=0))
        np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * z.var(axis=0))
        expect = (z - layer.running_mean) / np.sqrt(layer.running_var + 1e-5)
        np.testing.assert_allclose(layer.forward(x), expect, atol=1e-12)


class TestLosses:
    def test_mse_zero(self):
        x = np.ones((3, 2))
        assert loss_eval("mse", x, x) == 0.0

    def test_bce_half(self):
        assert loss_eval("bce", np.array([[0.5]]), np.array([[1.0]])) == pytest.approx(np.log(2), abs=1e-12)

    def test_softmax_uniform(self):
        assert loss_eval("softmax_ce", np.zeros((1, 3)), np.array([1])) == pytest.approx(np.log(3), abs=1e-12)

    def test_bce_rejects_soft_targets(self):
        with pytest.raises(ValueError):
            loss_eval("bce", np.array([[0.5]]), np.array([[0.3]]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_eval("mse", np.ones((2, 2)), np.ones((2, 3)))

    @pytest.mark.parametrize("kind", ["mse", "sse", "bce", "cosine", "vae_kl", "softmax_ce"])
    def test_loss_grads_match_fd(self, kind, np_rng):
        pred = np_rng.uniform(0.1, 0.9, size=(4, 6))
        if kind == "bce":
            target = (np_rng.random((4, 6)) < 0.5).astype(float)
        elif kind == "softmax_ce":
            target = np.array([0, 5, 2, 2])
        elif kind == "vae_kl":
            target = None
        else:
            target = np_rng.normal(size=(4, 6))
        _, g = loss_and_grad(kind, pred, target)
        h = 1e-6
        for idx in np.ndindex(pred.shape):
            p = pred.copy()
            p[idx] += h
            up = loss_eval(kind, p, target)
            p[idx] -= 2 * h
            down = loss_eval(kind, p, target)
            assert abs((up - down) / (2 * h) - g[idx]) < 1e-7


def _square_model(w):
    layer = Dense(1, 1, "identity")
    layer.W.value = np.array([[w]])
    return Sequential([layer])


class TestBackward:
    def test_square(self):
        # f(w) = (w * 1 - 0)^2 evaluated through sse on a single row
        model = _square_model(3.0)
        model.zero_grad()
        out = model.forward(np.ones((1, 1)), train=True)
        _, g = loss_and_grad("sse", out, np.zeros((1, 1)))
        model.backward(g)
        assert model.layers[0].W.grad[0, 0] == pytest.approx(6.0)

    def test_constant_loss_zero_grads(self, rng):
        model = mlp([3, 4, 2], ["tanh", "identity"], rng)
        model.zero_grad()
        model.forward(np.ones((5, 3)), train=True)
        model.backward(np.zeros((5, 2)))
        for p in model.params():
            assert np.all(p.grad == 0)

    def test_backward_without_tape(self, rng):
        model = mlp([3, 2], ["tanh"], rng)
        model.forward(np.ones((2, 3)))
        with pytest.raises(RuntimeError):
            model.backward(np.ones((2, 2)))

    def test_two_layer_mse_fd(self, rng, np_rng):
        model = mlp([4, 5, 3], ["tanh", "identity"], rng)
        res = grad_check(model, np_rng.normal(size=(6, 4)), np_rng.normal(size=(6, 3)), "mse", h=1e-5)
        assert res.max_rel_err < 1e-6

    def test_linearity(self, rng, np_rng):
        model = mlp([4, 5, 3], ["elu", "identity"], rng)
        x = np_rng.normal(size=(6, 4))
        t1, t2 = np_rng.normal(size=(6, 3)), np_rng.normal(size=(6, 3))
        a, b = 0.7, -1.3

        def grads(gfn):
            model.zero_grad()
            out = model.forward(x, train=True)
            model.backward(gfn(out))
            return [p.grad.copy() for p in model.params()]

        g1 = grads(lambda o: loss_and_grad("mse", o, t1)[1])
        g2 = grads(lambda o: loss_and_grad("mse", o, t2)[1])
        g12 = grads(lambda o: a * loss_and_grad("mse", o, t1)[1] + b * loss_and_grad("mse", o, t2)[1])
        for x1, x2, x12 in zip(g1, g2, g12):
            np.testing.assert_allclose(x12, a * x1 + b * x2, atol=1e-12)


class TestGradCheck:
    def test_linear_mse(self, rng, np_rng):
        model = mlp([5, 3], ["identity"], rng)
        res = grad_check(model, np_rng.normal(size=(8, 5)), np_rng.normal(size=(8, 3)), "mse")
        assert res.max_rel_err < 1e-9

    def test_autoencoder_stack(self, rng, np_rng):
        model = mlp([12, 9, 6, 4, 6, 9, 12], ["tanh"] * 2 + ["identity"] + ["tanh"] * 2 + ["identity"], rng)
        x = np_rng.uniform(-1, 1, size=(10, 12))
        assert grad_check(model, x, x, "sse").max_rel_err < 1e-4

    def test_batchnorm_train_mode(self, rng, np_rng):
        model = mlp([6, 4, 3], ["elu", "identity"], rng, batchnorm=[True, False])
        x = np_rng.normal(size=(12, 6))
        before = model.state()
        res = grad_check(model, x, np_rng.normal(size=(12, 3)), "mse")
        assert res.max_rel_err < 1e-3
        for k, v in model.state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_conv_stack(self, rng, np_rng):
        model = Sequential([Conv2d(1, 2, 4, "tanh", rng=rng.split("c")), AvgPool2(2, 4),
                            Dense(8, 3, "identity", rng=rng.split("d"))])
        res = grad_check(model, np_rng.normal(size=(3, 16)), np_rng.normal(size=(3, 3)), "mse")
        assert res.max_rel_err < 1e-5

    def test_rejects_bad_step(self, rng):
        with pytest.raises(ValueError):
            grad_check(mlp([2, 1], ["identity"], rng), np.ones((1, 2)), np.ones((1, 1)), h=1e-2)


@pytest.mark.parametrize("kind", ["elu", "tanh", "sigmoid", "identity", "relu"])
def test_activation_derivatives(kind):
    z = np.linspace(-4, 4, 161).reshape(-1, 1)
    z = z[np.abs(z[:, 0]) > 1e-6]
    a = act_forward(kind, z)
    g = act_backward(kind, z, a, np.ones_like(z))
    h = 1e-6
    fd = (act_forward(kind, z + h) - act_forward(kind, z - h)) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-6)


class TestOptim:
    def test_sgd_zero_grad(self):
        p = Parameter("w", np.array([1.5]))
        SGD([p], 0.1).step()
        assert p.value[0] == 1.5

    def test_sgd_step(self):
        p = Parameter("w", np.array([1.0]))
        p.grad[:] = 2.0
        SGD([p], 0.1).step()
        assert p.value[0] == pytest.approx(0.8)

    def test_adam_single_step_formula(self):
        w0, g, lr = 0.3, -0.7, 0.01
        p = Parameter("w", np.array([w0]))
        p.grad[:] = g
        Adam([p], lr).step()
        m = 0.1 * g
        v = 0.001 * g * g
        expect = w0 - lr * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        assert p.value[0] == pytest.approx(expect, abs=1e-15)

    @pytest.mark.parametrize("opt", [SGD, Adam])
    def test_zero_lr_leaves_params(self, opt, np_rng):
        p = Parameter("w", np_rng.normal(size=4))
        before = p.value.copy()
        p.grad[:] = np_rng.normal(size=4)
        opt([p], 0.0).step()
        np.testing.assert_array_equal(p.value, before)

    def test_nonfinite_grad_aborts(self):
        p = Parameter("w", np.array([1.0, 2.0]))
        p.grad[:] = [np.inf, 0.0]
        with pytest.raises(NonFiniteGradient, match="'w'"):
            Adam([p], 0.1).step()
        assert list(p.value) == [1.0, 2.0]


class TestRng:
    def test_same_seed_same_draws(self):
        np.testing.assert_array_equal(Rng(5).normal(size=10), Rng(5).normal(size=10))

    def test_child_independent_of_parent_continuation(self):
        a, b = Rng(5), Rng(5)
        a.normal(size=100)
        np.testing.assert_array_equal(a.split("x").normal(size=5), b.split("x").normal(size=5))
        assert not np.array_equal(a.split("x").normal(size=5), a.split("y").normal(size=5))


def test_training_is_deterministic(np_rng):
    x = np_rng.normal(size=(20, 3))
    y = np_rng.normal(size=(20, 2))

    def run():
        model = mlp([3, 8, 2], ["elu", "identity"], Rng(11))
        opt = Adam(model.params(), 0.01)
        for _ in range(20):
            model.zero_grad()
            _, g = loss_and_grad("mse", model.forward(x, train=True), y)
            model.backward(g)
            opt.step()
        return model.state()

    s1, s2 = run(), run()
    for k in s1:
        assert s1[k].tobytes() == s2[k].tobytes()
