import numpy as np
import pytest

from aumeta.nn import kernels, layers
from aumeta.nn.attention import mha_backward, mha_forward
from aumeta.params import ParameterSet

from conftest import fd_gradient, rel_err

RNG = np.random.default_rng(12)


@pytest.fixture(autouse=True)
def _restore_backend():
    prev = kernels.get_backend()
    yield
    kernels.set_backend(prev)


class TestBackendEquivalence:
    """numba and numpy kernels must agree on every supported call."""

    @pytest.mark.parametrize("shape", [(2, 8, 10, 3), (1, 14, 14, 5), (3, 6, 6, 1)])
    def test_conv3x3(self, shape):
        x = RNG.standard_normal(shape)
        w = RNG.standard_normal((3, 3, shape[3], 4))
        b = RNG.standard_normal(4)
        dy = RNG.standard_normal(shape[:3] + (4,))
        outs = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            y = kernels.conv3x3_forward(x, w, b)
            dx, dw, db = kernels.conv3x3_backward(x, w, dy)
            outs[backend] = (y, dx, dw, db)
        if "numba" in outs:
            for a, b_ in zip(outs["numpy"], outs["numba"]):
                np.testing.assert_allclose(a, b_, rtol=1e-12, atol=1e-12)

    def test_maxpool(self):
        x = RNG.standard_normal((3, 12, 8, 4))
        outs = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            out, arg = kernels.maxpool2_forward(x)
            dx = kernels.maxpool2_backward(out, arg, 12, 8)
            outs[backend] = (out, arg, dx)
        if "numba" in outs:
            for a, b_ in zip(outs["numpy"], outs["numba"]):
                np.testing.assert_array_equal(a, b_)

    def test_env_flag_selects_backend(self, monkeypatch):
        monkeypatch.setenv("AUMETA_BACKEND", "numpy")
        assert kernels._initial_backend() == "numpy"
        monkeypatch.setenv("AUMETA_BACKEND", "bogus")
        with pytest.raises(ValueError):
            kernels._initial_backend()


class TestLayerGradients:
    """Every hand-written backward matches central finite differences."""

    def test_conv3x3(self):
        x = RNG.standard_normal((2, 6, 7, 3))
        w = RNG.standard_normal((3, 3, 3, 4)) * 0.5
        b = RNG.standard_normal(4) * 0.1
        coeffs = RNG.standard_normal((2, 6, 7, 4))
        y, cache = layers.conv3x3_forward(x, w, b)
        dx, dw, db = layers.conv3x3_backward(coeffs, cache)

        def f(which, arr):
            args = {"x": x, "w": w, "b": b}
            args[which] = arr
            yy, _ = layers.conv3x3_forward(args["x"], args["w"], args["b"])
            return np.sum(yy * coeffs)

        assert rel_err(dx, fd_gradient(lambda a: f("x", a), x)) < 1e-7
        assert rel_err(dw, fd_gradient(lambda a: f("w", a), w)) < 1e-7
        assert rel_err(db, fd_gradient(lambda a: f("b", a), b)) < 1e-7

    def test_maxpool_routes_to_argmax(self):
        x = RNG.standard_normal((2, 4, 4, 3))
        coeffs = RNG.standard_normal((2, 2, 2, 3))
        y, cache = layers.maxpool2_forward(x)
        dx = layers.maxpool2_backward(coeffs, cache)
        fd = fd_gradient(lambda a: np.sum(layers.maxpool2_forward(a)[0] * coeffs), x, eps=1e-7)
        assert rel_err(dx, fd) < 1e-6

    def test_linear(self):
        x = RNG.standard_normal((4, 5))
        w = RNG.standard_normal((5, 3))
        b = RNG.standard_normal(3)
        coeffs = RNG.standard_normal((4, 3))
        y, cache = layers.linear_forward(x, w, b)
        dx, dw, db = layers.linear_backward(coeffs, cache)
        assert rel_err(dx, fd_gradient(lambda a: np.sum((a @ w + b) * coeffs), x)) < 1e-8
        assert rel_err(dw, fd_gradient(lambda a: np.sum((x @ a + b) * coeffs), w)) < 1e-8

    def test_grouped_linear(self):
        x = RNG.standard_normal((3, 4, 5))
        w = RNG.standard_normal((3, 5, 2))
        b = RNG.standard_normal((3, 2))
        coeffs = RNG.standard_normal((3, 4, 2))
        y, cache = layers.grouped_linear_forward(x, w, b)
        dx, dw, db = layers.grouped_linear_backward(coeffs, cache)

        def f(which, arr):
            args = {"x": x, "w": w, "b": b}
            args[which] = arr
            return np.sum((np.matmul(args["x"], args["w"]) + args["b"][:, None, :]) * coeffs)

        assert rel_err(dx, fd_gradient(lambda a: f("x", a), x)) < 1e-8
        assert rel_err(dw, fd_gradient(lambda a: f("w", a), w)) < 1e-8
        assert rel_err(db, fd_gradient(lambda a: f("b", a), b)) < 1e-8

    def test_group_independence(self):
        x = RNG.standard_normal((3, 4, 5))
        w = RNG.standard_normal((3, 5, 2))
        b = np.zeros((3, 2))
        y, _ = layers.grouped_linear_forward(x, w, b)
        x2 = x.copy()
        x2[1] += 100.0
        y2, _ = layers.grouped_linear_forward(x2, w, b)
        np.testing.assert_array_equal(y[0], y2[0])
        np.testing.assert_array_equal(y[2], y2[2])

    def test_layernorm(self):
        x = RNG.standard_normal((4, 6))
        g = RNG.standard_normal(6)
        b = RNG.standard_normal(6)
        coeffs = RNG.standard_normal((4, 6))
        y, cache = layers.layernorm_forward(x, g, b)
        dx, dg, db = layers.layernorm_backward(coeffs, cache)

        def f(which, arr):
            args = {"x": x, "g": g, "b": b}
            args[which] = arr
            yy, _ = layers.layernorm_forward(args["x"], args["g"], args["b"])
            return np.sum(yy * coeffs)

        assert rel_err(dx, fd_gradient(lambda a: f("x", a), x)) < 1e-6
        assert rel_err(dg, fd_gradient(lambda a: f("g", a), g)) < 1e-7
        assert rel_err(db, fd_gradient(lambda a: f("b", a), b)) < 1e-7

    def test_softmax(self):
        x = RNG.standard_normal((5, 4))
        coeffs = RNG.standard_normal((5, 4))
        p, cache = layers.softmax_forward(x)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        dx = layers.softmax_backward(coeffs, cache)
        fd = fd_gradient(lambda a: np.sum(layers.softmax_forward(a)[0] * coeffs), x)
        assert rel_err(dx, fd) < 1e-7

    def test_dropout_mask_and_scaling(self):
        x = np.ones((1000,))
        rng = np.random.default_rng(0)
        y, mask = layers.dropout_forward(x, 0.25, rng)
        kept = y != 0
        assert abs(kept.mean() - 0.75) < 0.05
        np.testing.assert_allclose(y[kept], 1.0 / 0.75)
        assert layers.dropout_backward(np.ones_like(x), mask)[~kept].sum() == 0
        # disabled paths are identity
        y2, m2 = layers.dropout_forward(x, 0.25, None)
        assert m2 is None and y2 is x


class TestAttention:
    def _params(self, e):
        t = {}
        for nm in ("wq", "wk", "wv", "wo"):
            t[f"a.{nm}"] = RNG.standard_normal((e, e)) / np.sqrt(e)
        for nm in ("bq", "bk", "bv", "bo"):
            t[f"a.{nm}"] = RNG.standard_normal(e) * 0.1
        return ParameterSet(t)

    def test_gradients_match_fd(self):
        e, heads = 6, 2
        p = self._params(e)
        x = RNG.standard_normal((2, 3, e))
        coeffs = RNG.standard_normal((2, 3, e))
        out, attn, cache = mha_forward(x, p, "a", heads)
        dx, grads = mha_backward(coeffs, cache)

        def f_x(a):
            o, _, _ = mha_forward(a, p, "a", heads)
            return np.sum(o * coeffs)

        assert rel_err(dx, fd_gradient(f_x, x)) < 1e-6
        for nm in ("wq", "wk", "wv", "wo", "bq", "bo"):
            def f_w(a, nm=nm):
                p2 = p.copy()
                p2[f"a.{nm}"] = a
                o, _, _ = mha_forward(x, p2, "a", heads)
                return np.sum(o * coeffs)
            assert rel_err(grads[nm], fd_gradient(f_w, p[f"a.{nm}"])) < 1e-6

    def test_attention_rows_sum_to_one(self):
        p = self._params(8)
        x = RNG.standard_normal((3, 5, 8))
        _, attn, _ = mha_forward(x, p, "a", 4)
        assert attn.shape == (3, 4, 5, 5)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
        assert (attn >= 0).all()

    def test_single_token_attention_is_one(self):
        p = self._params(6)
        x = RNG.standard_normal((2, 1, 6))
        _, attn, _ = mha_forward(x, p, "a", 2)
        np.testing.assert_allclose(attn, 1.0)
