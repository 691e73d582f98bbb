import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mada import autodiff as ad
from mada.nn import (
    ConfigError,
    LambdaSchedule,
    LinearLayer,
    LrSchedule,
    Mlp,
    SgdMomentum,
    init_params,
    lambda_at,
    lr_at,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)

# Frozen from mpmath at 40 digits.
LR_HALF = 0.002608474300122145  # 0.01 / 6**0.75
LR_END = 0.0016556002607617017  # 0.01 / 11**0.75
LAM_TENTH = 0.46211715726000974  # 2 / (1 + e**-1) - 1
LAM_END = 0.9999092042625951  # 2 / (1 + e**-10) - 1
BOUND_2_8 = 0.7745966692414834  # sqrt(6 / 10)

PROPERTY = settings(max_examples=120, deadline=None)
progress = st.floats(0.0, 1.0, allow_nan=False)


def lr(p, **kw):
    return lr_at(LrSchedule(**kw), p)


def lam(p, **kw):
    return lambda_at(LambdaSchedule(**kw), p)


class TestInit:
    def test_same_seed_identical(self):
        a, b = init_params([2, 8, 4], 11), init_params([2, 8, 4], 11)
        for la, lb in zip(a.layers, b.layers):
            assert la.W.tobytes() == lb.W.tobytes()

    def test_biases_zero(self):
        mlp = init_params([3, 5, 2], 0)
        for layer in mlp.layers:
            np.testing.assert_array_equal(layer.b, 0.0)

    def test_bound(self):
        mlp = init_params([2, 8, 4], 0)
        assert math.sqrt(6.0 / 10.0) == pytest.approx(BOUND_2_8, abs=1e-15)
        w0 = mlp.layers[0].W
        assert np.abs(w0).max() <= BOUND_2_8
        # 16 draws from U(-s, s) reach well past half the bound
        assert np.abs(w0).max() > 0.5 * BOUND_2_8

    @pytest.mark.parametrize("dims", [[], [3]])
    def test_too_few_dims(self, dims):
        with pytest.raises(ConfigError):
            init_params(dims, 0)

    @PROPERTY
    @given(dims=st.lists(st.integers(1, 6), min_size=2, max_size=4), seed=st.integers(0, 2**31))
    def test_pure_function_of_dims_and_seed(self, dims, seed):
        a, b = init_params(dims, seed), init_params(dims, seed)
        assert [l.W.tobytes() for l in a.layers] == [l.W.tobytes() for l in b.layers]
        for layer, (i, o) in zip(a.layers, zip(dims, dims[1:])):
            assert layer.W.shape == (i, o)
            assert np.abs(layer.W).max() <= math.sqrt(6.0 / (i + o))


class TestForward:
    def test_zero_weights(self):
        mlp = Mlp([LinearLayer("l", np.zeros((3, 2)), np.zeros((1, 2)))], "none")
        np.testing.assert_array_equal(mlp.forward(np.ones((4, 3))), 0.0)

    def test_identity_passthrough(self):
        mlp = Mlp([LinearLayer("l", np.eye(3), np.zeros((1, 3)))], "none")
        x = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(mlp.forward(x), x)

    def test_softmax_head(self):
        mlp = init_params([3, 4, 5], 2, output="softmax")
        out = mlp.forward(np.random.default_rng(0).normal(size=(6, 3)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_tape_and_plain_agree(self):
        mlp = init_params([3, 4, 2], 5, output="sigmoid")
        x = np.random.default_rng(1).normal(size=(5, 3))
        tape = ad.Tape()
        out = mlp.forward(tape.constant(x), tape)
        np.testing.assert_array_equal(out.value, mlp.forward(x))
        assert set(tape.params) == {"mlp.0.W", "mlp.0.b", "mlp.1.W", "mlp.1.b"}

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            init_params([3, 2], 0).forward(np.ones((1, 4)))

    def test_layers_must_chain(self):
        with pytest.raises(ad.ShapeError):
            Mlp([LinearLayer("a", np.ones((2, 3)), np.zeros((1, 3))),
                 LinearLayer("b", np.ones((4, 1)), np.zeros((1, 1)))])

    def test_forward_does_not_mutate(self):
        mlp = init_params([2, 3, 2], 0, output="softmax")
        before = [l.W.copy() for l in mlp.layers]
        tape = ad.Tape()
        mlp.forward(tape.constant(np.ones((2, 2))), tape)
        mlp.forward(np.ones((2, 2)))
        for b, l in zip(before, mlp.layers):
            assert b.tobytes() == l.W.tobytes()


class TestLrSchedule:
    def test_start_is_eta0_exactly(self):
        assert lr(0.0) == 0.01

    def test_half(self):
        assert lr(0.5) == pytest.approx(LR_HALF, abs=1e-12)

    def test_end(self):
        assert lr(1.0) == pytest.approx(LR_END, abs=1e-12)

    @pytest.mark.parametrize("p", [-0.01, 1.01])
    def test_out_of_range(self, p):
        with pytest.raises(ad.ContractError):
            lr(p)

    def test_invalid_schedule(self):
        with pytest.raises(ConfigError):
            LrSchedule(eta0=0.0)

    @PROPERTY
    @given(a=progress, b=progress)
    def test_strictly_decreasing(self, a, b):
        # strict wherever the gap is resolvable in double precision
        if a < b:
            assert lr(a) >= lr(b)
        if b - a > 1e-9:
            assert lr(a) > lr(b)


class TestLambdaSchedule:
    def test_start(self):
        assert lam(0.0) == 0.0

    def test_tenth(self):
        assert lam(0.1) == pytest.approx(LAM_TENTH, abs=1e-12)

    def test_end(self):
        assert lam(1.0) == pytest.approx(LAM_END, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ad.ContractError):
            lam(1.5)

    @PROPERTY
    @given(a=progress, b=progress, cap=st.floats(0.1, 3.0))
    def test_increasing_and_bounded(self, a, b, cap):
        assert 0.0 <= lam(a, lambda_max=cap) <= cap
        if a < b:
            assert lam(a, lambda_max=cap) <= lam(b, lambda_max=cap)
        if b - a > 1e-9:
            assert lam(a, lambda_max=cap) < lam(b, lambda_max=cap)


class TestSgd:
    def test_momentum_zero_is_plain_descent(self):
        theta = {"w": np.array([[1.0, -2.0]])}
        sgd_step(SgdMomentum(0.0, {"w": 10.0}), theta, {"w": np.array([[0.5, 0.5]])}, 0.1)
        np.testing.assert_allclose(theta["w"], [[0.5, -2.5]], rtol=0, atol=1e-15)

    def test_zero_gradient_decays_velocity(self):
        opt = SgdMomentum(0.9, velocity={"w": np.array([[2.0]])})
        theta = {"w": np.array([[1.0]])}
        sgd_step(opt, theta, {"w": np.zeros((1, 1))}, 0.0)
        np.testing.assert_array_equal(theta["w"], [[1.0]])
        np.testing.assert_allclose(opt.velocity["w"], [[1.8]], rtol=0, atol=1e-15)

    def test_two_steps_on_quadratic(self):
        opt = SgdMomentum(0.9)
        theta = {"w": np.array([[1.0]])}
        sgd_step(opt, theta, {"w": theta["w"].copy()}, 0.1)
        assert theta["w"][0, 0] == pytest.approx(0.9, abs=1e-15)
        assert opt.velocity["w"][0, 0] == 1.0
        sgd_step(opt, theta, {"w": theta["w"].copy()}, 0.1)
        assert opt.velocity["w"][0, 0] == pytest.approx(1.8, abs=1e-15)
        assert theta["w"][0, 0] == pytest.approx(0.72, abs=1e-15)

    def test_missing_gradient(self):
        with pytest.raises(ad.ContractError):
            sgd_step(SgdMomentum(), {"a": np.ones((1, 1)), "b": np.ones((1, 1))}, {"a": np.ones((1, 1))}, 0.1)

    @PROPERTY
    @given(
        theta=st.lists(st.floats(-5, 5), min_size=1, max_size=6),
        g=st.floats(-5, 5),
        eta=st.floats(0.0, 1.0),
        mult=st.floats(0.0, 10.0),
    )
    def test_momentum_zero_formula(self, theta, g, eta, mult):
        w = np.array([theta])
        grad = np.full_like(w, g)
        expected = w - eta * mult * grad
        params = {"w": w.copy()}
        sgd_step(SgdMomentum(0.0, {"w": mult}), params, {"w": grad}, eta)
        np.testing.assert_array_equal(params["w"], expected)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(4)
        params = {"a.W": rng.normal(size=(3, 2)), "a.b": rng.normal(size=(1, 2)) * 1e-300}
        save_checkpoint(tmp_path / "c.json", params, {"note": "x"})
        loaded, meta = load_checkpoint(tmp_path / "c.json")
        assert meta == {"note": "x"}
        for name, arr in params.items():
            assert loaded[name].tobytes() == arr.tobytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "c.json").write_text('{"format": "other"}')
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "c.json")

    def test_stable_bytes(self, tmp_path):
        params = {"w": np.arange(6.0).reshape(2, 3) / 7}
        save_checkpoint(tmp_path / "a.json", params)
        save_checkpoint(tmp_path / "b.json", params)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
