import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmbatch.optim import Adam, SGDMomentum, StepLR, adam_step, lr_at_epoch, sgd_momentum_step
from mmbatch.tensor import Tensor
from oracles import adam_scalar, sgd_momentum_scalar


def scalar_param(w):
    return Tensor([w], requires_grad=True)


def run_scalar(opt_cls, w0, grad_fn, steps, **kw):
    p = scalar_param(w0)
    opt = opt_cls([p], **kw)
    trace = []
    for _ in range(steps):
        p.grad = np.asarray([grad_fn(float(p.data[0]))], dtype=np.float32)
        opt.step()
        trace.append(float(p.data[0]))
    return trace


def quad_grad(a, c):
    return lambda w: a * (w - c)


class TestSGDMomentum:
    def test_zero_gradient_fixed_point(self):
        p = scalar_param(1.5)
        opt = SGDMomentum([p], lr=0.1)
        p.grad = np.zeros(1, np.float32)
        opt.step()
        assert p.data[0] == np.float32(1.5)

    def test_plain_sgd(self):
        p = scalar_param(1.0)
        opt = SGDMomentum([p], lr=0.1, momentum=0.0)
        p.grad = np.asarray([2.0], np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(0.8, abs=1e-7)

    def test_three_unit_steps_small_rate(self):
        trace = run_scalar(SGDMomentum, 0.0, lambda w: 1.0, 3, lr=5e-4, momentum=0.9)
        oracle = sgd_momentum_scalar(0.0, lambda w: 1.0, 5e-4, 0.9, 3)
        # closed form: -lr * (1 + 1.9 + 2.71)
        assert oracle[-1] == pytest.approx(-5e-4 * 5.61, rel=1e-12)
        np.testing.assert_allclose(trace, oracle, atol=1e-7)

    def test_ten_step_quadratic_trajectory(self):
        g = quad_grad(2.0, 0.5)
        np.testing.assert_allclose(run_scalar(SGDMomentum, 3.0, g, 10, lr=0.05, momentum=0.9),
                                   sgd_momentum_scalar(3.0, g, 0.05, 0.9, 10), atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-4, 1.0))
    def test_zero_momentum_is_plain_update_bitwise(self, w, g, lr):
        p = Tensor([w], requires_grad=True)
        expected = p.data - float(lr) * np.asarray([g], np.float32)
        opt = SGDMomentum([p], lr=lr, momentum=0.0)
        p.grad = np.asarray([g], np.float32)
        opt.step()
        assert p.data.tobytes() == expected.astype(np.float32).tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.5, 3), st.floats(1e-3, 0.5), st.floats(0, 0.99))
    def test_doubling_rate_doubles_first_step(self, g, w0, lr, mu):
        steps = []
        for rate in (lr, 2 * lr):
            p = Tensor([w0], requires_grad=True, dtype=np.float64)
            opt = SGDMomentum([p], lr=rate, momentum=mu)
            p.grad = np.asarray([g])
            opt.step()
            steps.append(p.data[0] - w0)
        assert steps[1] == pytest.approx(2 * steps[0], rel=1e-9, abs=1e-15)

    def test_missing_gradient_names_parameter(self):
        p = scalar_param(1.0)
        opt = SGDMomentum({"head.weight": p}, lr=0.1)
        with pytest.raises(ValueError, match="head.weight"):
            opt.step()

    def test_velocity_matches_params(self):
        ps = [Tensor(np.ones((2, 3)), requires_grad=True), Tensor(np.ones(4), requires_grad=True)]
        opt = SGDMomentum(ps, lr=0.1)
        assert [v.shape for v in opt.velocity] == [(2, 3), (4,)]

    def test_rejects_bad_momentum(self):
        with pytest.raises(ValueError):
            SGDMomentum([scalar_param(0.0)], lr=0.1, momentum=1.0)

    def test_functional_form(self):
        p = scalar_param(1.0)
        state = SGDMomentum([p], lr=0.5, momentum=0.0)
        sgd_momentum_step([p], [np.asarray([1.0], np.float32)], state)
        assert p.data[0] == 0.5


class TestAdam:
    def test_zero_gradient_first_step(self):
        p = scalar_param(2.0)
        opt = Adam([p])
        p.grad = np.zeros(1, np.float32)
        opt.step()
        assert p.data[0] == np.float32(2.0)

    def test_first_step_is_lr(self):
        trace = run_scalar(Adam, 0.0, lambda w: 1.0, 1, lr=0.001)
        assert trace[0] == pytest.approx(-0.001, rel=1e-6)

    def test_ten_step_quadratic_trajectory(self):
        g = quad_grad(3.0, -1.0)
        np.testing.assert_allclose(run_scalar(Adam, 2.0, g, 10, lr=0.05),
                                   adam_scalar(2.0, g, 0.05, 10), atol=1e-6)

    def test_step_counter(self):
        p = scalar_param(0.0)
        opt = Adam([p])
        for _ in range(3):
            p.grad = np.ones(1, np.float32)
            opt.step()
        assert opt.t == 3

    def test_functional_form(self):
        p = scalar_param(0.0)
        state = Adam([p], lr=0.01)
        adam_step([p], [np.ones(1, np.float32)], state)
        assert p.data[0] == pytest.approx(-0.01, rel=1e-5)


class TestStepLR:
    def test_step_boundary_values(self):
        sched = StepLR(5e-4, 7, 0.1)
        assert [lr_at_epoch(sched, e) for e in range(7)] == [5e-4] * 7
        assert lr_at_epoch(sched, 7) == 5e-5

    def test_rate_method(self):
        sched = StepLR(1.0, 2, 0.5)
        assert [sched.rate(e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]

    @given(st.integers(0, 200), st.integers(1, 20))
    def test_pure_and_piecewise_constant(self, epoch, step):
        sched = StepLR(0.1, step, 0.3)
        assert lr_at_epoch(sched, epoch) == lr_at_epoch(sched, epoch)
        assert lr_at_epoch(sched, epoch) == lr_at_epoch(sched, (epoch // step) * step)

    @pytest.mark.parametrize("kw", [{"step_size": 0}, {"gamma": 0.0}, {"gamma": 1.5}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            StepLR(0.1, **kw)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(StepLR(0.1), -1)
