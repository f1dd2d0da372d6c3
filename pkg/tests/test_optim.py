import numpy as np
import pytest

from aufd.numerics import parameter, precision
from aufd.optim import Adam, decayed_lr


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        # with bias correction, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
        with precision(np.float64):
            p = parameter([1.0, -2.0, 0.5])
            g = np.array([0.3, -4.0, 1e-3])
            p.grad = g.copy()
            opt = Adam([p], lr=0.1, eps=1e-8)
            opt.step()
            np.testing.assert_allclose(p.data, [1.0, -2.0, 0.5] - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_two_steps_closed_form(self):
        b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
        g1, g2 = 0.5, -0.2
        m = (1 - b1) * g1
        v = (1 - b2) * g1**2
        x = 1.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2**2
        x = x - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        with precision(np.float64):
            p = parameter([1.0])
            opt = Adam([p], lr, (b1, b2), eps)
            for g in (g1, g2):
                p.grad = np.array([g])
                opt.step()
            assert p.data[0] == pytest.approx(x, rel=1e-12)

    def test_grad_scale_averages_accumulated_gradients(self):
        with precision(np.float64):
            a, b = parameter([0.0]), parameter([0.0])
            a.grad, b.grad = np.array([3.0]), np.array([1.0])
            opt_a, opt_b = Adam([a], 0.1), Adam([b], 0.1)
            opt_a.step(grad_scale=1 / 3)
            opt_b.step()
            assert a.data[0] == pytest.approx(b.data[0], rel=1e-12)

    def test_parameters_without_grad_are_untouched(self):
        p = parameter([1.0])
        Adam([p], 0.1).step()
        assert p.data[0] == 1.0


class TestDecay:
    def test_per_period_factor(self):
        assert decayed_lr(1e-3, 1e-3, 0) == 1e-3
        assert decayed_lr(1e-3, 1e-3, 10) == pytest.approx(1e-3 * 0.999**10, rel=1e-15)

    def test_paper_schedule_after_600_epochs(self):
        assert decayed_lr(1e-5, 1e-3, 600) == pytest.approx(1e-5 * np.exp(600 * np.log1p(-1e-3)))
