import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barriersteer.barrier import BarrierGradient
from barriersteer.decoder import generate, prefill
from barriersteer.numeric import Rng
from barriersteer.steering import (
    InfeasibleDirection,
    SteeringConfig,
    SteeringHook,
    apply_steering,
    continuous_correction,
    q_only_correction,
    qp_oracle,
    qp_projected_gradient,
    query_gradients,
    solve_correction,
    steering_hook,
)

G = BarrierGradient.from_vector


def halfspace_projection(h, g, tau):
    """Textbook projection of 0 onto {t : g.t >= tau - h}, written out independently."""
    b = tau - h
    if b <= 0:
        return np.zeros_like(g)
    return g * (b / sum(float(v) * float(v) for v in g))


class TestSolveCorrection:
    def test_boundary(self):
        c = solve_correction(2.0, G(np.array([1.0, 1.0])), 2.0)
        assert not c.fired and not c.theta.any() and c.lam == 0.0 and c.violation == 0.0

    def test_worked_example(self):
        c = solve_correction(-1.0, G(np.array([2.0, 0.0])), 0.0, epsilon=0.0)
        assert np.array_equal(c.theta, [0.5, 0.0])
        assert c.lam == 0.25
        assert float(np.array([2.0, 0.0]) @ c.theta) == 1.0

    def test_zero_gradient(self):
        c = solve_correction(-5.0, G(np.zeros(4)), 0.0, epsilon=1e-6)
        assert c.fired and not c.theta.any()

    def test_against_oracles(self):
        rng = Rng(0)
        worst = 0.0
        for _ in range(1000):
            g = rng.gaussian(64)
            h, tau = rng.gaussian(2) * 3
            theta = solve_correction(h, G(g), tau, 0.0).theta
            ref = halfspace_projection(h, g, tau)
            assert np.array_equal(qp_oracle(h, G(g), tau) == 0, ref == 0)
            if ref.any():
                worst = max(worst, np.max(np.abs(theta - ref)) / np.max(np.abs(ref)))
            else:
                assert not theta.any()
        assert worst <= 1e-8

    def test_projected_gradient_oracle(self):
        rng = Rng(1)
        for _ in range(5):
            g = rng.gaussian(16)
            h, tau = -1.0, float(rng.uniform(1)[0]) + 0.5
            it = qp_projected_gradient(h, g, tau, start=rng.gaussian(16) * 3)
            closed = solve_correction(h, G(g), tau, 0.0).theta
            assert np.max(np.abs(it - closed)) <= 1e-6

    def test_oracle_infeasible(self):
        with pytest.raises(InfeasibleDirection):
            qp_oracle(-1.0, np.zeros(3), 0.0)
        assert not qp_oracle(1.0, np.zeros(3), 0.0).any()

    def test_negative_epsilon(self):
        with pytest.raises(ValueError):
            solve_correction(0.0, G(np.ones(2)), 1.0, -1.0)

    def test_epsilon_undershoot(self):
        g = G(np.array([1.0, 2.0]))
        eps = 0.5
        c = solve_correction(0.0, g, 1.0, eps)
        restored = float(g.vector @ c.theta)
        assert restored == pytest.approx(1.0 - eps * 1.0 / (g.norm_sq + eps), rel=1e-14)


class TestCorrectionInvariants:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-20, 20), st.floats(-20, 20), st.floats(0, 1e-3))
    def test_structure(self, seed, h, tau, eps):
        g = G(Rng(seed).gaussian(12))
        c = solve_correction(h, g, tau, eps)
        assert c.fired == (c.violation > 0)
        if not c.fired:
            assert not c.theta.any()
        assert np.array_equal(c.theta, c.lam * g.vector)
        along = (c.theta @ g.vector) / g.norm_sq * g.vector
        assert np.linalg.norm(c.theta - along) <= 1e-12 * max(np.linalg.norm(c.theta), 1e-300)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-20, 20), st.floats(-20, 20))
    def test_minimum_norm(self, seed, h, tau):
        rng = Rng(seed)
        g = rng.gaussian(8)
        theta = solve_correction(h, G(g), tau, 0.0).theta
        for _ in range(10):
            cand = theta + rng.gaussian(8)
            gap = (tau - h) - g @ cand
            if gap > 0:  # push the perturbed point back into the feasible set
                cand = cand + (gap / (g @ g)) * g * (1 + 1e-12)
            assert g @ cand >= (tau - h) - 1e-9
            assert np.linalg.norm(theta) <= np.linalg.norm(cand) + 1e-10

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-20, 20), st.floats(-20, 20))
    def test_kkt_certificate(self, seed, h, tau):
        g = G(Rng(seed).gaussian(10))
        c = solve_correction(h, g, tau, 0.0)
        assert c.lam >= 0
        slack = float(g.vector @ c.theta) - (tau - h)
        assert abs(c.lam * slack) <= 1e-10 * max(1.0, abs(tau - h))
        assert slack >= -1e-10 * max(1.0, abs(tau - h))

    def test_proportional_to_violation(self):
        g = G(Rng(2).gaussian(32))
        norms = [np.linalg.norm(solve_correction(-v, g, 0.0, 0.0).theta) for v in (0.1, 0.5, 1.0, 2.0, 7.0)]
        ratios = np.array(norms) / np.array([0.1, 0.5, 1.0, 2.0, 7.0])
        assert np.max(np.abs(ratios / ratios[0] - 1)) <= 1e-10
        assert all(a <= b for a, b in zip(norms, norms[1:]))

    def test_inverse_gradient_scaling(self):
        v = Rng(3).gaussian(32)
        a = np.linalg.norm(solve_correction(-1.0, G(v), 0.0, 1e-12).theta)
        b = np.linalg.norm(solve_correction(-1.0, G(2 * v), 0.0, 1e-12).theta)
        assert b / a == pytest.approx(0.5, rel=1e-10)
        assert a == pytest.approx(1.0 / np.linalg.norm(v), rel=1e-10)


class TestApply:
    def test_zero_alpha_bitwise(self):
        x = Rng(4).gaussian(8)
        c = solve_correction(-1.0, G(np.ones(8)), 0.0)
        assert apply_steering(x, c, 0.0) is x or np.array_equal(apply_steering(x, c, 0.0), x)

    def test_not_fired_bitwise(self):
        x = Rng(5).gaussian(8)
        c = solve_correction(5.0, G(np.ones(8)), 0.0)
        assert np.array_equal(apply_steering(x, c, 1.0), x)

    def test_exact_restoration(self):
        rng = Rng(6)
        for _ in range(200):
            g = G(rng.gaussian(64))
            x = rng.gaussian(64)
            h = float(g.vector @ x)
            tau = h + abs(float(rng.gaussian(1)[0])) + 0.1
            xs = apply_steering(x, solve_correction(h, g, tau, 0.0), 1.0)
            assert abs(float(g.vector @ xs) - tau) <= 1e-9 * abs(tau)


class TestHook:
    g = G(np.array([1.0, 2.0, -1.0]))

    def test_off(self):
        x = np.array([1.0, 1.0, 1.0])
        out, dq, e = steering_hook("off", SteeringConfig(mode="off"), self.g, x)
        assert out is x and dq is None and not e.fired and e.h == 2.0 and e.theta_norm == 0.0

    def test_continuous_pushes_down(self):
        x = np.array([1.0, 1.0, 1.0])
        cfg = SteeringConfig(tau=0.0, mode="continuous")
        out, _, e = steering_hook("continuous", cfg, self.g, x)
        assert e.fired and (out - x) @ self.g.vector < 0
        assert float(self.g.vector @ out) == pytest.approx(cfg.tau + 2.0 * cfg.epsilon / (6 + cfg.epsilon), abs=1e-12)

    def test_continuous_correction_sign(self):
        c = continuous_correction(3.0, self.g, 1.0)
        assert c.lam < 0 and c.violation == 0.0

    def test_regulated_gate_closed(self):
        x = np.array([1.0, 1.0, 1.0])
        out, _, e = steering_hook("regulated", SteeringConfig(tau=0.0), self.g, x)
        assert out is x and not e.fired

    def test_theta_norm_excludes_alpha(self):
        x = np.zeros(3)
        cfg = SteeringConfig(tau=1.0, alpha=0.5, epsilon=0.0)
        out, _, e = steering_hook("regulated", cfg, self.g, x)
        assert e.theta_norm == pytest.approx(1.0 / math.sqrt(6), rel=1e-14)
        assert np.linalg.norm(out) == pytest.approx(0.5 / math.sqrt(6), rel=1e-14)


class TestQOnly:
    def test_gate_closed(self):
        assert not q_only_correction(1.0, np.ones((2, 3)), 0.0).any()

    def test_single_head_reduces(self):
        s = Rng(7).gaussian(8).reshape(1, 8)
        grads = query_gradients(s, 3)
        dq = q_only_correction(-1.0, grads, 0.5, 0.0)
        ref = solve_correction(-1.0, G(grads[0]), 0.5, 0.0).theta
        assert np.allclose(dq[0], ref, rtol=1e-15, atol=0)

    def test_restores_in_query_space(self):
        rng = Rng(8)
        sums = rng.gaussian(4 * 16).reshape(4, 16)
        grads = query_gradients(sums, 5)
        q = rng.gaussian(4 * 16).reshape(4, 16)
        h = float(np.sum(q * grads))
        tau = h + 1.3
        dq = q_only_correction(h, grads, tau, 0.0)
        assert abs(float(np.sum((q + dq) * grads)) - tau) <= 1e-9 * abs(tau)

    def test_decoder_leaves_kv_alone(self, tiny):
        model, image = tiny
        cfg = SteeringConfig(tau=2.0, steered_layers=(1,), mode="q_only", epsilon=0.0)
        gen = generate(model, [0, 1], image, cfg, max_new=1, record_states=True)
        ref = generate(model, [0, 1], image, None, max_new=1)
        e = gen.trace.entries[0]
        assert e.fired and e.q_delta is not None
        n = gen.cache.length
        # layer 1 is the first steered layer: its K/V and everything below match the unsteered run
        assert np.array_equal(gen.cache._keys[:2, :, :n], ref.cache._keys[:2, :, :n])
        assert np.array_equal(gen.cache._values[:2, :, :n], ref.cache._values[:2, :, :n])
        # recomputed query-space barrier sits on tau
        lw = model.layers[1]
        a = e.x_steered
        q = (lw.w_q @ a) + e.q_delta
        grads = query_gradients(gen.context.key_sums[1], gen.context.n_image)
        assert abs(float(np.sum(q * grads)) - cfg.tau) <= 1e-9 * cfg.tau


class TestConfig:
    def test_defaults(self):
        c = SteeringConfig()
        assert c.alpha == 1.0 and c.epsilon == 1e-6 and c.mode == "regulated"

    def test_validation(self):
        with pytest.raises(ValueError):
            SteeringConfig(alpha=0.0)
        with pytest.raises(ValueError):
            SteeringConfig(mode="sideways")
        with pytest.raises(ValueError):
            SteeringConfig(epsilon=-1.0)
        with pytest.raises(ValueError):
            SteeringConfig(tau=float("nan"))
        SteeringConfig(alpha=0.0, mode="off")

    def test_layers_normalised(self):
        c = SteeringConfig(steered_layers=(4, 2, 2, 3))
        assert c.steered_layers == (2, 3, 4)
        with pytest.raises(ValueError):
            c.check_layers(4)


def test_hook_ignores_unsteered_layers(tiny):
    model, image = tiny
    _, ctx, _ = prefill(model, [0, 1], image, steered_layers=[2])
    hook = SteeringHook.for_context(SteeringConfig(tau=100.0, steered_layers=(2,)), ctx)
    x = np.ones(32)
    out, dq = hook(0, x)
    assert out is x and dq is None and hook.entries == []
