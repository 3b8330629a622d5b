import numpy as np
import pytest

from coadapt.gradients import (
    central_difference_gradient,
    exact_full_gradient,
    finite_difference_check,
    joint_loss,
    joint_loss_fd_error,
    joint_point,
    mc_full_gradient,
    split_point,
)
from coadapt.policy import AdapterState, ContractError, InfiniteDivergenceError, PolicySpec, entropy, policy_distribution
from coadapt.reward import RewardProfile, build_target
from coadapt.suite import generate_suite
from coadapt.theory import ball_point, random_adapter
from conftest import random_lowrank, random_simplex


def _fd_loss(spec, adapter, target, h):
    d = spec.d

    def f(phi):
        x, ad = split_point(adapter, phi, d)
        return joint_loss(spec, ad, x, target)

    def g(phi):
        x, ad = split_point(adapter, phi, d)
        return exact_full_gradient(spec, ad, x, target).flat

    return f, g


class TestLoss:
    def test_at_target_equals_entropy(self, small_spec, rng):
        ad, x = random_lowrank(small_spec, rng), rng.normal(size=4)
        p = policy_distribution(small_spec, ad, x)
        assert joint_loss(small_spec, ad, x, p) == pytest.approx(entropy(p), abs=1e-12)

    def test_point_mass_half(self):
        spec = PolicySpec(np.zeros((2, 1)), rank=1)
        loss = joint_loss(spec, AdapterState.zeros(spec), np.ones(1), np.array([1.0, 0.0]))
        assert loss == pytest.approx(np.log(2), abs=1e-15)

    def test_gibbs(self, small_spec, rng):
        for _ in range(500):
            ad, x = random_lowrank(small_spec, rng), rng.normal(size=4)
            t = random_simplex(rng, small_spec.V)
            assert joint_loss(small_spec, ad, x, t) >= entropy(t) - 1e-12

    def test_length_mismatch(self, small_spec, rng):
        with pytest.raises(ContractError):
            joint_loss(small_spec, random_lowrank(small_spec, rng), np.ones(4), np.ones(3) / 3)

    def test_unsupported_mass(self):
        spec = PolicySpec(np.array([[1000.0], [-1000.0]]), rank=1)
        with pytest.raises(InfiniteDivergenceError):
            joint_loss(spec, AdapterState.zeros(spec), np.ones(1), np.array([0.0, 1.0]))


class TestExactGradient:
    def test_stationary_at_target(self, small_spec, rng):
        ad, x = random_lowrank(small_spec, rng), rng.normal(size=4)
        g = exact_full_gradient(small_spec, ad, x, policy_distribution(small_spec, ad, x))
        assert np.max(np.abs(g.flat)) < 1e-10

    def test_logit_identity(self, small_spec, rng):
        # in full mode the dW block is (pi - target) outer x, so dL/dlogits can be read off a column
        spec = PolicySpec(rng.normal(size=(6, 4)), rank=1)
        ad, x = AdapterState.zeros(spec, "full"), rng.normal(size=4)
        t = random_simplex(rng, 6)
        g = exact_full_gradient(spec, ad, x, t)
        p = policy_distribution(spec, ad, x)
        np.testing.assert_allclose(g.g_theta.reshape(6, 4), np.outer(p - t, x), atol=1e-10)
        j = int(np.argmax(np.abs(x)))
        np.testing.assert_allclose(g.g_theta.reshape(6, 4)[:, j] / x[j], p - t, atol=1e-10)

    def test_matches_float64_fd(self, small_spec, rng):
        for _ in range(100):
            ad, x = random_lowrank(small_spec, rng), rng.normal(size=4) * 2
            t = random_simplex(rng, small_spec.V)
            f, g = _fd_loss(small_spec, ad, t, 1e-5)
            phi = joint_point(ad, x)
            np.testing.assert_allclose(g(phi), central_difference_gradient(f, phi), rtol=1e-6, atol=1e-8)

    def test_extended_precision_oracle_default_suite(self):
        prob = generate_suite(1, 3)[0]
        rng = np.random.default_rng(0)
        spec = prob.spec
        for _ in range(10):
            x = ball_point(rng, spec.d, 8.0)
            ad = random_adapter(prob.adapter0, 8.0, rng)
            t = build_target(policy_distribution(spec, ad, x), RewardProfile(rng.uniform(-1, 1, spec.V)))
            assert joint_loss_fd_error(spec, ad, x, t) < 1e-6

    def test_deterministic(self, small_spec, rng):
        ad, x, t = random_lowrank(small_spec, rng), rng.normal(size=4), random_simplex(rng, 6)
        a = exact_full_gradient(small_spec, ad, x, t)
        b = exact_full_gradient(small_spec, ad, x, t)
        assert a.flat.tobytes() == b.flat.tobytes()


class TestMonteCarlo:
    def _instance(self, small_spec, rng):
        ad, x = random_lowrank(small_spec, rng), rng.normal(size=4)
        prev = random_simplex(rng, small_spec.V)
        prof = RewardProfile(rng.choice([-1.0, 0.0, 1.0], size=small_spec.V))
        return ad, x, prev, prof

    def test_large_sample_close_to_exact(self, small_spec, rng):
        ad, x, prev, prof = self._instance(small_spec, rng)
        exact = exact_full_gradient(small_spec, ad, x, build_target(prev, prof)).flat
        hits = total = 0
        for trial in range(20):
            est = mc_full_gradient(small_spec, ad, x, prev, prof, 100_000, trial)
            se = np.concatenate([est.se_x, est.se_theta])
            ok = np.abs(est.flat - exact) <= 3 * se + 1e-12
            hits += int(ok.sum())
            total += ok.size
        assert hits / total >= 0.99

    def test_neutral_reward_mean_zero(self, small_spec, rng):
        ad, x = random_lowrank(small_spec, rng), rng.normal(size=4)
        pi = policy_distribution(small_spec, ad, x)
        est = mc_full_gradient(small_spec, ad, x, pi, RewardProfile(np.zeros(small_spec.V)), 4000, 1)
        se = np.concatenate([est.se_x, est.se_theta])
        assert np.all(np.abs(est.flat) <= 3 * se + 1e-12)

    def test_seeded(self, small_spec, rng):
        ad, x, prev, prof = self._instance(small_spec, rng)
        a = mc_full_gradient(small_spec, ad, x, prev, prof, 64, 99)
        b = mc_full_gradient(small_spec, ad, x, prev, prof, 64, 99)
        assert a.flat.tobytes() == b.flat.tobytes()
        assert a.estimator == "monte-carlo" and a.n_samples == 64

    def test_rejects_zero_samples(self, small_spec, rng):
        ad, x, prev, prof = self._instance(small_spec, rng)
        with pytest.raises(ContractError):
            mc_full_gradient(small_spec, ad, x, prev, prof, 0, 0)


class TestFiniteDifferenceCheck:
    def test_quadratic(self, rng):
        Q = rng.normal(size=(5, 5))
        Q = Q @ Q.T
        point = rng.normal(size=5)
        err = finite_difference_check(lambda v: 0.5 * v @ Q @ v, lambda v: Q @ v, point)
        assert err < 1e-9

    def test_truncation_dominates_at_large_h(self, small_spec, rng):
        ad, x, t = random_lowrank(small_spec, rng), rng.normal(size=4), random_simplex(rng, 6)
        f, g = _fd_loss(small_spec, ad, t, 1e-5)
        phi = joint_point(ad, x)
        assert finite_difference_check(f, g, phi, h=1e-2) > finite_difference_check(f, g, phi, h=1e-5)

    def test_contract(self):
        with pytest.raises(ContractError):
            finite_difference_check(lambda v: 0.0, lambda v: v, np.ones(2), h=0.0)
        with pytest.raises(ContractError):
            finite_difference_check(lambda v: 0.0, lambda v: v, np.ones(2), scheme="forward")
