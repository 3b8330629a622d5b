import math

import numpy as np
import pytest

from coadapt.policy import ContractError
from coadapt.reward import (
    RewardProfile,
    build_target,
    compute_score,
    extract_boxed_answer,
    partition_function,
    reward_from_score,
    reward_profile_from_turn,
)
from conftest import random_simplex


class TestProfiles:
    def test_observed_only(self):
        prof = reward_profile_from_turn(3, -1.0, 6)
        np.testing.assert_array_equal(prof.values, [0, 0, 0, -1, 0, 0])
        assert prof.provenance == "observed-turn"

    def test_oracle(self):
        prof = reward_profile_from_turn(2, -1.0, 4, "oracle", acceptance_set={0})
        np.testing.assert_array_equal(prof.values, [1, -1, -1, -1])

    def test_observed_positive_tilts_only_observed(self, rng):
        pi = random_simplex(rng, 6)
        q = build_target(pi, reward_profile_from_turn(2, 1.0, 6)).dist
        others = [i for i in range(6) if i != 2]
        np.testing.assert_allclose(q[others] / q[others[0]], pi[others] / pi[others[0]], rtol=1e-12)
        assert q[2] / q[0] == pytest.approx(math.e * pi[2] / pi[0], rel=1e-12)

    def test_contract(self):
        with pytest.raises(ContractError):
            RewardProfile(np.array([2.0, 0.0]))
        with pytest.raises(ContractError):
            RewardProfile(np.zeros(2), beta=0.0)
        with pytest.raises(ContractError):
            reward_profile_from_turn(5, 1.0, 4)


class TestPartition:
    def test_constant_reward(self, rng):
        pi = random_simplex(rng, 10)
        assert partition_function(pi, RewardProfile(np.full(10, 0.7), beta=2.0)) == pytest.approx(
            math.exp(0.35), abs=1e-12)
        assert partition_function(pi, RewardProfile(np.zeros(10))) == pytest.approx(1.0, abs=1e-15)

    def test_two_term_hand_sum(self):
        z = partition_function([0.5, 0.5], RewardProfile(np.array([1.0, -1.0])))
        assert z == pytest.approx((math.e + 1 / math.e) / 2, abs=1e-15)

    def test_bounds(self, rng):
        for _ in range(200):
            V, beta = int(rng.integers(2, 20)), float(rng.uniform(0.1, 5))
            r = rng.uniform(-1, 1, size=V)
            z = partition_function(random_simplex(rng, V), RewardProfile(r, beta))
            assert math.exp(r.min() / beta) * (1 - 1e-12) <= z <= math.exp(r.max() / beta) * (1 + 1e-12)


class TestTarget:
    def test_neutral_reward_identity(self, rng):
        pi = random_simplex(rng, 8)
        np.testing.assert_allclose(build_target(pi, RewardProfile(np.zeros(8))).dist, pi, rtol=0, atol=1e-16)

    def test_large_beta(self, rng):
        pi = random_simplex(rng, 8)
        q = build_target(pi, RewardProfile(rng.uniform(-1, 1, 8), beta=1e6)).dist
        assert np.max(np.abs(q - pi)) < 1e-5

    def test_two_point_value(self):
        q = build_target([0.5, 0.5], RewardProfile(np.array([1.0, -1.0]))).dist
        sig2 = 1 / (1 + math.exp(-2))
        brute = np.array([math.e, 1 / math.e]) / (math.e + 1 / math.e)
        np.testing.assert_allclose(q, [sig2, 1 - sig2], atol=1e-15)
        np.testing.assert_allclose(q, brute, atol=1e-15)

    def test_log_ratio_identity(self, rng):
        worst = 0.0
        for _ in range(1000):
            V, beta = int(rng.integers(2, 40)), float(rng.uniform(0.05, 10))
            pi, r = random_simplex(rng, V), rng.uniform(-1, 1, V)
            q = build_target(pi, RewardProfile(r, beta)).dist
            lhs = np.log(q)[:, None] - np.log(q)[None, :] - (np.log(pi)[:, None] - np.log(pi)[None, :])
            worst = max(worst, np.max(np.abs(lhs - (r[:, None] - r[None, :]) / beta)))
        assert worst < 1e-9

    def test_reward_shift_invariance(self, rng):
        pi, r = random_simplex(rng, 9), rng.uniform(-0.5, 0.5, 9)
        a = build_target(pi, RewardProfile(r, 1.5))
        b = build_target(pi, RewardProfile(r + 0.4, 1.5))
        np.testing.assert_allclose(a.dist, b.dist, atol=1e-10)
        assert b.Z == pytest.approx(a.Z * math.exp(0.4 / 1.5), rel=1e-12)

    def test_zero_mass_stays_zero(self):
        q = build_target([0.0, 0.3, 0.7], RewardProfile(np.array([1.0, 0.0, -1.0]))).dist
        assert q[0] == 0.0 and abs(q.sum() - 1) < 1e-12

    def test_rejects_non_simplex(self):
        with pytest.raises(ContractError):
            build_target([0.5, 0.6], RewardProfile(np.zeros(2)))


class TestScorer:
    @pytest.mark.parametrize("text,expected", [
        ("thus \\boxed{42}", "42"),
        ("no box here", None),
        ("\\boxed{a} then \\boxed{b}", "b"),
        ("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}"),
        ("unterminated \\boxed{12", None),
    ])
    def test_extract(self, text, expected):
        assert extract_boxed_answer(text) == expected

    def test_scores(self):
        assert compute_score("so the answer is \\boxed{42}", "42") == 1.0
        assert reward_from_score(compute_score("so the answer is \\boxed{42}", "42")) == 1.0
        assert compute_score("so the answer is \\boxed{41}", "42") == 0.0
        assert reward_from_score(0.0) == -1.0
        assert compute_score("no final answer", "42") == 0.0

    def test_trimmed_case_sensitive(self):
        assert compute_score("\\boxed{ x }", "x") == 1.0
        assert compute_score("\\boxed{X}", "x") == 0.0

    def test_total_on_arbitrary_bytes(self, rng):
        for _ in range(200):
            blob = bytes(rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8))
            assert compute_score(blob, "1") in (0.0, 1.0)
        assert compute_score(None, "1") == 0.0
