"""Reward profiles, the reward-tilted target policy, and the boxed-answer scorer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .policy import ContractError, check_distribution

PROVENANCES = ("observed-turn", "oracle", "custom")


@dataclass(frozen=True)
class RewardProfile:
    values: np.ndarray
    beta: float = 1.0
    provenance: str = "custom"
    r_max: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ContractError("reward values must be a finite vector")
        if np.any(np.abs(v) > self.r_max):
            raise ContractError(f"reward magnitude exceeds r_max={self.r_max}")
        if not self.beta > 0:
            raise ContractError(f"beta must be positive, got {self.beta}")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class TargetDistribution:
    dist: np.ndarray
    Z: float
    source_policy_id: str


def policy_id(p: np.ndarray) -> str:
    """Short content hash identifying a policy snapshot."""
    return hashlib.sha1(np.ascontiguousarray(p, dtype=float).tobytes()).hexdigest()[:12]


def reward_profile_from_turn(y_observed: int, r_t: float, V: int, mode: str = "observed-only",
                             acceptance_set=None, beta: float = 1.0) -> RewardProfile:
    """Spread the single scalar reward of a turn over the response space.

    ``observed-only`` puts ``r_t`` on the generated response and zero elsewhere.
    ``oracle`` ignores the observation and scores +1 on ``acceptance_set``,
    -1 everywhere else.
    """
    if not 0 <= y_observed < V:
        raise ContractError(f"response index {y_observed} out of range for V={V}")
    if mode == "observed-only":
        values = np.zeros(V)
        values[y_observed] = r_t
        return RewardProfile(values, beta, "observed-turn")
    if mode == "oracle":
        if not acceptance_set:
            raise ContractError("oracle mode needs a non-empty acceptance set")
        values = -np.ones(V)
        values[sorted(acceptance_set)] = 1.0
        return RewardProfile(values, beta, "oracle")
    raise ContractError(f"unknown profile mode {mode!r}")


def _log_tilted(pi_prev: np.ndarray, profile: RewardProfile) -> np.ndarray:
    pi_prev = check_distribution(pi_prev)
    if pi_prev.shape != profile.values.shape:
        raise ContractError("policy and reward profile lengths differ")
    with np.errstate(divide="ignore"):
        return np.log(pi_prev) + profile.values / profile.beta


def partition_function(pi_prev, profile: RewardProfile) -> float:
    """Z = sum_y pi_prev(y) exp(r(y) / beta), evaluated in log space."""
    return float(np.exp(logsumexp(_log_tilted(pi_prev, profile))))


def build_target(pi_prev, profile: RewardProfile) -> TargetDistribution:
    pi_prev = np.asarray(pi_prev, dtype=float)
    log_w = _log_tilted(pi_prev, profile)
    log_Z = logsumexp(log_w)
    dist = np.exp(log_w - log_Z)
    dist.setflags(write=False)
    return TargetDistribution(dist, float(np.exp(log_Z)), policy_id(pi_prev))


# -- rule-based text reward --------------------------------------------------

def last_boxed_only_string(text: str) -> str | None:
    """The last ``\\boxed{...}`` group of ``text`` including the wrapper, or None."""
    idx = text.rfind("\\boxed")
    if idx < 0:
        return None
    i = idx + len("\\boxed")
    while i < len(text) and text[i].isspace():
        i += 1
    if i >= len(text) or text[i] != "{":
        return None
    depth = 0
    for j in range(i, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[idx:j + 1]
    return None


def remove_boxed(s: str) -> str:
    left = s.index("{")
    if not s.endswith("}"):
        raise ValueError(f"not a boxed group: {s!r}")
    return s[left + 1:-1]


def extract_boxed_answer(solution_text: str) -> str | None:
    try:
        boxed = last_boxed_only_string(solution_text)
        return None if boxed is None else remove_boxed(boxed)
    except Exception:
        return None


def is_equiv(answer: str, ground_truth: str) -> bool:
    # trimmed, case-sensitive string equality
    return answer.strip() == ground_truth.strip()


def compute_score(solution_text, ground_truth) -> float:
    retval = 0.0
    try:
        if isinstance(solution_text, bytes):
            solution_text = solution_text.decode("utf-8", errors="replace")
        answer = extract_boxed_answer(solution_text)
        if answer is not None and is_equiv(answer, str(ground_truth)):
            retval = 1.0
    except Exception:
        pass
    return retval


def reward_from_score(score: float) -> float:
    return 1.0 if score == 1.0 else -1.0
