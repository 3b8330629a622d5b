"""Seeded generation of problem suites (spec, simulated user, initial context).

Two regimes are mixed:

* ``ambiguity``: the base weights already rank the accepted response first at
  the user's true intent, but the initial context starts far from it.
* ``deficit``: even at the true intent the base weights prefer a response whose
  feature row nearly duplicates the accepted one, so context moves alone cannot
  separate them and some weight change is needed (``confusable`` style; the
  older ``rank`` style just accepts a mid-ranked response).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import AdapterState, PolicySpec, softmax
from .protocol import Problem, UserModel


@dataclass(frozen=True)
class SuiteParams:
    V: int = 32
    d: int = 16
    rank: int = 4
    R_x: float = 10.0
    R_theta: float = 10.0
    base_scale: float = 3.0
    intent_norm: float = 4.0
    start_norm: float = 4.0
    deficit_fraction: float = 0.5
    deficit_rank_range: tuple = (3, 8)
    deficit_style: str = "confusable"
    deficit_margin: float = 2.5
    favourite_margin: float = 5.0
    confusion_noise: float = 0.1
    user_top_mass: float = 0.7
    start_overlap: float = 0.0
    deficit_start_overlap: float | None = 0.95
    adapter_init_scale: float = 1.0
    gamma: float = 0.3
    sigma: float = 0.1
    p_absent: float = 0.2
    top_k: int = 1


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _boost_for_mass(logits: np.ndarray, idx: int, mass: float) -> float:
    """Smallest non-negative logit shift on ``idx`` giving it probability >= mass."""
    p = softmax(logits)
    if p[idx] >= mass:
        return 0.0
    # p' = e^b p / (e^b p + (1 - p)) = mass
    return float(np.log(mass * (1 - p[idx]) / ((1 - mass) * p[idx])))


def make_problem(problem_id: int, rng: np.random.Generator, params: SuiteParams, regime: str) -> Problem:
    P = params
    W_base = rng.normal(scale=P.base_scale / np.sqrt(P.d), size=(P.V, P.d))
    spec = PolicySpec(W_base, P.rank, P.R_x, P.R_theta)
    x_star = _unit(rng, P.d) * P.intent_norm
    base_logits = W_base @ x_star
    order = np.argsort(-base_logits, kind="stable")
    if regime == "deficit" and P.deficit_style == "confusable":
        # accepted response copies the favourite's features minus a margin along the intent
        fav, acc_i = int(order[0]), int(order[1])
        u = x_star / (x_star @ x_star)
        runner = base_logits[order[1]]
        W_base[fav] += max(0.0, P.favourite_margin - (base_logits[fav] - runner)) * u
        W_base[acc_i] = W_base[fav] - P.deficit_margin * u + rng.normal(scale=P.confusion_noise / np.sqrt(P.d), size=P.d)
        spec = PolicySpec(W_base, P.rank, P.R_x, P.R_theta)
        accepted = [acc_i]
    elif regime == "deficit":
        lo, hi = P.deficit_rank_range
        accepted = [int(order[rng.integers(lo, hi + 1)])]
    else:
        accepted = [int(i) for i in order[:1]]
    W_user = np.array(W_base)
    for a in accepted:
        b = _boost_for_mass(W_user @ x_star, a, P.user_top_mass)
        W_user[a] += b * x_star / (x_star @ x_star)
    acc = set(accepted)
    if P.top_k > 1:
        user_order = np.argsort(-(W_user @ x_star), kind="stable")
        acc = set(int(i) for i in user_order[:P.top_k])
    user = UserModel(W_user, x_star, frozenset(acc), P.gamma, P.sigma, P.p_absent)
    overlap = P.start_overlap
    if regime == "deficit" and P.deficit_start_overlap is not None:
        overlap = P.deficit_start_overlap
    direction = overlap * x_star / np.linalg.norm(x_star) + np.sqrt(1 - overlap**2) * _unit(rng, P.d)
    x1 = direction / np.linalg.norm(direction) * P.start_norm
    adapter0 = AdapterState.zeros(spec, "low-rank", rng=rng, init_scale=P.adapter_init_scale)
    return Problem(problem_id, spec, user, x1, adapter0, regime)


def generate_suite(n_problems: int, seed: int, params: SuiteParams = SuiteParams()) -> list[Problem]:
    """Deterministic suite; the first ``deficit_fraction`` share of problems are deficit problems."""
    n_def = int(round(params.deficit_fraction * n_problems))
    out = []
    for i in range(n_problems):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919, i]))
        out.append(make_problem(i, rng, params, "deficit" if i < n_def else "ambiguity"))
    return out
