"""Numerical checks of the parameter-shift reduction and the unified KL bound.

Everything here consumes immutable objects (specs, adapters, traces) and
returns plain report dataclasses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import binomtest

from .policy import (
    AdapterState,
    PolicySpec,
    kl_divergence,
    log_policy_gradients,
    log_softmax,
    policy_distribution,
)
from .reward import RewardProfile, build_target, reward_profile_from_turn
from .streams import (
    SIGMA_FLOOR,
    context_objective,
    parametric_step_closed_form,
    semantic_step,
    singular_value_bound_check,
)

log = logging.getLogger(__name__)

SAFETY_FACTOR = 2.0
IDENTITY_TOL = 1e-10


# -- smoothness constant -----------------------------------------------------

def ball_point(rng, dim: int, radius: float) -> np.ndarray:
    """Uniform draw from the Euclidean ball."""
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / dim)


def random_adapter(template: AdapterState, radius: float, rng) -> AdapterState:
    """Adapter with effective delta norm drawn uniformly in [0, radius]."""
    flat = rng.standard_normal(template.n_params)
    ad = template.with_flat(flat)
    n = np.linalg.norm(ad.delta())
    target = radius * rng.random()
    if n == 0:
        return ad
    s = target / n
    if ad.mode == "full":
        return AdapterState(dW=ad.dW * s)
    r = np.sqrt(s)
    return AdapterState(A=ad.A * r, B=ad.B * r)


def _joint_functions(spec: PolicySpec, template: AdapterState, x_fixed):
    """log pi(. | phi) and its per-response gradients over the probed coordinates."""
    d = spec.d

    def split(phi):
        if x_fixed is None:
            return phi[:d], template.with_flat(phi[d:])
        return x_fixed, template.with_flat(phi)

    def logp(phi):
        x, ad = split(phi)
        return log_softmax((spec.W_base + ad.delta()) @ x)

    def grads(phi):
        x, ad = split(phi)
        G_x, G_theta = log_policy_gradients(spec, ad, x)
        return G_theta if x_fixed is not None else np.hstack([G_x, G_theta])

    return logp, grads


def _lowrank_hvp(spec: PolicySpec, x, A, B, free_x: bool):
    """Matvec ``U -> rows H_y @ U[y]`` with H_y the Hessian of log pi(y) at one point.

    Uses log pi(y) = l_y - logsumexp(l) for the bilinear logits
    l = (W + A B) x, so H_y = S_y - sum_k pi_k S_k - Cov_pi(grad l), where S_k
    is the sparse Hessian of the single logit l_k. Row y of ``U`` is the
    direction for response y.
    """
    V, d, r = spec.V, spec.d, A.shape[1]
    off = d if free_x else 0
    W = spec.W_base + A @ B
    logits = W @ x
    p = np.exp(logits - logits.max())
    p /= p.sum()
    Bx = B @ x
    pA = p @ A
    rows = np.arange(V)

    def matvec(U):
        ux = U[:, :d] if free_x else np.zeros((V, d))
        uA = U[:, off:off + V * r].reshape(V, V, r)
        uB = U[:, off + V * r:].reshape(V, r, d)
        uA_own = uA[rows, rows]
        # S_y u
        sx = uA_own @ B + (A[:, None, :] @ uB)[:, 0]
        sA = ux @ B.T + uB @ x
        sB = A[:, :, None] * ux[:, None, :] + uA_own[:, :, None] * x
        # sum_k pi_k S_k u
        puA = p @ uA
        mx = puA @ B + pA @ uB
        mB = pA[None, :, None] * ux[:, None, :] + puA[:, :, None] * x
        # covariance of the logit gradients applied to u
        lu = ux @ W.T + uA @ Bx + (uB @ x) @ A.T
        c = p * (lu - (lu @ p)[:, None])
        cx = c @ W
        cA = c[:, :, None] * Bx
        cB = (c @ A)[:, :, None] * x

        hA = -p[None, :, None] * sA[:, None, :] - cA
        hA[rows, rows] += sA
        parts = [hA.reshape(V, V * r), (sB - mB - cB).reshape(V, r * d)]
        if free_x:
            parts.insert(0, sx - mx - cx)
        return np.concatenate(parts, axis=1)

    return matvec


def _dense_hessians(grads, phi, h) -> np.ndarray:
    """Symmetrized per-response Hessians from central differences of the scores."""
    H = np.stack([(grads(phi + e) - grads(phi - e)) / (2 * h) for e in h * np.eye(phi.size)], axis=2)
    return 0.5 * (H + H.transpose(0, 2, 1))


def _dominant_directions(matvec, shape, n_iter: int, rng) -> np.ndarray:
    """Batched power iteration: per-response unit vector of largest |eigenvalue|."""
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(n_iter):
        v = matvec(v)
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    return v


def estimate_smoothness_L(spec: PolicySpec, R_x: float | None = None, R_theta: float | None = None,
                          n_probe: int = 200, rng=None, adapter: AdapterState | None = None,
                          x_fixed=None, h: float = 1e-4, directions: str = "worst",
                          power_iters: int = 30) -> float:
    """Empirical curvature bound for log pi over the (R_x, R_theta) ball.

    Draws ``n_probe`` points uniformly in the joint (context, adapter) ball and
    measures the second directional derivative of log pi(y), for every
    response y, by central differences. Returns ``SAFETY_FACTOR`` times the
    largest magnitude seen.

    ``directions="random"`` uses one uniform unit direction per probe, which
    in a few hundred dimensions badly undershoots the supremum; the default
    ``"worst"`` also probes each response along the dominant eigenvector of
    its Hessian at the probe point. ``x_fixed`` freezes the context so that
    only adapter directions are probed; ``adapter`` fixes the
    parameterization (default: low-rank of ``spec.rank``).
    """
    if n_probe < 100:
        raise ValueError("n_probe must be at least 100")
    if directions not in ("worst", "random"):
        raise ValueError(f"unknown direction scheme {directions!r}")
    rng = np.random.default_rng(rng)
    R_x = spec.R_x if R_x is None else R_x
    R_theta = spec.R_theta if R_theta is None else R_theta
    template = adapter if adapter is not None else AdapterState.zeros(spec, "low-rank")
    x_fixed = None if x_fixed is None else np.atleast_1d(np.asarray(x_fixed, dtype=float))
    logp, grads = _joint_functions(spec, template, x_fixed)
    dim = template.n_params + (0 if x_fixed is not None else spec.d)

    def _hvp(phi):
        if template.mode == "low-rank":
            x = x_fixed if x_fixed is not None else phi[:spec.d]
            ad = template.with_flat(phi if x_fixed is not None else phi[spec.d:])
            return _lowrank_hvp(spec, x, ad.A, ad.B, x_fixed is None)
        H = _dense_hessians(grads, phi, h)
        return lambda U: np.einsum("yij,yj->yi", H, U)

    worst = 0.0
    for _ in range(n_probe):
        parts = [] if x_fixed is not None else [ball_point(rng, spec.d, R_x)]
        parts.append(random_adapter(template, R_theta, rng).flat())
        phi = np.concatenate(parts)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        f0 = logp(phi)
        curv = (logp(phi + h * v) - 2 * f0 + logp(phi - h * v)) / (h * h)
        worst = max(worst, float(np.max(np.abs(curv))))
        if directions == "worst":
            for y, u in enumerate(_dominant_directions(_hvp(phi), (spec.V, dim), power_iters, rng)):
                c = (logp(phi + h * u)[y] - 2 * f0[y] + logp(phi - h * u)[y]) / (h * h)
                worst = max(worst, abs(float(c)))
    return SAFETY_FACTOR * worst


# -- parameter-shift reduction -----------------------------------------------

@dataclass(frozen=True)
class Theorem1Instance:
    spec: PolicySpec
    adapter: AdapterState
    target: np.ndarray
    x: np.ndarray
    x_star: np.ndarray
    pi_user: np.ndarray


@dataclass(frozen=True)
class Theorem1Report:
    kl_before: float
    kl_after: float
    residual_before: float
    residual_after: float
    delta_theta_before: float
    delta_theta_after: float
    kl_reduced: bool
    residual_reduced: bool
    shift_reduced: bool
    full_rank: bool = True
    bound_before: bool | None = None
    bound_after: bool | None = None


@dataclass(frozen=True)
class Theorem1Summary:
    reports: tuple
    n_generated: int
    n_hypothesis: int
    n_rank_deficient: int
    residual_fraction: float
    shift_fraction: float
    shift_ci: tuple
    bound_fraction: float

    def describe(self) -> str:
        lo, hi = self.shift_ci
        return (f"{self.n_hypothesis}/{self.n_generated} instances satisfy the KL hypothesis "
                f"({self.n_rank_deficient} rank-deficient excluded); shift reduced in "
                f"{self.shift_fraction:.4f} [95% CI {lo:.4f}, {hi:.4f}]; residual reduced in "
                f"{self.residual_fraction:.4f}; closed-form bound held in {self.bound_fraction:.4f}")


def theorem1_report(inst: Theorem1Instance) -> Theorem1Report:
    """Compare the closed-form (lambda = 0) parameter shift at x and at x*."""
    spec, ad = inst.spec, inst.adapter
    kl_b = kl_divergence(inst.pi_user, policy_distribution(spec, ad, inst.x))
    kl_a = kl_divergence(inst.pi_user, policy_distribution(spec, ad, inst.x_star))
    dth_b, _, rec_b = parametric_step_closed_form(spec, ad, inst.x, inst.target, 0.0)
    dth_a, _, rec_a = parametric_step_closed_form(spec, ad, inst.x_star, inst.target, 0.0)
    nb, na = float(np.linalg.norm(dth_b)), float(np.linalg.norm(dth_a))
    return Theorem1Report(
        kl_before=kl_b, kl_after=kl_a,
        residual_before=rec_b.residual_norm, residual_after=rec_a.residual_norm,
        delta_theta_before=nb, delta_theta_after=na,
        kl_reduced=kl_a < kl_b,
        residual_reduced=rec_a.residual_norm < rec_b.residual_norm,
        shift_reduced=na < nb,
        full_rank=min(rec_b.sigma_min, rec_a.sigma_min) > SIGMA_FLOOR,
        bound_before=singular_value_bound_check(rec_b),
        bound_after=singular_value_bound_check(rec_a),
    )


def theorem1_instances(problems, rng, eta_x: float = 0.5, beta: float = 1.0) -> Iterable[Theorem1Instance]:
    """Endless stream of instances built from suite problems.

    Each instance takes a random problem, a random context in the ball and a
    random adapter, tilts the current policy with the oracle reward profile
    and refines the context by one backtracked semantic step.
    """
    rng = np.random.default_rng(rng)
    problems = list(problems)
    while True:
        prob = problems[int(rng.integers(len(problems)))]
        spec = prob.spec
        x = ball_point(rng, spec.d, 0.5 * spec.R_x)
        adapter = random_adapter(prob.adapter0, 0.5 * spec.R_theta, rng)
        values = -np.ones(spec.V)
        values[sorted(prob.user.acceptance_set)] = 1.0
        target = build_target(policy_distribution(spec, adapter, x), RewardProfile(values, beta, "oracle"))
        loss, grad = context_objective(spec, adapter, target)
        x_star, _ = semantic_step(x, loss, grad, eta_x, spec.R_x, backtracking=True)
        yield Theorem1Instance(spec, adapter, target.dist, x, x_star, prob.user.pi_user)


def verify_theorem1(instances: Iterable[Theorem1Instance], n_instances: int = 500,
                    max_draws: int | None = None, confidence: float = 0.95) -> Theorem1Summary:
    """Collect ``n_instances`` full-rank instances meeting the KL hypothesis and aggregate."""
    max_draws = max_draws or 50 * n_instances
    kept, generated, deficient = [], 0, 0
    for inst in instances:
        if len(kept) >= n_instances or generated >= max_draws:
            break
        generated += 1
        rep = theorem1_report(inst)
        if not rep.kl_reduced:
            continue
        if not rep.full_rank:
            deficient += 1
            continue
        kept.append(rep)
    n = len(kept)
    shift = sum(r.shift_reduced for r in kept)
    resid = sum(r.residual_reduced for r in kept)
    bounds = [b for r in kept for b in (r.bound_before, r.bound_after) if b is not None]
    ci = binomtest(shift, n).proportion_ci(confidence, method="wilson") if n else None
    return Theorem1Summary(
        reports=tuple(kept), n_generated=generated, n_hypothesis=n, n_rank_deficient=deficient,
        residual_fraction=resid / n if n else float("nan"),
        shift_fraction=shift / n if n else float("nan"),
        shift_ci=(ci.low, ci.high) if ci else (float("nan"), float("nan")),
        bound_fraction=float(np.mean(bounds)) if bounds else float("nan"),
    )


# -- unified bound -----------------------------------------------------------

@dataclass(frozen=True)
class BoundReport:
    lhs: float
    initial_error: float
    improvement_sum: float
    approx_error_sum: float
    L_used: float
    rhs: float
    holds: bool
    n_updates: int = 0
    # auxiliary: per-turn ideal-gain term and its expected-reward bound
    term_a: tuple = ()
    term_a_bound: tuple = ()
    # the same bound priced on recorded update steps only (ignores user rewrites)
    approx_update_only: float = 0.0
    holds_update_only: bool = True

    @property
    def identity_gap(self) -> float:
        return abs(self.rhs - (self.initial_error - self.improvement_sum + self.approx_error_sum))


def verify_theorem2(trace, problem, beta: float, L: float) -> BoundReport:
    """Evaluate every term of the unified bound on one session trace.

    The improvement term sums the user-policy mass of each generated response
    under the refined context of its turn. The smoothness penalty prices the
    whole move between consecutive iterates, ``x*_{t+1} - x_t`` (user rewrite
    plus semantic step) and ``theta_{t+1} - theta_t``; the variant priced on
    the recorded semantic step alone is kept as ``approx_update_only``. Term A
    and its expected-reward bound are logged per update as diagnostics only.
    """
    spec, user = problem.spec, problem.user
    pi_user = user.pi_user
    initial = kl_divergence(pi_user, policy_distribution(spec, problem.adapter0, problem.x1))
    final_x = trace.final_x if trace.final_x is not None else problem.x1
    final_ad = trace.final_adapter if trace.final_adapter is not None else problem.adapter0
    lhs = kl_divergence(pi_user, policy_distribution(spec, final_ad, final_x))

    improvement, step_sq, update_sq, term_a, term_a_bound = 0.0, 0.0, 0.0, [], []
    updated = [tr for tr in trace.turns if tr.x_refined is not None and tr.optimized]
    for tr in updated:
        improvement += float(user.user_mass(tr.x_refined)[tr.response]) / beta
        move = np.asarray(tr.x_refined) - np.asarray(tr.context)
        step_sq += float(move @ move) + tr.update.delta_theta_sq
        update_sq += tr.update.delta_x_sq + tr.update.delta_theta_sq
        if tr.target is not None and tr.snapshot is not None:
            term_a.append(kl_divergence(pi_user, tr.target) - kl_divergence(pi_user, tr.snapshot))
            term_a_bound.append(_expected_reward_bound(pi_user, tr, spec.V, user.acceptance_set, beta))
    approx = 0.5 * L * step_sq
    rhs = initial - improvement + approx
    approx_upd = 0.5 * L * update_sq
    return BoundReport(lhs, initial, improvement, approx, float(L), rhs, bool(lhs <= rhs), len(updated),
                       tuple(term_a), tuple(term_a_bound), approx_upd,
                       bool(lhs <= initial - improvement + approx_upd))


def _expected_reward_bound(pi_user, turn, V, acceptance_set, beta) -> float:
    profile = reward_profile_from_turn(turn.response, turn.reward, V, "observed-only", acceptance_set, beta)
    return -float(pi_user @ profile.values) / beta


# -- error dynamics ----------------------------------------------------------

@dataclass(frozen=True)
class ErrorLedger:
    semantic_sq: np.ndarray
    parametric_sq: np.ndarray
    total_sq: np.ndarray
    baseline_parametric_sq: np.ndarray
    frac_turns_below_baseline: float
    semantic_nonincreasing: bool
    cumulative_parametric: float = 0.0
    cumulative_baseline: float = 0.0
    extras: dict = field(default_factory=dict)


def _sq_series(trace):
    ups = trace.updates
    return (np.array([u.delta_x_sq for u in ups], dtype=float),
            np.array([u.delta_theta_sq for u in ups], dtype=float))


def error_dynamics(joint_trace, baseline_trace, after_turn: int = 2) -> ErrorLedger:
    """Per-update squared step norms of a joint run next to a paired parameter-only run.

    Both series are cut to the shorter number of updates. ``semantic_nonincreasing``
    asks whether ``semantic_sq`` never rises from update ``after_turn`` on;
    with fewer than two such updates it holds trivially.
    """
    sem, par = _sq_series(joint_trace)
    _, base = _sq_series(baseline_trace)
    n = min(len(par), len(base))
    sem, par, base = sem[:n], par[:n], base[:n]
    tail = sem[after_turn - 1:]
    nonincr = bool(np.all(np.diff(tail) <= 0)) if tail.size > 1 else True
    below = float(np.mean(par < base)) if n else float("nan")
    return ErrorLedger(sem, par, sem + par, base, below, nonincr,
                       float(par.sum()), float(base.sum()), {"n_compared": n, "n_tail": int(tail.size)})
