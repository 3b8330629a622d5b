"""Per-turn update streams: context refinement and adapter updates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gradients import exact_full_gradient, joint_loss
from .policy import (
    AdapterState,
    ContractError,
    PolicySpec,
    clamp_adapter,
    clamp_to_ball,
    policy_distribution,
    policy_jacobian_theta,
)
from .reward import TargetDistribution

MAX_HALVINGS = 30
BOUND_SLACK = 1e-9
SIGMA_FLOOR = 1e-10


@dataclass(frozen=True)
class StepResult:
    """Outcome of one backtracked descent step in a single block of variables."""

    delta: np.ndarray
    loss_before: float
    loss_after: float
    eta_used: float
    backtracks: int = 0
    stalled: bool = False

    @property
    def delta_sq(self) -> float:
        return float(self.delta @ self.delta)


@dataclass(frozen=True)
class UpdateRecord:
    delta_x_sq: float = 0.0
    delta_theta_sq: float = 0.0
    residual_norm: float = 0.0
    sigma_min: float = 0.0
    method: str = "gradient"
    backtracks: int = 0
    lambda_ridge: float | None = None
    delta_w_sq: float = 0.0
    stalled_x: bool = False
    stalled_theta: bool = False


def _descend(start: np.ndarray, grad: np.ndarray, loss: Callable[[np.ndarray], float],
             project: Callable[[np.ndarray], np.ndarray], eta: float, backtracking: bool) -> tuple[np.ndarray, StepResult]:
    if eta <= 0:
        raise ContractError(f"step size must be positive, got {eta}")
    start = np.asarray(start, dtype=float)
    f0 = loss(start)
    if not np.any(grad):
        return start.copy(), StepResult(np.zeros_like(start), f0, f0, 0.0)
    step = eta
    for k in range(MAX_HALVINGS + 1):
        trial = project(start - step * grad)
        f1 = loss(trial)
        if not backtracking or f1 <= f0:
            return trial, StepResult(trial - start, f0, f1, step, backtracks=k)
        step *= 0.5
    return start.copy(), StepResult(np.zeros_like(start), f0, f0, 0.0, backtracks=MAX_HALVINGS, stalled=True)


def semantic_step(x_raw, loss: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                  eta_x: float = 0.5, radius: float = np.inf, backtracking: bool = True):
    """One projected gradient step on the context, halving the step until the loss does not rise.

    Returns ``(x_star, StepResult)``. After 30 failed halvings the raw context
    comes back unchanged with ``stalled`` set.
    """
    x_raw = np.asarray(x_raw, dtype=float)
    return _descend(x_raw, np.asarray(grad(x_raw), dtype=float), loss,
                    lambda v: clamp_to_ball(v, radius), eta_x, backtracking)


def synthesize_feedback(x_t, y_t: int, loss, grad, eta_x: float = 0.5, radius: float = np.inf,
                        backtracking: bool = True):
    """Build a refined next context when the user sent none.

    The failed turn's loss already encodes ``y_t`` through its target, so this
    is the semantic step applied to the current context.
    """
    return semantic_step(x_t, loss, grad, eta_x, radius, backtracking)


def context_objective(spec: PolicySpec, adapter: AdapterState, target):
    """(loss, grad) callables of the joint loss as a function of the context alone."""
    return (lambda x: joint_loss(spec, adapter, x, target),
            lambda x: exact_full_gradient(spec, adapter, x, target).g_x)


def parametric_step_gradient(adapter: AdapterState, g_theta, eta_theta: float,
                             loss: Callable[[AdapterState], float], radius: float = np.inf,
                             backtracking: bool = True):
    """Gradient step on the flattened adapter with ball clamping.

    Returns ``(adapter', StepResult)`` where ``StepResult.delta`` is the flattened
    parameter difference after clamping.
    """
    g_theta = np.asarray(g_theta, dtype=float)
    if g_theta.shape != (adapter.n_params,):
        raise ContractError(f"gradient has shape {g_theta.shape}, expected ({adapter.n_params},)")

    def project(vec):
        return clamp_adapter(adapter.with_flat(vec), radius).flat()

    new_flat, res = _descend(adapter.flat(), g_theta, lambda v: loss(adapter.with_flat(v)),
                             project, eta_theta, backtracking)
    return adapter.with_flat(new_flat), res


def residual(spec: PolicySpec, adapter: AdapterState, x, target) -> np.ndarray:
    """Target minus current policy."""
    t = target.dist if isinstance(target, TargetDistribution) else np.asarray(target, dtype=float)
    return t - policy_distribution(spec, adapter, x)


def expected_rank(spec_or_V, n_params: int) -> int:
    """Largest attainable rank of the probability Jacobian (columns always sum to zero)."""
    V = spec_or_V.V if isinstance(spec_or_V, PolicySpec) else int(spec_or_V)
    return min(n_params, V - 1)


def solve_normal_equations(J: np.ndarray, R: np.ndarray, lambda_ridge: float):
    """Solve (J^T J + lam I) dtheta = J^T R through the SVD of J.

    For lam = 0 the singular directions are dropped, which gives the
    minimum-norm least-squares solution (pseudoinverse). Returns
    ``(dtheta, singular_values)``.
    """
    if lambda_ridge < 0:
        raise ContractError("lambda_ridge must be >= 0")
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    UtR = U.T @ R
    if lambda_ridge > 0:
        coef = s / (s * s + lambda_ridge)
    else:
        tol = s.max(initial=0.0) * max(J.shape) * np.finfo(float).eps
        coef = np.where(s > tol, 1.0 / np.where(s > tol, s, 1.0), 0.0)
    return Vt.T @ (coef * UtR), s


def parametric_step_closed_form(spec: PolicySpec, adapter: AdapterState, x, target,
                                lambda_ridge: float = 1e-6):
    """Linearised least-squares fit of the residual in adapter space.

    Returns ``(dtheta, adapter', UpdateRecord)``. The record stores the norm of
    the solved ``dtheta``; ball clamping only affects ``adapter'``.
    ``sigma_min`` is the smallest of the attainable singular values of J
    (rank V-1 at most); a value below 1e-10 marks J as rank deficient.
    """
    J = policy_jacobian_theta(spec, adapter, x)
    R = residual(spec, adapter, x, target)
    dtheta, s = solve_normal_equations(J, R, lambda_ridge)
    k = expected_rank(spec, adapter.n_params)
    sigma_min = float(s[k - 1]) if k >= 1 else 0.0
    new = clamp_adapter(adapter.with_flat(adapter.flat() + dtheta), spec.R_theta)
    dW = new.delta() - adapter.delta()
    rec = UpdateRecord(
        delta_theta_sq=float(dtheta @ dtheta),
        residual_norm=float(np.linalg.norm(R)),
        sigma_min=sigma_min,
        method="closed-form",
        lambda_ridge=float(lambda_ridge),
        delta_w_sq=float(np.sum(dW * dW)),
    )
    return dtheta, new, rec


def singular_value_bound_check(record: UpdateRecord) -> bool | None:
    """Check ||dtheta|| <= ||R|| / sigma_min(J).

    Returns None when the bound does not apply (ridge term present or
    rank-deficient Jacobian).
    """
    if record.method != "closed-form" or record.lambda_ridge != 0 or record.sigma_min <= SIGMA_FLOOR:
        return None
    norm = np.sqrt(record.delta_theta_sq)
    return bool(norm <= record.residual_norm / record.sigma_min * (1 + BOUND_SLACK))
