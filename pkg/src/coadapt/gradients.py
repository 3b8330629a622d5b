"""Joint cross-entropy loss and its gradient in (context, adapter) space.

The exact route sums over the whole response set. The Monte Carlo route draws
responses from the current policy and reweights them by
``pi_prev(y) exp(r(y)/beta) / (Z pi(y))``, i.e. the tilted target over the
sampling policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .policy import (
    PROB_FLOOR,
    AdapterState,
    ContractError,
    InfiniteDivergenceError,
    PolicySpec,
    compose_parameters,
    log_policy_gradients,
    logit_jacobian_theta,
    policy_distribution,
)
from .reward import RewardProfile, TargetDistribution, build_target


@dataclass(frozen=True)
class JointGradient:
    g_x: np.ndarray
    g_theta: np.ndarray
    loss_value: float
    estimator: str = "exact"
    n_samples: int = 0
    se_x: np.ndarray | None = None
    se_theta: np.ndarray | None = None

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.g_x, self.g_theta])


def _target_probs(target) -> np.ndarray:
    return np.asarray(target.dist if isinstance(target, TargetDistribution) else target, dtype=float)


def joint_loss(spec: PolicySpec, adapter: AdapterState, x, target) -> float:
    """Cross-entropy -sum_y target(y) log pi(y | x, theta)."""
    p = policy_distribution(spec, adapter, x)
    t = _target_probs(target)
    if t.shape != p.shape:
        raise ContractError("target and policy have different lengths")
    nz = t > 0
    if np.any(p[nz] <= 0):
        raise InfiniteDivergenceError("policy has no mass on a supported target response")
    return float(-np.sum(t[nz] * np.log(np.maximum(p[nz], PROB_FLOOR))))


def exact_full_gradient(spec: PolicySpec, adapter: AdapterState, x, target) -> JointGradient:
    """Exact gradient; d loss / d logits = pi - target, chained through the logit map."""
    loss = joint_loss(spec, adapter, x, target)
    p = policy_distribution(spec, adapter, x)
    g_logits = p - _target_probs(target)
    W = compose_parameters(spec, adapter)
    g_x = W.T @ g_logits
    g_theta = logit_jacobian_theta(spec, adapter, x).T @ g_logits
    return JointGradient(g_x, g_theta, loss)


def mc_full_gradient(spec: PolicySpec, adapter: AdapterState, x, pi_prev, profile: RewardProfile,
                     n_samples: int, rng_seed) -> JointGradient:
    """Importance-sampled gradient estimate with samples drawn from the current policy."""
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    target = build_target(pi_prev, profile)
    p = policy_distribution(spec, adapter, x)
    ys = rng.choice(p.size, size=n_samples, p=p)
    pi_prev = np.asarray(pi_prev, dtype=float)
    w = pi_prev[ys] * np.exp(profile.values[ys] / profile.beta) / (target.Z * p[ys])
    G_x, G_theta = log_policy_gradients(spec, adapter, x)
    terms_x = -w[:, None] * G_x[ys]
    terms_t = -w[:, None] * G_theta[ys]
    se = (lambda a: a.std(axis=0, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else (lambda a: None)
    return JointGradient(
        terms_x.mean(axis=0),
        terms_t.mean(axis=0),
        joint_loss(spec, adapter, x, target),
        estimator="monte-carlo",
        n_samples=n_samples,
        se_x=se(terms_x),
        se_theta=se(terms_t),
    )


def central_difference_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    point = np.asarray(point, dtype=float)
    grad = np.empty_like(point)
    for j in range(point.size):
        e = np.zeros_like(point)
        e[j] = h
        grad[j] = (f(point + e) - f(point - e)) / (2 * h)
    return grad


def finite_difference_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                            point, h: float = 1e-5, scheme: str = "central") -> float:
    """Worst component-wise relative error between ``grad(point)`` and central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ContractError("h must be positive")
    if scheme != "central":
        raise ContractError(f"unsupported scheme {scheme!r}")
    analytic = np.asarray(grad(point), dtype=float)
    numeric = central_difference_gradient(f, point, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def joint_point(adapter: AdapterState, x) -> np.ndarray:
    """Stack context and flattened adapter into a single vector."""
    return np.concatenate([np.asarray(x, dtype=float), adapter.flat()])


def split_point(adapter: AdapterState, phi: np.ndarray, d: int):
    return phi[:d], adapter.with_flat(phi[d:])


def extended_precision_loss(spec: PolicySpec, template: AdapterState, phi, target) -> np.longdouble:
    """Joint loss at the stacked point ``phi`` evaluated entirely in ``np.longdouble``.

    Used as the finite-difference oracle: float64 roundoff in the loss
    (about 1e-16 relative) divided by a 1e-5 step swamps gradient components
    near 1e-8, while the extended mantissa keeps that noise far below the
    checked tolerance.
    """
    ld = np.longdouble
    phi = np.asarray(phi, dtype=ld)
    d, V = spec.d, spec.V
    x, flat = phi[:d], phi[d:]
    W = spec.W_base.astype(ld)
    if template.mode == "full":
        W = W + flat.reshape(V, d)
    else:
        r = template.rank
        W = W + flat[:V * r].reshape(V, r) @ flat[V * r:].reshape(r, d)
    z = W @ x
    z = z - z.max()
    logp = z - np.log(np.sum(np.exp(z)))
    t = _target_probs(target)
    nz = t > 0
    return -np.sum(t[nz].astype(ld) * logp[nz])


def joint_loss_fd_error(spec: PolicySpec, adapter: AdapterState, x, target, h: float = 1e-4) -> float:
    """Worst relative error of exact_full_gradient against central differences over (x, theta).

    The central differences run on the extended-precision loss and are
    Richardson-extrapolated, (4 D(h/2) - D(h)) / 3, which cancels the h^2
    truncation term. The denominator is max(|analytic|, |numeric|, 1e-8) as
    in finite_difference_check.
    """
    phi = np.asarray(joint_point(adapter, x), dtype=np.longdouble)

    def central(j, step):
        e = np.zeros_like(phi)
        e[j] = step
        return (extended_precision_loss(spec, adapter, phi + e, target)
                - extended_precision_loss(spec, adapter, phi - e, target)) / (2 * step)

    hh = np.longdouble(h)
    numeric = np.array([float((4 * central(j, hh / 2) - central(j, hh)) / 3) for j in range(phi.size)])
    analytic = exact_full_gradient(spec, adapter, x, target).flat
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
