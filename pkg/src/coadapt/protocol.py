"""Multi-turn co-adaptation loop against a simulated user, plus session metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gradients import exact_full_gradient, joint_loss, mc_full_gradient
from .policy import (
    AdapterState,
    ContractError,
    PolicySpec,
    clamp_to_ball,
    kl_divergence,
    policy_distribution,
    softmax,
)
from .reward import build_target, reward_profile_from_turn
from .streams import (
    UpdateRecord,
    context_objective,
    parametric_step_closed_form,
    parametric_step_gradient,
    semantic_step,
    synthesize_feedback,
)

MODES = ("baseline", "prompt-only", "param-only", "switch", "joint")


@dataclass(frozen=True)
class UserModel:
    W_user: np.ndarray
    x_star: np.ndarray
    acceptance_set: frozenset
    gamma: float = 0.3
    sigma: float = 0.1
    p_absent: float = 0.2

    def __post_init__(self):
        V = self.W_user.shape[0]
        acc = frozenset(int(a) for a in self.acceptance_set)
        if not acc or len(acc) >= V or not all(0 <= a < V for a in acc):
            raise ContractError("acceptance set must be a non-empty strict subset of responses")
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must lie in (0, 1]")
        if self.sigma < 0 or not 0 <= self.p_absent < 1:
            raise ContractError("need sigma >= 0 and p_absent in [0, 1)")
        object.__setattr__(self, "acceptance_set", acc)
        if self.pi_user[sorted(acc)].sum() < 0.5:
            raise ContractError("user policy puts less than half its mass on the acceptance set")

    @property
    def pi_user(self) -> np.ndarray:
        return softmax(self.W_user @ self.x_star)

    def user_mass(self, x) -> np.ndarray:
        """User policy evaluated at an arbitrary context."""
        return softmax(self.W_user @ np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Problem:
    problem_id: int
    spec: PolicySpec
    user: UserModel
    x1: np.ndarray
    adapter0: AdapterState
    regime: str = "custom"


@dataclass(frozen=True)
class SessionConfig:
    mode: str = "joint"
    T_max: int = 10
    switch_turn: int = 5
    switch_first: str = "prompt"
    beta: float = 1.0
    eta_x: float = 0.5
    eta_theta: float = 0.5
    lambda_ridge: float = 1e-6
    backtracking: bool = True
    param_method: str = "gradient"
    profile_mode: str = "observed-only"
    # where the reward tilt is anchored: the context that generated the response,
    # the incoming raw context, or (for the adapter step) the refined context
    target_anchor: str = "refined"
    estimator: str = "exact"
    n_samples: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.target_anchor not in ("generating", "incoming", "refined"):
            raise ContractError(f"unknown target anchor {self.target_anchor!r}")
        if self.param_method not in ("gradient", "closed-form"):
            raise ContractError(f"unknown parametric method {self.param_method!r}")
        if self.estimator not in ("exact", "monte-carlo"):
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if self.T_max < 1 or self.beta <= 0 or self.eta_x <= 0 or self.eta_theta <= 0 or self.lambda_ridge < 0:
            raise ContractError("need T_max >= 1, beta > 0, positive step sizes and lambda_ridge >= 0")
        if self.switch_first not in ("prompt", "param"):
            raise ContractError("switch_first must be 'prompt' or 'param'")

    def streams_at(self, t: int) -> tuple[bool, bool]:
        """(semantic, parametric) activity for the update after turn ``t``."""
        if self.mode == "baseline":
            return False, False
        if self.mode == "prompt-only":
            return True, False
        if self.mode == "param-only":
            return False, True
        if self.mode == "joint":
            return True, True
        first_prompt = self.switch_first == "prompt"
        before = t < self.switch_turn
        use_prompt = before == first_prompt
        return use_prompt, not use_prompt


@dataclass(frozen=True)
class TurnRecord:
    t: int
    context: np.ndarray
    response: int
    reward: float
    kl_to_user: float
    x_raw: np.ndarray | None = None
    x_refined: np.ndarray | None = None
    feedback_absent: bool = False
    update: UpdateRecord = field(default_factory=UpdateRecord)
    # (before, after) loss of each stream under the target it descended
    x_loss: tuple = (math.nan, math.nan)
    theta_loss: tuple = (math.nan, math.nan)
    user_mass_response: float = 0.0
    # last target built this turn and the policy snapshot it tilts
    snapshot: np.ndarray | None = None
    target: np.ndarray | None = None
    # (semantic, parametric) streams that ran this turn
    streams: tuple = (False, False)

    @property
    def optimized(self) -> bool:
        return any(self.streams)


@dataclass(frozen=True)
class SessionTrace:
    turns: tuple
    status: str
    mode: str
    seed: int
    solved_at: int | None
    final_x: np.ndarray = None
    final_adapter: AdapterState = None

    @property
    def solved(self) -> bool:
        return self.status == "accepted"

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    @property
    def updates(self):
        return [tr.update for tr in self.turns if tr.x_refined is not None]


def sample_response(spec: PolicySpec, adapter: AdapterState, x, rng) -> int:
    """Inverse-CDF categorical draw (one uniform per call)."""
    p = policy_distribution(spec, adapter, x)
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), p.size - 1))


def user_feedback(user: UserModel, x_t, y_t: int, rng, R_x: float = np.inf):
    """Binary reward plus the raw next context, or None when the user stays silent.

    One uniform and one normal vector are drawn on every call so that paired
    sessions stay on the same random stream.
    """
    r = 1.0 if int(y_t) in user.acceptance_set else -1.0
    u = rng.random()
    noise = rng.standard_normal(np.shape(x_t))
    if u < user.p_absent:
        return r, None
    x_t = np.asarray(x_t, dtype=float)
    x_next = x_t + user.gamma * (user.x_star - x_t) + user.sigma * noise
    return r, clamp_to_ball(x_next, R_x)


def session_rngs(seed: int, problem_id: int = 0):
    ss = np.random.SeedSequence([int(seed), int(problem_id)])
    s_sample, s_user, s_mc = ss.spawn(3)
    return np.random.default_rng(s_sample), np.random.default_rng(s_user), np.random.default_rng(s_mc)


def _theta_gradient(cfg: SessionConfig, spec, adapter, x, target, snapshot, profile, mc_rng):
    if cfg.estimator == "exact":
        return exact_full_gradient(spec, adapter, x, target).g_theta
    seed = int(mc_rng.integers(2**63))
    return mc_full_gradient(spec, adapter, x, snapshot, profile, cfg.n_samples, seed).g_theta


def run_session(cfg: SessionConfig, problem: Problem, seed: int) -> SessionTrace:
    spec, user = problem.spec, problem.user
    rng_sample, rng_user, rng_mc = session_rngs(seed, problem.problem_id)
    x = np.asarray(problem.x1, dtype=float)
    adapter = problem.adapter0
    pi_user = user.pi_user
    turns = []
    status, solved_at = "turn-limit", None

    for t in range(1, cfg.T_max + 1):
        pi_t = policy_distribution(spec, adapter, x)
        y = sample_response(spec, adapter, x, rng_sample)
        r, x_next = user_feedback(user, x, y, rng_user, spec.R_x)
        base = dict(t=t, context=x, response=y, reward=r, kl_to_user=kl_divergence(pi_user, pi_t),
                    user_mass_response=float(user.user_mass(x)[y]))
        if r > 0 or t == cfg.T_max:
            turns.append(TurnRecord(**base))
            if r > 0:
                status, solved_at = "accepted", t
            break

        use_x, use_theta = cfg.streams_at(t)
        absent = x_next is None
        x_raw = x if absent else x_next
        profile = reward_profile_from_turn(y, r, spec.V, cfg.profile_mode, user.acceptance_set, cfg.beta)
        anchor_ctx = x if cfg.target_anchor == "generating" else x_raw
        snapshot = pi_t if anchor_ctx is x else policy_distribution(spec, adapter, anchor_ctx)
        target = build_target(snapshot, profile)

        x_star, x_loss, stalled_x, dx_sq, backtracks = x_raw, (math.nan, math.nan), False, 0.0, 0
        if use_x:
            loss_fn, grad_fn = context_objective(spec, adapter, target)
            if absent:
                x_star, res = synthesize_feedback(x_raw, y, loss_fn, grad_fn, cfg.eta_x, spec.R_x, cfg.backtracking)
            else:
                x_star, res = semantic_step(x_raw, loss_fn, grad_fn, cfg.eta_x, spec.R_x, cfg.backtracking)
            x_loss = (res.loss_before, res.loss_after)
            stalled_x, dx_sq, backtracks = res.stalled, res.delta_sq, res.backtracks

        if use_theta and use_x and cfg.target_anchor == "refined":
            # the adapter target is rebuilt from the policy at the refined context
            snapshot = policy_distribution(spec, adapter, x_star)
            target = build_target(snapshot, profile)

        theta_loss = (math.nan, math.nan)
        if use_theta and cfg.param_method == "closed-form":
            before = joint_loss(spec, adapter, x_star, target)
            _, new_adapter, rec = parametric_step_closed_form(spec, adapter, x_star, target, cfg.lambda_ridge)
            rec = replace(rec, delta_x_sq=dx_sq, backtracks=backtracks, stalled_x=stalled_x)
            theta_loss = (before, joint_loss(spec, new_adapter, x_star, target))
        elif use_theta:
            g_theta = _theta_gradient(cfg, spec, adapter, x_star, target, snapshot, profile, rng_mc)
            new_adapter, res = parametric_step_gradient(
                adapter, g_theta, cfg.eta_theta, lambda a: joint_loss(spec, a, x_star, target),
                spec.R_theta, cfg.backtracking)
            dW = new_adapter.delta() - adapter.delta()
            rec = UpdateRecord(delta_x_sq=dx_sq, delta_theta_sq=res.delta_sq,
                               backtracks=backtracks + res.backtracks, delta_w_sq=float(np.sum(dW * dW)),
                               stalled_x=stalled_x, stalled_theta=res.stalled)
            theta_loss = (res.loss_before, res.loss_after)
        else:
            new_adapter = adapter
            rec = UpdateRecord(delta_x_sq=dx_sq, backtracks=backtracks, stalled_x=stalled_x)

        turns.append(TurnRecord(**base, x_raw=None if absent else x_raw, x_refined=x_star, feedback_absent=absent,
                                update=rec, x_loss=x_loss, theta_loss=theta_loss,
                                snapshot=snapshot, target=target.dist, streams=(use_x, use_theta)))
        x, adapter = x_star, new_adapter

    return SessionTrace(tuple(turns), status, cfg.mode, seed, solved_at, final_x=x, final_adapter=adapter)


# -- metrics -----------------------------------------------------------------

def accuracy(traces) -> float:
    traces = list(traces)
    if not traces:
        raise ContractError("accuracy needs at least one trace")
    return sum(tr.solved for tr in traces) / len(traces)


def correction_uplift(traces) -> float | None:
    """Fraction of first-turn failures that were solved later; None if no first-turn failures."""
    failed = [tr for tr in traces if tr.turns and tr.turns[0].reward < 0]
    if not failed:
        return None
    return sum(tr.solved for tr in failed) / len(failed)


def avg_turns(traces, solved_only: bool = True) -> float | None:
    traces = list(traces)
    if solved_only:
        vals = [tr.solved_at for tr in traces if tr.solved]
    else:
        vals = [tr.n_turns for tr in traces]
    if not vals:
        return None
    return float(np.mean(vals))


def success_curve(traces, T_max: int) -> np.ndarray:
    """Cumulative fraction of sessions solved by each turn 1..T_max."""
    traces = list(traces)
    out = np.zeros(T_max)
    for tr in traces:
        if tr.solved:
            out[tr.solved_at - 1:] += 1
    return out / max(len(traces), 1)
