"""Seeded experiment grid (problems x modes x seeds), metrics and result files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, write_echo
from .policy import kl_divergence, policy_distribution
from .protocol import SessionTrace, accuracy, avg_turns, correction_uplift, run_session, success_curve
from .reward import build_target, reward_profile_from_turn
from .streams import parametric_step_closed_form, singular_value_bound_check
from .suite import Problem, generate_suite
from .theory import (
    ball_point,
    error_dynamics,
    estimate_smoothness_L,
    random_adapter,
    theorem1_instances,
    verify_theorem1,
    verify_theorem2,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("suite", "problem", "mode", "seed", "solved", "solved_at", "final_kl", "turns",
               "avg_dx_sq", "avg_dtheta_sq", "bound_holds", "wall_s")


@dataclass(frozen=True)
class ResultRow:
    """One (problem, mode, seed) cell. ``turns == 0`` marks a session that raised."""

    suite: str
    problem: int
    mode: str
    seed: int
    solved: bool
    solved_at: int | None
    final_kl: float
    turns: int
    avg_dx_sq: float | None
    avg_dtheta_sq: float | None
    bound_holds: bool | None
    wall_s: float | None = None
    dx_sq: tuple = field(default=(), compare=False)
    dtheta_sq: tuple = field(default=(), compare=False)
    error: str | None = field(default=None, compare=False)

    def columns(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass(frozen=True)
class PairedLedgerRow:
    problem: int
    seed: int
    joint_parametric: float
    param_only_parametric: float
    frac_turns_below: float
    semantic_nonincreasing: bool
    n_compared: int
    n_tail: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: tuple
    rows: list
    traces: dict = field(default_factory=dict)
    ledgers: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    smoothness: dict = field(default_factory=dict)

    def traces_for(self, mode: str) -> list:
        return [tr for (_, m, _), tr in sorted(self.traces.items()) if m == mode and tr is not None]

    def curves(self) -> dict:
        T = self.config.T_max
        return {m: success_curve(self.traces_for(m), T) for m in self.config.modes}

    def per_seed_curves(self, mode: str) -> np.ndarray:
        """Cumulative success curve of each seed over the whole suite, shape (n_seeds, T_max)."""
        out = []
        for s in self.seeds:
            trs = [tr for (_, m, sd), tr in sorted(self.traces.items()) if m == mode and sd == s and tr is not None]
            out.append(success_curve(trs, self.config.T_max))
        return np.array(out).reshape(len(self.seeds), self.config.T_max)

    def metrics(self) -> dict:
        out = {}
        for m in self.config.modes:
            trs = self.traces_for(m)
            out[m] = {
                "accuracy": accuracy(trs) if trs else None,
                "correction_uplift": correction_uplift(trs),
                "avg_turns": avg_turns(trs),
                "n_sessions": len(trs),
                "n_errors": sum(1 for r in self.rows if r.mode == m and r.error is not None),
            }
        return out


def session_row(cfg: ExperimentConfig, problem: Problem, trace: SessionTrace, bound, wall) -> ResultRow:
    ups = trace.updates
    dx = tuple(u.delta_x_sq for u in ups)
    dth = tuple(u.delta_theta_sq for u in ups)
    final_kl = kl_divergence(problem.user.pi_user,
                             policy_distribution(problem.spec, trace.final_adapter, trace.final_x))
    return ResultRow(
        suite=cfg.suite_id, problem=problem.problem_id, mode=trace.mode, seed=trace.seed,
        solved=trace.solved, solved_at=trace.solved_at, final_kl=final_kl, turns=trace.n_turns,
        avg_dx_sq=float(np.mean(dx)) if dx else None, avg_dtheta_sq=float(np.mean(dth)) if dth else None,
        bound_holds=None if bound is None else bound.holds,
        wall_s=wall if cfg.record_wall_clock else None, dx_sq=dx, dtheta_sq=dth,
    )


def error_row(cfg: ExperimentConfig, problem: Problem, mode: str, seed: int, exc: Exception) -> ResultRow:
    return ResultRow(cfg.suite_id, problem.problem_id, mode, seed, False, None, math.nan, 0,
                     None, None, None, None, error=f"{type(exc).__name__}: {exc}")


def _smoothness_seed(cfg: ExperimentConfig, problem_id: int):
    return np.random.SeedSequence([cfg.suite_seed, problem_id, 0x4C])


def _run_problem(args):
    cfg, problem, seeds = args
    L = estimate_smoothness_L(problem.spec, n_probe=cfg.smoothness_probes,
                              rng=np.random.default_rng(_smoothness_seed(cfg, problem.problem_id)),
                              adapter=problem.adapter0)
    rows, traces, bounds, ledgers = [], {}, {}, []

    def attempt(mode, seed):
        t0 = time.perf_counter()
        try:
            trace = run_session(cfg.session_config(mode), problem, seed)
        except Exception as exc:  # recorded, never fatal
            log.error("session failed: problem=%d mode=%s seed=%d: %s", problem.problem_id, mode, seed, exc)
            return None, error_row(cfg, problem, mode, seed, exc), None
        bound = verify_theorem2(trace, problem, cfg.beta, L)
        return trace, session_row(cfg, problem, trace, bound, time.perf_counter() - t0), bound

    for mode in cfg.modes:
        for seed in seeds:
            trace, row, bound = attempt(mode, seed)
            traces[(problem.problem_id, mode, seed)] = trace
            rows.append(row)
            if bound is not None:
                bounds[(problem.problem_id, mode, seed)] = bound

    if "joint" in cfg.modes:
        for seed in seeds:
            joint = traces[(problem.problem_id, "joint", seed)]
            paired = traces.get((problem.problem_id, "param-only", seed))
            if paired is None and "param-only" not in cfg.modes:
                try:
                    paired = run_session(cfg.session_config("param-only"), problem, seed)
                except Exception as exc:
                    log.error("paired run failed: problem=%d seed=%d: %s", problem.problem_id, seed, exc)
            if joint is None or paired is None:
                continue
            led = error_dynamics(joint, paired)
            ledgers.append(PairedLedgerRow(problem.problem_id, seed, led.cumulative_parametric,
                                           led.cumulative_baseline, led.frac_turns_below_baseline,
                                           led.semantic_nonincreasing, led.extras["n_compared"],
                                           led.extras["n_tail"]))
    return problem.problem_id, L, rows, traces, bounds, ledgers


def run_experiment(cfg: ExperimentConfig, seed_base: int = 0, jobs: int = 1,
                   problems: list | None = None) -> ExperimentResult:
    """Run every (problem, mode, seed) session of the grid in deterministic order."""
    problems = generate_suite(cfg.n_problems, cfg.suite_seed, cfg.suite_params()) if problems is None else problems
    seeds = tuple(seed_base + i for i in range(cfg.n_seeds))
    result = ExperimentResult(cfg, seeds, [])
    work = [(cfg, p, seeds) for p in problems]
    log.info("running %d problems x %d modes x %d seeds", len(problems), len(cfg.modes), len(seeds))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outputs = list(ex.map(_run_problem, work))
    else:
        outputs = [_run_problem(w) for w in work]
    for pid, L, rows, traces, bounds, ledgers in outputs:
        result.smoothness[pid] = L
        result.rows.extend(rows)
        result.traces.update(traces)
        result.bounds.update(bounds)
        result.ledgers.extend(ledgers)
    return result


# -- serialization -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _parse_value(name: str, text: str):
    if text == "":
        return None if name not in ("suite", "mode") else ""
    if name in ("suite", "mode"):
        return text
    if name in ("solved", "bound_holds"):
        if text not in ("true", "false"):
            raise ValueError(f"column {name}: expected true/false, got {text!r}")
        return text == "true"
    if name in ("problem", "seed", "solved_at", "turns"):
        return int(text)
    return float(text)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def emit(rows, fmt: str, path) -> Path:
    """Write rows as CSV (fixed header, LF, 17 significant digits) or JSON lines."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for r in rows:
                    w.writerow([_fmt(r.columns()[c]) for c in CSV_COLUMNS])
            elif fmt == "jsonl":
                for r in rows:
                    fh.write(json.dumps({k: _json_value(v) for k, v in r.columns().items()}) + "\n")
            else:
                raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def parse(path, fmt: str | None = None) -> list[ResultRow]:
    """Read rows written by :func:`emit` (format inferred from the suffix if not given)."""
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "csv")
    text = path.read_text(encoding="utf-8")
    rows = []
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for rec in reader:
            rows.append(ResultRow(**{c: _parse_value(c, v) for c, v in zip(CSV_COLUMNS, rec)}))
    else:
        for line in text.splitlines():
            if line.strip():
                data = json.loads(line)
                for k in ("final_kl", "avg_dx_sq", "avg_dtheta_sq", "wall_s"):
                    if isinstance(data.get(k), str):
                        data[k] = float(data[k])
                rows.append(ResultRow(**data))
    return rows


def _write_csv(path: Path, header, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            w.writerow([_fmt(v) for v in rec])


def write_outputs(result: ExperimentResult, out_dir, fmt: str | None = None) -> dict:
    """Write the result table plus curves, metrics, per-turn norms, paired ledgers and config echo."""
    cfg = result.config
    fmt = fmt or cfg.format
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": emit(result.rows, fmt, out / f"results.{fmt}")}

    curves = result.curves()
    paths["curves"] = out / "curves.csv"
    _write_csv(paths["curves"], ("mode", "turn", "success"),
               [(m, t + 1, float(c[t])) for m, c in curves.items() for t in range(cfg.T_max)])

    paths["turns"] = out / "turns.csv"
    _write_csv(paths["turns"], ("suite", "problem", "mode", "seed", "update", "dx_sq", "dtheta_sq"),
               [(r.suite, r.problem, r.mode, r.seed, i + 1, dx, dth)
                for r in result.rows for i, (dx, dth) in enumerate(zip(r.dx_sq, r.dtheta_sq))])

    paths["error_dynamics"] = out / "error_dynamics.csv"
    _write_csv(paths["error_dynamics"], tuple(f.name for f in fields(PairedLedgerRow)),
               [tuple(asdict(led).values()) for led in result.ledgers])

    paths["errors"] = out / "errors.jsonl"
    with open(paths["errors"], "w", encoding="utf-8", newline="\n") as fh:
        for r in result.rows:
            if r.error is not None:
                fh.write(json.dumps({"problem": r.problem, "mode": r.mode, "seed": r.seed, "error": r.error}) + "\n")

    paths["metrics"] = out / "metrics.json"
    summary = {
        "schema_version": SCHEMA_VERSION,
        "suite": cfg.suite_id,
        "seeds": list(result.seeds),
        "modes": result.metrics(),
        "theorem2_holds_fraction": {
            m: _fraction(b.holds for (_, mode, _), b in result.bounds.items() if mode == m) for m in cfg.modes},
        "smoothness_L": {str(k): v for k, v in sorted(result.smoothness.items())},
    }
    paths["metrics"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
    paths["config"] = write_echo(cfg, out / "config.yaml")
    return paths


def _fraction(flags) -> float | None:
    flags = list(flags)
    return sum(flags) / len(flags) if flags else None


# -- theorem battery ---------------------------------------------------------

def _closed_form_bound_instances(problems, n: int, rng) -> list:
    """Closed-form (lambda = 0) records at random full-rank points."""
    out, draws = [], 0
    while len(out) < n and draws < 20 * n:
        draws += 1
        prob = problems[int(rng.integers(len(problems)))]
        spec = prob.spec
        x = ball_point(rng, spec.d, spec.R_x)
        ad = random_adapter(prob.adapter0, spec.R_theta, rng)
        pi = policy_distribution(spec, ad, x)
        y = int(rng.integers(spec.V))
        target = build_target(pi, reward_profile_from_turn(y, -1.0, spec.V, beta=1.0))
        _, _, rec = parametric_step_closed_form(spec, ad, x, target, 0.0)
        check = singular_value_bound_check(rec)
        if check is not None:
            out.append(check)
    return out


def designated_sessions(result: ExperimentResult, n: int, mode: str = "joint") -> list:
    """First ``n`` (problem, mode, seed) keys in seed-major order, so every problem is covered."""
    keys = sorted((k for k in result.bounds if k[1] == mode), key=lambda k: (k[2], k[0]))
    return keys[:n]


def theorem_battery(cfg: ExperimentConfig, seed: int = 0, n_instances: int = 500, n_bound: int = 100,
                    n_sessions: int = 50, n_pair_seeds: int = 50, problems: list | None = None) -> dict:
    """Closed-form bound, shift reduction, unified bound and paired error dynamics.

    The unified bound is evaluated on ``n_sessions`` designated joint sessions
    (and, for reference, on every joint session of the paired run). Error
    dynamics compare joint and param-only runs on the whole suite for
    ``n_pair_seeds`` seeds; a seed counts as a win when its suite-summed joint
    parametric error is below the param-only one.
    """
    from .analysis import seed_error_pairs, semantic_decay_fraction

    problems = generate_suite(cfg.n_problems or 1, cfg.suite_seed, cfg.suite_params()) if problems is None else problems
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1]))
    bound_checks = _closed_form_bound_instances(problems, n_bound, rng)
    t1 = verify_theorem1(theorem1_instances(problems, rng, cfg.eta_x, cfg.beta), n_instances)

    paired_cfg = replace(cfg, modes=("param-only", "joint"), n_seeds=max(n_pair_seeds, 1))
    paired = run_experiment(paired_cfg, seed_base=seed, problems=problems)
    keys = designated_sessions(paired, n_sessions)
    reports = [paired.bounds[k] for k in keys]
    all_joint = [b for k, b in paired.bounds.items() if k[1] == "joint"]
    seed_frac, _ = seed_error_pairs(paired.ledgers)
    return {
        "closed_form_bound": {"n": len(bound_checks), "holds_fraction": _fraction(bound_checks)},
        "theorem1": {
            "n_generated": t1.n_generated, "n_hypothesis": t1.n_hypothesis,
            "n_rank_deficient": t1.n_rank_deficient, "shift_reduced_fraction": t1.shift_fraction,
            "shift_ci95": list(t1.shift_ci), "residual_reduced_fraction": t1.residual_fraction,
        },
        "theorem2": {
            "n_sessions": len(reports), "holds_fraction": _fraction(r.holds for r in reports),
            "max_identity_gap": max((r.identity_gap for r in reports), default=0.0),
            "zero_update_max_gap": max((abs(r.lhs - r.rhs) for r in reports if r.n_updates == 0), default=0.0),
            "n_all_joint": len(all_joint), "holds_fraction_all_joint": _fraction(r.holds for r in all_joint),
            "holds_fraction_update_steps_only": _fraction(r.holds_update_only for r in all_joint),
            "term_a_within_bound_fraction": _fraction(
                a <= b + 1e-12 for r in all_joint for a, b in zip(r.term_a, r.term_a_bound)),
            "L_min": min(paired.smoothness.values(), default=None),
            "L_max": max(paired.smoothness.values(), default=None),
        },
        "error_dynamics": {
            "n_seeds": len(paired.seeds), "n_session_pairs": len(paired.ledgers),
            "joint_below_param_only_seed_fraction": seed_frac,
            "semantic_nonincreasing_fraction": semantic_decay_fraction(paired.ledgers),
        },
    }
