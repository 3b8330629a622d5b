"""Command-line entry point: run, verify-theorems, grad-check, score, suite gen."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, replace_config
from .gradients import joint_loss_fd_error
from .harness import run_experiment, theorem_battery, write_outputs
from .policy import policy_distribution
from .reward import build_target, compute_score, reward_profile_from_turn
from .suite import generate_suite
from .theory import ball_point, random_adapter

log = logging.getLogger("coadapt")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
FD_TOL = 1e-6


def configure_logging() -> None:
    name = os.environ.get("COADAPT_LOG", "error").strip().lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("coadapt")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    if name not in LOG_LEVELS:
        root.error("COADAPT_LOG=%r not recognised; using 'error'", name)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    fmt = args.format or cfg.format
    out = Path(args.out or cfg.out_dir)
    result = run_experiment(cfg, seed_base=args.seed_base, jobs=args.jobs)
    paths = write_outputs(result, out, fmt)
    n_err = sum(1 for r in result.rows if r.error is not None)
    log.info("wrote %d rows (%d errors) to %s", len(result.rows), n_err, paths["results"])
    print(paths["results"])
    return 0


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    report = theorem_battery(cfg, seed=args.seed, n_instances=args.instances, n_bound=args.bound_instances,
                             n_sessions=args.sessions)
    text = _dump(report)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8", newline="\n")
    print(text)
    ok = report["closed_form_bound"]["holds_fraction"] == 1.0 and report["theorem2"]["holds_fraction"] == 1.0
    return 0 if ok else 1


def grad_check(seed: int, points: int) -> tuple[bool, float]:
    """Worst relative error of the analytic joint gradient over random interior points."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    prob = generate_suite(1, seed)[0]
    spec = prob.spec
    worst = 0.0
    for _ in range(points):
        x = ball_point(rng, spec.d, 0.9 * spec.R_x)
        ad = random_adapter(prob.adapter0, 0.9 * spec.R_theta, rng)
        y = int(rng.integers(spec.V))
        r = float(rng.choice([-1.0, 1.0]))
        target = build_target(policy_distribution(spec, ad, x), reward_profile_from_turn(y, r, spec.V))
        worst = max(worst, joint_loss_fd_error(spec, ad, x, target))
    return worst < FD_TOL, worst


def cmd_grad_check(args) -> int:
    ok, worst = grad_check(args.seed, args.points)
    print(f"{'PASS' if ok else 'FAIL'} grad-check points={args.points} worst_rel_err={worst:.3e} tol={FD_TOL:g}")
    return 0 if ok else 1


def cmd_score(args) -> int:
    path = Path(args.solution)
    try:
        text = sys.stdin.read() if args.solution == "-" else path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"solution: cannot read {path}: {exc}") from None
    score = compute_score(text, args.truth)
    print(f"{score:g}")
    return 0


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def suite_manifest(cfg, seed: int) -> dict:
    problems = generate_suite(cfg.n_problems, seed, cfg.suite_params())
    entries = []
    for p in problems:
        entries.append({
            "problem": p.problem_id,
            "regime": p.regime,
            "acceptance_set": sorted(p.user.acceptance_set),
            "x1": p.x1.tolist(),
            "x_star": p.user.x_star.tolist(),
            "A0": p.adapter0.A.tolist(),
            "B0": p.adapter0.B.tolist(),
            "W_base_sha256": _digest(p.spec.W_base),
            "W_user_sha256": _digest(p.user.W_user),
        })
    return {"suite": cfg.suite_id, "seed": seed, "V": cfg.V, "d": cfg.d, "rank": cfg.rank,
            "n_problems": len(entries), "problems": entries}


def cmd_suite_gen(args) -> int:
    cfg = load_config(args.config)
    if args.n_problems is not None:
        cfg = replace_config(cfg, n_problems=args.n_problems)
    seed = cfg.suite_seed if args.seed is None else args.seed
    text = _dump(suite_manifest(cfg, seed))
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8", newline="\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coadapt", description="Joint context and adapter adaptation testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full problems x modes x seeds grid")
    p.add_argument("--config", default="default", help="YAML file or 'default'")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-theorems", help="run the theory battery and print a JSON report")
    p.add_argument("--config", default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=500)
    p.add_argument("--bound-instances", type=int, default=100)
    p.add_argument("--sessions", type=int, default=50)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference joint gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("score", help="score a boxed-answer solution against a ground truth")
    p.add_argument("--solution", required=True, help="UTF-8 text file, or '-' for stdin")
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("suite", help="problem suite utilities")
    suite_sub = p.add_subparsers(dest="suite_command", required=True)
    g = suite_sub.add_parser("gen", help="emit a seeded problem suite manifest (JSON)")
    g.add_argument("--config", default="default")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--n-problems", type=int, default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_suite_gen)
    return parser


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs: invalid value (expected >= 1)", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
