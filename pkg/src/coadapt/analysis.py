"""Paired per-seed statistics over result rows: mode ordering, recovery slopes, turn efficiency."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def sign_test(diffs) -> SignTest:
    """One-sided paired sign test that the differences are positive; ties are dropped."""
    diffs = np.asarray(list(diffs), dtype=float)
    wins, losses = int(np.sum(diffs > 0)), int(np.sum(diffs < 0))
    ties = int(diffs.size - wins - losses)
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return SignTest(wins, losses, ties, float(p))


def _valid(rows):
    return [r for r in rows if r.turns > 0]


def success_by_seed(rows, mode: str, turn: int) -> dict:
    """Fraction of the suite solved by ``turn`` for each seed."""
    solved, total = defaultdict(int), defaultdict(int)
    for r in _valid(rows):
        if r.mode != mode:
            continue
        total[r.seed] += 1
        solved[r.seed] += int(r.solved and r.solved_at is not None and r.solved_at <= turn)
    return {s: solved[s] / total[s] for s in sorted(total)}


def cumulative_curves(rows, mode: str, T_max: int) -> dict:
    """Per-seed cumulative success curve over turns 1..T_max."""
    by_seed = defaultdict(list)
    for r in _valid(rows):
        if r.mode == mode:
            by_seed[r.seed].append(r.solved_at if r.solved else None)
    out = {}
    for s, hits in sorted(by_seed.items()):
        at = np.array([h if h is not None else T_max + 1 for h in hits])
        out[s] = np.array([np.mean(at <= t) for t in range(1, T_max + 1)])
    return out


def paired_success(rows, better: str, worse: str, turn: int) -> SignTest:
    a, b = success_by_seed(rows, better, turn), success_by_seed(rows, worse, turn)
    return sign_test(a[s] - b[s] for s in sorted(set(a) & set(b)))


def mode_ordering(rows, T_max: int) -> dict:
    """The five paired comparisons of success@T_max used for the mode-ordering claim."""
    pairs = (("joint", "prompt-only"), ("joint", "param-only"),
             ("prompt-only", "baseline"), ("param-only", "baseline"))
    return {f"{a}>{b}": paired_success(rows, a, b, T_max) for a, b in pairs}


def _slope(curve: np.ndarray, turns: np.ndarray) -> float:
    return float(np.polyfit(turns, curve[turns - 1], 1)[0])


def switch_recovery(rows, T_max: int, switch_turn: int, mode: str = "switch") -> tuple[float, float]:
    """Seed-averaged least-squares slope of cumulative success before and after the switch.

    The early window is turns 1..switch_turn, the late window switch_turn+1..T_max.
    """
    curves = cumulative_curves(rows, mode, T_max)
    if not curves:
        return float("nan"), float("nan")
    early = np.arange(1, switch_turn + 1)
    late = np.arange(switch_turn + 1, T_max + 1)
    if early.size < 2 or late.size < 2:
        raise ValueError("each window needs at least two turns")
    e = np.mean([_slope(c, early) for c in curves.values()])
    l_ = np.mean([_slope(c, late) for c in curves.values()])
    return float(e), float(l_)


def turn_efficiency(rows, fast: str = "joint", slow: str = "param-only") -> tuple[SignTest, np.ndarray]:
    """Per-seed margin of mean turns (slow - fast) over problems both modes solved."""
    turns = defaultdict(dict)
    for r in _valid(rows):
        if r.solved and r.mode in (fast, slow):
            turns[(r.seed, r.problem)][r.mode] = r.turns
    per_seed = defaultdict(list)
    for (seed, _), t in turns.items():
        if fast in t and slow in t:
            per_seed[seed].append(t[slow] - t[fast])
    margins = np.array([np.mean(v) for _, v in sorted(per_seed.items())])
    return sign_test(margins), margins


def seed_error_pairs(ledgers) -> tuple[float, dict]:
    """Fraction of seeds whose suite-summed joint parametric error is below the paired baseline."""
    joint, base = defaultdict(float), defaultdict(float)
    for led in ledgers:
        joint[led.seed] += led.joint_parametric
        base[led.seed] += led.param_only_parametric
    below = {s: joint[s] < base[s] for s in sorted(joint)}
    return (sum(below.values()) / len(below) if below else float("nan")), below


def semantic_decay_fraction(ledgers) -> float:
    flags = [led.semantic_nonincreasing for led in ledgers]
    return sum(flags) / len(flags) if flags else float("nan")
