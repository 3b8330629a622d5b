"""Experiment configuration: YAML in, validated frozen dataclass out."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .protocol import MODES, SessionConfig
from .suite import SuiteParams


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    # dimensions and balls
    V: int = 32
    d: int = 16
    rank: int = 4
    R_x: float = 10.0
    R_theta: float = 10.0
    # update rules
    beta: float = 1.0
    eta_x: float = 0.5
    eta_theta: float = 0.5
    lambda_ridge: float = 1e-6
    backtracking: bool = True
    param_method: str = "gradient"
    target_anchor: str = "refined"
    profile_mode: str = "observed-only"
    estimator: str = "exact"
    n_samples: int = 64
    # protocol
    T_max: int = 10
    switch_turn: int = 5
    switch_first: str = "prompt"
    modes: tuple = MODES
    n_problems: int = 40
    n_seeds: int = 30
    # simulated user
    gamma: float = 0.3
    sigma: float = 0.1
    p_absent: float = 0.2
    top_k: int = 1
    # suite generator
    suite_id: str = "default"
    suite_seed: int = 0
    base_scale: float = 3.0
    intent_norm: float = 4.0
    start_norm: float = 4.0
    start_overlap: float = 0.0
    deficit_fraction: float = 0.5
    deficit_style: str = "confusable"
    deficit_margin: float = 2.5
    favourite_margin: float = 5.0
    confusion_noise: float = 0.1
    deficit_rank_range: tuple = (3, 8)
    deficit_start_overlap: float | None = 0.95
    user_top_mass: float = 0.7
    adapter_init_scale: float = 1.0
    # analysis and output
    smoothness_probes: int = 100
    record_wall_clock: bool = False
    format: str = "csv"
    out_dir: str = "results"

    def __post_init__(self):
        for key in ("modes", "deficit_rank_range"):
            if not isinstance(getattr(self, key), (list, tuple)):
                raise ConfigError(f"{key}: invalid value {getattr(self, key)!r} (expected a list)")
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "deficit_rank_range", tuple(self.deficit_rank_range))
        _validate(self)

    def suite_params(self) -> SuiteParams:
        return SuiteParams(
            V=self.V, d=self.d, rank=self.rank, R_x=self.R_x, R_theta=self.R_theta,
            base_scale=self.base_scale, intent_norm=self.intent_norm, start_norm=self.start_norm,
            deficit_fraction=self.deficit_fraction, deficit_rank_range=self.deficit_rank_range,
            deficit_style=self.deficit_style, deficit_margin=self.deficit_margin,
            favourite_margin=self.favourite_margin, confusion_noise=self.confusion_noise,
            user_top_mass=self.user_top_mass, start_overlap=self.start_overlap,
            deficit_start_overlap=self.deficit_start_overlap, adapter_init_scale=self.adapter_init_scale,
            gamma=self.gamma, sigma=self.sigma, p_absent=self.p_absent, top_k=self.top_k,
        )

    def session_config(self, mode: str) -> SessionConfig:
        return SessionConfig(
            mode=mode, T_max=self.T_max, switch_turn=self.switch_turn, switch_first=self.switch_first,
            beta=self.beta, eta_x=self.eta_x, eta_theta=self.eta_theta, lambda_ridge=self.lambda_ridge,
            backtracking=self.backtracking, param_method=self.param_method, profile_mode=self.profile_mode,
            target_anchor=self.target_anchor, estimator=self.estimator, n_samples=self.n_samples,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def _check(ok: bool, key: str, value, rule: str):
    if not ok:
        raise ConfigError(f"{key}: invalid value {value!r} (expected {rule})")


def _choice(cfg, key, options):
    v = getattr(cfg, key)
    _check(v in options, key, v, "one of " + ", ".join(map(str, options)))


def _check_types(cfg: ExperimentConfig):
    for f in fields(cfg):
        v, default = getattr(cfg, f.name), f.default
        if isinstance(default, bool):
            _check(isinstance(v, bool), f.name, v, "true or false")
        elif isinstance(default, float):
            _check(isinstance(v, (int, float)) and not isinstance(v, bool), f.name, v, "number")
        elif isinstance(default, str):
            _check(isinstance(v, str), f.name, v, "string")
    if cfg.deficit_start_overlap is not None:
        v = cfg.deficit_start_overlap
        _check(isinstance(v, (int, float)) and not isinstance(v, bool), "deficit_start_overlap", v, "number or null")


def _validate(cfg: ExperimentConfig):
    _check_types(cfg)
    for key in ("V", "d", "rank", "n_samples", "T_max", "switch_turn", "n_problems", "n_seeds",
                "top_k", "suite_seed", "smoothness_probes"):
        v = getattr(cfg, key)
        _check(isinstance(v, int) and not isinstance(v, bool), key, v, "integer")
    _check(all(isinstance(m, str) for m in cfg.modes), "modes", list(cfg.modes), "list of mode names")
    _check(all(isinstance(b, int) and not isinstance(b, bool) for b in cfg.deficit_rank_range),
           "deficit_rank_range", list(cfg.deficit_rank_range), "two integers")
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, float):
            _check(math.isfinite(v), f.name, v, "finite number")
    _check(cfg.V >= 2, "V", cfg.V, ">= 2")
    _check(cfg.d >= 1, "d", cfg.d, ">= 1")
    _check(1 <= cfg.rank <= min(cfg.V, cfg.d), "rank", cfg.rank, "1 <= rank <= min(V, d)")
    for key in ("R_x", "R_theta", "beta", "eta_x", "eta_theta", "base_scale", "intent_norm", "start_norm"):
        _check(getattr(cfg, key) > 0, key, getattr(cfg, key), "> 0")
    _check(cfg.lambda_ridge >= 0, "lambda_ridge", cfg.lambda_ridge, ">= 0")
    _check(cfg.intent_norm <= cfg.R_x, "intent_norm", cfg.intent_norm, "<= R_x")
    _check(cfg.start_norm <= cfg.R_x, "start_norm", cfg.start_norm, "<= R_x")
    _check(cfg.n_samples >= 1, "n_samples", cfg.n_samples, ">= 1")
    _check(cfg.T_max >= 1, "T_max", cfg.T_max, ">= 1")
    _check(1 <= cfg.switch_turn <= cfg.T_max, "switch_turn", cfg.switch_turn, "1 <= switch_turn <= T_max")
    _check(cfg.n_problems >= 0, "n_problems", cfg.n_problems, ">= 0")
    _check(cfg.n_seeds >= 0, "n_seeds", cfg.n_seeds, ">= 0")
    _check(0 < cfg.gamma <= 1, "gamma", cfg.gamma, "0 < gamma <= 1")
    _check(cfg.sigma >= 0, "sigma", cfg.sigma, ">= 0")
    _check(0 <= cfg.p_absent < 1, "p_absent", cfg.p_absent, "0 <= p_absent < 1")
    _check(1 <= cfg.top_k < cfg.V, "top_k", cfg.top_k, "1 <= top_k < V")
    _check(0 <= cfg.deficit_fraction <= 1, "deficit_fraction", cfg.deficit_fraction, "[0, 1]")
    _check(-1 <= cfg.start_overlap <= 1, "start_overlap", cfg.start_overlap, "[-1, 1]")
    if cfg.deficit_start_overlap is not None:
        _check(-1 <= cfg.deficit_start_overlap <= 1, "deficit_start_overlap", cfg.deficit_start_overlap, "[-1, 1]")
    _check(0.5 <= cfg.user_top_mass < 1, "user_top_mass", cfg.user_top_mass, "[0.5, 1)")
    _check(cfg.adapter_init_scale >= 0, "adapter_init_scale", cfg.adapter_init_scale, ">= 0")
    _check(cfg.deficit_margin >= 0 and cfg.favourite_margin >= 0 and cfg.confusion_noise >= 0,
           "deficit_margin", cfg.deficit_margin, "margins and noise >= 0")
    lo_hi = cfg.deficit_rank_range
    _check(len(lo_hi) == 2 and 1 <= lo_hi[0] <= lo_hi[1] < cfg.V, "deficit_rank_range", list(lo_hi),
           "[lo, hi] with 1 <= lo <= hi < V")
    _check(cfg.smoothness_probes >= 100, "smoothness_probes", cfg.smoothness_probes, ">= 100")
    _check(len(cfg.modes) > 0 and len(set(cfg.modes)) == len(cfg.modes) and set(cfg.modes) <= set(MODES),
           "modes", list(cfg.modes), "non-empty, distinct, from " + ", ".join(MODES))
    _choice(cfg, "param_method", ("gradient", "closed-form"))
    _choice(cfg, "target_anchor", ("generating", "incoming", "refined"))
    _choice(cfg, "profile_mode", ("observed-only", "oracle"))
    _choice(cfg, "estimator", ("exact", "monte-carlo"))
    _choice(cfg, "switch_first", ("prompt", "param"))
    _choice(cfg, "deficit_style", ("confusable", "rank"))
    _choice(cfg, "format", ("csv", "jsonl"))
    _check(isinstance(cfg.suite_id, str) and cfg.suite_id != "" and "," not in cfg.suite_id,
           "suite_id", cfg.suite_id, "non-empty string without commas")


_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    defaults = ExperimentConfig()
    for key, value in data.items():
        default = getattr(defaults, key)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            data[key] = float(value)
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path) -> ExperimentConfig:
    """Read a YAML mapping; ``"default"`` or None gives the built-in defaults."""
    if path is None or str(path) == "default":
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config: top level of {path} must be a mapping")
    return config_from_dict(data)


def echo_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def write_echo(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(echo_config(cfg), encoding="utf-8", newline="\n")
    return path


def replace_config(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
