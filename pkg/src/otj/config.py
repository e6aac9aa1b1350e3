"""Run configuration: a flat key=value file with CLI-flag overrides.

Every knob has a default, so an empty config is a valid run; unknown keys are
rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .game import UtilityParams
from .policy import PolicyConfig, ThresholdConfig, parse_policy_spec


class ConfigError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % raw)


# config key -> (RunConfig attribute, parser)
_SCHEMA = {
    "policy": ("policy", str),
    "mcts.budget": ("mcts_budget", int),
    "mcts.c": ("mcts_c", float),
    "mcts.max_depth": ("mcts_max_depth", int),
    "mcts.widening": ("mcts_widening", _parse_bool),
    "threshold.target": ("threshold_target", float),
    "threshold.factor": ("threshold_factor", float),
    "utility.w_m": ("cost_per_query", float),
    "utility.w_t": ("cost_per_second", float),
    "env.accuracy": ("accuracy", float),
    "env.latency_mu": ("latency_mu", float),
    "env.latency_sigma": ("latency_sigma", float),
    "env.latency_floor": ("latency_floor", float),
    "env.pool_fallback": ("pool_fallback", _parse_bool),
    "crf.step_size": ("step_size", float),
    "crf.l2": ("l2", float),
    "seed": ("seed", int),
    "stream.shuffle": ("stream_shuffle", _parse_bool),
    "stream.seed": ("stream_seed", int),
    "metrics.background": ("background_label", str),
    "metrics.window": ("window", int),
    "out": ("out_dir", str),
}


@dataclass
class RunConfig:
    policy: str = "lense"
    mcts_budget: int = 1000
    mcts_c: float = PolicyConfig.uct_constant
    mcts_max_depth: int = 12
    mcts_widening: bool = True
    threshold_target: float = 0.98
    threshold_factor: float = 0.3
    cost_per_query: float = 0.01
    cost_per_second: float = 0.005
    accuracy: float = 0.7
    latency_mu: float = 1.2
    latency_sigma: float = 0.4
    latency_floor: float = 0.05
    pool_fallback: bool = True
    step_size: float = 0.1
    l2: float = 1e-4
    seed: int = 0
    stream_shuffle: bool = False
    stream_seed: int = 0
    background_label: str = "NONE"
    window: int = 50
    out_dir: str | None = None

    def policy_kind(self):
        return parse_policy_spec(self.policy)

    def mcts_config(self) -> PolicyConfig:
        return PolicyConfig(uct_constant=self.mcts_c, rollout_budget=self.mcts_budget,
                            max_depth=self.mcts_max_depth, widening=self.mcts_widening)

    def threshold_config(self) -> ThresholdConfig:
        return ThresholdConfig(confidence_target=self.threshold_target,
                               uncertainty_factor=self.threshold_factor)

    def utility_params(self) -> UtilityParams:
        return UtilityParams(cost_per_query=self.cost_per_query,
                             cost_per_second=self.cost_per_second)


def parse_config_file(path) -> dict:
    """Read key=value lines; blank lines and # comments are skipped."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError("%s:%d: expected key=value, got %r" % (path, lineno, stripped))
            key, _, value = stripped.partition("=")
            raw[key.strip()] = value.strip()
    return raw


def build_run_config(mapping: dict, overrides: dict | None = None) -> RunConfig:
    """Typed RunConfig from flat string keys; ``overrides`` (already typed,
    keyed by attribute name) win over the file."""
    cfg = RunConfig()
    for key, value in mapping.items():
        entry = _SCHEMA.get(key)
        if entry is None:
            raise ConfigError("unknown config key %r" % key)
        attr, parser = entry
        try:
            setattr(cfg, attr, parser(value))
        except ValueError as exc:
            raise ConfigError("bad value for %s: %s" % (key, exc)) from exc
    for attr, value in (overrides or {}).items():
        if value is None:
            continue
        if attr not in {f.name for f in fields(RunConfig)}:
            raise ConfigError("unknown override %r" % attr)
        setattr(cfg, attr, value)
    try:
        cfg.policy_kind()
        cfg.mcts_config()
        cfg.threshold_config()
        cfg.utility_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
