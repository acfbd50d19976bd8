"""Experiment configuration: YAML files plus dotted-path overrides resolve
into one fully-defaulted, validated ExperimentConfig. Unknown keys are
rejected with the offending dotted path. The resolved config serializes next
to every output so any run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Any

import numpy as np
import yaml

from .fbsde import HorizonGrid
from .systems import (
    NOISE_PRESETS,
    SYSTEM_FACTORIES,
    CostSpec,
    SystemModel,
    make_system,
)
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the dotted key path."""


@dataclass
class CostSection:
    running_weights: list[float] = field(default_factory=list)
    terminal_weights: list[float] = field(default_factory=list)
    control_weight: Any = 1.0  # scalar or per-channel list
    epsilon: float = 1.0
    beta: float = 0.8
    weight_decay: float = 1e-4


@dataclass
class TrainSection:
    iterations: int = 3000
    batch_size: int = 128
    horizon: float = 1.5
    steps: int = 75
    hidden_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    checkpoint_every: int = 500
    clip_norm: Any = None
    forget_bias: float = 1.0
    divergence_tolerance: float = 0.1


@dataclass
class EvalSection:
    batch_size: int = 128
    seed: int = 1234
    checkpoint: Any = None  # default: <out>/checkpoint.ckpt
    success_tolerance: Any = None  # per-dimension override list


@dataclass
class SweepSection:
    epsilons: list[float] = field(default_factory=list)
    success_threshold: float = 0.8


@dataclass
class ExperimentConfig:
    system: str = "pendulum"
    mode: str = "minmax"
    noise: Any = "low"  # preset name or explicit scale
    seed: int = 0
    workers: int = 1
    out: str = "runs/pendulum"
    physics: dict = field(default_factory=dict)
    cost: CostSection = field(default_factory=CostSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


SYSTEM_DEFAULTS: dict[str, dict] = {
    "pendulum": {
        "noise": "low",
        "out": "runs/pendulum",
        "cost": {
            "running_weights": [1.0, 0.1],
            "terminal_weights": [100.0, 10.0],
            "control_weight": 0.1,
            "epsilon": 1.0,
        },
        "train": {"iterations": 3000, "batch_size": 128, "horizon": 1.5, "steps": 75,
                  "hidden_size": 16},
        # grid brackets the well-posedness threshold eps = R_u sigma^2 so the
        # smallest value demonstrates adversary takeover
        "sweep": {"epsilons": [0.0005, 0.005, 0.05, 0.5, 5.0, 50.0]},
    },
    "quadcopter": {
        "noise": "low",
        "out": "runs/quadcopter",
        "cost": {
            "running_weights": [2.0, 2.0, 2.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.05, 0.05, 0.05],
            "terminal_weights": [100.0, 100.0, 100.0, 5.0, 5.0, 5.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0],
            "control_weight": [1.0, 1.0, 1.0, 1.0],
            "epsilon": 1.0,
        },
        "train": {"iterations": 4000, "batch_size": 128, "horizon": 2.0, "steps": 100,
                  "hidden_size": 32},
        "sweep": {"epsilons": [0.02, 0.2, 2.0, 20.0, 200.0]},
    },
    "lq": {
        "noise": 0.2,
        "out": "runs/lq",
        "cost": {
            "running_weights": [1.0, 0.1],
            "terminal_weights": [10.0, 1.0],
            "control_weight": 1.0,
            "epsilon": 1e6,
            # pure per-sample consistency: its minimizer is the value
            # function itself, which is what the oracle comparison checks
            "beta": 1.0,
            "weight_decay": 1e-5,
        },
        "train": {"iterations": 2000, "batch_size": 64, "horizon": 1.0, "steps": 50,
                  "hidden_size": 16, "learning_rate": 1e-2},
        "eval": {"batch_size": 256},
        "sweep": {"epsilons": []},
    },
}


def default_config(system: str = "pendulum") -> ExperimentConfig:
    if system not in SYSTEM_FACTORIES:
        raise ConfigError(f"system: unknown system {system!r}; "
                          f"expected one of {sorted(SYSTEM_FACTORIES)}")
    cfg = ExperimentConfig(system=system)
    _merge_into(cfg, SYSTEM_DEFAULTS[system], path="")
    return cfg


_SECTIONS = {"cost": CostSection, "train": TrainSection, "eval": EvalSection,
             "sweep": SweepSection}


def _merge_into(cfg, data: dict, path: str) -> None:
    for key, value in data.items():
        dotted = f"{path}{key}"
        if not hasattr(cfg, key):
            raise ConfigError(f"{dotted}: unknown configuration key")
        if key in _SECTIONS and path == "":
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a mapping")
            _merge_into(getattr(cfg, key), value, path=f"{dotted}.")
        elif key == "physics" and path == "":
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a mapping of constants")
            getattr(cfg, key).update(value)
        else:
            setattr(cfg, key, value)


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: cannot descend into non-mapping")
    node[parts[-1]] = value


def parse_overrides(pairs: list[str]) -> dict:
    tree: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"override {pair!r} has an empty key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: unparseable value {raw!r} ({exc})") from exc
        _set_dotted(tree, key, value)
    return tree


def parse_config(path: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load YAML (if given), apply dotted overrides, fill per-system defaults,
    validate. An empty file plus ``system=pendulum`` yields the full
    defaulted pendulum config."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        data = loaded
    for dotted, value in _flatten(parse_overrides(overrides or [])):
        _set_dotted(data, dotted, value)

    system = data.get("system", "pendulum")
    if not isinstance(system, str):
        raise ConfigError(f"system: expected a name string, got {system!r}")
    cfg = default_config(system)
    _merge_into(cfg, data, path="")
    validate_config(cfg)
    return cfg


def _flatten(tree: dict, prefix: str = ""):
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, prefix=f"{dotted}.")
        else:
            yield dotted, value


def _require(cond: bool, dotted: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{dotted}: {message}")


def _num(value, dotted: str) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             dotted, f"expected a number, got {value!r}")
    return float(value)


def _int(value, dotted: str) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool),
             dotted, f"expected an integer, got {value!r}")
    return value


def _numlist(value, dotted: str) -> list[float]:
    _require(isinstance(value, (list, tuple)), dotted,
             f"expected a list of numbers, got {value!r}")
    return [_num(v, f"{dotted}[{i}]") for i, v in enumerate(value)]


def validate_config(cfg: ExperimentConfig) -> None:
    _require(cfg.system in SYSTEM_FACTORIES, "system",
             f"unknown system {cfg.system!r}; expected one of {sorted(SYSTEM_FACTORIES)}")
    _require(cfg.mode in ("minmax", "baseline"), "mode",
             f"expected minmax or baseline, got {cfg.mode!r}")
    if isinstance(cfg.noise, str):
        _require(cfg.noise in NOISE_PRESETS, "noise",
                 f"unknown preset {cfg.noise!r}; presets: {sorted(NOISE_PRESETS)}")
    else:
        _require(_num(cfg.noise, "noise") >= 0, "noise", "scale must be >= 0")
    _int(cfg.seed, "seed")
    _require(_int(cfg.workers, "workers") >= 1, "workers", "must be >= 1")
    _require(isinstance(cfg.out, str) and cfg.out, "out", "must be a non-empty path")
    for key, value in cfg.physics.items():
        _num(value, f"physics.{key}")

    c = cfg.cost
    _numlist(c.running_weights, "cost.running_weights")
    _numlist(c.terminal_weights, "cost.terminal_weights")
    _require(all(w >= 0 for w in c.running_weights), "cost.running_weights", "weights must be >= 0")
    _require(all(w >= 0 for w in c.terminal_weights), "cost.terminal_weights", "weights must be >= 0")
    if isinstance(c.control_weight, (list, tuple)):
        _require(all(_num(w, "cost.control_weight") > 0 for w in c.control_weight),
                 "cost.control_weight", "entries must be > 0")
    else:
        _require(_num(c.control_weight, "cost.control_weight") > 0,
                 "cost.control_weight", "must be > 0")
    _require(_num(c.epsilon, "cost.epsilon") > 0, "cost.epsilon", "must be > 0")
    _require(0.0 <= _num(c.beta, "cost.beta") <= 1.0, "cost.beta", "must lie in [0, 1]")
    _require(_num(c.weight_decay, "cost.weight_decay") >= 0, "cost.weight_decay", "must be >= 0")

    t = cfg.train
    _require(_int(t.iterations, "train.iterations") >= 1, "train.iterations", "must be >= 1")
    _require(_int(t.batch_size, "train.batch_size") >= 1, "train.batch_size", "must be >= 1")
    _require(_num(t.horizon, "train.horizon") > 0, "train.horizon", "must be > 0")
    _require(_int(t.steps, "train.steps") >= 1, "train.steps", "must be >= 1")
    _require(_int(t.hidden_size, "train.hidden_size") >= 1, "train.hidden_size", "must be >= 1")
    _require(_num(t.learning_rate, "train.learning_rate") > 0, "train.learning_rate", "must be > 0")
    _require(0 <= _num(t.adam_beta1, "train.adam_beta1") < 1, "train.adam_beta1", "must lie in [0, 1)")
    _require(0 <= _num(t.adam_beta2, "train.adam_beta2") < 1, "train.adam_beta2", "must lie in [0, 1)")
    _require(_num(t.adam_epsilon, "train.adam_epsilon") > 0, "train.adam_epsilon", "must be > 0")
    _require(_int(t.checkpoint_every, "train.checkpoint_every") >= 0,
             "train.checkpoint_every", "must be >= 0")
    if t.clip_norm is not None:
        _require(_num(t.clip_norm, "train.clip_norm") > 0, "train.clip_norm", "must be > 0 or null")
    _num(t.forget_bias, "train.forget_bias")
    _require(0 <= _num(t.divergence_tolerance, "train.divergence_tolerance") <= 1,
             "train.divergence_tolerance", "must lie in [0, 1]")

    e = cfg.eval
    _require(_int(e.batch_size, "eval.batch_size") >= 2, "eval.batch_size", "must be >= 2")
    _int(e.seed, "eval.seed")
    if e.checkpoint is not None:
        _require(isinstance(e.checkpoint, str), "eval.checkpoint", "must be a path or null")
    if e.success_tolerance is not None:
        tol = _numlist(e.success_tolerance, "eval.success_tolerance")
        _require(all(v > 0 for v in tol), "eval.success_tolerance", "entries must be > 0")

    s = cfg.sweep
    for i, eps in enumerate(_numlist(s.epsilons, "sweep.epsilons")):
        _require(eps > 0, f"sweep.epsilons[{i}]", "must be > 0")
    _require(0 <= _num(s.success_threshold, "sweep.success_threshold") <= 1,
             "sweep.success_threshold", "must lie in [0, 1]")


def override(cfg: ExperimentConfig, mode: str | None = None,
             epsilon: float | None = None, **tops) -> ExperimentConfig:
    """Deep-copied config with the given fields replaced."""
    new = copy.deepcopy(cfg)
    if mode is not None:
        new.mode = mode
    if epsilon is not None:
        new.cost.epsilon = float(epsilon)
    for key, value in tops.items():
        if not hasattr(new, key):
            raise ConfigError(f"{key}: unknown configuration key")
        setattr(new, key, value)
    validate_config(new)
    return new


def model_fingerprint(cfg: ExperimentConfig) -> str:
    """Short hash of everything that defines the trained model: system,
    physics, noise, mode, cost shape and the architecture/grid. Checkpoints
    carry it so stale or mismatched files are rejected."""
    payload = {
        "system": cfg.system,
        "noise": cfg.noise,
        "physics": dict(sorted(cfg.physics.items())),
        "mode": cfg.mode,
        "cost": asdict(cfg.cost),
        "horizon": cfg.train.horizon,
        "steps": cfg.train.steps,
        "hidden_size": cfg.train.hidden_size,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RuntimeSetup:
    """Everything the solver needs, assembled from one ExperimentConfig."""

    system: SystemModel
    costs: CostSpec
    grid: HorizonGrid
    train: TrainConfig
    eval_batch: int
    eval_seed: int
    workers: int
    model_hash: str
    out: str
    checkpoint_path: str


def build_runtime(cfg: ExperimentConfig) -> RuntimeSetup:
    validate_config(cfg)
    sys = make_system(cfg.system, noise=cfg.noise, physics=cfg.physics)
    if cfg.eval.success_tolerance is not None:
        tol = np.asarray(cfg.eval.success_tolerance, dtype=np.float64)
        if tol.shape != sys.success_tol.shape:
            raise ConfigError(
                f"eval.success_tolerance: expected {sys.success_tol.shape[0]} entries, "
                f"got {tol.shape[0]}"
            )
        sys.success_tol = tol

    if len(cfg.cost.running_weights) != sys.n:
        raise ConfigError(f"cost.running_weights: expected {sys.n} entries for {cfg.system}, "
                          f"got {len(cfg.cost.running_weights)}")
    if len(cfg.cost.terminal_weights) != sys.n:
        raise ConfigError(f"cost.terminal_weights: expected {sys.n} entries for {cfg.system}, "
                          f"got {len(cfg.cost.terminal_weights)}")
    cw = cfg.cost.control_weight
    if isinstance(cw, (list, tuple)):
        if len(cw) != sys.p:
            raise ConfigError(f"cost.control_weight: expected {sys.p} entries, got {len(cw)}")
        r_u = np.asarray(cw, dtype=np.float64)
    else:
        r_u = np.full(sys.p, float(cw))

    costs = CostSpec(
        running_weights=np.asarray(cfg.cost.running_weights, dtype=np.float64),
        terminal_weights=np.asarray(cfg.cost.terminal_weights, dtype=np.float64),
        target=sys.target,
        r_u=r_u,
        epsilon=float(cfg.cost.epsilon),
        beta=float(cfg.cost.beta),
        weight_decay=float(cfg.cost.weight_decay),
        angle_dims=sys.angle_dims,
    )
    grid = HorizonGrid(0.0, float(cfg.train.horizon), int(cfg.train.steps))
    train = TrainConfig(
        iterations=cfg.train.iterations,
        batch_size=cfg.train.batch_size,
        grid=grid,
        mode=cfg.mode,
        seed=cfg.seed,
        hidden_size=cfg.train.hidden_size,
        learning_rate=cfg.train.learning_rate,
        adam_beta1=cfg.train.adam_beta1,
        adam_beta2=cfg.train.adam_beta2,
        adam_epsilon=cfg.train.adam_epsilon,
        checkpoint_every=cfg.train.checkpoint_every,
        clip_norm=None if cfg.train.clip_norm is None else float(cfg.train.clip_norm),
        forget_bias=cfg.train.forget_bias,
        workers=cfg.workers,
        divergence_tolerance=cfg.train.divergence_tolerance,
    )
    ckpt = cfg.eval.checkpoint or f"{cfg.out}/checkpoint.ckpt"
    return RuntimeSetup(
        system=sys,
        costs=costs,
        grid=grid,
        train=train,
        eval_batch=cfg.eval.batch_size,
        eval_seed=cfg.eval.seed,
        workers=cfg.workers,
        model_hash=model_fingerprint(cfg),
        out=cfg.out,
        checkpoint_path=ckpt,
    )
