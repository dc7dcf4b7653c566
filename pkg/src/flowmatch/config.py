"""Run configuration: a YAML tree mapped onto dataclasses.

Every section has defaults, so a minimal file only names the env and the
objective. Unknown keys are rejected with their dotted path; a typo in a
hyperparameter should stop the run rather than silently use a default.

Example::

    mode: train
    seed: 0
    out: runs/tree
    env:
      family: tree_seq
      params: {alphabet_size: 4, length: 4}
      reward: {kind: target_set, num_targets: 4, min_separation: 2,
               normalize: [0.001, 10.0]}
    objective: {kind: rpe}
    model: {hidden: [64, 64]}
    train: {steps: 2000, batch: 16}
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .env import (
    ENV_FAMILIES,
    DagEnv,
    RewardSpec,
    attach_reward,
    hypergrid_env,
    load_reward_table,
    prepend_append_env,
    set_gen_env,
    tree_seq_env,
)
from .metrics import ModeSpec
from .objectives import OBJECTIVES, ObjectiveSpec
from .train import TrainConfig

MODES = ("check", "train", "compare")

_FACTORIES = {
    "tree_seq": tree_seq_env,
    "prepend_append": prepend_append_env,
    "set_gen": set_gen_env,
    "hypergrid": hypergrid_env,
}


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``3e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    """A malformed configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class RewardConfig:
    kind: str = "uniform"
    table_file: str | None = None
    targets: list[str] | None = None
    num_targets: int = 4
    min_separation: int | None = None
    base: float = 0.0
    peak: float = 1.0
    width: float = 1.0
    value: float = 1.0
    corner: list[float] = field(default_factory=lambda: [0.1, 0.5, 2.0])
    normalize: list[float] | None = None
    seed: int | None = None


@dataclass
class EnvConfig:
    family: str = "tree_seq"
    params: dict[str, int] = field(default_factory=dict)
    reward: RewardConfig = field(default_factory=RewardConfig)


@dataclass
class ObjectiveConfig:
    kind: str = "rpe"
    subtb_lambda: float = 0.9
    lambda_ent: float = 1.0
    alpha: float = 0.9
    clip: float | None = -1.0
    target_sync: int = 100
    pb: str = "uniform"


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [256, 256])


@dataclass
class OptimConfig:
    lr: float = 3e-3
    max_grad_norm: float | None = 10.0


@dataclass
class TrainSection:
    steps: int = 2000
    batch: int = 16
    epsilon: float = 0.05
    eval_every: int = 50
    eval_samples: int = 1000
    target_mean: float | None = None


@dataclass
class MetricsConfig:
    reward_threshold: float = 0.8
    distance_threshold: int = 3
    # When true, reward_threshold is a fraction of the maximum reward.
    relative: bool = False


@dataclass
class SampleConfig:
    n: int = 100


@dataclass
class RunConfig:
    mode: str = "train"
    seed: int = 0
    out: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    objective: ObjectiveConfig | None = None
    objectives: list[ObjectiveConfig] | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    base_dir: str = field(default=".", repr=False, compare=False)

    # -- derived objects -------------------------------------------------

    def objective_specs(self) -> list[ObjectiveSpec]:
        items = self.objectives if self.mode == "compare" else [self.objective]
        return [ObjectiveSpec(**dataclasses.asdict(o)) for o in items]

    def build_env(self) -> DagEnv:
        """Construct the env and attach its reward."""
        env = _FACTORIES[self.env.family](**self.env.params)
        r = self.env.reward
        table = None
        if r.table_file is not None:
            table = load_reward_table(self.resolve(r.table_file))
        spec = RewardSpec(
            kind=r.kind,
            table=table,
            targets=r.targets,
            num_targets=r.num_targets,
            min_separation=r.min_separation,
            base=r.base,
            peak=r.peak,
            width=r.width,
            value=r.value,
            corner=tuple(r.corner),
            normalize=tuple(r.normalize) if r.normalize is not None else None,
            seed=self.seed if r.seed is None else r.seed,
        )
        return attach_reward(env, spec)

    def mode_spec(self, env: DagEnv | None = None) -> ModeSpec:
        m = self.metrics
        thr = m.reward_threshold
        if m.relative:
            if env is None:
                raise ValueError("relative mode threshold needs the env")
            thr *= max(env.reward(x) for x in env.terminals())
        return ModeSpec(thr, m.distance_threshold)

    def train_config(self, env: DagEnv | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            steps=t.steps,
            batch=t.batch,
            lr=self.optim.lr,
            max_grad_norm=self.optim.max_grad_norm,
            hidden=tuple(self.model.hidden),
            epsilon=t.epsilon,
            eval_every=t.eval_every,
            eval_samples=t.eval_samples,
            seed=self.seed,
            modes=self.mode_spec(env),
            target_mean=t.target_mean,
        )

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        for key in ("objective", "objectives"):
            if d[key] is None:
                d.pop(key)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# --------------------------------------------------------------------------
# Loading


def _section(cls, data: Any, path: str):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(where, "unknown key")
        nested = _NESTED.get((cls, key))
        if nested is not None:
            value = _section(nested, value, where)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


_NESTED = {
    (RunConfig, "env"): EnvConfig,
    (RunConfig, "objective"): ObjectiveConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "metrics"): MetricsConfig,
    (RunConfig, "sample"): SampleConfig,
    (EnvConfig, "reward"): RewardConfig,
}


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(cfg: RunConfig) -> None:
    _expect(cfg.mode in MODES, "mode", f"must be one of {MODES}")
    _expect(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    _expect(isinstance(cfg.out, str) and cfg.out, "out", "must be a non-empty path")

    e = cfg.env
    _expect(e.family in ENV_FAMILIES, "env.family", f"must be one of {sorted(ENV_FAMILIES)}")
    _expect(isinstance(e.params, dict), "env.params", "expected a mapping")
    names = ENV_FAMILIES[e.family][1]
    for k in names:
        _expect(k in e.params, f"env.params.{k}", "missing")
    for k, v in e.params.items():
        _expect(k in names, f"env.params.{k}", "unknown key")
        _expect(_is_int(v) and v >= 1, f"env.params.{k}", "must be a positive integer")
    r = e.reward
    _expect(r.kind in ("table", "target_set", "uniform", "corner"), "env.reward.kind", "unknown reward kind")
    if r.kind == "table":
        _expect(r.table_file is not None, "env.reward.table_file", "required for a table reward")
        _expect(cfg.resolve(r.table_file).is_file(), "env.reward.table_file", f"no such file {r.table_file!r}")
    if r.normalize is not None:
        _expect(
            isinstance(r.normalize, list) and len(r.normalize) == 2 and all(_is_num(v) for v in r.normalize),
            "env.reward.normalize",
            "expected [lo, hi]",
        )
    _expect(isinstance(r.corner, list) and len(r.corner) == 3, "env.reward.corner", "expected [r0, r1, r2]")

    if cfg.mode == "compare":
        _expect(cfg.objectives is not None and len(cfg.objectives) > 0, "objectives", "compare mode needs a list")
    elif cfg.mode == "train":
        _expect(cfg.objective is not None, "objective", "train mode needs an objective")
    for i, o in enumerate(cfg.objectives or []):
        _check_objective(o, f"objectives[{i}]")
    if cfg.objective is not None:
        _check_objective(cfg.objective, "objective")

    h = cfg.model.hidden
    _expect(isinstance(h, list) and all(_is_int(v) and v >= 1 for v in h), "model.hidden", "list of positive widths")
    _expect(_is_num(cfg.optim.lr) and cfg.optim.lr > 0, "optim.lr", "must be positive")
    g = cfg.optim.max_grad_norm
    _expect(g is None or (_is_num(g) and g > 0), "optim.max_grad_norm", "must be positive or null")
    t = cfg.train
    _expect(_is_int(t.steps) and t.steps >= 0, "train.steps", "must be a non-negative integer")
    _expect(_is_int(t.batch) and t.batch >= 1, "train.batch", "must be a positive integer")
    _expect(_is_num(t.epsilon) and 0 <= t.epsilon <= 1, "train.epsilon", "must be in [0, 1]")
    _expect(_is_int(t.eval_every) and t.eval_every >= 0, "train.eval_every", "must be a non-negative integer")
    _expect(_is_int(t.eval_samples) and t.eval_samples >= 1, "train.eval_samples", "must be a positive integer")
    m = cfg.metrics
    _expect(_is_num(m.reward_threshold) and m.reward_threshold > 0, "metrics.reward_threshold", "must be positive")
    _expect(_is_int(m.distance_threshold) and m.distance_threshold > 0, "metrics.distance_threshold", "must be positive")
    _expect(_is_int(cfg.sample.n) and cfg.sample.n >= 1, "sample.n", "must be a positive integer")


def _check_objective(o: ObjectiveConfig, path: str) -> None:
    _expect(o.kind in OBJECTIVES, f"{path}.kind", f"must be one of {OBJECTIVES}")
    try:
        ObjectiveSpec(**dataclasses.asdict(o))
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_config(data: Any, base_dir: str | Path = ".") -> RunConfig:
    """Build and validate a RunConfig from an already-parsed YAML tree."""
    if data is None:
        data = {}
    data = dict(data) if isinstance(data, dict) else data
    objectives = None
    if isinstance(data, dict) and "objectives" in data:
        raw = data.pop("objectives")
        _expect(isinstance(raw, list), "objectives", "expected a list")
        objectives = [_section(ObjectiveConfig, o, f"objectives[{i}]") for i, o in enumerate(raw)]
    cfg = _section(RunConfig, data, "")
    cfg.objectives = objectives
    cfg.base_dir = str(base_dir)
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML run config; relative file references resolve next to it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: invalid YAML: {exc}") from None
    return parse_config(data, path.parent)
