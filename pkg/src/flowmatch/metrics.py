"""Accuracy, mode discovery and L1 distance to the reward distribution."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .env import DagEnv, StateGraph


@dataclass
class ModeSpec:
    reward_threshold: float = 0.8
    distance_threshold: int = 3

    def __post_init__(self) -> None:
        if self.reward_threshold <= 0 or self.distance_threshold <= 0:
            raise ValueError("mode thresholds must be positive")


@dataclass
class MetricPoint:
    step: int
    loss: float | None
    accuracy: float | None
    modes: int
    l1: float | None
    samples: int
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def expected_reward(graph: StateGraph) -> float:
    """``E_{R/Z}[R] = sum R^2 / sum R`` over the terminals."""
    r = graph.rewards[graph.terminal]
    return float(np.sum(r**2) / np.sum(r))


def accuracy(samples: Sequence, env: DagEnv, target_mean: float | None = None, graph: StateGraph | None = None) -> float:
    """``100 * min(mean sampled reward / E_target[R], 1)``.

    The denominator is computed exactly from ``graph`` when given;
    otherwise ``target_mean`` must be supplied.
    """
    if not len(samples):
        raise ValueError("accuracy needs at least one sample")
    if target_mean is None:
        if graph is None:
            raise ValueError("no exact denominator: pass target_mean for non-enumerable envs")
        target_mean = expected_reward(graph)
    mean = float(np.mean([env.reward(x) for x in samples]))
    return 100.0 * min(mean / target_mean, 1.0)


def accuracy_exact(probs: np.ndarray, graph: StateGraph) -> float:
    """Accuracy of a full terminal distribution (no sampling noise)."""
    mean = float(np.dot(probs, graph.rewards))
    return 100.0 * min(mean / expected_reward(graph), 1.0)


@dataclass
class ModeCounter:
    """Greedy online clustering of high-reward samples.

    A sample with reward at least ``reward_threshold`` starts a new mode
    when it is farther than ``distance_threshold`` from every mode found
    so far. The count only grows.
    """

    env: DagEnv
    spec: ModeSpec = field(default_factory=ModeSpec)
    modes: list = field(default_factory=list)
    _seen: set = field(default_factory=set, repr=False)

    def update(self, samples: Iterable) -> int:
        for x in samples:
            if x in self._seen:
                continue
            self._seen.add(x)
            if self.env.reward(x) < self.spec.reward_threshold:
                continue
            if all(self.env.distance(x, m) > self.spec.distance_threshold for m in self.modes):
                self.modes.append(x)
        return len(self.modes)

    @property
    def count(self) -> int:
        return len(self.modes)


def count_modes(discovered: Iterable, spec: ModeSpec, env: DagEnv) -> int:
    return ModeCounter(env, spec).update(discovered)


def l1_to_target(policy_dist, graph: StateGraph) -> float:
    """``sum_x |P(x) - R(x)/Z|``.

    ``policy_dist`` is either a per-state-id probability array (an exact
    push-forward) or a mapping from terminal state to count/probability,
    which is normalised first.
    """
    target = graph.target_distribution()
    if isinstance(policy_dist, np.ndarray):
        if policy_dist.shape != (graph.n,):
            raise ValueError("distribution must be indexed by state id")
        p = policy_dist
    else:
        p = np.zeros(graph.n)
        for x, c in dict(policy_dist).items():
            i = graph.index.get(x)
            if i is None or not graph.terminal[i]:
                raise ValueError(f"histogram entry {x!r} is not a terminal of this env")
            p[i] = c
        total = p.sum()
        if total <= 0:
            raise ValueError("empty histogram")
        p = p / total
    return float(np.abs(p - target)[graph.terminal].sum())
