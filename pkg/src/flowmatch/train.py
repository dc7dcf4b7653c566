"""Rollouts and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import objectives as obj
from .approx import MLP, Adam, FeatureEncoder, Scalar, clip_grad_norm
from .env import DagEnv, StateGraph, Trajectory
from .exact import PreconditionError, compute_g
from .metrics import MetricPoint, ModeCounter, ModeSpec, accuracy, l1_to_target

log = logging.getLogger(__name__)

UNIFORM = "uniform"
CURRENT_PF = "current_pf"
BOLTZMANN_Q = "boltzmann_q"


class TrainingFault(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, snapshot: dict | None = None) -> None:
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class Sampler:
    kind: str = UNIFORM
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (UNIFORM, CURRENT_PF, BOLTZMANN_Q):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")


PolicyFn = Callable[[list], np.ndarray]


def rollout(
    env: DagEnv,
    sampler: Sampler,
    policy: PolicyFn | None,
    n: int,
    rng: np.random.Generator | None = None,
) -> list[Trajectory]:
    """Sample ``n`` complete trajectories in lock-step.

    ``policy`` maps a list of non-terminal states to a ``(len, max_actions)``
    array of action probabilities; it is ignored for the uniform sampler.
    ``g`` is accumulated as ``g * |A(s_t)| / |B(s_{t+1})|`` along the way.
    Without an explicit ``rng`` the sampler's seed is used, so repeated
    calls give the same trajectories.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(sampler.seed) if rng is None else rng
    s0 = env.initial()
    trajs = [Trajectory([s0], [], [1.0]) for _ in range(n)]
    active = list(range(n))
    while active:
        states = [trajs[k].states[-1] for k in active]
        infos = [env.info(s) for s in states]
        counts = np.array([i.n_actions for i in infos])
        width = counts.max()
        uniform = (np.arange(width)[None, :] < counts[:, None]) / counts[:, None]
        if sampler.kind == UNIFORM or policy is None:
            probs = uniform
        else:
            probs = np.asarray(policy(states))[:, :width]
            if sampler.epsilon > 0:
                probs = (1 - sampler.epsilon) * probs + sampler.epsilon * uniform
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(len(active)) * cdf[:, -1]
        actions = np.minimum((cdf <= u[:, None]).sum(axis=1), counts - 1)
        still = []
        for k, inf, a in zip(active, infos, actions):
            a = int(a)
            nxt = inf.children[a]
            tr = trajs[k]
            tr.actions.append(a)
            tr.states.append(nxt)
            nxt_inf = env.info(nxt)
            tr.g.append(tr.g[-1] * inf.n_actions / nxt_inf.n_parents)
            if not nxt_inf.terminal:
                still.append(k)
        active = still
    return trajs


# --------------------------------------------------------------------------
# Objective wrappers: models, losses and sampling policies


def _predict(model: MLP, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
    if x.shape[0] <= chunk:
        return model.predict(x)
    return np.vstack([model.predict(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)])


class Method:
    """Bundles the models an objective trains with its loss and policy."""

    sampler_kind = CURRENT_PF

    def __init__(self, env: DagEnv, spec: obj.ObjectiveSpec, hidden, seed: int, encoder=None) -> None:
        self.env = env
        self.spec = spec
        self.encoder = encoder if encoder is not None else FeatureEncoder(env)
        self.hidden = tuple(hidden)
        self.seed = seed
        self.models: dict[str, MLP | Scalar] = {}

    def _mlp(self, out: int, k: int) -> MLP:
        return MLP((self.encoder.dim, *self.hidden, out), seed=self.seed * 1009 + k)

    def loss(self, batch: obj.LossBatch):
        raise NotImplementedError

    def logits(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    temperature = 1.0

    def policy(self, states: list) -> np.ndarray:
        counts = np.array([self.env.info(s).n_actions for s in states])
        _, p = obj.masked_log_softmax(self.logits(self.encoder(states)), counts, self.temperature)
        return p

    def _graph_features(self, graph: StateGraph) -> np.ndarray:
        if isinstance(self.encoder, FeatureEncoder):
            return graph.encodings
        return self.encoder(graph.states)

    def policy_table(self, graph: StateGraph) -> np.ndarray:
        _, p = obj.masked_log_softmax(self.logits(self._graph_features(graph)), graph.n_actions, self.temperature)
        return p

    def after_step(self, step: int) -> None:
        pass


class RPEMethod(Method):
    sampler_kind = UNIFORM

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.models["flow"] = self._mlp(1, 0)

    def loss(self, batch):
        return obj.rpe_loss(self.models["flow"], batch)

    def policy(self, states):
        width = self.env.max_actions
        out = np.zeros((len(states), width))
        kids, owners, slots, nb = [], [], [], []
        for k, s in enumerate(states):
            for a, c in enumerate(self.env.info(s).children):
                kids.append(c)
                owners.append(k)
                slots.append(a)
                nb.append(self.env.info(c).n_parents)
        z = _predict(self.models["flow"], self.encoder(kids))[:, 0] - np.log(nb)
        full = np.full((len(states), width), -np.inf)
        full[owners, slots] = z
        m = full.max(axis=1, keepdims=True)
        e = np.exp(full - m)
        out[...] = e / e.sum(axis=1, keepdims=True)
        return out

    def policy_table(self, graph):
        log_f = _predict(self.models["flow"], self._graph_features(graph))[:, 0]
        kids = graph.children
        safe = np.maximum(kids, 0)
        z = log_f[safe] - np.log(np.maximum(graph.n_parents[safe], 1))
        _, p = obj.masked_log_softmax(z, graph.n_actions)
        return p


class FMMethod(Method):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.models["edge"] = self._mlp(self.env.max_actions, 0)

    def loss(self, batch):
        return obj.fm_loss(self.models["edge"], batch)

    def logits(self, x):
        return _predict(self.models["edge"], x)


class _PFMethod(Method):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.models["pf"] = self._mlp(self.env.max_actions, 1)
        if self.spec.pb == "learned":
            self.models["pb"] = self._mlp(self.env.max_parents, 2)

    @property
    def pb(self):
        return self.models.get("pb", "uniform")

    def logits(self, x):
        return _predict(self.models["pf"], x)


class TBMethod(_PFMethod):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.models["log_z"] = Scalar(0.0)

    def loss(self, batch):
        return obj.tb_loss(self.models["pf"], self.pb, self.models["log_z"], batch)


class DBMethod(_PFMethod):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.models["flow"] = self._mlp(1, 0)

    def loss(self, batch):
        return obj.db_loss(self.models["flow"], self.models["pf"], self.pb, batch)


class SubTBMethod(DBMethod):
    def loss(self, batch):
        return obj.subtb_loss(self.models["flow"], self.models["pf"], self.pb, batch, self.spec.subtb_lambda)


class SoftDQNMethod(Method):
    sampler_kind = BOLTZMANN_Q

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.models["q"] = self._mlp(self.env.max_actions, 0)
        self.target = self.models["q"].copy()
        self.temperature = self.spec.lambda_ent

    def loss(self, batch):
        return obj.soft_dqn_loss(self.models["q"], self.target, batch, self.spec.lambda_ent)

    def logits(self, x):
        return _predict(self.models["q"], x)

    def after_step(self, step):
        if step % self.spec.target_sync == 0:
            self.target = self.models["q"].copy()


class MDQNMethod(SoftDQNMethod):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.temperature = obj.munchausen_temperature(self.spec.lambda_ent, self.spec.alpha)

    def loss(self, batch):
        s = self.spec
        return obj.mdqn_loss(self.models["q"], self.target, batch, s.lambda_ent, s.alpha, s.clip)


METHODS = {
    "rpe": RPEMethod,
    "fm": FMMethod,
    "tb": TBMethod,
    "db": DBMethod,
    "subtb": SubTBMethod,
    "soft_dqn": SoftDQNMethod,
    "mdqn": MDQNMethod,
}


def build_method(env: DagEnv, spec: obj.ObjectiveSpec, hidden=(256, 256), seed: int = 0, encoder=None) -> Method:
    return METHODS[spec.kind](env, spec, hidden, seed, encoder)


# --------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 3e-3
    max_grad_norm: float | None = 10.0
    hidden: tuple[int, ...] = (256, 256)
    epsilon: float = 0.05
    eval_every: int = 50
    eval_samples: int = 1000
    seed: int = 0
    modes: ModeSpec = field(default_factory=ModeSpec)
    target_mean: float | None = None


@dataclass
class RunLog:
    points: list[MetricPoint] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def records(self) -> list[dict]:
        return [p.to_dict() for p in self.points]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def same_metrics(self, other: "RunLog") -> bool:
        """Equality ignoring wall-clock time."""
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]  # noqa: E731
        return strip(self.records()) == strip(other.records()) and self.losses == other.losses

    @property
    def last(self) -> MetricPoint | None:
        return self.points[-1] if self.points else None


class Evaluator:
    """Computes metric points for a method, exactly where the env is enumerable."""

    def __init__(self, env: DagEnv, graph: StateGraph | None, config: TrainConfig) -> None:
        self.env = env
        self.graph = graph
        self.config = config
        self.rng = np.random.default_rng([config.seed, 1])
        self.modes = ModeCounter(env, config.modes)

    def terminal_distribution(self, method: Method) -> np.ndarray:
        if self.graph is None:
            raise ValueError("exact distribution needs an enumerable env")
        return self.graph.push_forward(method.policy_table(self.graph))

    def __call__(self, method: Method, step: int, loss: float | None, wall_ms: float) -> MetricPoint:
        n = self.config.eval_samples
        l1 = None
        if self.graph is not None:
            probs = self.terminal_distribution(method)
            l1 = l1_to_target(probs, self.graph)
            ids = self.graph.terminal_ids
            p = probs[ids] / probs[ids].sum()
            samples = [self.graph.states[i] for i in self.rng.choice(ids, size=n, p=p)]
        else:
            sampler = Sampler(CURRENT_PF, 0.0)
            samples = [t.terminal for t in rollout(self.env, sampler, method.policy, n, self.rng)]
        acc = None
        if self.graph is not None or self.config.target_mean is not None:
            acc = accuracy(samples, self.env, self.config.target_mean, self.graph)
        modes = self.modes.update(samples)
        return MetricPoint(step, loss, acc, modes, l1, n, wall_ms)


def train(
    env: DagEnv,
    spec: obj.ObjectiveSpec,
    config: TrainConfig,
    graph: StateGraph | None = None,
    encoder=None,
    on_point: Callable[[MetricPoint], None] | None = None,
) -> tuple[Method, RunLog]:
    """Run ``config.steps`` updates of ``spec.kind`` on ``env``.

    Each step samples a fresh batch with the objective's behaviour policy,
    computes the loss and gradients, clips the joint gradient norm and
    applies one Adam update per model. Metrics are evaluated every
    ``config.eval_every`` steps and passed to ``on_point`` as they arrive.
    """
    if spec.kind == "rpe":
        if graph is not None:
            gf = compute_g(graph)
            if not gf.consistent:
                raise PreconditionError(
                    f"rpe needs path-independent g; violated at {env.key(gf.witness_state)!r}"
                )
        elif not getattr(env, "path_independent_g", False):
            raise PreconditionError(f"rpe cannot verify g consistency for {env.name}")
    method = build_method(env, spec, config.hidden, config.seed, encoder)
    optims = {role: Adam(lr=config.lr) for role in method.models}
    rng = np.random.default_rng(config.seed)
    sampler = Sampler(method.sampler_kind, 0.0 if method.sampler_kind == UNIFORM else config.epsilon, config.seed)
    evaluate = Evaluator(env, graph, config)
    runlog = RunLog()
    t_start = time.perf_counter()
    window: list[float] = []
    for step in range(1, config.steps + 1):
        trajs = rollout(env, sampler, method.policy, config.batch, rng)
        batch = obj.LossBatch(env, trajs, method.encoder)
        with np.errstate(over="raise", invalid="raise"):
            try:
                loss, grads = method.loss(batch)
            except FloatingPointError as exc:
                raise TrainingFault(f"step {step}: {exc}", {"step": step}) from exc
        if not np.isfinite(loss):
            raise TrainingFault(f"step {step}: non-finite loss {loss}", {"step": step, "loss": loss})
        roles = list(grads)
        try:
            clipped, _ = clip_grad_norm([grads[r] for r in roles], config.max_grad_norm)
        except FloatingPointError as exc:
            raise TrainingFault(f"step {step}: {exc}", {"step": step, "loss": loss}) from exc
        for role, g in zip(roles, clipped):
            model = method.models[role]
            optims[role].step(model.params, g)
            model.step = step
        method.after_step(step)
        runlog.losses.append(loss)
        window.append(loss)
        if config.eval_every and step % config.eval_every == 0:
            wall = (time.perf_counter() - t_start) * 1000.0
            point = evaluate(method, step, float(np.mean(window)), wall)
            window = []
            runlog.points.append(point)
            log.debug("step %d loss %.4g l1 %s", step, point.loss, point.l1)
            if on_point is not None:
                on_point(point)
    return method, runlog


def write_runlog(path: str | Path, runlog: RunLog) -> None:
    Path(path).write_text(runlog.to_jsonl(), encoding="utf-8")
