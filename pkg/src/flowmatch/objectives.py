"""Training losses with hand-derived gradients.

Every loss takes the models it trains plus a ``LossBatch`` and returns
``(loss, grads)`` where ``grads`` maps a role name (``"flow"``, ``"pf"``,
``"pb"``, ``"log_z"``, ``"edge"``, ``"q"``) to a flat gradient for that
model's parameter vector. Flow-like model outputs are log-flows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approx import MLP, FeatureEncoder, IndexEncoder, Scalar
from .env import DagEnv, StateGraph, Trajectory

OBJECTIVES = ("rpe", "fm", "db", "tb", "subtb", "soft_dqn", "mdqn")


@dataclass
class ObjectiveSpec:
    kind: str = "rpe"
    subtb_lambda: float = 0.9
    lambda_ent: float = 1.0
    alpha: float = 0.9
    clip: float | None = -1.0
    target_sync: int = 100
    pb: str = "uniform"

    def __post_init__(self) -> None:
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVES}")
        if not 0 < self.subtb_lambda <= 1:
            raise ValueError("subtb_lambda must be in (0, 1]")
        if self.lambda_ent <= 0:
            raise ValueError("lambda_ent must be > 0")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must be in [0, 1)")
        if self.clip is not None and self.clip >= 0:
            raise ValueError("clip must be < 0")
        if self.target_sync < 1:
            raise ValueError("target_sync must be >= 1")
        if self.pb not in ("uniform", "learned"):
            raise ValueError("pb must be 'uniform' or 'learned'")


class LossBatch:
    """Flattened view of a list of trajectories.

    Every state occurrence gets a row; transitions index into those rows.
    """

    def __init__(self, env: DagEnv, trajectories: list[Trajectory], encoder=None) -> None:
        if not trajectories:
            raise ValueError("empty batch")
        self.env = env
        self.encoder = encoder if encoder is not None else FeatureEncoder(env)
        self.trajectories = trajectories
        states, traj_id, g = [], [], []
        src, dst, action, starts = [], [], [], []
        for k, tr in enumerate(trajectories):
            if not env.is_terminal(tr.states[-1]):
                raise ValueError("trajectory does not end in a terminal state")
            base = len(states)
            starts.append(base)
            states.extend(tr.states)
            traj_id.extend([k] * len(tr.states))
            g.extend(tr.g if tr.g else [np.nan] * len(tr.states))
            for t, a in enumerate(tr.actions):
                src.append(base + t)
                dst.append(base + t + 1)
                action.append(a)
        self.states = states
        self.traj_id = np.asarray(traj_id)
        self.g = np.asarray(g, dtype=float)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.action = np.asarray(action, dtype=np.int64)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.lengths = np.array([len(tr) for tr in trajectories])
        infos = [env.info(s) for s in states]
        self.infos = infos
        self.n_actions = np.array([i.n_actions for i in infos])
        self.n_parents = np.array([i.n_parents for i in infos])
        self.terminal = np.array([i.terminal for i in infos])
        self.log_reward = np.full(len(states), np.nan)
        for j in np.flatnonzero(self.terminal):
            self.log_reward[j] = env.log_reward(states[j])
        # which parent slot of dst the transition came through
        slot = []
        for s_idx, d_idx, a in zip(src, dst, action):
            ps = infos[d_idx].parents
            slot.append(ps.index((states[s_idx], a)))
        self.parent_slot = np.asarray(slot, dtype=np.int64)
        self._x: np.ndarray | None = None

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    @property
    def features(self) -> np.ndarray:
        if self._x is None:
            self._x = self.encoder(self.states)
        return self._x


def make_batch(env: DagEnv, trajectories: list[Trajectory], encoder=None) -> LossBatch:
    return LossBatch(env, trajectories, encoder)


# --------------------------------------------------------------------------
# small numerics


def masked_log_softmax(logits: np.ndarray, counts: np.ndarray, temperature: float = 1.0):
    """Row-wise log-softmax over the first ``counts[i]`` entries.

    Rows with no valid entry return zeros. Returns ``(logp, p)``.
    """
    mask = np.arange(logits.shape[1])[None, :] < counts[:, None]
    z = np.where(mask, logits / temperature, -np.inf)
    m = np.max(z, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    tot = e.sum(axis=1, keepdims=True)
    empty = tot[:, 0] == 0
    tot[empty] = 1.0
    logp = np.where(mask, z - m - np.log(tot), 0.0)
    p = e / tot
    return logp, p


def masked_logsumexp(values: np.ndarray, counts: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """``temperature * logsumexp(values / temperature)`` over the first ``counts`` entries."""
    mask = np.arange(values.shape[1])[None, :] < counts[:, None]
    z = np.where(mask, values / temperature, -np.inf)
    m = np.max(z, axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return temperature * (m + np.log(np.exp(z - m[:, None]).sum(axis=1)))


def _segment_logsumexp(x: np.ndarray, owner_starts: np.ndarray) -> np.ndarray:
    m = np.maximum.reduceat(x, owner_starts)
    sizes = np.diff(np.append(owner_starts, x.size))
    return m + np.log(np.add.reduceat(np.exp(x - np.repeat(m, sizes)), owner_starts))


def _per_traj_sum(values: np.ndarray, owners: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    np.add.at(out, owners, values)
    return out


def _log_pb(pb_model, batch: LossBatch):
    """Per-transition ``log P_B(s_t | s_{t+1})`` and softmax over parent slots (or None)."""
    if pb_model is None or pb_model == "uniform":
        return -np.log(batch.n_parents[batch.dst]), None
    logits = pb_model.forward(batch.features)
    logq, q = masked_log_softmax(logits, batch.n_parents)
    return logq[batch.dst, batch.parent_slot], (logits, q)


def _pb_backward(pb_model, ctx, batch: LossBatch, d_lpb: np.ndarray) -> np.ndarray | None:
    if ctx is None:
        return None
    logits, q = ctx
    d = np.zeros_like(logits)
    d[batch.dst] -= d_lpb[:, None] * q[batch.dst]
    d[batch.dst, batch.parent_slot] += d_lpb
    return pb_model.backward(d)


def _pf_backward(pf_model, p: np.ndarray, batch: LossBatch, d_lpf: np.ndarray) -> np.ndarray:
    d = np.zeros_like(p)
    d[batch.src] -= d_lpf[:, None] * p[batch.src]
    d[batch.src, batch.action] += d_lpf
    return pf_model.backward(d)


# --------------------------------------------------------------------------
# rectified policy evaluation


def _children(batch: LossBatch):
    """Children of every non-terminal row, grouped contiguously per owner."""
    kids, owner_starts, inv_b = [], [], []
    rows = np.flatnonzero(~batch.terminal)
    for j in rows:
        owner_starts.append(len(kids))
        for c in batch.infos[j].children:
            kids.append(c)
            inv_b.append(1.0 / batch.env.info(c).n_parents)
    return rows, kids, np.asarray(owner_starts, dtype=np.int64), np.asarray(inv_b)


def rpe_targets(flow_model, batch: LossBatch) -> tuple[np.ndarray, np.ndarray]:
    """Log of the regression targets ``V(s)`` for every row of the batch.

    Non-terminal rows get the uniform-policy average of ``g(s') F(s')`` over
    all children, evaluated on a frozen copy of the current model;
    terminal rows get ``g(x) R(x)``. Also returns ``log g``.
    """
    if np.any(np.isnan(batch.g)):
        raise ValueError("rpe needs g-values on every trajectory state")
    log_g = np.log(batch.g)
    log_v = log_g + np.where(batch.terminal, batch.log_reward, 0.0)
    rows, kids, starts, inv_b = _children(batch)
    if rows.size:
        log_f_kids = flow_model.predict(batch.encoder(kids))[:, 0]
        # (1/|A|) sum g(s') F(s') = g(s) sum F(s') / |B(s')|
        log_v[rows] = log_g[rows] + _segment_logsumexp(log_f_kids + np.log(inv_b), starts)
    return log_v, log_g


def rpe_loss(flow_model: MLP, batch: LossBatch):
    """Mean squared error between ``g(s) F(s)`` and the bootstrapped value target."""
    log_v, log_g = rpe_targets(flow_model, batch)
    log_f = flow_model.forward(batch.features)[:, 0]
    pred = np.exp(log_g + log_f)
    res = pred - np.exp(log_v)
    n = res.size
    loss = float(np.mean(res**2))
    d_log_f = 2.0 * res * pred / n
    return loss, {"flow": flow_model.backward(d_log_f[:, None])}


def flow_policy(log_f_children: np.ndarray, n_parents_children: np.ndarray) -> np.ndarray:
    """``P_F(s'|s)`` proportional to ``F(s') / |B(s')|``, renormalised."""
    z = log_f_children - np.log(n_parents_children)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def policy_from_flows(flow_model: MLP, env: DagEnv, s, encoder=None) -> np.ndarray:
    """Forward policy over the actions of ``s`` induced by a log-flow model."""
    inf = env.info(s)
    if inf.terminal:
        raise ValueError("no policy at a terminal state")
    enc = encoder if encoder is not None else FeatureEncoder(env)
    log_f = flow_model.predict(enc(list(inf.children)))[:, 0]
    nb = np.array([env.info(c).n_parents for c in inf.children], dtype=float)
    return flow_policy(log_f, nb)


# --------------------------------------------------------------------------
# GFlowNet objectives


def fm_loss(edge_model: MLP, batch: LossBatch):
    """Flow matching on log edge flows ``edge_model(s)[a] = log F(s -> child(s, a))``."""
    env = batch.env
    rows = np.flatnonzero(batch.n_parents > 0)
    parent_states, parent_actions, owner = [], [], []
    for j in rows:
        for p, a in batch.infos[j].parents:
            parent_states.append(p)
            parent_actions.append(a)
            owner.append(j)
    n_rows = len(batch.states)
    x = np.vstack([batch.features, batch.encoder(parent_states)]) if parent_states else batch.features
    out = edge_model.forward(x)
    own, par = out[:n_rows], out[n_rows:]
    parent_actions = np.asarray(parent_actions, dtype=np.int64)
    owner = np.asarray(owner, dtype=np.int64)
    in_logits = par[np.arange(len(parent_actions)), parent_actions]
    starts = np.searchsorted(owner, rows)
    log_in = _segment_logsumexp(in_logits, starts)
    log_out = np.where(
        batch.terminal[rows],
        np.nan_to_num(batch.log_reward[rows]),
        masked_logsumexp(own[rows], batch.n_actions[rows]),
    )
    delta = log_in - log_out
    m = delta.size
    loss = float(np.mean(delta**2))
    coef = 2.0 * delta / m
    d_out = np.zeros_like(out)
    # incoming: softmax weights across the parents of each row
    sizes = np.diff(np.append(starts, in_logits.size))
    w_in = np.exp(in_logits - np.repeat(log_in, sizes))
    np.add.at(d_out, (n_rows + np.arange(len(parent_actions)), parent_actions), np.repeat(coef, sizes) * w_in)
    inner = ~batch.terminal[rows]
    r_in = rows[inner]
    if r_in.size:
        _, p = masked_log_softmax(own[r_in], batch.n_actions[r_in])
        d_out[r_in] -= coef[inner, None] * p
    del env
    return loss, {"edge": edge_model.backward(d_out)}


def tb_loss(pf_model: MLP, pb_model, log_z: Scalar, batch: LossBatch):
    """Trajectory balance. ``pb_model`` is an MLP over parent slots or ``"uniform"``."""
    logits = pf_model.forward(batch.features)
    logp, p = masked_log_softmax(logits, batch.n_actions)
    lpf = logp[batch.src, batch.action]
    lpb, ctx = _log_pb(pb_model, batch)
    owners = batch.traj_id[batch.src]
    n = batch.n_trajectories
    last = batch.starts + batch.lengths
    delta = (
        log_z.value
        + _per_traj_sum(lpf, owners, n)
        - batch.log_reward[last]
        - _per_traj_sum(lpb, owners, n)
    )
    loss = float(np.mean(delta**2))
    coef = 2.0 * delta / n
    grads = {"pf": _pf_backward(pf_model, p, batch, coef[owners]), "log_z": np.array([coef.sum()])}
    gpb = _pb_backward(pb_model, ctx, batch, -coef[owners])
    if gpb is not None:
        grads["pb"] = gpb
    return loss, grads


def _state_log_flows(flow_model: MLP, batch: LossBatch) -> np.ndarray:
    log_f = flow_model.forward(batch.features)[:, 0]
    return np.where(batch.terminal, batch.log_reward, log_f)


def db_residuals(flow_model, pf_model, pb_model, batch: LossBatch):
    log_f = _state_log_flows(flow_model, batch)
    logits = pf_model.forward(batch.features)
    logp, p = masked_log_softmax(logits, batch.n_actions)
    lpf = logp[batch.src, batch.action]
    lpb, ctx = _log_pb(pb_model, batch)
    delta = log_f[batch.src] + lpf - log_f[batch.dst] - lpb
    return delta, p, ctx


def db_loss(flow_model: MLP, pf_model: MLP, pb_model, batch: LossBatch):
    """Detailed balance over every transition; terminal flows are the rewards."""
    delta, p, ctx = db_residuals(flow_model, pf_model, pb_model, batch)
    m = delta.size
    loss = float(np.mean(delta**2))
    coef = 2.0 * delta / m
    d_f = np.zeros(len(batch.states))
    np.add.at(d_f, batch.src, coef)
    np.add.at(d_f, batch.dst, -coef)
    d_f[batch.terminal] = 0.0
    grads = {"flow": flow_model.backward(d_f[:, None]), "pf": _pf_backward(pf_model, p, batch, coef)}
    gpb = _pb_backward(pb_model, ctx, batch, -coef)
    if gpb is not None:
        grads["pb"] = gpb
    return loss, grads


def subtb_residuals(flow_model, pf_model, pb_model, batch: LossBatch):
    """Per trajectory, the matrix ``delta[i, j]`` for sub-trajectories ``i < j``."""
    log_f = _state_log_flows(flow_model, batch)
    logits = pf_model.forward(batch.features)
    logp, p = masked_log_softmax(logits, batch.n_actions)
    lpf = logp[batch.src, batch.action]
    lpb, ctx = _log_pb(pb_model, batch)
    out = []
    t0 = 0
    for k in range(batch.n_trajectories):
        n = batch.lengths[k]
        lf = log_f[batch.starts[k] : batch.starts[k] + n + 1]
        c = np.concatenate([[0.0], np.cumsum(lpf[t0 : t0 + n] - lpb[t0 : t0 + n])])
        delta = lf[:, None] + c[None, :] - c[:, None] - lf[None, :]
        out.append(delta)
        t0 += n
    return out, p, ctx


def subtb_weights(n: int, lam: float) -> np.ndarray:
    """``lam ** (j - i)`` on the strict upper triangle, normalised to sum to 1."""
    i, j = np.indices((n + 1, n + 1))
    w = np.where(j > i, lam ** (j - i).astype(float), 0.0)
    return w / w.sum()


def subtb_loss(flow_model: MLP, pf_model: MLP, pb_model, batch: LossBatch, lam: float = 0.9):
    deltas, p, ctx = subtb_residuals(flow_model, pf_model, pb_model, batch)
    nt = batch.n_trajectories
    d_f = np.zeros(len(batch.states))
    d_step = np.zeros(batch.src.size)
    loss = 0.0
    t0 = 0
    for k, delta in enumerate(deltas):
        n = batch.lengths[k]
        w = subtb_weights(n, lam)
        loss += float(np.sum(w * delta**2)) / nt
        G = 2.0 * w * delta / nt
        base = batch.starts[k]
        d_f[base : base + n + 1] += G.sum(axis=1) - G.sum(axis=0)
        d_c = G.sum(axis=0) - G.sum(axis=1)  # gradient w.r.t. prefix sums c_0..c_n
        # c_k sums steps t < k, so step t collects d_c[k] for all k > t
        d_step[t0 : t0 + n] = np.cumsum(d_c[::-1])[::-1][1:]
        t0 += n
    d_f[batch.terminal] = 0.0
    grads = {"flow": flow_model.backward(d_f[:, None]), "pf": _pf_backward(pf_model, p, batch, d_step)}
    gpb = _pb_backward(pb_model, ctx, batch, -d_step)
    if gpb is not None:
        grads["pb"] = gpb
    return loss, grads


# --------------------------------------------------------------------------
# soft Q-learning


def transition_log_pb(batch: LossBatch) -> np.ndarray:
    """Per-transition reward correction ``log P_B`` for the uniform backward policy."""
    return -np.log(batch.n_parents[batch.dst])


def munchausen_temperature(lambda_ent: float, alpha: float) -> float:
    """Softmax temperature whose Munchausen fixed point has entropy weight ``lambda_ent``."""
    return lambda_ent / (1.0 - alpha)


def munchausen_bonus(log_pi: np.ndarray, alpha: float, tau: float, clip: float | None) -> np.ndarray:
    lp = log_pi if clip is None else np.clip(log_pi, clip, 0.0)
    return alpha * tau * lp


def _soft_td(q_model, target_model, batch, lambda_ent, alpha, clip):
    tau = munchausen_temperature(lambda_ent, alpha)
    x = batch.features
    q = q_model.forward(x)
    qt = target_model.predict(x)
    v_next = np.where(
        batch.terminal[batch.dst],
        np.nan_to_num(batch.log_reward[batch.dst]),
        masked_logsumexp(qt[batch.dst], batch.n_actions[batch.dst], tau),
    )
    y = transition_log_pb(batch) + v_next
    if alpha > 0:
        logp, _ = masked_log_softmax(qt[batch.src], batch.n_actions[batch.src], tau)
        y = y + munchausen_bonus(logp[np.arange(batch.src.size), batch.action], alpha, tau, clip)
    res = q[batch.src, batch.action] - y
    m = res.size
    d_q = np.zeros_like(q)
    d_q[batch.src, batch.action] = 2.0 * res / m
    return float(np.mean(res**2)), {"q": q_model.backward(d_q)}


def soft_dqn_loss(q_model: MLP, target_model: MLP, batch: LossBatch, lambda_ent: float = 1.0):
    """Soft Q-learning TD loss with intermediate reward ``log P_B`` and terminal ``log R``."""
    return _soft_td(q_model, target_model, batch, lambda_ent, 0.0, None)


def mdqn_loss(
    q_model: MLP,
    target_model: MLP,
    batch: LossBatch,
    lambda_ent: float = 1.0,
    alpha: float = 0.9,
    clip: float | None = -1.0,
):
    """Munchausen soft Q-learning.

    The softmax temperature is ``lambda_ent / (1 - alpha)`` so that the
    unclipped fixed point has the same soft values and policy as soft
    Q-learning with entropy weight ``lambda_ent``.
    """
    return _soft_td(q_model, target_model, batch, lambda_ent, alpha, clip)


def soft_q_iteration(
    graph: StateGraph,
    lambda_ent: float = 1.0,
    alpha: float = 0.0,
    clip: float | None = None,
    threshold: float = 1e-13,
    max_iters: int = 100_000,
):
    """Synchronous tabular (Munchausen) soft Q-iteration from ``Q = 0``.

    Returns ``(Q, V, iterations)`` with ``V`` the soft value at the
    fixed-point temperature ``lambda_ent``.
    """
    tau = munchausen_temperature(lambda_ent, alpha)
    kids = graph.children
    valid = kids >= 0
    safe = np.maximum(kids, 0)
    r = np.where(valid, -np.log(np.maximum(graph.n_parents[safe], 1)), 0.0)
    term_next = valid & graph.terminal[safe]
    log_r = np.log(np.where(graph.terminal, graph.rewards, 1.0))
    q = np.zeros(kids.shape)
    for it in range(1, max_iters + 1):
        v = masked_logsumexp(q, graph.n_actions, tau)
        v_next = np.where(term_next, log_r[safe], v[safe])
        new = r + v_next
        if alpha > 0:
            logp, _ = masked_log_softmax(q, graph.n_actions, tau)
            new = new + munchausen_bonus(logp, alpha, tau, clip)
        new = np.where(valid, new, 0.0)
        delta = float(np.max(np.abs(new - q)))
        q = new
        if delta < threshold:
            break
    v = masked_logsumexp(q, graph.n_actions, tau)
    v[graph.terminal] = log_r[graph.terminal]
    return q, v, it


# --------------------------------------------------------------------------
# exact tabular solutions as models


def _table_model(graph: StateGraph, values: np.ndarray) -> MLP:
    values = np.atleast_2d(values.T).T if values.ndim == 1 else values
    model = MLP((graph.n, values.shape[1]))
    w, _ = model.layers[0]
    w[...] = values.T
    return model


@dataclass
class ExactModels:
    encoder: IndexEncoder
    flow: MLP
    edge: MLP
    pf: MLP
    log_z: Scalar
    q: MLP
    pb: str = "uniform"
    extra: dict = field(default_factory=dict)


def exact_models(graph: StateGraph) -> ExactModels:
    """Tabular models holding the exact solution of every objective."""
    from .exact import flow_iteration, forward_policy_from_flows

    F = flow_iteration(graph)
    log_f = np.log(F)
    kids = graph.children
    valid = kids >= 0
    safe = np.maximum(kids, 0)
    log_edge = np.where(valid, log_f[safe] - np.log(np.maximum(graph.n_parents[safe], 1)), 0.0)
    pf = forward_policy_from_flows(graph, F)
    with np.errstate(divide="ignore"):
        log_pf = np.where(valid, np.log(pf), 0.0)
    return ExactModels(
        encoder=IndexEncoder(graph),
        flow=_table_model(graph, log_f),
        edge=_table_model(graph, log_edge),
        pf=_table_model(graph, log_pf),
        log_z=Scalar(log_f[0]),
        q=_table_model(graph, log_edge),
    )
