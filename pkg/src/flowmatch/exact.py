"""Exact tabular solvers and brute-force oracles.

Flow iteration propagates state flows backwards from the terminals;
policy evaluation propagates values of a fixed policy. On a DAG one sweep
in reverse topological order reaches the fixed point of either, so that
is the default. The threshold-driven loop is kept (``method="iterative"``)
for arbitrary sweep orders.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .env import State, StateGraph, Trajectory

CONSISTENT = "CONSISTENT"
VIOLATED = "VIOLATED"
G_RTOL = 1e-9
TRAJECTORY_CAP = 10**6


class DegenerateFlowError(ArithmeticError):
    pass


class PreconditionError(RuntimeError):
    """The g-factor consistency condition does not hold for this env."""


@dataclass
class GFactor:
    g: np.ndarray
    flag: str
    witness: tuple[Trajectory, Trajectory] | None = None
    witness_state: State | None = None
    exact: list[Fraction] | None = field(default=None, repr=False)

    @property
    def consistent(self) -> bool:
        return self.flag == CONSISTENT


@dataclass
class ExactDistribution:
    probs: np.ndarray  # per state id, zero off terminals
    Z: float

    def as_dict(self, graph: StateGraph) -> dict[str, float]:
        return {graph.key(i): float(self.probs[i]) for i in graph.terminal_ids}


def _resolve_pb(graph: StateGraph, pb) -> np.ndarray:
    if pb is None or (isinstance(pb, str) and pb == "uniform"):
        return graph.uniform_pb()
    pb = np.asarray(pb, dtype=float)
    if pb.shape != graph.children.shape:
        raise ValueError(f"backward policy table must have shape {graph.children.shape}")
    return pb


def _resolve_policy(graph: StateGraph, policy) -> np.ndarray:
    if policy is None or (isinstance(policy, str) and policy == "uniform"):
        return graph.uniform_policy()
    pi = np.asarray(policy, dtype=float)
    if pi.shape != graph.children.shape:
        raise ValueError(f"policy table must have shape {graph.children.shape}")
    rows = ~graph.terminal
    if np.any(pi[~graph.action_mask()] != 0):
        raise ValueError("policy puts mass on unavailable actions")
    sums = pi[rows].sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.flatnonzero(rows)[np.argmax(np.abs(sums - 1.0))])
        raise ValueError(f"policy row for {graph.key(bad)!r} does not sum to 1")
    return pi


def _backup(graph: StateGraph, table: np.ndarray, weights: np.ndarray, ids: np.ndarray) -> np.ndarray:
    kids = graph.children[ids]
    vals = np.where(kids >= 0, table[np.maximum(kids, 0)], 0.0)
    return (vals * weights[ids]).sum(axis=1)


def _solve(graph, weights, terminal_values, threshold, method, order):
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    table = np.zeros(graph.n)
    table[graph.terminal] = terminal_values[graph.terminal]
    inner = ~graph.terminal
    if method == "sweep":
        for layer in reversed(graph.layers):
            ids = layer[inner[layer]]
            if ids.size:
                table[ids] = _backup(graph, table, weights, ids)
        return table
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    ids = np.flatnonzero(inner) if order is None else np.asarray(order)
    ids = ids[inner[ids]]
    while True:
        delta = 0.0
        for i in ids:
            old = table[i]
            table[i] = _backup(graph, table, weights, np.array([i]))[0]
            delta = max(delta, abs(old - table[i]))
        if delta < threshold:
            return table


def flow_iteration(
    graph: StateGraph,
    pb=None,
    threshold: float = 1e-12,
    method: str = "sweep",
    order: Sequence[int] | None = None,
) -> np.ndarray:
    """State flows with ``F(x) = R(x)`` and ``F(s) = sum P_B(s|s') F(s')``.

    Args:
        graph: enumerated environment with rewards attached.
        pb: ``None``/``"uniform"`` or a per-edge table shaped like
            ``graph.children`` holding ``P_B(s | child(s, a))``.
        threshold: stopping tolerance for the iterative method.
        method: ``"sweep"`` (one reverse-topological pass) or ``"iterative"``.
        order: state visiting order for the iterative method.
    """
    return _solve(graph, _resolve_pb(graph, pb), graph.rewards, threshold, method, order)


def policy_evaluation(
    graph: StateGraph,
    policy=None,
    terminal_values: np.ndarray | None = None,
    threshold: float = 1e-12,
    method: str = "sweep",
    order: Sequence[int] | None = None,
) -> np.ndarray:
    """Values of a fixed policy with zero transition reward and no discount."""
    pi = _resolve_policy(graph, policy)
    tv = graph.rewards if terminal_values is None else np.asarray(terminal_values, dtype=float)
    if tv.shape != (graph.n,):
        raise ValueError("terminal_values must be indexed by state id")
    return _solve(graph, pi, tv, threshold, method, order)


def _path_to(graph: StateGraph, via: np.ndarray, i: int) -> tuple[list[int], list[int]]:
    ids, acts = [i], []
    while ids[-1] != 0:
        p, a = via[ids[-1]]
        ids.append(int(p))
        acts.append(int(a))
    return ids[::-1], acts[::-1]


def _prefix(graph: StateGraph, ids: list[int], acts: list[int]) -> Trajectory:
    g = [1.0]
    for t, a in enumerate(acts):
        g.append(g[-1] * graph.n_actions[ids[t]] / graph.n_parents[ids[t + 1]])
    return Trajectory([graph.states[i] for i in ids], list(acts), g)


def compute_g(graph: StateGraph, exact: bool = False, rtol: float = G_RTOL) -> GFactor:
    """Propagate ``g(child) = g(parent) * |A(parent)| / |B(child)|`` forward.

    Every incoming edge proposes a value for the child; if two proposals
    disagree the result is flagged ``VIOLATED`` and the first offending
    pair of paths is recorded. With ``exact=True`` the comparison uses
    rational arithmetic.
    """
    g = np.zeros(graph.n)
    g[0] = 1.0
    gq: list[Fraction] | None = [Fraction(0)] * graph.n if exact else None
    if gq is not None:
        gq[0] = Fraction(1)
    via = np.full((graph.n, 2), -1, dtype=np.int64)
    flag, witness, witness_state = CONSISTENT, None, None
    for i in graph.topo_order[1:]:
        i = int(i)
        nb = graph.n_parents[i]
        for j in range(nb):
            p, a = graph.parent_edges[i, j]
            cand = g[p] * graph.n_actions[p] / nb
            if j == 0:
                g[i] = cand
                via[i] = (p, a)
                if gq is not None:
                    gq[i] = gq[p] * int(graph.n_actions[p]) / int(nb)
                continue
            if gq is not None:
                same = gq[p] * int(graph.n_actions[p]) / int(nb) == gq[i]
            else:
                same = math.isclose(cand, g[i], rel_tol=rtol, abs_tol=0.0)
            if not same and flag == CONSISTENT:
                flag = VIOLATED
                witness_state = graph.states[i]
                ids1, acts1 = _path_to(graph, via, i)
                ids2, acts2 = _path_to(graph, via, int(p))
                witness = (_prefix(graph, ids1, acts1), _prefix(graph, ids2 + [i], acts2 + [int(a)]))
    return GFactor(g=g, flag=flag, witness=witness, witness_state=witness_state, exact=gq)


@dataclass
class EquivalenceReport:
    max_discrepancy: float
    passed: bool
    threshold: float
    flow: np.ndarray = field(repr=False)
    value: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "max_discrepancy": self.max_discrepancy,
                "passed": self.passed,
                "threshold": self.threshold,
                "flow_s0": float(self.flow[0]),
                "value_s0": float(self.value[0]),
            }
        )


def check_equivalence(graph: StateGraph, threshold: float = 1e-9, gf: GFactor | None = None) -> EquivalenceReport:
    """Compare uniform-policy values on g-scaled rewards with ``F * g``."""
    gf = compute_g(graph) if gf is None else gf
    if not gf.consistent:
        raise PreconditionError(
            f"g-factor is path dependent at state {graph.env.key(gf.witness_state)!r}"
        )
    F = flow_iteration(graph)
    V = policy_evaluation(graph, "uniform", graph.rewards * gf.g)
    err = float(np.max(np.abs(V - F * gf.g)))
    return EquivalenceReport(err, err < threshold, threshold, F, V, gf.g)


def forward_policy_from_flows(graph: StateGraph, flow: np.ndarray, pb=None) -> np.ndarray:
    """``P_F(s'|s) = F(s') P_B(s|s') / F(s)`` on every edge."""
    pbt = _resolve_pb(graph, pb)
    inner = ~graph.terminal
    if np.any(flow[inner] <= 0):
        bad = int(np.flatnonzero(inner & (flow <= 0))[0])
        raise DegenerateFlowError(f"zero flow at reachable state {graph.key(bad)!r}")
    kids = graph.children
    kid_flow = np.where(kids >= 0, flow[np.maximum(kids, 0)], 0.0)
    pf = np.zeros(kids.shape)
    pf[inner] = kid_flow[inner] * pbt[inner] / flow[inner, None]
    return pf


def exact_terminal_distribution(graph: StateGraph, flow: np.ndarray, pb=None) -> ExactDistribution:
    pf = forward_policy_from_flows(graph, flow, pb)
    return ExactDistribution(graph.push_forward(pf), float(flow[0]))


def enumerate_trajectories(graph: StateGraph, cap: int = TRAJECTORY_CAP) -> list[Trajectory]:
    """Every complete trajectory, by depth-first search."""
    out: list[Trajectory] = []
    stack: list[tuple[list[int], list[int], list[float]]] = [([0], [], [1.0])]
    while stack:
        ids, acts, g = stack.pop()
        i = ids[-1]
        if graph.terminal[i]:
            out.append(Trajectory([graph.states[j] for j in ids], acts, g))
            if len(out) > cap:
                raise RuntimeError(f"more than {cap} trajectories")
            continue
        na = graph.n_actions[i]
        for a in range(na - 1, -1, -1):
            c = int(graph.children[i, a])
            stack.append((ids + [c], acts + [a], g + [g[-1] * na / graph.n_parents[c]]))
    return out


def trajectory_g_oracle(graph: StateGraph, trajectories: list[Trajectory], rtol: float = G_RTOL) -> tuple[bool, dict]:
    """Check running g-values for path independence by brute force.

    Returns ``(consistent, values)`` where ``values`` maps state key to the
    list of distinct g-values observed.
    """
    seen: dict[str, list[float]] = {}
    for tr in trajectories:
        for s, gv in zip(tr.states, tr.g):
            vals = seen.setdefault(graph.env.key(s), [])
            if not any(math.isclose(gv, v, rel_tol=rtol, abs_tol=0.0) for v in vals):
                vals.append(gv)
    return all(len(v) == 1 for v in seen.values()), seen


def trajectory_flows(graph: StateGraph, trajectories: list[Trajectory]) -> np.ndarray:
    """State flows as sums of trajectory flows under the uniform backward policy.

    The flow of a complete trajectory is ``R(x) * prod P_B`` along it; the
    flow of a state is the total over trajectories that pass through it.
    """
    F = np.zeros(graph.n)
    for tr in trajectories:
        ids = [graph.index[s] for s in tr.states]
        w = graph.rewards[ids[-1]]
        for i in ids[1:]:
            w /= graph.n_parents[i]
        F[ids] += w
    return F


def table_tsv(graph: StateGraph, values: np.ndarray) -> str:
    return "".join(f"{graph.key(i)}\t{float(values[i])!r}\n" for i in range(graph.n))
