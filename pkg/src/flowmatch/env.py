"""DAG environments for compositional generation.

States are plain hashable Python values (tuples). Every environment maps
a state to a canonical string encoding, which doubles as the key for
explicit reward tables and TSV exports. ``StateGraph`` enumerates a small
environment into dense integer ids (id 0 is always the initial state) and
numpy tables that the exact solvers and the metric code operate on.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Hashable, Iterable, Sequence

import numpy as np

DEFAULT_CAP = 10**7
DEFAULT_REWARD_RANGE = (0.001, 10.0)
SYMBOLS = "0123456789abcdefghijklmnopqrstuvwxyz"

State = Hashable


class EnvError(ValueError):
    """Invalid environment or reward construction."""


class EnumerationCapError(RuntimeError):
    """Raised when an environment is too large to enumerate."""


def enumeration_cap(cap: int | None = None) -> int:
    if cap is not None:
        return int(cap)
    raw = os.environ.get("FLOWMATCH_CAP")
    return int(float(raw)) if raw else DEFAULT_CAP


class DagEnv:
    """Base class for deterministic constructive environments.

    Subclasses provide ``initial``, ``action_count``, ``child``,
    ``parents``, ``is_terminal``, ``key`` and ``encode``. Actions from a
    state are indexed ``0 .. action_count(s) - 1``.
    """

    name = "dag"
    # whether running g-values are known to be path independent by construction
    path_independent_g: bool | None = None
    max_depth: int
    max_actions: int
    max_parents: int
    encoding_dim: int

    def __init__(self) -> None:
        self._reward: dict[str, float] | None = None
        self._reward_fn = None
        self._memo: dict = {}
        self.reward_spec: RewardSpec | None = None

    # structure -----------------------------------------------------------
    def initial(self) -> State:
        raise NotImplementedError

    def action_count(self, s: State) -> int:
        raise NotImplementedError

    def child(self, s: State, a: int) -> State:
        raise NotImplementedError

    def parents(self, s: State) -> list[tuple[State, int]]:
        raise NotImplementedError

    def is_terminal(self, s: State) -> bool:
        raise NotImplementedError

    def key(self, s: State) -> str:
        raise NotImplementedError

    def parse(self, key: str) -> State:
        raise NotImplementedError

    def encode(self, s: State) -> np.ndarray:
        raise NotImplementedError

    def distance(self, x: State, y: State) -> int:
        raise NotImplementedError

    def state_count_bound(self) -> int:
        """Upper bound on the number of states, used before enumeration."""
        raise NotImplementedError

    def terminals(self) -> Iterable[State]:
        raise NotImplementedError

    # derived helpers -----------------------------------------------------
    def info(self, s: State) -> "StateInfo":
        """Cached neighbourhood of ``s``."""
        try:
            return self._memo[s]
        except KeyError:
            pass
        kids = tuple(self.children(s))
        ps = tuple(self.parents(s))
        inf = StateInfo(kids, ps, self.is_terminal(s), self.encode(s))
        self._memo[s] = inf
        return inf

    def children(self, s: State) -> list[State]:
        return [self.child(s, a) for a in range(self.action_count(s))]

    def parent_count(self, s: State) -> int:
        return len(self.parents(s))

    def encode_batch(self, states: Sequence[State]) -> np.ndarray:
        if not states:
            return np.zeros((0, self.encoding_dim))
        return np.stack([self.info(s).encoding for s in states])

    # reward --------------------------------------------------------------
    @property
    def has_reward(self) -> bool:
        return self._reward is not None or self._reward_fn is not None

    def reward(self, x: State) -> float:
        if not self.is_terminal(x):
            raise EnvError(f"reward requested for non-terminal state {self.key(x)!r}")
        if self._reward is not None:
            return self._reward[self.key(x)]
        if self._reward_fn is not None:
            return float(self._reward_fn(x))
        raise EnvError("no reward attached; call attach_reward first")

    def log_reward(self, x: State) -> float:
        return math.log(self.reward(x))


@dataclass(frozen=True, eq=False)
class StateInfo:
    children: tuple
    parents: tuple
    terminal: bool
    encoding: np.ndarray

    @property
    def n_actions(self) -> int:
        return len(self.children)

    @property
    def n_parents(self) -> int:
        return len(self.parents)


@dataclass
class Trajectory:
    """A path from s0 with its actions and running g-values.

    ``g[t]`` is the product of ``|A(s_i)| / |B(s_{i+1})|`` over the first
    ``t`` steps, so ``g[0] == 1``.
    """

    states: list
    actions: list[int]
    g: list[float]

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def terminal(self):
        return self.states[-1]


# --------------------------------------------------------------------------
# Sequences


class _SequenceEnv(DagEnv):
    def __init__(self, alphabet_size: int, length: int) -> None:
        super().__init__()
        if alphabet_size < 2:
            raise EnvError("alphabet_size must be >= 2")
        if alphabet_size > len(SYMBOLS):
            raise EnvError(f"alphabet_size must be <= {len(SYMBOLS)}")
        self.alphabet_size = alphabet_size
        self.length = length
        self.max_depth = length
        self.encoding_dim = length * alphabet_size

    def initial(self) -> tuple[int, ...]:
        return ()

    def is_terminal(self, s) -> bool:
        return len(s) == self.length

    def key(self, s) -> str:
        return "".join(SYMBOLS[c] for c in s)

    def parse(self, key: str) -> tuple[int, ...]:
        try:
            s = tuple(SYMBOLS.index(ch) for ch in key)
        except ValueError:
            raise EnvError(f"bad sequence encoding {key!r}") from None
        if len(s) > self.length or any(c >= self.alphabet_size for c in s):
            raise EnvError(f"bad sequence encoding {key!r}")
        return s

    def encode(self, s) -> np.ndarray:
        v = np.zeros(self.encoding_dim)
        for i, c in enumerate(s):
            v[i * self.alphabet_size + c] = 1.0
        return v

    def distance(self, x, y) -> int:
        return sum(a != b for a, b in zip(x, y)) + abs(len(x) - len(y))

    def state_count_bound(self) -> int:
        return sum(self.alphabet_size**t for t in range(self.length + 1))

    def terminals(self):
        return product(range(self.alphabet_size), repeat=self.length)


class TreeSeqEnv(_SequenceEnv):
    """Left-to-right sequence construction; every state has one parent."""

    name = "tree_seq"
    path_independent_g = True

    def __init__(self, alphabet_size: int, length: int) -> None:
        if length < 1:
            raise EnvError("length must be >= 1")
        super().__init__(alphabet_size, length)
        self.max_actions = alphabet_size
        self.max_parents = 1

    def action_count(self, s) -> int:
        return 0 if len(s) == self.length else self.alphabet_size

    def child(self, s, a):
        if not 0 <= a < self.action_count(s):
            raise IndexError(f"action {a} invalid at {self.key(s)!r}")
        return s + (a,)

    def parents(self, s):
        if not s:
            return []
        return [(s[:-1], s[-1])]


class PrependAppendEnv(_SequenceEnv):
    """Sequences built by prepending or appending one symbol per step.

    Actions ``0..K-1`` append symbol ``a``; actions ``K..2K-1`` prepend
    symbol ``a - K``. From the empty string only the K append actions
    exist, since prepending and appending coincide there.
    """

    name = "prepend_append"
    path_independent_g = True

    def __init__(self, alphabet_size: int, length: int) -> None:
        if length < 2:
            raise EnvError("length must be >= 2")
        super().__init__(alphabet_size, length)
        self.max_actions = 2 * alphabet_size
        self.max_parents = 2

    def action_count(self, s) -> int:
        if len(s) == self.length:
            return 0
        return self.alphabet_size if not s else 2 * self.alphabet_size

    def child(self, s, a):
        if not 0 <= a < self.action_count(s):
            raise IndexError(f"action {a} invalid at {self.key(s)!r}")
        k = self.alphabet_size
        return s + (a,) if a < k else (a - k,) + s

    def parents(self, s):
        if not s:
            return []
        if len(s) == 1:
            return [((), s[0])]
        k = self.alphabet_size
        return [(s[:-1], s[-1]), (s[1:], k + s[0])]


# --------------------------------------------------------------------------
# Sets


class SetGenEnv(DagEnv):
    """Build a subset of ``{0..universe-1}`` one element at a time.

    Action ``a`` adds the ``a``-th missing element in increasing order.
    """

    name = "set_gen"
    path_independent_g = True

    def __init__(self, universe: int, set_size: int) -> None:
        super().__init__()
        if not 1 <= set_size <= universe:
            raise EnvError("need 1 <= set_size <= universe")
        if universe > 64:
            raise EnvError("universe must be <= 64")
        self.universe = universe
        self.set_size = set_size
        self.max_depth = set_size
        self.max_actions = universe
        self.max_parents = set_size
        self.encoding_dim = universe

    def initial(self) -> tuple[int, ...]:
        return ()

    def _missing(self, s) -> list[int]:
        present = set(s)
        return [e for e in range(self.universe) if e not in present]

    def action_count(self, s) -> int:
        return 0 if len(s) == self.set_size else self.universe - len(s)

    def child(self, s, a):
        if not 0 <= a < self.action_count(s):
            raise IndexError(f"action {a} invalid at {self.key(s)!r}")
        return tuple(sorted(s + (self._missing(s)[a],)))

    def parents(self, s):
        out = []
        for e in s:
            p = tuple(x for x in s if x != e)
            out.append((p, self._missing(p).index(e)))
        return out

    def is_terminal(self, s) -> bool:
        return len(s) == self.set_size

    def key(self, s) -> str:
        return ",".join(str(e) for e in s)

    def parse(self, key: str):
        if key == "":
            return ()
        try:
            s = tuple(sorted(int(t) for t in key.split(",")))
        except ValueError:
            raise EnvError(f"bad set encoding {key!r}") from None
        if len(set(s)) != len(s) or len(s) > self.set_size or any(not 0 <= e < self.universe for e in s):
            raise EnvError(f"bad set encoding {key!r}")
        return s

    def encode(self, s) -> np.ndarray:
        v = np.zeros(self.universe)
        v[list(s)] = 1.0
        return v

    def distance(self, x, y) -> int:
        return len(set(x) ^ set(y))

    def state_count_bound(self) -> int:
        return sum(math.comb(self.universe, t) for t in range(self.set_size + 1))

    def terminals(self):
        return combinations(range(self.universe), self.set_size)


# --------------------------------------------------------------------------
# HyperGrid


class HyperGridEnv(DagEnv):
    """Lattice walk with an explicit terminate action.

    A state is ``(coords, done)``. Available actions at a lattice point are
    the coordinate increments that stay inside the grid, in coordinate
    order, followed by the terminate action. Borders make the number of
    actions state dependent, so trajectory scaling factors are generally
    path dependent here.
    """

    name = "hypergrid"
    path_independent_g = False

    def __init__(self, dim: int, side: int) -> None:
        super().__init__()
        if dim < 2 or side < 3:
            raise EnvError("need dim >= 2 and side >= 3")
        self.dim = dim
        self.side = side
        self.max_depth = dim * (side - 1) + 1
        self.max_actions = dim + 1
        self.max_parents = dim
        self.encoding_dim = dim * side + 1

    def initial(self):
        return ((0,) * self.dim, False)

    def _moves(self, coords) -> list[int]:
        return [i for i, c in enumerate(coords) if c < self.side - 1]

    def action_count(self, s) -> int:
        coords, done = s
        return 0 if done else len(self._moves(coords)) + 1

    def child(self, s, a):
        coords, done = s
        moves = [] if done else self._moves(coords)
        if done or not 0 <= a <= len(moves):
            raise IndexError(f"action {a} invalid at {self.key(s)!r}")
        if a == len(moves):
            return (coords, True)
        i = moves[a]
        return (coords[:i] + (coords[i] + 1,) + coords[i + 1 :], False)

    def parents(self, s):
        coords, done = s
        if done:
            return [((coords, False), len(self._moves(coords)))]
        out = []
        for i, c in enumerate(coords):
            if c > 0:
                p = coords[:i] + (c - 1,) + coords[i + 1 :]
                out.append(((p, False), self._moves(p).index(i)))
        return out

    def is_terminal(self, s) -> bool:
        return s[1]

    def key(self, s) -> str:
        coords, done = s
        return ",".join(map(str, coords)) + ("!" if done else "")

    def parse(self, key: str):
        done = key.endswith("!")
        try:
            coords = tuple(int(t) for t in key.rstrip("!").split(","))
        except ValueError:
            raise EnvError(f"bad grid encoding {key!r}") from None
        if len(coords) != self.dim or any(not 0 <= c < self.side for c in coords):
            raise EnvError(f"bad grid encoding {key!r}")
        return (coords, done)

    def encode(self, s) -> np.ndarray:
        coords, done = s
        v = np.zeros(self.encoding_dim)
        for i, c in enumerate(coords):
            v[i * self.side + c] = 1.0
        v[-1] = float(done)
        return v

    def distance(self, x, y) -> int:
        return sum(abs(a - b) for a, b in zip(x[0], y[0]))

    def state_count_bound(self) -> int:
        return 2 * self.side**self.dim

    def terminals(self):
        return ((c, True) for c in product(range(self.side), repeat=self.dim))


def tree_seq_env(alphabet_size: int, length: int, cap: int | None = None) -> TreeSeqEnv:
    env = TreeSeqEnv(alphabet_size, length)
    _check_cap(env, cap)
    return env


def prepend_append_env(alphabet_size: int, length: int, cap: int | None = None) -> PrependAppendEnv:
    env = PrependAppendEnv(alphabet_size, length)
    _check_cap(env, cap)
    return env


def set_gen_env(universe: int, set_size: int, cap: int | None = None) -> SetGenEnv:
    env = SetGenEnv(universe, set_size)
    _check_cap(env, cap)
    return env


def hypergrid_env(dim: int, side: int, cap: int | None = None) -> HyperGridEnv:
    env = HyperGridEnv(dim, side)
    _check_cap(env, cap)
    return env


def _check_cap(env: DagEnv, cap: int | None) -> None:
    limit = enumeration_cap(cap)
    n = env.state_count_bound()
    if n > limit:
        raise EnumerationCapError(f"{env.name}: {n} states exceeds enumeration cap {limit}")


ENV_FAMILIES = {
    "tree_seq": (TreeSeqEnv, ("alphabet_size", "length")),
    "prepend_append": (PrependAppendEnv, ("alphabet_size", "length")),
    "set_gen": (SetGenEnv, ("universe", "set_size")),
    "hypergrid": (HyperGridEnv, ("dim", "side")),
}


# --------------------------------------------------------------------------
# Rewards


@dataclass
class RewardSpec:
    """How terminal rewards are assigned.

    kind is one of ``"table"`` (explicit ``{encoding: reward}``),
    ``"target_set"`` (``base + peak * exp(-d / width)`` with ``d`` the
    distance to the nearest target), ``"uniform"`` (constant ``value``) or
    ``"corner"`` (the usual corner-peaked HyperGrid reward). If
    ``normalize`` is a ``(lo, hi)`` pair, rewards are min-max rescaled into
    that range after construction.
    """

    kind: str = "uniform"
    table: dict[str, float] | None = None
    targets: list[str] | None = None
    num_targets: int = 4
    min_separation: int | None = None
    base: float = 0.0
    peak: float = 1.0
    width: float = 1.0
    value: float = 1.0
    corner: tuple[float, float, float] = (0.1, 0.5, 2.0)
    normalize: tuple[float, float] | None = None
    seed: int = 0
    planted: list[str] = field(default_factory=list, repr=False)


def load_reward_table(path: str | os.PathLike) -> dict[str, float]:
    """Read a two-column TSV of ``encoding<TAB>reward``."""
    table: dict[str, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise EnvError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                table[row[0]] = float(row[1])
            except ValueError:
                raise EnvError(f"{path}:{lineno}: bad reward {row[1]!r}") from None
    return table


def plant_targets(env: DagEnv, k: int, min_separation: int | None, seed: int) -> list:
    """Pick ``k`` random terminals with pairwise distance > ``min_separation``."""
    rng = np.random.default_rng(seed)
    terminals = list(env.terminals())
    order = rng.permutation(len(terminals))
    chosen: list = []
    for i in order:
        x = terminals[i]
        if min_separation is None or all(env.distance(x, y) > min_separation for y in chosen):
            chosen.append(x)
            if len(chosen) == k:
                return chosen
    raise EnvError(f"could not plant {k} targets with separation > {min_separation}")


def _corner_reward(env: HyperGridEnv, x, r0: float, r1: float, r2: float) -> float:
    z = np.abs(np.asarray(x[0]) / (env.side - 1) - 0.5)
    return r0 + r1 * float(np.all(z > 0.25)) + r2 * float(np.all((z > 0.3) & (z < 0.4)))


def attach_reward(env: DagEnv, spec: RewardSpec) -> DagEnv:
    """Attach terminal rewards to ``env`` in place and return it.

    Rewards are materialised into a table keyed by terminal encoding, so
    the environment must be small enough to list its terminals.
    """
    terminals = list(env.terminals())
    keys = [env.key(x) for x in terminals]
    if spec.kind == "table":
        if spec.table is None:
            raise EnvError("table reward needs a table")
        missing = [k for k in keys if k not in spec.table]
        if missing:
            raise EnvError(f"reward table missing {len(missing)} terminal(s), e.g. {missing[0]!r}")
        values = np.array([float(spec.table[k]) for k in keys])
    elif spec.kind == "uniform":
        values = np.full(len(keys), float(spec.value))
    elif spec.kind == "target_set":
        if spec.width < 0:
            raise EnvError("width must be >= 0")
        if spec.targets:
            targets = [env.parse(t) for t in spec.targets]
            for t in targets:
                if not env.is_terminal(t):
                    raise EnvError(f"target {env.key(t)!r} is not terminal")
        else:
            targets = plant_targets(env, spec.num_targets, spec.min_separation, spec.seed)
        spec.planted = [env.key(t) for t in targets]
        d = np.array([min(env.distance(x, t) for t in targets) for x in terminals], dtype=float)
        if spec.width == 0:
            bump = (d == 0).astype(float)
        else:
            bump = np.exp(-d / spec.width)
        values = spec.base + spec.peak * bump
    elif spec.kind == "corner":
        if not isinstance(env, HyperGridEnv):
            raise EnvError("corner reward only applies to hypergrid")
        values = np.array([_corner_reward(env, x, *spec.corner) for x in terminals])
    else:
        raise EnvError(f"unknown reward kind {spec.kind!r}")

    if spec.normalize is not None:
        lo, hi = spec.normalize
        if not 0 < lo <= hi:
            raise EnvError("normalize range must satisfy 0 < lo <= hi")
        vmin, vmax = values.min(), values.max()
        if vmax > vmin:
            values = lo + (values - vmin) / (vmax - vmin) * (hi - lo)
        else:
            values = np.full_like(values, hi)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise EnvError("rewards must be finite and strictly positive")
    env._reward = dict(zip(keys, values.tolist()))
    env.reward_spec = spec
    return env


# --------------------------------------------------------------------------
# Enumeration


class StateGraph:
    """Dense tabular view of an enumerable environment.

    Attributes:
        states: state objects, ``states[0]`` is the initial state.
        index: inverse map from state to id.
        children: ``(n, max_actions)`` child ids, ``-1`` where no action.
        n_actions, n_parents: per-state counts.
        terminal: boolean mask.
        level: longest-path depth; every edge goes to a strictly higher level.
        layers: ids grouped by level, in increasing level order.
        parent_edges: ``(n, max_parents, 2)`` of ``(parent id, action)``, ``-1`` padded.
    """

    def __init__(self, env: DagEnv, cap: int | None = None) -> None:
        limit = enumeration_cap(cap)
        if env.state_count_bound() > limit:
            raise EnumerationCapError(
                f"{env.name}: {env.state_count_bound()} states exceeds enumeration cap {limit}"
            )
        self.env = env
        s0 = env.initial()
        states = [s0]
        index = {s0: 0}
        frontier = [s0]
        while frontier:
            nxt = []
            for s in frontier:
                for c in env.children(s):
                    if c not in index:
                        index[c] = len(states)
                        states.append(c)
                        nxt.append(c)
                        if len(states) > limit:
                            raise EnumerationCapError(f"{env.name}: more than {limit} states")
            frontier = nxt
        n = len(states)
        self.states = states
        self.index = index
        self.n = n
        self.children = np.full((n, max(env.max_actions, 1)), -1, dtype=np.int64)
        self.n_actions = np.zeros(n, dtype=np.int64)
        self.terminal = np.zeros(n, dtype=bool)
        for i, s in enumerate(states):
            kids = env.children(s)
            self.n_actions[i] = len(kids)
            self.children[i, : len(kids)] = [index[c] for c in kids]
            self.terminal[i] = env.is_terminal(s)
        self.n_parents = np.zeros(n, dtype=np.int64)
        self.parent_edges = np.full((n, max(env.max_parents, 1), 2), -1, dtype=np.int64)
        for i, s in enumerate(states):
            ps = env.parents(s)
            self.n_parents[i] = len(ps)
            for j, (p, a) in enumerate(ps):
                self.parent_edges[i, j] = (index[p], a)
        self._compute_levels()
        self.terminal_ids = np.flatnonzero(self.terminal)
        self._rewards: np.ndarray | None = None
        self._encodings: np.ndarray | None = None

    def _compute_levels(self) -> None:
        # Kahn's algorithm over parent counts; level = longest path from s0.
        indeg = self.n_parents.copy()
        level = np.zeros(self.n, dtype=np.int64)
        order = [0]
        head = 0
        while head < len(order):
            i = order[head]
            head += 1
            for c in self.children[i, : self.n_actions[i]]:
                level[c] = max(level[c], level[i] + 1)
                indeg[c] -= 1
                if indeg[c] == 0:
                    order.append(int(c))
        if len(order) != self.n:
            raise EnvError("transition graph has a cycle or unreachable parents")
        self.topo_order = np.asarray(order, dtype=np.int64)
        self.level = level
        self.layers = [np.flatnonzero(level == d) for d in range(int(level.max()) + 1)]

    @property
    def rewards(self) -> np.ndarray:
        """Reward per state id (zero at non-terminals)."""
        if self._rewards is None:
            r = np.zeros(self.n)
            for i in self.terminal_ids:
                r[i] = self.env.reward(self.states[i])
            self._rewards = r
        return self._rewards

    @property
    def encodings(self) -> np.ndarray:
        if self._encodings is None:
            self._encodings = self.env.encode_batch(self.states)
        return self._encodings

    def key(self, i: int) -> str:
        return self.env.key(self.states[i])

    def action_mask(self) -> np.ndarray:
        return np.arange(self.children.shape[1])[None, :] < self.n_actions[:, None]

    def uniform_pb(self) -> np.ndarray:
        """Per-edge ``P_B(s | child(s, a))`` for the uniform backward policy."""
        pb = np.zeros(self.children.shape)
        mask = self.children >= 0
        pb[mask] = 1.0 / self.n_parents[self.children[mask]]
        return pb

    def uniform_policy(self) -> np.ndarray:
        pi = np.zeros(self.children.shape)
        mask = self.action_mask()
        nz = self.n_actions > 0
        pi[mask] = np.repeat(1.0 / self.n_actions[nz], self.n_actions[nz])
        return pi

    def push_forward(self, policy: np.ndarray) -> np.ndarray:
        """Propagate unit mass from s0 through ``policy`` (rows over actions).

        Returns the probability of ending at each state id (non-zero only
        at terminals).
        """
        mass = np.zeros(self.n)
        mass[0] = 1.0
        for layer in self.layers:
            src = layer[self.n_actions[layer] > 0]
            if src.size == 0:
                continue
            kids = self.children[src]
            contrib = policy[src] * mass[src, None]
            valid = kids >= 0
            np.add.at(mass, kids[valid], contrib[valid])
        out = np.zeros(self.n)
        out[self.terminal] = mass[self.terminal]
        return out

    def target_distribution(self) -> np.ndarray:
        r = self.rewards
        return r / r.sum()


def enumerate_states(env: DagEnv, cap: int | None = None) -> StateGraph:
    return StateGraph(env, cap)
