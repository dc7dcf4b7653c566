import numpy as np
import pytest

from flowmatch.env import (
    RewardSpec,
    StateGraph,
    attach_reward,
    hypergrid_env,
    prepend_append_env,
    set_gen_env,
    tree_seq_env,
)

FACTORIES = {
    "tree_seq": tree_seq_env,
    "prepend_append": prepend_append_env,
    "set_gen": set_gen_env,
    "hypergrid": hypergrid_env,
}


def random_table(env, seed, lo=0.1, hi=5.0):
    rng = np.random.default_rng(seed)
    return {env.key(x): float(rng.uniform(lo, hi)) for x in env.terminals()}


def make_env(family, a, b, seed=0, kind="random"):
    """Small env with a reward attached; ``kind`` is 'random' or a RewardSpec."""
    env = FACTORIES[family](a, b)
    if kind == "random":
        spec = RewardSpec("table", table=random_table(env, seed))
    elif kind == "corner":
        spec = RewardSpec("corner")
    else:
        spec = kind
    return attach_reward(env, spec)


def make_graph(family, a, b, seed=0, kind="random"):
    return StateGraph(make_env(family, a, b, seed, kind))


@pytest.fixture
def setgen32():
    env = attach_reward(set_gen_env(3, 2), RewardSpec("table", table={"0,1": 1.0, "0,2": 2.0, "1,2": 4.0}))
    return StateGraph(env)


@pytest.fixture
def tree21():
    env = attach_reward(tree_seq_env(2, 1), RewardSpec("table", table={"0": 1.0, "1": 3.0}))
    return StateGraph(env)


@pytest.fixture
def tree22():
    table = {"00": 1.0, "01": 2.0, "10": 3.0, "11": 4.0}
    return StateGraph(attach_reward(tree_seq_env(2, 2), RewardSpec("table", table=table)))
