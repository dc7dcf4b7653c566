"""Loss functions: fixed points, gradients, perturbation and soft-RL correspondence."""

import numpy as np
import pytest

from flowmatch.approx import MLP, Adam, FeatureEncoder, IndexEncoder, Scalar
from flowmatch.env import RewardSpec, StateGraph, attach_reward, tree_seq_env
from flowmatch.exact import enumerate_trajectories, exact_terminal_distribution, flow_iteration
from flowmatch.objectives import (
    LossBatch,
    ObjectiveSpec,
    db_loss,
    db_residuals,
    exact_models,
    fm_loss,
    masked_log_softmax,
    masked_logsumexp,
    mdqn_loss,
    munchausen_bonus,
    munchausen_temperature,
    policy_from_flows,
    rpe_loss,
    rpe_targets,
    soft_dqn_loss,
    soft_q_iteration,
    subtb_loss,
    subtb_residuals,
    subtb_weights,
    tb_loss,
)

from conftest import make_graph

ENVS = [("set_gen", 3, 2), ("set_gen", 5, 3), ("tree_seq", 2, 3), ("prepend_append", 2, 3)]


def full_batch(graph, encoder=None):
    enc = IndexEncoder(graph) if encoder is None else encoder
    return LossBatch(graph.env, enumerate_trajectories(graph), enc)


def all_losses(ex, batch):
    return {
        "rpe": rpe_loss(ex.flow, batch)[0],
        "fm": fm_loss(ex.edge, batch)[0],
        "db": db_loss(ex.flow, ex.pf, "uniform", batch)[0],
        "tb": tb_loss(ex.pf, "uniform", ex.log_z, batch)[0],
        "subtb": subtb_loss(ex.flow, ex.pf, "uniform", batch, 0.9)[0],
        "soft_dqn": soft_dqn_loss(ex.q, ex.q, batch, 1.0)[0],
    }


class TestSpec:
    def test_defaults(self):
        s = ObjectiveSpec("tb")
        assert (s.subtb_lambda, s.lambda_ent, s.alpha, s.clip, s.target_sync) == (0.9, 1.0, 0.9, -1.0, 100)

    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "nope"},
            {"subtb_lambda": 0.0},
            {"subtb_lambda": 1.5},
            {"lambda_ent": 0.0},
            {"alpha": 1.0},
            {"clip": 0.5},
            {"target_sync": 0},
            {"pb": "weird"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ObjectiveSpec(**{"kind": "rpe", **kw})


class TestBatch:
    def test_layout(self, setgen32):
        b = full_batch(setgen32)
        assert b.n_trajectories == 6
        assert len(b.states) == 18 and b.src.size == 12
        np.testing.assert_array_equal(b.lengths, 2)
        assert np.all(b.terminal[b.starts + b.lengths])

    def test_parent_slot(self):
        g = make_graph("prepend_append", 2, 2)
        b = full_batch(g)
        for s, d, a, k in zip(b.src, b.dst, b.action, b.parent_slot):
            assert b.infos[d].parents[k] == (b.states[s], a)

    def test_incomplete_trajectory(self, setgen32):
        tr = enumerate_trajectories(setgen32)[0]
        tr.states.pop()
        tr.actions.pop()
        with pytest.raises(ValueError):
            LossBatch(setgen32.env, [tr])

    def test_empty(self, setgen32):
        with pytest.raises(ValueError):
            LossBatch(setgen32.env, [])


class TestNumerics:
    def test_masked_softmax(self):
        logits = np.array([[1.0, 2.0, 50.0], [0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        logp, p = masked_log_softmax(logits, np.array([2, 3, 0]))
        np.testing.assert_allclose(p[0], [1 / (1 + np.e), np.e / (1 + np.e), 0.0])
        np.testing.assert_allclose(p[1], 1 / 3)
        assert not p[2].any() and not logp[2].any()

    def test_logsumexp_temperature(self):
        v = np.array([[1.0, 2.0, 99.0]])
        out = masked_logsumexp(v, np.array([2]), 2.0)
        assert out[0] == pytest.approx(2.0 * np.log(np.exp(0.5) + np.exp(1.0)))


class TestFixedPoints:
    @pytest.mark.parametrize("family,a,b", ENVS)
    def test_exact_solution_zero_loss(self, family, a, b):
        g = make_graph(family, a, b, seed=2)
        ex = exact_models(g)
        losses = all_losses(ex, full_batch(g, ex.encoder))
        for name, value in losses.items():
            assert value < 1e-12, name

    @pytest.mark.parametrize("family,a,b", ENVS)
    def test_perturbation_raises_loss(self, family, a, b):
        g = make_graph(family, a, b, seed=3)
        rng = np.random.default_rng(0)
        for name in ("rpe", "fm", "db", "tb", "subtb", "soft_dqn"):
            ex = exact_models(g)
            batch = full_batch(g, ex.encoder)
            targets = {
                "rpe": [ex.flow],
                "fm": [ex.edge],
                "db": [ex.pf],
                "tb": [ex.pf, ex.log_z],
                "subtb": [ex.flow],
                "soft_dqn": [ex.q],
            }[name]
            for m in targets:
                m.params += 1e-3 * rng.choice([-1.0, 1.0], size=m.params.shape)
            if name == "soft_dqn":
                # keep the target network exact so the residual is visible
                loss = soft_dqn_loss(ex.q, exact_models(g).q, batch, 1.0)[0]
            else:
                loss = all_losses(ex, batch)[name]
            assert loss > 1e-8, name

    def test_rpe_target_identity(self):
        """With exact flows the bootstrapped target equals g(s) F(s) on every row."""
        for family, a, b in ENVS:
            g = make_graph(family, a, b, seed=9)
            ex = exact_models(g)
            batch = full_batch(g, ex.encoder)
            log_v, log_g = rpe_targets(ex.flow, batch)
            F = flow_iteration(g)
            ids = [g.index[s] for s in batch.states]
            np.testing.assert_allclose(np.exp(log_v), batch.g * F[ids], rtol=1e-12)
            np.testing.assert_allclose(np.exp(log_g), batch.g)

    def test_rpe_terminal_only_zero(self, tree21):
        ex = exact_models(tree21)
        # trajectories of length one: s0 then a terminal
        batch = full_batch(tree21, ex.encoder)
        loss, _ = rpe_loss(ex.flow, batch)
        assert loss == 0.0

    def test_rpe_uniform_constant(self):
        """Depth-1 tree with reward c: zero loss needs F(x) = c and F(s0) = K c."""
        k, c = 3, 2.0
        g = StateGraph(attach_reward(tree_seq_env(k, 1), RewardSpec("uniform", value=c)))
        batch = full_batch(g)
        m = MLP((g.n, 1))
        w, _ = m.layers[0]
        w[0, :] = np.log(c)
        # a constant flow matches every terminal but not the root
        assert rpe_loss(m, batch)[0] > 1.0
        w[0, 0] = np.log(k * c)
        assert rpe_loss(m, batch)[0] < 1e-24

    def test_rpe_missing_g(self, setgen32):
        trajs = enumerate_trajectories(setgen32)
        for t in trajs:
            t.g = []
        with pytest.raises(ValueError):
            rpe_loss(MLP((setgen32.n, 1)), LossBatch(setgen32.env, trajs, IndexEncoder(setgen32)))

    def test_fm_log_invariance(self, setgen32):
        """Doubling every edge flow into and out of an interior state leaves its residual unchanged."""
        ex = exact_models(setgen32)
        m = ex.edge
        w, _ = m.layers[0]
        rng = np.random.default_rng(1)
        w += rng.normal(scale=0.3, size=w.shape)
        batch = full_batch(setgen32, ex.encoder)

        def residual_at(state):
            j = batch.states.index(state)
            info = batch.infos[j]
            out_ = m.predict(ex.encoder([state]))[0, : info.n_actions]
            in_ = [m.predict(ex.encoder([p]))[0, a] for p, a in info.parents]
            return np.log(np.sum(np.exp(in_))) - np.log(np.sum(np.exp(out_)))

        s = (0,)
        before = residual_at(s)
        i = setgen32.index[s]
        w[:, i] += np.log(2.0)  # out-edges of s
        p0 = 0
        w[0, p0] += np.log(2.0)  # the single in-edge (s0 -> {0}) is action 0 of s0
        assert residual_at(s) == pytest.approx(before, abs=1e-12)

    def test_tb_depth_one(self, tree21):
        ex = exact_models(tree21)
        assert ex.log_z.value == pytest.approx(np.log(4.0))
        assert tb_loss(ex.pf, "uniform", ex.log_z, full_batch(tree21, ex.encoder))[0] < 1e-30


class TestSubTB:
    def test_weights(self):
        w = subtb_weights(3, 0.5)
        assert w.sum() == pytest.approx(1.0)
        assert w[0, 1] / w[0, 3] == pytest.approx(4.0)
        assert not np.triu(w, 1)[np.tril_indices(4)].any()

    def test_single_steps_are_db(self):
        g = make_graph("prepend_append", 2, 3)
        rng = np.random.default_rng(4)
        flow, pf = MLP((g.n, 1)), MLP((g.n, g.env.max_actions))
        flow.params[...] = rng.normal(size=flow.params.size)
        pf.params[...] = rng.normal(size=pf.params.size)
        batch = full_batch(g)
        db, _, _ = db_residuals(flow, pf, "uniform", batch)
        deltas, _, _ = subtb_residuals(flow, pf, "uniform", batch)
        steps = np.concatenate([np.diag(d, 1) for d in deltas])
        np.testing.assert_allclose(steps, db, rtol=1e-12, atol=1e-12)

    def test_full_span_is_tb_with_root_flow(self, setgen32):
        rng = np.random.default_rng(5)
        flow, pf = MLP((setgen32.n, 1)), MLP((setgen32.n, 3))
        flow.params[...] = rng.normal(size=flow.params.size)
        pf.params[...] = rng.normal(size=pf.params.size)
        batch = full_batch(setgen32)
        deltas, _, _ = subtb_residuals(flow, pf, "uniform", batch)
        log_z = Scalar(flow.predict(np.eye(setgen32.n)[:1])[0, 0])
        # the TB loss is the mean square of these full-span residuals
        full = np.array([d[0, -1] for d in deltas])
        assert tb_loss(pf, "uniform", log_z, batch)[0] == pytest.approx(np.mean(full**2), rel=1e-12)

    def test_lambda_one_uniform(self):
        w = subtb_weights(4, 1.0)
        assert np.allclose(w[np.triu_indices(5, 1)], 1 / 10)


def _fd_check(loss_fn, models, n_coords=25, h=1e-6, seed=0):
    """Compare analytic grads with central differences on random coordinates."""
    _, grads = loss_fn()
    rng = np.random.default_rng(seed)
    for role, model in models.items():
        g = grads[role]
        coords = rng.choice(model.params.size, size=min(n_coords, model.params.size), replace=False)
        for k in coords:
            old = model.params[k]
            model.params[k] = old + h
            up = loss_fn()[0]
            model.params[k] = old - h
            dn = loss_fn()[0]
            model.params[k] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[k]) <= 1e-5 * max(1.0, abs(fd), abs(g[k])), (role, k, fd, g[k])


class TestGradients:
    @pytest.fixture
    def setup(self):
        g = make_graph("prepend_append", 2, 3, seed=1)
        env = g.env
        enc = FeatureEncoder(env)
        trajs = enumerate_trajectories(g)
        rng = np.random.default_rng(0)
        batch = LossBatch(env, [trajs[i] for i in rng.choice(len(trajs), 6, replace=False)], enc)

        def mlp(out, seed):
            m = MLP((enc.dim, 8, 8, out), seed=seed, zero_last=False)
            m.params[...] *= 0.5
            return m

        return env, batch, mlp

    def test_rpe(self, setup):
        env, batch, mlp = setup
        flow = mlp(1, 1)
        log_v, log_g = rpe_targets(flow, batch)
        _, grads = rpe_loss(flow, batch)

        def frozen_target_loss():
            f = flow.predict(batch.features)[:, 0]
            res = np.exp(log_g + f) - np.exp(log_v)
            return float(np.mean(res**2)), grads

        _fd_check(frozen_target_loss, {"flow": flow})

    def test_fm(self, setup):
        env, batch, mlp = setup
        edge = mlp(env.max_actions, 2)
        _fd_check(lambda: fm_loss(edge, batch), {"edge": edge})

    @pytest.mark.parametrize("learned_pb", [False, True])
    def test_tb(self, setup, learned_pb):
        env, batch, mlp = setup
        pf, z = mlp(env.max_actions, 3), Scalar(0.3)
        pb = mlp(env.max_parents, 4) if learned_pb else "uniform"
        models = {"pf": pf, "log_z": z, **({"pb": pb} if learned_pb else {})}
        _fd_check(lambda: tb_loss(pf, pb, z, batch), models)

    @pytest.mark.parametrize("learned_pb", [False, True])
    def test_db(self, setup, learned_pb):
        env, batch, mlp = setup
        flow, pf = mlp(1, 5), mlp(env.max_actions, 6)
        pb = mlp(env.max_parents, 7) if learned_pb else "uniform"
        models = {"flow": flow, "pf": pf, **({"pb": pb} if learned_pb else {})}
        _fd_check(lambda: db_loss(flow, pf, pb, batch), models)

    @pytest.mark.parametrize("learned_pb", [False, True])
    def test_subtb(self, setup, learned_pb):
        env, batch, mlp = setup
        flow, pf = mlp(1, 8), mlp(env.max_actions, 9)
        pb = mlp(env.max_parents, 10) if learned_pb else "uniform"
        models = {"flow": flow, "pf": pf, **({"pb": pb} if learned_pb else {})}
        _fd_check(lambda: subtb_loss(flow, pf, pb, batch, 0.7), models)

    def test_soft_dqn(self, setup):
        env, batch, mlp = setup
        q, target = mlp(env.max_actions, 11), mlp(env.max_actions, 12)
        _fd_check(lambda: soft_dqn_loss(q, target, batch, 0.7), {"q": q})

    def test_mdqn(self, setup):
        env, batch, mlp = setup
        q, target = mlp(env.max_actions, 13), mlp(env.max_actions, 14)
        _fd_check(lambda: mdqn_loss(q, target, batch, 1.0, 0.9, -1.0), {"q": q})


class TestSoftQ:
    def test_value_is_log_flow(self, setgen32):
        _, v, _ = soft_q_iteration(setgen32, lambda_ent=1.0)
        np.testing.assert_allclose(v, np.log(flow_iteration(setgen32)), atol=1e-12)

    @pytest.mark.parametrize("family,a,b", ENVS)
    def test_value_is_log_flow_all_envs(self, family, a, b):
        g = make_graph(family, a, b, seed=7)
        _, v, _ = soft_q_iteration(g)
        assert np.abs(v - np.log(flow_iteration(g))).max() < 1e-6

    def test_mdqn_alpha_zero_equals_soft(self):
        g = make_graph("prepend_append", 2, 3, seed=2)
        enc = FeatureEncoder(g.env)
        batch = LossBatch(g.env, enumerate_trajectories(g)[:10], enc)
        q = MLP((enc.dim, 8, g.env.max_actions), seed=1, zero_last=False)
        t = MLP((enc.dim, 8, g.env.max_actions), seed=2, zero_last=False)
        a, ga = soft_dqn_loss(q, t, batch, 1.3)
        b, gb = mdqn_loss(q, t, batch, 1.3, 0.0, -1.0)
        assert a == b
        np.testing.assert_array_equal(ga["q"], gb["q"])

    def test_mdqn_fixed_point_unclipped(self, setgen32):
        _, v_soft, _ = soft_q_iteration(setgen32)
        _, v_m, _ = soft_q_iteration(setgen32, alpha=0.9, clip=None)
        assert np.abs(v_m - v_soft).max() < 1e-5

    def test_mdqn_clip_moves_fixed_point(self, setgen32):
        """With clip = -1 and three actions, log(1/3) < -1 is clamped, so values shift."""
        _, v_soft, _ = soft_q_iteration(setgen32)
        _, v_m, _ = soft_q_iteration(setgen32, alpha=0.9, clip=-1.0)
        assert np.abs(v_m - v_soft).max() > 1e-3

    def test_clip_clamps(self):
        tau = munchausen_temperature(1.0, 0.9)
        assert tau == pytest.approx(10.0)
        out = munchausen_bonus(np.array([-1e6, -0.5]), 0.9, tau, -1.0)
        np.testing.assert_allclose(out, [0.9 * 10.0 * -1.0, 0.9 * 10.0 * -0.5])

    def test_boltzmann_depth_one(self, tree21):
        q, _, _ = soft_q_iteration(tree21)
        _, p = masked_log_softmax(q[:1], tree21.n_actions[:1])
        rng = np.random.default_rng(0)
        draws = rng.choice(2, size=20_000, p=p[0])
        hist = np.bincount(draws, minlength=2) / draws.size
        assert np.abs(hist - [0.25, 0.75]).sum() < 0.02

    def test_q_is_log_edge_flow(self, setgen32):
        q, _, _ = soft_q_iteration(setgen32)
        np.testing.assert_allclose(q, exact_models(setgen32).q.layers[0][0].T, atol=1e-12)


class TestPolicyFromFlows:
    def test_exact_flows_match_reward(self, setgen32):
        ex = exact_models(setgen32)
        pi = np.zeros(setgen32.children.shape)
        for i in np.flatnonzero(~setgen32.terminal):
            pi[i, : setgen32.n_actions[i]] = policy_from_flows(ex.flow, setgen32.env, setgen32.states[i], ex.encoder)
        probs = setgen32.push_forward(pi)
        np.testing.assert_allclose(probs, setgen32.target_distribution(), atol=1e-15)

    def test_constant_flow(self):
        g = make_graph("prepend_append", 2, 3)
        m = MLP((g.n, 1))
        p = policy_from_flows(m, g.env, (0,), IndexEncoder(g))
        # children: "00" (2 edges from "0"), "01", "00" prepend, "10"
        nb = np.array([len(g.env.parents(c)) for c in g.env.children((0,))], dtype=float)
        np.testing.assert_allclose(p, (1 / nb) / (1 / nb).sum())

    def test_terminal(self, tree21):
        with pytest.raises(ValueError):
            policy_from_flows(MLP((tree21.n, 1)), tree21.env, (0,), IndexEncoder(tree21))


class TestTabularLearning:
    def test_rpe_tabular_converges(self, setgen32):
        m = MLP((setgen32.n, 1))
        batch = full_batch(setgen32)
        opt = Adam(lr=0.03)
        for t in range(8000):
            opt.lr = 0.03 * 0.999**t
            _, g = rpe_loss(m, batch)
            opt.step(m.params, g["flow"])
        F = np.exp(m.predict(np.eye(setgen32.n))[:, 0])
        np.testing.assert_allclose(F, flow_iteration(setgen32), atol=1e-6)

    def test_tb_reward_scaling(self, setgen32):
        """Tabular TB: scaling R by c keeps the optimal P_F and shifts log Z by log c."""

        def fit(graph):
            pf, z = MLP((graph.n, 3)), Scalar(0.0)
            batch = full_batch(graph)
            opt_pf, opt_z = Adam(lr=0.05), Adam(lr=0.05)
            for t in range(6000):
                lr = 0.05 * 0.999**t
                opt_pf.lr = opt_z.lr = lr
                _, g = tb_loss(pf, "uniform", z, batch)
                opt_pf.step(pf.params, g["pf"])
                opt_z.step(z.params, g["log_z"])
            _, p = masked_log_softmax(pf.predict(np.eye(graph.n)), graph.n_actions)
            return graph.push_forward(p), z.value

        table = {setgen32.key(i): float(setgen32.rewards[i]) for i in setgen32.terminal_ids}
        scaled = StateGraph(
            attach_reward(type(setgen32.env)(3, 2), RewardSpec("table", table={k: 5 * v for k, v in table.items()}))
        )
        p1, z1 = fit(setgen32)
        p2, z2 = fit(scaled)
        np.testing.assert_allclose(p1, p2, atol=1e-4)
        np.testing.assert_allclose(p1, setgen32.target_distribution(), atol=1e-4)
        assert z2 - z1 == pytest.approx(np.log(5.0), abs=1e-4)


def test_exact_distribution_from_models(setgen32):
    ex = exact_models(setgen32)
    _, p = masked_log_softmax(ex.pf.predict(np.eye(setgen32.n)), setgen32.n_actions)
    dist = exact_terminal_distribution(setgen32, flow_iteration(setgen32))
    np.testing.assert_allclose(setgen32.push_forward(p), dist.probs, atol=1e-15)
