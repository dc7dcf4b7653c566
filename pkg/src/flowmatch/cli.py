"""Command-line runner: ``flowmatch {check,train,compare,sample}``.

Exit codes: 0 success, 1 configuration error, 2 enumeration cap
exceeded, 3 training fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .approx import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .env import EnumerationCapError, EnvError, StateGraph
from .exact import (
    PreconditionError,
    check_equivalence,
    compute_g,
    exact_terminal_distribution,
    flow_iteration,
    table_tsv,
)
from .metrics import accuracy_exact, l1_to_target
from .train import CURRENT_PF, Method, RunLog, Sampler, TrainingFault, build_method, rollout, train

log = logging.getLogger("flowmatch")

EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_FAULT = 0, 1, 2, 3


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _traj_dict(graph: StateGraph, t) -> dict:
    return {"states": [graph.env.key(s) for s in t.states], "actions": list(t.actions), "g": list(t.g)}


# --------------------------------------------------------------------------
# check


def run_check(cfg: RunConfig, out: Path) -> dict:
    """Exact flows, uniform-policy values and the g-factor identity."""
    env = cfg.build_env()
    graph = StateGraph(env)
    flow = flow_iteration(graph)
    flow_tsv = table_tsv(graph, flow)
    (out / "flows.tsv").write_text(flow_tsv, encoding="utf-8")
    dist = exact_terminal_distribution(graph, flow)
    gf = compute_g(graph)
    reward_sum = float(graph.rewards[graph.terminal].sum())
    report = {
        "env": env.name,
        "states": graph.n,
        "terminals": int(graph.terminal.sum()),
        "flow_digest": _digest(flow_tsv),
        "g_flag": gf.flag,
        "l1_pushforward": l1_to_target(dist.probs, graph),
        "flow_s0": float(flow[0]),
        "reward_sum": reward_sum,
        "flow_s0_error": abs(float(flow[0]) - reward_sum),
    }
    if gf.consistent:
        eq = check_equivalence(graph, gf=gf)
        value_tsv = table_tsv(graph, eq.value)
        (out / "values.tsv").write_text(value_tsv, encoding="utf-8")
        report.update(
            value_digest=_digest(value_tsv),
            max_discrepancy=eq.max_discrepancy,
            passed=eq.passed,
            witness=None,
        )
    else:
        a, b = gf.witness
        report.update(
            value_digest=None,
            max_discrepancy=None,
            passed=False,
            witness={
                "state": env.key(gf.witness_state),
                "trajectories": [_traj_dict(graph, a), _traj_dict(graph, b)],
            },
        )
    _write_json(out / "check.json", report)
    return report


# --------------------------------------------------------------------------
# train / compare


def _save_models(method: Method, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for role, model in method.models.items():
        save_checkpoint(directory / f"{role}.fmck", model)


def _summary(method: Method, runlog: RunLog, graph: StateGraph, steps: int) -> dict:
    probs = graph.push_forward(method.policy_table(graph))
    last = runlog.last
    return {
        "objective": method.spec.kind,
        "steps": steps,
        "accuracy": accuracy_exact(probs, graph),
        "modes": last.modes if last is not None else 0,
        "l1": l1_to_target(probs, graph),
        "loss": last.loss if last is not None else None,
    }


def run_train_one(cfg: RunConfig, spec, out: Path, env=None, graph: StateGraph | None = None) -> dict:
    """Train one objective, streaming the run log so faults leave partial output."""
    env = cfg.build_env() if env is None else env
    graph = StateGraph(env) if graph is None else graph
    tcfg = cfg.train_config(env)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "runlog.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:

        def on_point(p):
            fh.write(json.dumps(p.to_dict()) + "\n")
            fh.flush()
            log.info("%s step %d loss %.4g acc %s l1 %s", spec.kind, p.step, p.loss, _fmt(p.accuracy), _fmt(p.l1))

        try:
            method, runlog = train(env, spec, tcfg, graph=graph, on_point=on_point)
        except TrainingFault as exc:
            _write_json(out / "fault.json", {"error": str(exc), "snapshot": _jsonable(exc.snapshot)})
            raise
    _save_models(method, out / "checkpoints")
    summary = _summary(method, runlog, graph, tcfg.steps)
    _write_json(out / "summary.json", summary)
    return summary


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4g}"


def _jsonable(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in d.items()}


def _labels(specs) -> list[str]:
    kinds = [s.kind for s in specs]
    return [k if kinds.count(k) == 1 else f"{k}_{i}" for i, k in enumerate(kinds)]


def run_compare(cfg: RunConfig, out: Path) -> dict:
    """Train every objective in turn and merge their run logs into one CSV."""
    env = cfg.build_env()
    graph = StateGraph(env)
    specs = cfg.objective_specs()
    labels = _labels(specs)
    summaries = {}
    for label, spec in zip(labels, specs):
        summaries[label] = run_train_one(cfg, spec, out / label, env, graph)
    rows: dict[int, dict] = {}
    for label in labels:
        for line in (out / label / "runlog.jsonl").read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            row = rows.setdefault(rec["step"], {"step": rec["step"]})
            for key in ("accuracy", "modes", "l1"):
                row[f"{label}_{key}"] = rec[key]
    header = ["step"] + [f"{label}_{key}" for label in labels for key in ("accuracy", "modes", "l1")]
    with open(out / "compare.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, restval="")
        w.writeheader()
        for step in sorted(rows):
            w.writerow(rows[step])
    _write_json(out / "summary.json", summaries)
    return summaries


# --------------------------------------------------------------------------
# sample


def load_method(cfg: RunConfig, run_dir: Path, env=None) -> Method:
    """Rebuild a trained method from the checkpoints in ``run_dir``."""
    env = cfg.build_env() if env is None else env
    spec = cfg.objective_specs()[0]
    method = build_method(env, spec, cfg.model.hidden, cfg.seed)
    ckpt = run_dir / "checkpoints"
    for role, model in method.models.items():
        path = ckpt / f"{role}.fmck"
        if not path.is_file():
            raise ConfigError("", f"missing checkpoint {path}")
        loaded = load_checkpoint(path)
        if loaded.sizes != model.sizes:
            raise ConfigError("model.hidden", f"checkpoint {path.name} has layer sizes {loaded.sizes}")
        model.params[...] = loaded.params
        model.step = loaded.step
    return method


def run_sample(cfg: RunConfig, run_dir: Path, out: Path, n: int) -> list:
    env = cfg.build_env()
    method = load_method(cfg, run_dir, env)
    sampler = Sampler(CURRENT_PF, 0.0, cfg.seed)
    trajs = rollout(env, sampler, method.policy, n, np.random.default_rng([cfg.seed, 2]))
    rows = [(env.key(t.terminal), env.reward(t.terminal)) for t in trajs]
    with open(out / "samples.tsv", "w", encoding="utf-8") as fh:
        fh.write("sample\treward\n")
        for key, r in rows:
            fh.write(f"{key}\t{r!r}\n")
    return rows


# --------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (
        ("check", "exact flows, values and g-factor report"),
        ("train", "train one objective"),
        ("compare", "train several objectives and merge their logs"),
        ("sample", "draw samples from a trained checkpoint"),
    ):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("--config", required=True, help="YAML run config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="output directory (default: config 'out')")
        if verb == "sample":
            s.add_argument("--run", default=None, help="trained run directory (default: config 'out')")
            s.add_argument("-n", type=int, default=None, help="number of samples (default: sample.n)")
            s.add_argument("--objective", default=None, help="pick one run of a compare config by label")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed", "must be a non-negative integer")
            cfg.seed = args.seed
        if args.verb == "sample":
            return _sample_verb(cfg, args)
        out = _out_dir(cfg, args.out)
        (out / "config.yaml").write_text(_effective(cfg, args.verb).dump(), encoding="utf-8")
        if args.verb == "check":
            report = run_check(cfg, out)
            print(json.dumps({k: report[k] for k in ("g_flag", "max_discrepancy", "l1_pushforward")}))
        elif args.verb == "train":
            if cfg.objective is None:
                raise ConfigError("objective", "train needs an objective")
            summary = run_train_one(cfg, cfg.objective_specs()[0], out)
            print(json.dumps(summary))
        else:
            if not cfg.objectives:
                raise ConfigError("objectives", "compare needs a list of objectives")
            print(json.dumps(run_compare(cfg, out)))
    except (ConfigError, EnvError, PreconditionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnumerationCapError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return EXIT_CAP
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


def _effective(cfg: RunConfig, verb: str) -> RunConfig:
    """The config as actually run: verb as mode, overrides resolved."""
    eff = dataclasses.replace(cfg, mode=verb)
    eff.base_dir = cfg.base_dir
    r = eff.env.reward
    if r.table_file is not None:
        r = dataclasses.replace(r, table_file=str(cfg.resolve(r.table_file).resolve()))
    if r.seed is None:
        r = dataclasses.replace(r, seed=cfg.seed)
    eff.env = dataclasses.replace(eff.env, reward=r)
    return eff


def _sample_verb(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run) if args.run else Path(cfg.out)
    if args.objective is not None:
        if cfg.objectives is None:
            raise ConfigError("objectives", "--objective needs a compare config")
        labels = _labels(cfg.objective_specs() if cfg.mode == "compare" else [])
        if args.objective not in labels:
            raise ConfigError("objectives", f"no run labelled {args.objective!r}; have {labels}")
        cfg = dataclasses.replace(cfg, mode="train", objective=cfg.objectives[labels.index(args.objective)])
        run_dir = run_dir / args.objective
    elif cfg.objective is None:
        raise ConfigError("objective", "sample needs an objective (or --objective for compare configs)")
    else:
        cfg = dataclasses.replace(cfg, mode="train")
    out = _out_dir(cfg, args.out or str(run_dir))
    n = args.n if args.n is not None else cfg.sample.n
    if n < 1:
        raise ConfigError("sample.n", "must be a positive integer")
    rows = run_sample(cfg, run_dir, out, n)
    print(json.dumps({"samples": len(rows), "mean_reward": float(np.mean([r for _, r in rows]))}))
    return EXIT_OK
