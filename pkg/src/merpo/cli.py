"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration or input-file errors, 3 when a run fails.
The output root for relative paths is read from ``$MERPO_OUTPUT_ROOT``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, serialize
from .harness import ConfigError, ExperimentConfig
from .mdp import StochasticPolicy, expected_return
from .meta import MerpoConfig, MetaState, adapt_new_task
from .models import ModelParams
from .rac import run_rac
from .serialize import FormatError
from .tasks import TaskSpec, collect_dataset, make_behavior_policy, sample_tasks

log = logging.getLogger("merpo")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _out(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else harness.output_root() / p


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return harness.load_config(args.config)
    return ExperimentConfig()


def _meta_model(args, spec) -> ModelParams:
    if args.meta_model:
        return serialize.load_model(_read(args.meta_model))
    return ModelParams.zeros(spec.n_states, spec.n_actions)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    fam = cfg.family.family()
    n = cfg.n_train_tasks + cfg.n_test_tasks
    out = _out(args.out)
    for i, task in enumerate(sample_tasks(fam, n)):
        q = cfg.quality_mix[i % len(cfg.quality_mix)]
        data = collect_dataset(task, make_behavior_policy(task, q), cfg.dataset_size, seed=args.seed,
                               task_id=i, quality=q)
        serialize.write_text(out / f"task_{i:03d}.mdp", serialize.dump_mdp(task))
        serialize.write_text(out / f"task_{i:03d}.data", serialize.dump_dataset(data))
    print(f"wrote {n} tasks to {out}")
    return EXIT_OK


def cmd_train_rac(args) -> int:
    cfg = _config(args)
    task = serialize.load_mdp(_read(args.task))
    data = serialize.load_dataset(_read(args.data))
    spec = TaskSpec.of(task)
    pi_c = (serialize.load_policy(_read(args.meta_policy)) if args.meta_policy
            else StochasticPolicy.uniform(spec.n_states, spec.n_actions))
    if pi_c.shape != (spec.n_states, spec.n_actions):
        raise ConfigError("meta-policy shape does not match the task")
    rcfg = cfg.rac.replace(alpha=args.alpha)
    res = run_rac(data, _meta_model(args, spec), pi_c, rcfg, args.iters, spec,
                  evaluate=lambda p: expected_return(task, p), seed=args.seed)
    out = _out(args.out)
    serialize.write_text(out / "policy.txt", serialize.dump_policy(res.policy))
    serialize.write_text(out / "q.txt", serialize.dump_q(res.q))
    cols = ["iter", "J_true", "nu", "div_beta", "div_c", "beta", "lambda"]
    serialize.write_text(out / "history.csv", harness.rows_csv([{k: r[k] for k in cols} for r in res.history]))
    print(f"J = {expected_return(task, res.policy):.6f} after {args.iters} iterations")
    return EXIT_OK


def cmd_train_merpo(args) -> int:
    cfg = _config(args)
    if args.checkpoint_every:
        cfg = ExperimentConfig.from_dict(dict(cfg.to_dict(), eval_every=args.checkpoint_every))
    out = _out(args.out)

    def checkpoint(state: MetaState):
        serialize.write_text(out / f"checkpoint_{state.iter:05d}.txt", serialize.dump_meta_state(state))
        serialize.write_text(out / "checkpoint_latest.txt", serialize.dump_meta_state(state))

    rec, phi = harness.merpo_run(cfg, args.seed, checkpoint)
    serialize.write_text(out / "meta_model.txt", serialize.dump_model(phi))
    cols = ["iter", "mean_test_return", "mean_alpha", "mean_beta", "mean_lambda"]
    serialize.write_text(out / "iterations.csv", harness.rows_csv([{k: r.get(k) for k in cols} for r in rec.rows]))
    print(f"final mean test return {rec.summary['J']:.6f}; outputs in {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    state = serialize.load_meta_state(_read(args.checkpoint))
    data = serialize.load_dataset(_read(args.data))
    task = serialize.load_mdp(_read(args.task)) if args.task else None
    S, A = state.pi_c.shape
    if (data.n_states, data.n_actions) != (S, A):
        raise ConfigError("dataset shape does not match the checkpoint")
    spec = TaskSpec.of(task) if task is not None else TaskSpec(S, A, args.gamma, np.eye(S)[0])
    mcfg: MerpoConfig = cfg.merpo
    res = adapt_new_task(state, _meta_model(args, spec), data, mcfg, spec, steps=args.steps, seed=args.seed)
    out = _out(args.out)
    serialize.write_text(out / "policy.txt", serialize.dump_policy(res.policy))
    serialize.write_text(out / "q.txt", serialize.dump_q(res.q))
    if task is not None:
        print(f"J = {expected_return(task, res.policy):.6f}")
    return EXIT_OK


def cmd_check_theory(args) -> int:
    cfg = _config(args)
    rows = harness.theory_rows(args.suite, range(args.seeds), cfg)
    text = harness.rows_csv(rows)
    if args.out:
        serialize.write_text(_out(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run_suite(args) -> int:
    overrides = {}
    if args.suite:
        overrides["suite"] = args.suite
    if args.seeds is not None:
        overrides["seeds"] = list(range(args.seeds))
    cfg = harness.load_config(args.config, **overrides) if args.config else ExperimentConfig.from_dict(overrides)
    records = harness.run_suite(cfg)
    root = cfg.resolved_output() / f"{cfg.suite}-{cfg.config_hash()}"
    failed = [r for r in records if r.status != "ok"]
    print(f"{len(records) - len(failed)} cells ok, {len(failed)} failed; outputs in {root}")
    return EXIT_RUN if failed else EXIT_OK


def cmd_summarize(args) -> int:
    records = harness.load_records(args.run_dir)
    text = harness.summary_csv(records)
    serialize.write_text(Path(args.run_dir) / "summary.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="merpo", description="Tabular offline meta-RL toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample tasks and write one MDP and one dataset file per task")
    g.add_argument("--config")
    g.add_argument("--out", default="data")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    r = sub.add_parser("train-rac", help="run RAC on one task")
    r.add_argument("--task", required=True, help="MDP file, used only to score returns")
    r.add_argument("--data", required=True)
    r.add_argument("--meta-policy")
    r.add_argument("--meta-model")
    r.add_argument("--alpha", type=float, default=0.4)
    r.add_argument("--iters", type=int, default=50)
    r.add_argument("--config")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="rac")
    r.set_defaults(fn=cmd_train_rac)

    m = sub.add_parser("train-merpo", help="meta-train on the configured task family")
    m.add_argument("--config")
    m.add_argument("--checkpoint-every", type=int)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="merpo")
    m.set_defaults(fn=cmd_train_merpo)

    a = sub.add_parser("adapt", help="adapt a meta-state checkpoint to a new task's data")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--task", help="MDP file; gives gamma and the start state and scores the result")
    a.add_argument("--gamma", type=float, default=0.9, help="discount when no --task is given")
    a.add_argument("--meta-model")
    a.add_argument("--steps", type=int)
    a.add_argument("--config")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="adapted")
    a.set_defaults(fn=cmd_adapt)

    t = sub.add_parser("check-theory", help="numeric theory reports as CSV")
    t.add_argument("--suite", required=True, choices=harness.THEORY_SUITES)
    t.add_argument("--seeds", type=int, default=20)
    t.add_argument("--config")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_check_theory)

    s = sub.add_parser("run-suite", help="run a benchmark suite")
    s.add_argument("--config")
    s.add_argument("--suite", choices=harness.SUITES)
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    s.set_defaults(fn=cmd_run_suite)

    z = sub.add_parser("summarize", help="recompute summary.csv of a suite run")
    z.add_argument("run_dir")
    z.set_defaults(fn=cmd_summarize)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
