"""Experiment orchestration: validated configs, seeded benchmark suites, per-cell CSVs,
aggregate summaries and plot data.

The harness is the only place that holds true task MDPs. Training code receives
datasets, public task info and the meta-model; returns are scored here with exact DP.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .mdp import StochasticPolicy, TabularMdp, expected_return
from .meta import MerpoConfig, MetaState, TrainTask, adapt_new_task, train_merpo
from .models import ModelParams, fit_task_model, nll, train_meta_model
from .rac import RacConfig, run_rac
from .theory import check_lemma1, check_theorem1, lemma1_instance
from .serialize import fmt, write_text
from .tasks import (
    OfflineDataset,
    TaskFamily,
    TaskSpec,
    collect_dataset,
    make_behavior_policy,
    sample_tasks,
)

__all__ = [
    "SCHEMA_VERSION",
    "SUITES",
    "OUTPUT_ROOT_ENV",
    "ConfigError",
    "FamilyConfig",
    "MetaModelConfig",
    "ExperimentConfig",
    "RunRecord",
    "load_config",
    "run_suite",
    "run_cell",
    "summarize",
    "write_records",
    "no_model_ablation",
    "merpo_run",
    "benchmark_world",
    "load_records",
    "output_root",
    "THEORY_SUITES",
    "theory_rows",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "MERPO_OUTPUT_ROOT"
RAC_SUITES = ("safe_improvement", "fig4", "alpha_sweep", "data_quality")
MERPO_SUITES = ("adaptive_alpha", "meta_only", "no_model")
SUITES = RAC_SUITES + MERPO_SUITES + ("meta_benefit",)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# -- configuration ---------------------------------------------------------------------


@dataclass(frozen=True)
class FamilyConfig:
    kind: str = "gridworld_wind"
    base_size: int = 5
    gamma: float = 0.9
    slip: float = 0.1
    perturbation_range: tuple[float, float] = (-0.3, 0.3)
    seed: int = 3

    def family(self, seed: int | None = None) -> TaskFamily:
        return TaskFamily(self.kind, self.base_size, tuple(self.perturbation_range),
                          self.seed if seed is None else seed, self.gamma, self.slip)


@dataclass(frozen=True)
class MetaModelConfig:
    eta: float = 1e-3
    inner_steps: int = 25
    outer_lr: float = 0.5
    outer_iters: int = 200
    inner_lr: float = 5.0


def _desk_rac() -> RacConfig:
    return RacConfig(beta=0.1, lam=0.5, d_target=0.5, improvement_variant="tv_theory",
                     model_lr=5.0)


def _desk_merpo() -> MerpoConfig:
    # Per-task lambda is carried across outer iterations; dual ascent on it makes the
    # inner policies flip between greedy and regularized, so meta-training keeps it fixed.
    return MerpoConfig(task_batch_size=4, inner_steps=10, outer_iters=30,
                       rac=_desk_rac().replace(auto_lambda=False))


@dataclass(frozen=True)
class ExperimentConfig:
    """One suite run. ``seeds`` index benchmark cells; ``output_dir`` is resolved
    against ``$MERPO_OUTPUT_ROOT`` when relative."""

    suite: str = "safe_improvement"
    family: FamilyConfig = field(default_factory=FamilyConfig)
    n_train_tasks: int = 20
    n_test_tasks: int = 4
    dataset_size: int = 2000
    adapt_dataset_size: int = 200
    quality_mix: tuple[str, ...] = ("random", "medium", "expert")
    meta_model: MetaModelConfig = field(default_factory=MetaModelConfig)
    merpo: MerpoConfig = field(default_factory=_desk_merpo)
    rac: RacConfig = field(default_factory=_desk_rac)
    rac_iters: int = 50
    alphas: tuple[float, ...] = (0.4, 0.9)
    eval_every: int = 10
    seeds: tuple[int, ...] = tuple(range(10))
    output_dir: str = "runs"
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; choose from {SUITES}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema v{self.schema_version} unsupported (expected v{SCHEMA_VERSION})")
        for q in self.quality_mix:
            if q not in ("random", "medium", "expert"):
                raise ConfigError(f"unknown data quality {q!r}")
        if not self.quality_mix:
            raise ConfigError("quality_mix must not be empty")
        if min(self.n_train_tasks, self.n_test_tasks, self.dataset_size, self.adapt_dataset_size) < 1:
            raise ConfigError("task counts and dataset sizes must be positive")
        if self.rac_iters < 0 or self.eval_every < 1 or self.workers < 1:
            raise ConfigError("rac_iters must be >= 0, eval_every and workers >= 1")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("alphas must lie in [0, 1]")
        if len(set(self.seeds)) != len(self.seeds) or any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be distinct non-negative integers")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    def to_dict(self) -> dict:
        return _plain(self)

    def config_hash(self) -> str:
        """sha256 over the canonical JSON of every field except ``output_dir`` and
        ``workers`` (which do not change results)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolved_output(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else output_root() / p


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {"family": FamilyConfig, "meta_model": MetaModelConfig, "merpo": MerpoConfig, "rac": RacConfig}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, val in d.items():
        hint = hints[key]
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], val, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(val, hint, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(val, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is tuple:
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = args[0] if args else Any
        return tuple(_coerce(v, inner, where) for v in val)
    if origin is typing.Union:
        if val is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _coerce(val, hint, where)
    if hint is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{where}: expected true/false")
        return val
    if hint is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where}: expected an integer")
        return val
    if hint is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(val)
    if hint is str:
        if not isinstance(val, str):
            raise ConfigError(f"{where}: expected a string")
        return val
    return val


def load_config(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    """Read a JSON config file; ``overrides`` replace top-level keys."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


# -- records ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    suite: str
    cell: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""


# -- benchmark worlds ------------------------------------------------------------------


@dataclass(frozen=True)
class _World:
    """Training tasks, their datasets and the meta-model trained on them."""

    tasks: list[TabularMdp]
    datasets: list[OfflineDataset]
    meta_model: ModelParams
    family: TaskFamily


_WORLDS: dict[str, _World] = {}


def _world(cfg: ExperimentConfig, family_seed: int, n_extra: int) -> _World:
    key = json.dumps([_plain(cfg.family), family_seed, cfg.n_train_tasks, n_extra, cfg.dataset_size,
                      list(cfg.quality_mix), _plain(cfg.meta_model)])
    if key in _WORLDS:
        return _WORLDS[key]
    fam = cfg.family.family(family_seed)
    tasks = sample_tasks(fam, cfg.n_train_tasks + n_extra)
    datasets = []
    for i in range(cfg.n_train_tasks):
        q = cfg.quality_mix[i % len(cfg.quality_mix)]
        datasets.append(collect_dataset(tasks[i], make_behavior_policy(tasks[i], q), cfg.dataset_size,
                                        seed=family_seed, task_id=i, quality=q))
    mm = cfg.meta_model
    phi = train_meta_model(datasets, mm.eta, mm.inner_steps, mm.outer_lr, mm.outer_iters, mm.inner_lr)
    world = _World(tasks, datasets, phi, fam)
    _WORLDS[key] = world
    return world


def _scorer(mdp: TabularMdp) -> Callable[[StochasticPolicy], float]:
    return lambda policy: expected_return(mdp, policy)


@dataclass(frozen=True)
class _RacCase:
    task: TabularMdp
    data: OfflineDataset
    pi_beta: StochasticPolicy
    pi_c: StochasticPolicy
    data_quality: str
    meta_quality: str


def _rac_case(cfg: ExperimentConfig, world: _World, seed: int, data_quality: str, meta_quality: str) -> _RacCase:
    # seed k uses the k-th held-out task; a "good" meta-policy is the expert of a training task
    task = sample_tasks(world.family, cfg.n_train_tasks + seed + 1)[-1]
    pi_beta = make_behavior_policy(task, data_quality)
    data = collect_dataset(task, pi_beta, cfg.dataset_size, seed=seed, task_id=cfg.n_train_tasks + seed,
                           quality=data_quality)
    if meta_quality == "random":
        pi_c = StochasticPolicy.uniform(task.n_states, task.n_actions)
    else:
        src = world.tasks[seed % cfg.n_train_tasks]
        pi_c = make_behavior_policy(src, "expert")
    return _RacCase(task, data, pi_beta, pi_c, data_quality, meta_quality)


def _run_rac_case(cfg: ExperimentConfig, world: _World, case: _RacCase, alpha: float, seed: int) -> dict:
    spec = TaskSpec.of(case.task)
    res = run_rac(case.data, world.meta_model, case.pi_c, cfg.rac.replace(alpha=alpha), cfg.rac_iters,
                  spec, seed=seed)
    J = expected_return(case.task, res.policy)
    J_b = expected_return(case.task, case.pi_beta)
    J_c = expected_return(case.task, case.pi_c)
    tol = 0.01 * case.task.r_max / (1 - case.task.gamma)
    return {"alpha": alpha, "data_quality": case.data_quality, "meta_quality": case.meta_quality,
            "J": J, "J_beta": J_b, "J_meta": J_c, "beta": res.beta, "lambda": res.lam,
            "success": int(J >= max(J_b, J_c) - tol)}


def _rac_cells(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    world = _world(cfg, cfg.family.seed, 0)
    h = cfg.config_hash()
    quals = cfg.quality_mix
    out = []
    if cfg.suite in ("safe_improvement", "alpha_sweep"):
        # data quality cycles fastest, then the meta-policy alternates random/good
        dq = quals[seed % len(quals)]
        mq = ("random", "good")[(seed // len(quals)) % 2]
        case = _rac_case(cfg, world, seed, dq, mq)
        for a in cfg.alphas:
            out.append(RunRecord(h, cfg.suite, f"alpha={a:g}", seed,
                                 [_run_rac_case(cfg, world, case, a, seed)]))
    elif cfg.suite == "fig4":
        good_data = [q for q in quals if q != "random"] or list(quals)
        case = _rac_case(cfg, world, seed, good_data[seed % len(good_data)], "random")
        for name, a in (("rac", 0.4), ("combo3", 0.0)):
            out.append(RunRecord(h, cfg.suite, f"random_meta/{name}", seed,
                                 [_run_rac_case(cfg, world, case, a, seed)]))
        case = _rac_case(cfg, world, seed, "random", "good")
        for name, a in (("rac", 0.4), ("combo", 1.0)):
            out.append(RunRecord(h, cfg.suite, f"good_meta_poor_data/{name}", seed,
                                 [_run_rac_case(cfg, world, case, a, seed)]))
    else:  # data_quality
        for dq in quals:
            for mq in ("random", "good"):
                case = _rac_case(cfg, world, seed, dq, mq)
                for a in cfg.alphas:
                    out.append(RunRecord(h, cfg.suite, f"{dq}/{mq}/alpha={a:g}", seed,
                                         [_run_rac_case(cfg, world, case, a, seed)]))
    for rec in out:
        rec.summary = {"J": rec.rows[-1]["J"]}
    return out


def _merpo_world(cfg: ExperimentConfig, seed: int):
    world = _world(cfg, seed, cfg.n_test_tasks)
    train = [TrainTask(d, TaskSpec.of(world.tasks[i])) for i, d in enumerate(world.datasets)]
    tests = []
    for j in range(cfg.n_test_tasks):
        idx = cfg.n_train_tasks + j
        task = world.tasks[idx]
        q = cfg.quality_mix[j % len(cfg.quality_mix)]
        data = collect_dataset(task, make_behavior_policy(task, q), cfg.dataset_size, seed=seed,
                               task_id=idx, quality=q)
        tests.append((task, data))
    return world, train, tests


_MERPO_RUNS: dict[str, RunRecord] = {}


def _run_merpo(cfg: ExperimentConfig, mcfg: MerpoConfig, seed: int, cell: str,
               checkpoint: Callable[[MetaState], None] | None = None) -> RunRecord:
    # identical (world, merpo config, seed) runs are shared between suites
    d = cfg.to_dict()
    for k in ("suite", "seeds", "output_dir", "workers", "alphas", "rac", "rac_iters"):
        d.pop(k)
    key = json.dumps([d, _plain(mcfg), seed], sort_keys=True)
    if checkpoint is None and key in _MERPO_RUNS:
        rec = _MERPO_RUNS[key]
        return dataclasses.replace(rec, config_hash=cfg.config_hash(), suite=cfg.suite, cell=cell,
                                   rows=[dict(r) for r in rec.rows], summary=dict(rec.summary))
    rec = _run_merpo_uncached(cfg, mcfg, seed, cell, checkpoint)
    _MERPO_RUNS[key] = rec
    return rec


def _run_merpo_uncached(cfg, mcfg, seed, cell, checkpoint) -> RunRecord:
    world, train, tests = _merpo_world(cfg, seed)
    rows: list[dict] = []

    def test_return(state: MetaState) -> float:
        vals = []
        for task, data in tests:
            res = adapt_new_task(state, world.meta_model, data, mcfg, TaskSpec.of(task), seed=seed)
            vals.append(expected_return(task, res.policy))
        return float(np.mean(vals))

    def on_iter(state: MetaState, row: dict):
        at_eval = row["iter"] % cfg.eval_every == 0 or row["iter"] == mcfg.outer_iters
        row = dict(row, mean_test_return=test_return(state) if at_eval else None,
                   min_alpha=float(state.alpha_per_task.min()), max_alpha=float(state.alpha_per_task.max()))
        rows.append(row)
        if checkpoint is not None and at_eval:
            checkpoint(state)

    state = train_merpo(train, world.meta_model, mcfg, seed=seed, on_iter=on_iter)
    final = rows[-1]["mean_test_return"] if rows else test_return(state)
    return RunRecord(cfg.config_hash(), cfg.suite, cell, seed, rows, {"J": final})


def merpo_run(cfg: ExperimentConfig, seed: int = 0, checkpoint: Callable[[MetaState], None] | None = None,
              adaptive: bool | None = None) -> tuple[RunRecord, ModelParams]:
    """One MerPO training run on the seed's world; returns its record and the meta-model.

    ``checkpoint`` receives the meta-state every ``cfg.eval_every`` iterations.
    """
    mcfg = cfg.merpo if adaptive is None else cfg.merpo.replace(adaptive_alpha=adaptive)
    rec = _run_merpo(cfg, mcfg, seed, "merpo_adp" if mcfg.adaptive_alpha else "merpo", checkpoint)
    return rec, _world(cfg, seed, cfg.n_test_tasks).meta_model


def benchmark_world(cfg: ExperimentConfig, family_seed: int | None = None, n_extra: int | None = None):
    """Tasks, training datasets and meta-model of a benchmark world (harness-side only)."""
    w = _world(cfg, cfg.family.seed if family_seed is None else family_seed,
               cfg.n_test_tasks if n_extra is None else n_extra)
    return w.tasks, w.datasets, w.meta_model


def no_model_ablation(cfg: ExperimentConfig, seed: int) -> RunRecord:
    """MerPO with the model branch disabled: empirical-only backups and rho = d."""
    mcfg = cfg.merpo.replace(rac=cfg.merpo.rac.replace(model_free=True))
    return _run_merpo(cfg, mcfg, seed, "no_model")


def _merpo_cells(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    base = cfg.merpo.replace(adaptive_alpha=False)
    out = [_run_merpo(cfg, base, seed, "merpo")]
    if cfg.suite == "adaptive_alpha":
        out.append(_run_merpo(cfg, base.replace(adaptive_alpha=True), seed, "merpo_adp"))
    elif cfg.suite == "meta_only":
        # no behavior regularizer in the inner loop
        out.append(_run_merpo(cfg, base.replace(alpha_init=0.0, alpha_bounds=(0.0, 0.0)), seed, "meta_only"))
    else:
        out.append(no_model_ablation(cfg, seed))
    return out


def _meta_benefit_cells(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    world = _world(cfg, cfg.family.seed, 0)
    task = sample_tasks(world.family, cfg.n_train_tasks + seed + 1)[-1]
    q = cfg.quality_mix[seed % len(cfg.quality_mix)]
    beta = make_behavior_policy(task, q)
    idx = cfg.n_train_tasks + seed
    data = collect_dataset(task, beta, cfg.adapt_dataset_size, seed=seed, task_id=idx, quality=q)
    held = collect_dataset(task, beta, cfg.dataset_size, seed=seed + 10_000_000, task_id=idx, quality=q)
    mm, rc = cfg.meta_model, cfg.rac
    S, A = task.n_states, task.n_actions
    rows = []
    for name, init in (("meta", world.meta_model), ("scratch", ModelParams.zeros(S, A))):
        model = fit_task_model(data, init, mm.eta, rc.model_steps, rc.model_lr)
        rows.append({"init": name, "train_nll": nll(model, data), "heldout_nll": nll(model, held)})
    rec = RunRecord(cfg.config_hash(), cfg.suite, "nll", seed, rows,
                    {"meta": rows[0]["heldout_nll"], "scratch": rows[1]["heldout_nll"]})
    return [rec]


def run_cell(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    """Every record of one seed; failures become ``status="failed"`` records."""
    try:
        if cfg.suite in RAC_SUITES:
            return _rac_cells(cfg, seed)
        if cfg.suite in MERPO_SUITES:
            return _merpo_cells(cfg, seed)
        return _meta_benefit_cells(cfg, seed)
    except Exception as exc:  # recorded, the suite continues
        log.exception("cell failed: suite=%s seed=%d", cfg.suite, seed)
        return [RunRecord(cfg.config_hash(), cfg.suite, "*", seed, status="failed",
                          error=f"{type(exc).__name__}: {exc}")]


def _run_cell_dict(args):
    d, seed = args
    return run_cell(ExperimentConfig.from_dict(d), seed)


def run_suite(cfg: ExperimentConfig, write: bool = True) -> list[RunRecord]:
    """Run every seed of ``cfg`` and, when ``write`` is set, emit the CSV outputs.

    Records come back in (seed, cell) order regardless of ``cfg.workers``.
    """
    if not cfg.seeds:
        log.warning("empty seed list; nothing to run")
        return []
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(_run_cell_dict, [(cfg.to_dict(), s) for s in cfg.seeds]))
    else:
        chunks = [run_cell(cfg, s) for s in cfg.seeds]
    records = [r for chunk in chunks for r in chunk]
    if write:
        write_records(cfg, records)
    return records


# -- output ----------------------------------------------------------------------------


def _cell_str(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def _csv(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema"] + header)
    for row in rows:
        w.writerow([SCHEMA_VERSION] + [_cell_str(row.get(k)) for k in header])
    return buf.getvalue()


def cell_csv(rec: RunRecord) -> str:
    keys: list[str] = []
    for row in rec.rows:
        keys += [k for k in row if k not in keys]
    return _csv(["config_hash", "suite", "cell", "seed"] + keys,
                [dict(config_hash=rec.config_hash, suite=rec.suite, cell=rec.cell, seed=rec.seed, **r)
                 for r in rec.rows])


SUMMARY_HEADER = ["config_hash", "suite", "cell", "group", "metric", "n", "mean", "std", "min", "max"]


def summarize(records: list[RunRecord]) -> list[dict]:
    """Mean, std (population), min and max over seeds of each summary metric, per cell.

    Cells whose rows carry a data quality are also reported per quality, plus a
    ``best_quality`` group repeating the statistics of the quality with the highest mean.
    """
    groups: dict[tuple, list[float]] = {}
    for rec in records:
        if rec.status != "ok":
            continue
        q = rec.rows[-1].get("data_quality") if rec.rows else None
        for metric, val in rec.summary.items():
            if val is None:
                continue
            base = (rec.config_hash, rec.suite, rec.cell)
            groups.setdefault(base + ("all", metric), []).append(float(val))
            if q is not None:
                groups.setdefault(base + (f"data={q}", metric), []).append(float(val))
    stats = {}
    for key, vals in groups.items():
        v = np.array(vals)
        stats[key] = (len(v), float(v.mean()), float(v.std()), float(v.min()), float(v.max()))
    best: dict[tuple, tuple] = {}
    for key, st in stats.items():
        if key[3].startswith("data="):
            bkey = key[:3] + ("best_quality", key[4])
            if bkey not in best or st[1] > best[bkey][1]:
                best[bkey] = st
    stats.update(best)
    return [dict(zip(SUMMARY_HEADER, key + stats[key])) for key in sorted(stats)]


def plot_data(records: list[RunRecord], metric: str = "mean_test_return") -> list[dict]:
    """Per cell and iteration: mean and +-std band of ``metric`` over seeds."""
    series: dict[tuple, list[float]] = {}
    for rec in records:
        if rec.status != "ok":
            continue
        for row in rec.rows:
            if "iter" in row and row.get(metric) is not None:
                series.setdefault((rec.cell, int(row["iter"])), []).append(float(row[metric]))
    out = []
    for (cell, it) in sorted(series):
        v = np.array(series[(cell, it)])
        out.append({"cell": cell, "x": it, "y": float(v.mean()), "band_lo": float(v.mean() - v.std()),
                    "band_hi": float(v.mean() + v.std()), "n": len(v)})
    return out


def write_records(cfg: ExperimentConfig, records: list[RunRecord]) -> Path:
    """One CSV per (cell, seed), plus summary.csv, plot_data.csv and failures.csv."""
    root = cfg.resolved_output() / f"{cfg.suite}-{cfg.config_hash()}"
    for rec in records:
        if rec.status == "ok":
            name = rec.cell.replace("/", "__").replace("=", "")
            write_text(root / "cells" / f"{name}__seed{rec.seed}.csv", cell_csv(rec))
    write_text(root / "summary.csv", summary_csv(records))
    write_text(root / "plot_data.csv",
               _csv(["cell", "x", "y", "band_lo", "band_hi", "n"], plot_data(records)))
    failed = [{"seed": r.seed, "error": r.error} for r in records if r.status != "ok"]
    write_text(root / "failures.csv", _csv(["seed", "error"], failed))
    write_text(root / "records.json", json.dumps([_record_dict(r) for r in records], sort_keys=True) + "\n")
    write_text(root / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


THEORY_SUITES = ("theorem1", "lemma1", "alpha-sweep")


def theory_rows(suite: str, seeds, cfg: ExperimentConfig | None = None) -> list[dict]:
    """Rows of a theory report.

    ``theorem1`` checks the safe-improvement condition on the final RAC policy of each
    seeded case, ``lemma1`` checks the interpolant bound on seeded random instances and
    ``alpha-sweep`` runs RAC over alpha in {0, 0.4, 0.7, 1}.
    """
    if suite not in THEORY_SUITES:
        raise ConfigError(f"unknown theory suite {suite!r}; choose from {THEORY_SUITES}")
    cfg = cfg or ExperimentConfig()
    rows = []
    if suite == "lemma1":
        for i in seeds:
            m, m1, m2, f, pi = lemma1_instance(0, i)
            rep = check_lemma1(m, m1, m2, f, pi)
            rows.append({"seed": i, "n_states": m.n_states, "n_actions": m.n_actions, "f": f,
                         "j_interp": rep.j_interp, "j_true": rep.j_true, "gap": abs(rep.j_interp - rep.j_true),
                         "eta": rep.eta_bound, "holds": rep.holds})
        return rows
    world = _world(cfg, cfg.family.seed, 0)
    quals = cfg.quality_mix
    for k in seeds:
        dq = quals[k % len(quals)]
        mq = ("random", "good")[(k // len(quals)) % 2]
        case = _rac_case(cfg, world, k, dq, mq)
        if suite == "alpha-sweep":
            for a in (0.0, 0.4, 0.7, 1.0):
                rows.append(dict(seed=k, **_run_rac_case(cfg, world, case, a, k)))
            continue
        spec = TaskSpec.of(case.task)
        res = run_rac(case.data, world.meta_model, case.pi_c, cfg.rac, cfg.rac_iters, spec, seed=k)
        rep = check_theorem1(case.task, res.policy, case.pi_beta, case.pi_c, res.learnt,
                             case.data.marginal(), cfg.rac.replace(beta=res.beta, lam=res.lam))
        lo, hi = rep.alpha_window if rep.alpha_window else (None, None)
        rows.append({"seed": k, "data_quality": dq, "meta_quality": mq, "nu_pi": rep.nu_pi,
                     "nu_beta": rep.nu_beta, "nu_pi_c": rep.nu_pi_c, "epsilon": rep.epsilon,
                     "window_lo": lo, "window_hi": hi, "alpha": rep.alpha_used,
                     "condition_met": rep.condition_met, "J_policy": rep.J_policy, "J_beta": rep.J_beta,
                     "J_meta": rep.J_meta, "improved_over_beta": rep.improved_over_beta,
                     "improved_over_meta": rep.improved_over_meta, "D": rep.divergence,
                     "reason": rep.reason})
    return rows


def rows_csv(rows: list[dict]) -> str:
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    return _csv(keys, rows)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _record_dict(rec: RunRecord) -> dict:
    d = dataclasses.asdict(rec)
    d["rows"] = [{k: _jsonable(v) for k, v in row.items()} for row in rec.rows]
    d["summary"] = {k: _jsonable(v) for k, v in rec.summary.items()}
    return d


def load_records(run_dir: str | os.PathLike) -> list[RunRecord]:
    path = Path(run_dir) / "records.json"
    try:
        return [RunRecord(**d) for d in json.loads(path.read_text())]
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot read run records from {path}: {exc}") from exc


def summary_csv(records: list[RunRecord]) -> str:
    return _csv(SUMMARY_HEADER, summarize(records))


def read_summary(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
