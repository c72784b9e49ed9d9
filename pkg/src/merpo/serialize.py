"""Plain-text file formats.

Every file starts with a ``<kind> v<version>`` line, followed by ``key value`` scalar
lines and array sections. An array section is a line ``@name d1 d2 ...`` followed by
the row-major values, one trailing-axis row per line. Reals are written with 17
significant digits, so a write/read round trip is exact.

Datasets use their own line format: a header ``task_id n_states n_actions quality seed``
and one ``s a r s'`` line per tuple.
"""
from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np

from .mdp import StochasticPolicy, TabularMdp
from .meta import MetaState
from .models import MetaModelParams, ModelParams
from .tasks import OfflineDataset

__all__ = [
    "FormatError",
    "fmt",
    "dump_mdp",
    "load_mdp",
    "dump_policy",
    "load_policy",
    "dump_q",
    "load_q",
    "dump_model",
    "load_model",
    "dump_meta_state",
    "load_meta_state",
    "dump_dataset",
    "load_dataset",
    "write_text",
]

VERSION = 1


class FormatError(ValueError):
    """Malformed or mismatched input file."""


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary file and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump(kind: str, scalars: dict, arrays: dict) -> str:
    out = io.StringIO()
    out.write(f"{kind} v{VERSION}\n")
    for k, v in scalars.items():
        out.write(f"{k} {v if isinstance(v, (int, str)) else fmt(v)}\n")
    for name, a in arrays.items():
        a = np.asarray(a, dtype=float)
        dims = " ".join(str(d) for d in a.shape)
        out.write(f"@{name} {dims}\n")
        rows = a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)
        for row in rows:
            out.write(" ".join(fmt(x) for x in row) + "\n")
    return out.getvalue()


def _parse(text: str, kind: str) -> tuple[dict, dict]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise FormatError("empty file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != kind:
        raise FormatError(f"expected a '{kind}' file, found header {lines[0]!r}")
    if head[1] != f"v{VERSION}":
        raise FormatError(f"unsupported {kind} version {head[1]}")
    scalars, arrays = {}, {}
    i = 1
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("@"):
            parts = ln[1:].split()
            name, shape = parts[0], tuple(int(d) for d in parts[1:])
            n_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            try:
                vals = [float(x) for row in lines[i + 1:i + 1 + n_rows] for x in row.split()]
            except ValueError as exc:
                raise FormatError(f"non-numeric entry in section {name}") from exc
            if len(vals) != int(np.prod(shape)):
                raise FormatError(f"section {name}: expected {int(np.prod(shape))} values, got {len(vals)}")
            arrays[name] = np.array(vals).reshape(shape)
            i += 1 + n_rows
        else:
            key, _, val = ln.partition(" ")
            scalars[key] = val
            i += 1
    return scalars, arrays


def _need(d: dict, key: str, kind: str):
    if key not in d:
        raise FormatError(f"{kind} file is missing '{key}'")
    return d[key]


def dump_mdp(mdp: TabularMdp) -> str:
    return _dump("tabular-mdp",
                 {"n_states": mdp.n_states, "n_actions": mdp.n_actions,
                  "gamma": mdp.gamma, "r_max": mdp.r_max},
                 {"init_dist": mdp.init_dist, "reward": mdp.reward, "transition": mdp.transition})


def load_mdp(text: str) -> TabularMdp:
    sc, ar = _parse(text, "tabular-mdp")
    try:
        mdp = TabularMdp(_need(ar, "transition", "mdp"), _need(ar, "reward", "mdp"),
                         _need(ar, "init_dist", "mdp"), float(_need(sc, "gamma", "mdp")),
                         float(sc.get("r_max", 1.0)))
    except ValueError as exc:
        raise FormatError(f"invalid MDP: {exc}") from exc
    if (mdp.n_states, mdp.n_actions) != (int(sc.get("n_states", -1)), int(sc.get("n_actions", -1))):
        raise FormatError("declared shape does not match tables")
    return mdp


def dump_policy(policy: StochasticPolicy) -> str:
    return _dump("policy", {}, {"logits": policy.logits})


def load_policy(text: str) -> StochasticPolicy:
    _, ar = _parse(text, "policy")
    return StochasticPolicy(_need(ar, "logits", "policy"))


def dump_q(q: np.ndarray) -> str:
    return _dump("q-table", {}, {"q": q})


def load_q(text: str) -> np.ndarray:
    _, ar = _parse(text, "q-table")
    return _need(ar, "q", "q-table")


def dump_model(model: ModelParams) -> str:
    meta = int(isinstance(model, MetaModelParams))
    return _dump("tabular-model", {"logits": 1, "meta": meta},
                 {"trans_logits": model.trans_logits, "reward_est": model.reward_est})


def load_model(text: str) -> ModelParams:
    sc, ar = _parse(text, "tabular-model")
    cls = MetaModelParams if sc.get("meta") == "1" else ModelParams
    return cls(_need(ar, "trans_logits", "model"), _need(ar, "reward_est", "model"))


def dump_meta_state(state: MetaState) -> str:
    arrays = {"pi_c": state.pi_c.logits, "q_meta": state.q_meta, "alpha": state.alpha_per_task}
    if state.beta_per_task is not None:
        arrays["beta"] = state.beta_per_task
    if state.lambda_per_task is not None:
        arrays["lambda"] = state.lambda_per_task
    return _dump("meta-state", {"iter": int(state.iter)}, arrays)


def load_meta_state(text: str) -> MetaState:
    sc, ar = _parse(text, "meta-state")
    return MetaState(StochasticPolicy(_need(ar, "pi_c", "meta-state")), _need(ar, "q_meta", "meta-state"),
                     _need(ar, "alpha", "meta-state"), int(sc.get("iter", 0)),
                     ar.get("beta"), ar.get("lambda"))


def dump_dataset(data: OfflineDataset) -> str:
    out = io.StringIO()
    out.write(f"{data.task_id} {data.n_states} {data.n_actions} {data.behavior_quality.value} {data.seed}\n")
    for s, a, r, s2 in zip(data.states, data.actions, data.rewards, data.next_states):
        out.write(f"{int(s)} {int(a)} {fmt(r)} {int(s2)}\n")
    return out.getvalue()


def load_dataset(text: str) -> OfflineDataset:
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 5:
        raise FormatError("dataset header must be 'task_id n_states n_actions quality seed'")
    task_id, S, A, quality, seed = lines[0]
    rows = lines[1:]
    if any(len(r) != 4 for r in rows):
        raise FormatError("dataset lines must be 's a r s_next'")
    try:
        s = np.array([int(r[0]) for r in rows], dtype=int)
        a = np.array([int(r[1]) for r in rows], dtype=int)
        rew = np.array([float(r[2]) for r in rows])
        s2 = np.array([int(r[3]) for r in rows], dtype=int)
        return OfflineDataset(int(task_id), int(S), int(A), s, a, rew, s2, quality, int(seed))
    except ValueError as exc:
        raise FormatError(f"invalid dataset: {exc}") from exc
