"""Multi-agent, multi-trial experiment orchestration.

A config is an INI file::

    [experiment]
    rounds = 2000
    trials = 20
    seed = 0
    out = results/nonlinear

    [environment]
    kind = synthetic-nonlinear        # synthetic-linear | tabular | constant
    context_dim = 20
    action_dim = 16
    actions = 10

    [agent:fp]
    type = functional-posterior
    kl_weight = 0.1, 0.01             # a comma list is a grid for `sweep`

Trial ``t`` replays the same environment stream for every agent. Agents of
the same type also share their own random stream per trial, so variants of
one agent are compared on common random numbers.
"""
from __future__ import annotations

import configparser
import csv
import io
import itertools
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import (BbbAgent, BootstrappedAgent, DropoutAgent, NeuralGreedyAgent,
                        ParameterNoiseAgent, UniformAgent)
from .core import (Environment, OracleAgent, make_constant_table, make_synthetic_linear,
                   make_synthetic_nonlinear, run_trial)
from .errors import BanditError, ContractError, ParseError
from .fbnn import FbnnConfig, FunctionalPosteriorAgent

LR_GRID = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]


def _hidden(text: str) -> tuple:
    return tuple(int(h) for h in text.replace("x", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_NEURAL = {"lr": float, "optimizer": str, "hidden": _hidden, "steps": int, "batch_size": int}
_FBNN = {f.name: {bool: _bool, tuple: _hidden}.get(type(f.default), type(f.default))
         for f in fields(FbnnConfig)}

AGENT_PARAMS = {
    "uniform": {},
    "oracle": {},
    "neural-greedy": {**_NEURAL, "epsilon": float},
    "bbb": {**_NEURAL, "sigma1": float, "sigma2": float, "pi_mix": float,
            "prior_mean": float, "kl_weight": float},
    "dropout": {**_NEURAL, "p": float},
    "bootstrapped": {**_NEURAL, "q": int},
    "parameter-noise": {**_NEURAL, "sigma": float, "threshold": float},
    "functional-posterior": _FBNN,
}

DEFAULT_GRIDS = {
    "uniform": {},
    "oracle": {},
    "neural-greedy": {"lr": LR_GRID, "epsilon": [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]},
    "bbb": {"lr": LR_GRID, "sigma1": [1.0, 1e-1, 1e-2], "prior_mean": [1.0, 1e-1, 1e-2]},
    "dropout": {"lr": LR_GRID, "p": [0.2, 0.4, 0.6, 0.8]},
    "bootstrapped": {"lr": LR_GRID, "q": [2, 3, 5, 10]},
    "parameter-noise": {"lr": LR_GRID, "sigma": LR_GRID},
    "functional-posterior": {"lr": LR_GRID, "kl_weight": [1e-1, 1e-2, 1e-3, 1e-4]},
}

ENV_PARAMS = {
    "synthetic-linear": {"context_dim": int, "action_dim": int, "actions": int, "seed": int,
                         "n_contexts": int, "near_duplicate_pairs": int},
    "synthetic-nonlinear": {"context_dim": int, "action_dim": int, "actions": int, "seed": int,
                            "n_contexts": int, "near_duplicate_pairs": int, "width": int},
    "tabular": {"path": str, "seed": int},
    "constant": {"rewards": lambda s: [float(v) for v in s.split(",")], "seed": int},
}
ENV_REQUIRED = {
    "synthetic-linear": ("context_dim", "action_dim", "actions"),
    "synthetic-nonlinear": ("context_dim", "action_dim", "actions"),
    "tabular": ("path",),
    "constant": ("rewards",),
}
EXPERIMENT_KEYS = {"rounds": int, "trials": int, "seed": int, "out": str, "name": str}


@dataclass
class AgentSpec:
    label: str
    type: str
    grid: dict = field(default_factory=dict)    # key -> list of values

    def points(self) -> list[dict]:
        """Every grid combination, in declared order (last key varies fastest)."""
        keys = list(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]

    @property
    def is_grid(self) -> bool:
        return any(len(v) > 1 for v in self.grid.values())


@dataclass
class ExperimentConfig:
    environment: dict
    agents: list
    rounds: int = 2000
    trials: int = 20
    seed: int = 0
    out: str = "results"
    name: str = ""

    def __post_init__(self):
        if self.rounds < 1 or self.trials < 1:
            raise ContractError("rounds and trials must be >= 1")
        if not self.agents:
            raise ContractError("config declares no agents")
        labels = [a.label for a in self.agents]
        if len(set(labels)) != len(labels):
            raise ContractError(f"duplicate agent labels: {labels}")
        for a in self.agents:
            if any(len(v) == 0 for v in a.grid.values()):
                raise ContractError(f"agent {a.label}: empty grid")
        if not self.name:
            self.name = self.environment.get("kind", "env")


def _convert(path, section, key, text, conv, grid: bool):
    parts = [p.strip() for p in text.split(",")] if grid else [text.strip()]
    try:
        values = [conv(p) for p in parts]
    except ValueError as exc:
        raise ParseError(path, None, f"[{section}] {key}: {exc}") from None
    return values if grid else values[0]


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ParseError(path, getattr(exc, "lineno", None), str(exc).splitlines()[0]) from None
    exp, env, agents = {}, None, []
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "experiment":
            for key, val in items.items():
                if key not in EXPERIMENT_KEYS:
                    raise ParseError(path, None, f"[experiment] unknown key {key!r}")
                exp[key] = _convert(path, section, key, val, EXPERIMENT_KEYS[key], grid=False)
        elif section == "environment":
            kind = items.pop("kind", None)
            if kind not in ENV_PARAMS:
                raise ParseError(path, None, f"[environment] kind must be one of {sorted(ENV_PARAMS)}")
            env = {"kind": kind}
            for key, val in items.items():
                if key not in ENV_PARAMS[kind]:
                    raise ParseError(path, None, f"[environment] unknown key {key!r} for {kind}")
                env[key] = _convert(path, section, key, val, ENV_PARAMS[kind][key], grid=False)
            missing = [k for k in ENV_REQUIRED[kind] if k not in env]
            if missing:
                raise ParseError(path, None, f"[environment] missing keys {missing}")
        elif section.startswith("agent:"):
            label = section.split(":", 1)[1].strip()
            kind = items.pop("type", None)
            if kind not in AGENT_PARAMS:
                raise ParseError(path, None, f"[{section}] type must be one of {sorted(AGENT_PARAMS)}")
            grid = {}
            for key, val in items.items():
                if key not in AGENT_PARAMS[kind]:
                    raise ParseError(path, None, f"[{section}] unknown key {key!r} for {kind}")
                grid[key] = _convert(path, section, key, val, AGENT_PARAMS[kind][key], grid=True)
            agents.append(AgentSpec(label, kind, grid))
        else:
            raise ParseError(path, None, f"unknown section [{section}]")
    if env is None:
        raise ParseError(path, None, "missing [environment] section")
    try:
        return ExperimentConfig(env, agents, **exp)
    except ContractError as exc:
        raise ParseError(path, None, str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, None, f"cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def build_environment(spec: dict, base_seed: int = 0) -> Environment:
    kind = spec["kind"]
    seed = spec.get("seed", base_seed)
    if kind == "constant":
        return make_constant_table(spec["rewards"], seed)
    if kind == "tabular":
        from .data import load_prepared
        return load_prepared(spec["path"]).environment(seed)
    extra = {k: spec[k] for k in ("n_contexts", "near_duplicate_pairs", "width") if k in spec}
    make = make_synthetic_linear if kind == "synthetic-linear" else make_synthetic_nonlinear
    return make(spec["context_dim"], spec["action_dim"], spec["actions"], seed, **extra)


def make_agent(kind: str, params: dict, env: Environment, rng: np.random.Generator):
    if kind == "oracle":
        return OracleAgent()
    if kind == "functional-posterior":
        return FunctionalPosteriorAgent(env.actions, env.context_dim, FbnnConfig(**params), rng)
    cls = {"uniform": UniformAgent, "neural-greedy": NeuralGreedyAgent, "bbb": BbbAgent,
           "dropout": DropoutAgent, "bootstrapped": BootstrappedAgent,
           "parameter-noise": ParameterNoiseAgent}[kind]
    return cls(env.actions, env.context_dim, rng, **params)


def stream_seed(base: int, trial: int) -> int:
    """Environment stream seed: shared by every agent for a trial index."""
    return int(np.random.SeedSequence([base, trial]).generate_state(1)[0])


def agent_seed(base: int, kind: str, trial: int) -> int:
    return int(np.random.SeedSequence([base, zlib.crc32(kind.encode()), trial]).generate_state(1)[0])


@dataclass
class TrialResult:
    label: str
    point: int
    trial: int
    checksum: str
    instantaneous: Optional[np.ndarray] = None
    chosen: Optional[np.ndarray] = None
    oracle: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.instantaneous)


def _run_task(task) -> TrialResult:
    env, label, kind, point, params, rounds, trial, base = task
    s_seed = stream_seed(base, trial)
    checksum = env.checksum(rounds, s_seed)
    try:
        agent = make_agent(kind, params, env, np.random.default_rng(agent_seed(base, kind, trial)))
        trace, _ = run_trial(env, agent, rounds, s_seed)
    except (BanditError, ArithmeticError, ValueError, TypeError) as exc:
        return TrialResult(label, point, trial, checksum, error=f"{type(exc).__name__}: {exc}")
    return TrialResult(label, point, trial, checksum, trace.instantaneous, trace.chosen,
                       trace.oracle)


def run_tasks(tasks, jobs: int = 1) -> list[TrialResult]:
    """Run trial tasks, in order; after a failure the agent's later trials are skipped."""
    if jobs <= 1:
        failed, out = set(), []
        for task in tasks:
            key = (task[1], task[3])
            if key in failed:
                continue
            res = _run_task(task)
            if res.error:
                failed.add(key)
            out.append(res)
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def _fmt(x) -> str:
    return repr(float(x))


def _params_text(params: dict) -> str:
    return ";".join(f"{k}={' '.join(map(str, v)) if isinstance(v, tuple) else v}"
                    for k, v in sorted(params.items()))


def trace_csv(res: TrialResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "instantaneous_regret", "cumulative_regret", "action", "oracle_action"])
    for t, (r, c, a, o) in enumerate(zip(res.instantaneous, res.cumulative, res.chosen,
                                         res.oracle), start=1):
        w.writerow([t, _fmt(r), _fmt(c), int(a), int(o)])
    return buf.getvalue()


@dataclass
class AgentSummary:
    label: str
    type: str
    params: dict
    finals: list
    status: str = "ok"

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals)) if self.finals else float("nan")

    @property
    def sem(self) -> float:
        n = len(self.finals)
        return float(np.std(self.finals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def summary_csv(rows: list[AgentSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "type", "mean_final_regret", "sem", "trials", "params", "status"])
    for s in rows:
        w.writerow([s.label, s.type, _fmt(s.mean), _fmt(s.sem), len(s.finals),
                    _params_text(s.params), s.status])
    return buf.getvalue()


def _check_fairness(results: list[TrialResult]):
    by_trial = {}
    for r in results:
        if by_trial.setdefault(r.trial, r.checksum) != r.checksum:
            raise ContractError(f"trial {r.trial}: agents saw different environment streams")
    return {str(t): c for t, c in sorted(by_trial.items())}


def _write_outputs(out: Path, files: dict, force: bool):
    """Write every file, refusing to replace differing content unless ``force``."""
    clashes = [name for name, text in files.items()
               if (out / name).exists() and (out / name).read_text(encoding="utf-8") != text]
    if clashes and not force:
        raise ContractError(f"{out}: existing results differ ({', '.join(sorted(clashes)[:3])}"
                            f"{'...' if len(clashes) > 3 else ''}); pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            with open(out / name, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    except OSError as exc:
        raise BanditError(f"{exc.filename}: {exc.strerror}") from None


@dataclass
class RunOutcome:
    summaries: list
    results: list
    out: Path
    sweep: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.summaries)


def _tasks(cfg, env, points_by_agent):
    tasks = []
    for spec in cfg.agents:
        for p_idx, params in enumerate(points_by_agent[spec.label]):
            for t in range(cfg.trials):
                tasks.append((env, spec.label, spec.type, p_idx, params, cfg.rounds, t, cfg.seed))
    return tasks


def _summaries(cfg, points_by_agent, results):
    table = {}
    for spec in cfg.agents:
        for p_idx, params in enumerate(points_by_agent[spec.label]):
            rs = [r for r in results if r.label == spec.label and r.point == p_idx]
            errs = [r.error for r in rs if r.error]
            finals = [float(r.cumulative[-1]) for r in rs if not r.error]
            status = "ok" if not errs else "failed: " + errs[0]
            table[spec.label, p_idx] = AgentSummary(spec.label, spec.type, params,
                                                    [] if errs else finals, status)
    return table


def _meta(cfg, checksums, extra=None) -> str:
    meta = {"name": cfg.name, "environment": cfg.environment, "rounds": cfg.rounds,
            "trials": cfg.trials, "seed": cfg.seed,
            "agents": [{"label": a.label, "type": a.type,
                        "grid": {k: [list(x) if isinstance(x, tuple) else x for x in v]
                                 for k, v in a.grid.items()}} for a in cfg.agents],
            "stream_checksums": checksums}
    meta.update(extra or {})
    return json.dumps(meta, indent=2, sort_keys=True) + "\n"


def run_experiment(cfg: ExperimentConfig, force: bool = False, jobs: int = 1) -> RunOutcome:
    """Run every agent for ``cfg.trials`` trials and write traces plus a summary."""
    grids = [a.label for a in cfg.agents if a.is_grid]
    if grids:
        raise ContractError(f"agents {grids} declare grids; use sweep")
    env = build_environment(cfg.environment, cfg.seed)
    points = {a.label: [{k: v[0] for k, v in a.grid.items()}] for a in cfg.agents}
    results = run_tasks(_tasks(cfg, env, points), jobs)
    checksums = _check_fairness(results)
    table = _summaries(cfg, points, results)
    summaries = [table[a.label, 0] for a in cfg.agents]
    files = {f"trace_{r.label}_{r.trial}.csv": trace_csv(r) for r in results if not r.error}
    files["summary.csv"] = summary_csv(summaries)
    files["run.json"] = _meta(cfg, checksums)
    out = Path(cfg.out)
    _write_outputs(out, files, force)
    return RunOutcome(summaries, results, out)


def grid_sweep(cfg: ExperimentConfig, force: bool = False, jobs: int = 1,
               use_defaults: bool = True) -> RunOutcome:
    """Evaluate every grid point; keep the lowest mean final regret per agent.

    Agents that declare no grid fall back to the default grid for their type
    when ``use_defaults`` is set. Ties go to the earliest grid point.
    """
    env = build_environment(cfg.environment, cfg.seed)
    points = {}
    for a in cfg.agents:
        grid = dict(a.grid)
        if use_defaults and not a.is_grid:
            grid = {**DEFAULT_GRIDS[a.type], **{k: v for k, v in grid.items()
                                                if k not in DEFAULT_GRIDS[a.type]}}
        points[a.label] = AgentSpec(a.label, a.type, grid).points()
    results = run_tasks(_tasks(cfg, env, points), jobs)
    checksums = _check_fairness(results)
    table = _summaries(cfg, points, results)

    best, rows = [], []
    for a in cfg.agents:
        cands = [table[a.label, i] for i in range(len(points[a.label]))]
        rows.extend((a.label, i, s) for i, s in enumerate(cands))
        ok = [(s.mean, i) for i, s in enumerate(cands) if s.status == "ok"]
        if ok:
            idx = min(ok)[1]              # min on (mean, index): ties -> first point
            best.append((a, idx, cands[idx]))
        else:
            best.append((a, 0, cands[0]))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "grid_index", "params", "mean_final_regret", "sem", "trials", "status"])
    for label, i, s in rows:
        w.writerow([label, i, _params_text(s.params), _fmt(s.mean), _fmt(s.sem),
                    len(s.finals), s.status])
    summaries = [s for _, _, s in best]
    files = {"sweep.csv": buf.getvalue(), "summary.csv": summary_csv(summaries)}
    for a, idx, s in best:
        for r in results:
            if r.label == a.label and r.point == idx and not r.error:
                files[f"trace_{r.label}_{r.trial}.csv"] = trace_csv(r)
    files["run.json"] = _meta(cfg, checksums, {"best": {a.label: s.params for a, _, s in best}})
    out = Path(cfg.out)
    _write_outputs(out, files, force)
    return RunOutcome(summaries, results, out, rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report(directory, force: bool = False) -> Path:
    """Aggregate traces into ``aggregate_<env>.csv``: per-agent, per-round mean and SEM."""
    out = Path(directory)
    try:
        meta = json.loads((out / "run.json").read_text(encoding="utf-8"))
        summary = _read_csv(out / "summary.csv")
    except OSError as exc:
        raise BanditError(f"{exc.filename}: {exc.strerror}") from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "round", "mean_cumulative_regret", "sem", "trials"])
    for row in summary:
        label = row["agent"]
        paths = sorted(out.glob(f"trace_{label}_*.csv"),
                       key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if not paths:
            continue
        curves = np.array([[float(r["cumulative_regret"]) for r in _read_csv(p)] for p in paths])
        finals = curves[:, -1]
        if not np.isclose(float(row["mean_final_regret"]), finals.mean(), rtol=1e-12, atol=1e-9):
            raise ContractError(f"{out}: summary for {label} disagrees with its traces")
        n = curves.shape[0]
        sem = curves.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(curves.shape[1])
        for t, (m, s) in enumerate(zip(curves.mean(axis=0), sem), start=1):
            w.writerow([label, t, _fmt(m), _fmt(s), n])
    name = "".join(c if c.isalnum() or c in "-_" else "_" for c in meta.get("name", "env"))
    target = f"aggregate_{name}.csv"
    _write_outputs(out, {target: buf.getvalue()}, force)
    return out / target


def default_jobs() -> int:
    return os.cpu_count() or 1
