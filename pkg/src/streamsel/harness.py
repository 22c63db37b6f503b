"""Experiment configuration, replication driver and result files.

An experiment runs ``replications`` independent copies of one procedure and
reports, for every stage, the fraction of copies that picked the true best
design. Configurations are YAML documents::

    model:
      kind: quadratic            # or inventory
      design_offsets: [0, 1, 2]  # quadratic: x_i = sum(theta) + offset
    streams:
      - {family: exponential, theta: 1.0, cost: 1.0}
      - {family: exponential, theta: 2.0, batch: 20}   # given data stream
    partitions:
      - {streams: [0], budget: 10}
    simulation: {budget: 100, cost: 1.0}
    procedure: sba
    T: 400
    n0: 50
    m0: 10
    replications: 200
    seed: 2024

Streams with a ``batch`` receive that many observations every stage and
form their own partition; every other stream must appear in exactly one
entry of ``partitions``.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np
import yaml

from streamsel.engine import PROCEDURES, ConfigurationError, Replication, RunConfig, StreamLayout, solve_stage_inputs
from streamsel.input_models import make_family
from streamsel.models import InventoryModel, QuadraticModel

WILSON_Z = NormalDist().inv_cdf(0.975)
ORACLE_CACHE_NAME = "inventory_oracle.json"
TIE_BREAK_NOTE = "argmax ties resolved to the lowest design index"


class SchemaError(ConfigurationError):
    """Config document does not match the expected structure."""

    def __init__(self, field_path: str, message: str, line: int | None = None):
        self.field_path = field_path
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field_path}: {message}")


class OracleCacheMissing(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    model: dict
    streams: list
    partitions: list
    simulation: dict
    T: int
    procedure: str = "sba"
    n0: int = 2
    m0: int = 2
    replications: int = 1
    seed: int = 0
    oracle_mode: bool = False
    output: str = "results"
    oracle_cache: str | None = None
    solver_tol: float = 1e-8
    base_dir: str = field(default=".", compare=False, repr=False)

    def to_dict(self) -> dict:
        out = {
            "model": copy.deepcopy(self.model),
            "streams": copy.deepcopy(self.streams),
            "partitions": copy.deepcopy(self.partitions),
            "simulation": copy.deepcopy(self.simulation),
            "procedure": self.procedure,
            "T": self.T,
            "n0": self.n0,
            "m0": self.m0,
            "replications": self.replications,
            "seed": self.seed,
            "oracle_mode": self.oracle_mode,
            "output": self.output,
            "solver_tol": self.solver_tol,
        }
        if self.oracle_cache is not None:
            out["oracle_cache"] = self.oracle_cache
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return config_from_dict(data, base_dir=self.base_dir)

    # -- derived objects

    def build_model(self):
        spec = self.model
        n_streams = len(self.streams)
        if spec["kind"] == "quadratic":
            theta = [s["theta"] for s in self.streams]
            if "design_points" in spec:
                return QuadraticModel(spec["design_points"], n_streams, spec.get("noise_sd", 1.0))
            return QuadraticModel.from_offsets(theta, spec["design_offsets"], spec.get("noise_sd", 1.0))
        return InventoryModel(
            spec["levels"],
            n_streams,
            periods=spec.get("periods", 6),
            holding_cost=spec.get("holding_cost", 0.5),
            backlog_cost=spec.get("backlog_cost", 1.0),
            max_production=float(spec.get("max_production", float("inf"))),
        )

    def build_layout(self) -> StreamLayout:
        families = [make_family(s["family"]) for s in self.streams]
        given = ["batch" in s for s in self.streams]
        costs = [float(s.get("cost", 1.0)) for s in self.streams]
        groups = [list(p["streams"]) for p in self.partitions]
        budgets = [float(p["budget"]) for p in self.partitions]
        for s, spec in enumerate(self.streams):
            if given[s]:
                groups.append([s])
                budgets.append(float(spec["batch"]) * costs[s])
        n_designs = self.build_model().n_designs
        sim_cost = self.simulation.get("cost", 1.0)
        sim_costs = np.broadcast_to(np.asarray(sim_cost, dtype=float), (n_designs,)).copy()
        return StreamLayout(
            families=families,
            theta_true=[s["theta"] for s in self.streams],
            groups=groups,
            stream_costs=costs,
            group_budgets=budgets,
            sim_costs=sim_costs,
            sim_budget=float(self.simulation["budget"]),
            n0=self.n0,
            m0=self.m0,
            given=given,
        )

    def cache_path(self) -> Path:
        name = self.oracle_cache or ORACLE_CACHE_NAME
        path = Path(name)
        return path if path.is_absolute() else Path(self.base_dir) / path


_REQUIRED = ("model", "streams", "simulation", "T")
_INT_FIELDS = ("T", "n0", "m0", "replications", "seed")


def _line_index(text: str) -> dict:
    """Map dotted field paths to 1-based source lines."""
    lines: dict = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                lines[path] = key.start_mark.line + 1
                walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for k, item in enumerate(node.value):
                path = f"{prefix}[{k}]"
                lines[path] = item.start_mark.line + 1
                walk(item, path)

    if root is not None:
        walk(root, "")
    return lines


def config_from_dict(data, base_dir=".", lines: dict | None = None) -> ExperimentConfig:
    lines = lines or {}

    def fail(path, msg):
        parent = path
        while parent and parent not in lines:
            parent = parent.rpartition(".")[0]
        raise SchemaError(path, msg, lines.get(path, lines.get(parent)))

    if not isinstance(data, dict):
        fail("<root>", "expected a mapping of sections")
    known = set(ExperimentConfig.__dataclass_fields__) - {"base_dir"}
    for key in data:
        if key not in known:
            fail(str(key), "unknown field")
    for key in _REQUIRED:
        if key not in data:
            fail(key, "required field is missing")
    for key in _INT_FIELDS:
        if key in data and (isinstance(data[key], bool) or not isinstance(data[key], int)):
            fail(key, f"expected an integer, got {data[key]!r}")
    if data["T"] < 0:
        fail("T", "must be nonnegative")
    if data.get("replications", 1) < 1:
        fail("replications", "must be at least 1")
    proc = data.get("procedure", "sba")
    if proc not in PROCEDURES:
        fail("procedure", f"unknown procedure {proc!r}; expected one of {sorted(PROCEDURES)}")

    model = data["model"]
    if not isinstance(model, dict) or "kind" not in model:
        fail("model.kind", "required field is missing")
    if model["kind"] == "quadratic":
        grid = model.get("design_offsets", model.get("design_points"))
        if grid is None:
            fail("model.design_offsets", "required for the quadratic model")
        grid_key = "design_offsets" if "design_offsets" in model else "design_points"
    elif model["kind"] == "inventory":
        grid = model.get("levels")
        grid_key = "levels"
    else:
        fail("model.kind", f"unknown model {model['kind']!r}; expected 'quadratic' or 'inventory'")
    if not isinstance(grid, list) or not grid:
        fail(f"model.{grid_key}", "design grid must be a nonempty list")

    streams = data["streams"]
    if not isinstance(streams, list) or not streams:
        fail("streams", "expected a nonempty list of streams")
    active = []
    for s, spec in enumerate(streams):
        path = f"streams[{s}]"
        if not isinstance(spec, dict):
            fail(path, "expected a mapping")
        for key in ("family", "theta"):
            if key not in spec:
                fail(f"{path}.{key}", "required field is missing")
        if spec.get("cost", 1.0) <= 0:
            fail(f"{path}.cost", "must be positive")
        if "batch" in spec:
            if not isinstance(spec["batch"], int) or spec["batch"] < 1:
                fail(f"{path}.batch", "must be a positive integer")
        else:
            active.append(s)
    partitions = data.get("partitions", [])
    seen = []
    for j, part in enumerate(partitions):
        path = f"partitions[{j}]"
        if not isinstance(part, dict) or "streams" not in part or "budget" not in part:
            fail(path, "each partition needs 'streams' and 'budget'")
        if part["budget"] <= 0:
            fail(f"{path}.budget", "must be positive")
        for s in part["streams"]:
            if s not in active:
                fail(f"{path}.streams", f"stream {s} is not an active (non-batch) stream")
        seen.extend(part["streams"])
    if sorted(seen) != active:
        fail("partitions", "every active stream must belong to exactly one partition")

    sim = data["simulation"]
    if not isinstance(sim, dict) or "budget" not in sim:
        fail("simulation.budget", "required field is missing")
    if sim["budget"] <= 0:
        fail("simulation.budget", "must be positive")
    if np.any(np.asarray(sim.get("cost", 1.0), dtype=float) <= 0):
        fail("simulation.cost", "must be positive")

    kwargs = {k: copy.deepcopy(v) for k, v in data.items()}
    kwargs.setdefault("partitions", [])
    cfg = ExperimentConfig(base_dir=str(base_dir), **kwargs)
    try:
        cfg.build_layout()
    except (ConfigurationError, ValueError) as exc:
        raise SchemaError("<layout>", str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise SchemaError("<document>", f"malformed YAML: {exc.problem}", line) from None
    return config_from_dict(data, base_dir=path.parent, lines=_line_index(text))


def write_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


# -- ground truth ----------------------------------------------------------------


def load_oracle_cache(path) -> dict:
    path = Path(path)
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def _oracle_key(model, theta) -> str:
    return f"{model.digest()}:{json.dumps([float(t) for t in np.ravel(theta)])}"


def build_oracle_cache(config: ExperimentConfig, n_oracle: int = 1_000_000, seed: int = 0) -> dict:
    """Estimate every inventory design's mean once and store it in the cache file."""
    model = config.build_model()
    if not isinstance(model, InventoryModel):
        raise ConfigurationError("the oracle cache is only needed for the inventory model")
    theta = np.concatenate([np.ravel(s["theta"]) for s in config.streams])
    means, ses = model.oracle(theta, n_oracle, seed=seed)
    order = np.argsort(-means, kind="stable")
    entry = {
        "model": model.describe(),
        "theta": theta.tolist(),
        "n_oracle": int(n_oracle),
        "seed": int(seed),
        "means": means.tolist(),
        "standard_errors": ses.tolist(),
        "best": int(order[0]),
        # distance of the runner-up in standard errors of the difference is not
        # available without paired outputs, so report the plain mean gap
        "runner_up_gap": float(means[order[0]] - means[order[1]]) if means.size > 1 else None,
    }
    path = config.cache_path()
    cache = load_oracle_cache(path)
    cache[_oracle_key(model, theta)] = entry
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cache, indent=2, sort_keys=True))
    return entry


def true_best_design(config: ExperimentConfig) -> int:
    model = config.build_model()
    theta = np.concatenate([np.ravel(s["theta"]) for s in config.streams])
    if isinstance(model, QuadraticModel):
        return model.true_best(theta)
    entry = load_oracle_cache(config.cache_path()).get(_oracle_key(model, theta))
    if entry is None:
        raise OracleCacheMissing(
            f"no ground truth for this inventory configuration in {config.cache_path()}; run the 'oracle' command first"
        )
    return int(entry["best"])


# -- PCS ---------------------------------------------------------------------------


@dataclass
class PcsCurve:
    pcs: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_rep: int
    true_best: int

    @property
    def stages(self) -> np.ndarray:
        return np.arange(self.pcs.size)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "pcs", "ci_lo", "ci_hi"])
        for t in range(self.pcs.size):
            writer.writerow([t, f"{self.pcs[t]:.6f}", f"{self.ci_lo[t]:.6f}", f"{self.ci_hi[t]:.6f}"])
        return buf.getvalue()


def wilson_interval(successes, n: int, z: float = WILSON_Z) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(successes, dtype=float) / n
    denom = 1.0 + z**2 / n
    centre = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    # clip so the interval always contains p despite rounding at 0 and 1
    return np.minimum(centre - half, p).clip(0.0, 1.0), np.maximum(centre + half, p).clip(0.0, 1.0)


def empirical_pcs(selections, true_best: int) -> PcsCurve:
    """Per-stage fraction of replications that selected ``true_best``."""
    sel = np.asarray(selections)
    if sel.size == 0:
        raise ValueError("no selections to aggregate")
    if sel.ndim != 2:
        raise ValueError("selections must be a rectangular (replications, stages) array")
    hits = (sel == true_best).sum(axis=0)
    n = sel.shape[0]
    lo, hi = wilson_interval(hits, n)
    return PcsCurve(hits / n, lo, hi, n, int(true_best))


# -- running -----------------------------------------------------------------------


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _dump_writer(path: Path):
    def write(stage, payload):
        with path.open("a") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")

    return write


def run_replication(config: ExperimentConfig, replication: int, dump_every: int = 0, dump_dir=None) -> dict:
    """One seeded replication; returns a JSON-ready record."""
    on_stage = None
    if dump_every > 0 and dump_dir is not None:
        path = Path(dump_dir) / f"rep{replication:05d}.jsonl"
        path.unlink(missing_ok=True)
        on_stage = _dump_writer(path)
    run = RunConfig(
        model=config.build_model(),
        layout=config.build_layout(),
        stages=config.T,
        seed=config.seed,
        replication=replication,
        oracle_mode=config.oracle_mode,
        solver_tol=config.solver_tol,
        dump_every=dump_every,
        on_stage=on_stage,
    )
    history = PROCEDURES[config.procedure](run)
    last = history.stages[-1] if history.stages else history.initial
    return {
        "replication": replication,
        "selections": history.selections.tolist(),
        "input_count": last.input_count,
        "sim_count": last.sim_count,
        "digest": last.digest,
    }


def _run_job(job):
    return run_replication(*job)


@dataclass
class ExperimentResult:
    curve: PcsCurve
    histories: list
    manifest: dict


def run_experiment(config: ExperimentConfig, workers: int = 1, dump_every: int = 0, out_dir=None) -> ExperimentResult:
    """Run all replications and aggregate the empirical PCS curve.

    Replications are independent, so they may run in a process pool; records
    are gathered in replication order so results never depend on ``workers``.
    """
    if config.procedure not in PROCEDURES:
        raise ConfigurationError(f"unknown procedure {config.procedure!r}")
    true_best = true_best_design(config)
    dump_dir = None
    if dump_every > 0:
        dump_dir = Path(out_dir or config.output) / "stage_state"
        dump_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, r, dump_every, dump_dir) for r in range(config.replications)]
    started = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            histories = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        histories = [_run_job(job) for job in jobs]
    wall = time.perf_counter() - started
    curve = empirical_pcs([h["selections"] for h in histories], true_best)
    manifest = {
        "config": config.to_dict(),
        "git_describe": _git_describe(),
        "seed": config.seed,
        "true_best": true_best,
        "tie_break": TIE_BREAK_NOTE,
        "workers": workers,
        "wall_time_seconds": round(wall, 3),
        "final_pcs": float(curve.pcs[-1]),
    }
    return ExperimentResult(curve, histories, manifest)


def write_results(result: ExperimentResult, out_dir) -> dict:
    """Write ``pcs.csv``, ``histories.jsonl`` and ``manifest.json``; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "pcs.csv",
        "histories": out / "histories.jsonl",
        "manifest": out / "manifest.json",
    }
    paths["csv"].write_text(result.curve.to_csv())
    with paths["histories"].open("w") as fh:
        for rec in result.histories:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    paths["manifest"].write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def solve_input(config: ExperimentConfig, use_truth: bool = False) -> dict:
    """One plug-in input allocation, from pilot estimates or the true parameters."""
    run = RunConfig(
        model=config.build_model(),
        layout=config.build_layout(),
        stages=0,
        seed=config.seed,
        oracle_mode=use_truth,
        solver_tol=config.solver_tol,
    )
    rep = Replication(run)
    if not use_truth:
        rep.initialize()
    sol = solve_stage_inputs(rep.estimates(), rep.layout, tol=config.solver_tol)
    return {"source": "truth" if use_truth else "pilot", **sol.to_dict()}


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
