"""Synthetic data, timed experiments, speedup tables and plots.

File formats
------------
observations   CSV ``t,y1,...,ym`` plus a JSON sidecar (same stem) holding
               the problem, truth, noise level, observed indices and seed.
traces         CSV ``j,t,theta_mean_<name>...,theta_var_<name>...,ess``.
reports        JSON with the key set of :data:`REPORT_KEYS`.

Every float is written with 17 significant digits so files round-trip
exactly and diff cleanly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backends import Backend, make_backend
from .errors import ConfigError
from .lmm import ADAPTIVE_NAME, INTEGRATOR_NAMES, adaptive_bdf_interval, make_integrator
from .models import AdvDiffModel, MetabolicModel, OdeModel, gaussian_plume_ic
from .pfsmc import ObservationModel, PfConfig, PosteriorTrace, initialize, pf_step, run
from .rng import Purpose, RngStreams

PROBLEMS = ("metabolic", "advdiff")
DATA_RTOL = 1e-8
MIN_SIGMA = 1e-12
TABLE_COLUMNS = ("integrator", "sequential_s", "parallel_s", "batched_s", "S_P", "E_P")
REPORT_KEYS = (
    "config", "config_hash", "problem_hash", "backend", "workers", "wall_time_s", "work",
    "speedup", "efficiency", "final_mean", "final_std", "param_names", "truth", "trace_path",
)


def fmt(x) -> str:
    return format(float(x), ".17g")


# -- problem definitions -----------------------------------------------------------


@dataclass
class Problem:
    """Model, truth, observation protocol and default prior of a test problem.

    The priors and the metabolic constants are package defaults, not values
    taken from any reference.
    """

    name: str
    model: OdeModel
    truth: np.ndarray
    x0: np.ndarray
    t0: float
    times: np.ndarray
    obs_indices: np.ndarray
    prior_mean: np.ndarray
    prior_std: np.ndarray
    x0_std: np.ndarray
    default_h: float


def metabolic_problem(truth=None) -> Problem:
    model = MetabolicModel()
    truth = np.array([2.0, 0.5, 1.0, 0.8] if truth is None else truth, dtype=float)
    x0 = np.array([0.5, 1.0, 1.0])
    return Problem(
        name="metabolic", model=model, truth=truth, x0=x0, t0=0.0,
        times=0.2 * np.arange(1, 51), obs_indices=np.arange(3),
        prior_mean=np.zeros(4), prior_std=np.ones(4), x0_std=0.05 * np.abs(x0), default_h=0.05,
    )


def advdiff_observation_indices(dim: int, count: int, seed: int) -> np.ndarray:
    """``count`` distinct grid indices from stream ``(0, 0, init)``, sorted."""
    u = RngStreams(seed).uniforms(0, [0], Purpose.INIT, dim)[0]
    return np.sort(np.argsort(u, kind="stable")[:count])


def advdiff_problem(n: int = 10, truth=None, seed: int = 0) -> Problem:
    model = AdvDiffModel(n)
    truth = np.array([9.0, 4.0, 6.0, 2.5, -1.5] if truth is None else truth, dtype=float)
    x0 = gaussian_plume_ic(n)
    count = min(20, model.dim)
    return Problem(
        name="advdiff", model=model, truth=truth, x0=x0, t0=0.0,
        times=np.arange(1, 31, dtype=float), obs_indices=advdiff_observation_indices(model.dim, count, seed),
        prior_mean=np.array([math.log(5.0), math.log(5.0), 0.0, 0.0, 0.0]),
        prior_std=np.array([0.5, 0.5, 3.0, 2.0, 2.0]), x0_std=np.zeros(model.dim), default_h=0.1,
    )


def make_problem(name: str, n: int = 10, truth=None, seed: int = 0) -> Problem:
    if name == "metabolic":
        return metabolic_problem(truth)
    if name == "advdiff":
        return advdiff_problem(n, truth, seed)
    raise ConfigError(f"unknown problem {name!r}; expected one of {PROBLEMS}")


# -- data --------------------------------------------------------------------------


@dataclass
class Dataset:
    times: np.ndarray
    Y: np.ndarray
    meta: dict

    @property
    def sigma(self) -> float:
        return float(self.meta["sigma"])

    @property
    def obs_indices(self) -> np.ndarray:
        return np.asarray(self.meta["obs_indices"], dtype=int)


def reference_trajectory(problem: Problem, rtol: float = DATA_RTOL) -> np.ndarray:
    """Noise-free states at ``problem.times`` from the adaptive BDF(1,2) solver."""
    bound = problem.model.bind(problem.truth)
    x, prev, out = problem.x0, problem.t0, []
    for t in problem.times:
        x = adaptive_bdf_interval(problem.model, problem.truth, x, prev, t, rtol, bound=bound).state
        out.append(x)
        prev = t
    return np.array(out)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def generate_data(problem: Problem, seed: int, path, sigma: float | None = None,
                  rtol: float = DATA_RTOL) -> Dataset:
    """Simulate noisy observations and write the CSV and its JSON sidecar."""
    X = reference_trajectory(problem, rtol)
    idx = np.asarray(problem.obs_indices, dtype=int)
    clean = X[:, idx]
    if sigma is None:
        if problem.name == "metabolic":
            sigma = 0.05 * float(np.max(np.abs(X)))
        else:
            sigma = float(np.max(np.abs(problem.x0[idx]))) / 50.0
    if not (math.isfinite(sigma) and sigma >= MIN_SIGMA):
        raise ConfigError(f"sigma must be >= {MIN_SIGMA}")
    rs = RngStreams(seed)
    noise = np.concatenate([rs.normals(j, [0], Purpose.OBSERVE, idx.size) for j in range(1, len(X) + 1)])
    Y = clean + sigma * noise
    meta = {
        "problem": problem.name,
        "n": int(getattr(problem.model, "n", 0)),
        "seed": int(seed),
        "sigma": float(sigma),
        "truth": [float(v) for v in problem.truth],
        "param_names": list(problem.model.param_names),
        "obs_indices": [int(i) for i in idx],
        "t0": float(problem.t0),
        "rtol": float(rtol),
    }
    ds = Dataset(problem.times.copy(), Y, meta)
    write_data(ds, path)
    return ds


def write_data(ds: Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"y{i + 1}" for i in range(ds.Y.shape[1])])
    for t, row in zip(ds.times, ds.Y):
        w.writerow([fmt(t)] + [fmt(v) for v in row])
    path.write_text(buf.getvalue())
    sidecar_path(path).write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")


def load_data(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t" or any(c != f"y{i + 1}" for i, c in enumerate(rows[0][1:])):
        raise ConfigError(f"{path}: expected header t,y1,...,ym")
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return Dataset(body[:, 0].copy(), body[:, 1:].copy(), meta)


# -- experiments ---------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    problem: str = "metabolic"
    n: int = 10
    integrator: str = "bdf2"
    backend: str = "seq"
    workers: int = 1
    N: int = 1000
    h: float | None = None
    a: float = 0.98
    seed: int = 42
    rtol: float = 1e-3
    data: str = ""
    out: str = "out"
    warmup: bool = False
    prior_mean: list | None = None
    prior_std: list | None = None
    truth: list | None = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.integrator not in INTEGRATOR_NAMES:
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.backend not in ("seq", "par", "batch"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")
        if self.backend != "par":
            self.workers = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self, exclude=("out",)) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def problem_hash(self) -> str:
        return self.hash(exclude=("out", "backend", "workers", "warmup"))

    @property
    def label(self) -> str:
        be = f"par{self.workers}" if self.backend == "par" else self.backend
        return f"{self.problem}_{self.integrator}_{be}"


def build_run(cfg: ExperimentConfig, ds: Dataset):
    """Problem, sampler config, observation model and backend for an experiment."""
    meta = ds.meta
    if meta.get("problem", cfg.problem) != cfg.problem:
        raise ConfigError(f"data file is for problem {meta.get('problem')!r}, not {cfg.problem!r}")
    if cfg.problem == "advdiff" and meta.get("n", cfg.n) != cfg.n:
        raise ConfigError(f"data file is for n={meta.get('n')}, not n={cfg.n}")
    prob = make_problem(cfg.problem, cfg.n, meta.get("truth"), meta.get("seed", cfg.seed))
    if "obs_indices" in meta:
        prob.obs_indices = np.asarray(meta["obs_indices"], dtype=int)
    if ds.Y.shape[1] != len(prob.obs_indices):
        raise ConfigError("data columns do not match the observed indices")
    h = cfg.h if cfg.h is not None else prob.default_h
    integ = make_integrator(cfg.integrator, h=h, rtol=cfg.rtol)
    pcfg = PfConfig(
        N=cfg.N, integrator=integ,
        prior_mean=prob.prior_mean if cfg.prior_mean is None else cfg.prior_mean,
        prior_std=prob.prior_std if cfg.prior_std is None else cfg.prior_std,
        x0_mean=prob.x0, x0_std=prob.x0_std, a=cfg.a, seed=cfg.seed,
    )
    sigma = ds.meta.get("sigma")
    if sigma is None:
        raise ConfigError("data sidecar lacks the noise level sigma")
    obs = ObservationModel(prob.obs_indices, float(sigma))
    backend = make_backend(cfg.backend, workers=cfg.workers)
    return prob, pcfg, obs, backend


def write_trace(trace: PosteriorTrace, path):
    names = trace.param_names or tuple(f"p{i + 1}" for i in range(trace.theta_mean.shape[1]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["j", "t"] + [f"theta_mean_{n}" for n in names] + [f"theta_var_{n}" for n in names] + ["ess"])
    for j in range(len(trace)):
        w.writerow([str(j), fmt(trace.t[j])] + [fmt(v) for v in trace.theta_mean[j]]
                   + [fmt(v) for v in trace.theta_var[j]] + [fmt(trace.ess[j])])
    Path(path).write_text(buf.getvalue())


def read_trace(path) -> dict:
    """Parse a trace CSV into ``{"j", "t", "mean", "var", "ess", "names"}`` arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    names = [c[len("theta_mean_"):] for c in head if c.startswith("theta_mean_")]
    p = len(names)
    if head != ["j", "t"] + [f"theta_mean_{n}" for n in names] + [f"theta_var_{n}" for n in names] + ["ess"]:
        raise ConfigError(f"{path}: unexpected trace header")
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(head))
    return {
        "j": body[:, 0].astype(int), "t": body[:, 1], "mean": body[:, 2:2 + p],
        "var": body[:, 2 + p:2 + 2 * p], "ess": body[:, -1], "names": names,
    }


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None, backend: Backend | None = None,
                   write: bool = True) -> dict:
    """Run the sampler on a data file and return (and optionally write) its report.

    Wall time covers every filter step and nothing else: data loading,
    backend start-up during ``--warmup`` and file output are excluded.
    """
    if ds is None:
        if not cfg.data:
            raise ConfigError("no data file given")
        ds = load_data(cfg.data)
    prob, pcfg, obs, own_backend = build_run(cfg, ds)
    backend = backend or own_backend
    t0 = float(ds.meta.get("t0", prob.t0))
    try:
        if cfg.warmup and ds.times.size:
            ens = initialize(pcfg)
            pf_step(ens, ds.Y[0], t0, ds.times[0], 1, pcfg, backend, prob.model, obs)
        backend.reset_report()
        tic = time.perf_counter()
        trace = run(ds.times, ds.Y, pcfg, backend, prob.model, obs, t0=t0)
        wall = time.perf_counter() - tic
    finally:
        if backend is own_backend:
            backend.close()
    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "problem_hash": cfg.problem_hash(),
        "backend": cfg.backend,
        "workers": int(cfg.workers),
        "wall_time_s": float(wall),
        "work": backend.report.to_dict(),
        "speedup": None,
        "efficiency": None,
        "final_mean": [float(v) for v in trace.theta_mean[-1]],
        "final_std": [float(math.sqrt(max(v, 0.0))) for v in trace.theta_var[-1]],
        "param_names": list(trace.param_names),
        "truth": [float(v) for v in prob.truth],
        "trace_path": "",
    }
    report["_trace"] = trace
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        tpath = out / f"trace_{cfg.label}.csv"
        write_trace(trace, tpath)
        report["trace_path"] = str(tpath)
        write_report(report, out / f"report_{cfg.label}.json")
    return report


def _jsonable(obj):
    if isinstance(obj, float):
        # 17 significant digits, emitted as a JSON number
        return json.loads(fmt(obj)) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")


def load_report(path) -> dict:
    rep = json.loads(Path(path).read_text())
    missing = set(REPORT_KEYS) - set(rep)
    if missing:
        raise ConfigError(f"{path}: report lacks keys {sorted(missing)}")
    return rep


def compute_speedup(baseline: dict, candidate: dict) -> tuple[float, float | None]:
    """``S = T_baseline / T_candidate`` and ``E = S / P`` (``None`` for the batched backend)."""
    if baseline.get("problem_hash") != candidate.get("problem_hash"):
        raise ConfigError("reports differ in more than the backend")
    t_base = float(baseline["wall_time_s"])
    t_cand = float(candidate["wall_time_s"])
    if not (t_base > 0 and t_cand > 0):
        raise ConfigError("wall times must be positive")
    S = t_base / t_cand
    if candidate.get("backend") == "batch":
        return S, None
    return S, S / int(candidate.get("workers", 1))


def bench(base: ExperimentConfig, integrators, backends, workers: int = 2, ds: Dataset | None = None) -> list:
    """Sweep integrators x backends one experiment at a time.

    The sequential baseline always runs first for each integrator, even when
    it is not among ``backends``, because every speedup is measured against it.
    """
    backends = list(backends)
    order = ["seq"] + [b for b in backends if b != "seq"]
    reports = []
    for integ in integrators:
        baseline = None
        for be in order:
            if integ == ADAPTIVE_NAME and be == "batch":
                continue
            d = base.to_dict()
            d.update(integrator=integ, backend=be, workers=workers if be == "par" else 1)
            cfg = ExperimentConfig(**d)
            rep = run_experiment(cfg, ds)
            if be == "seq":
                baseline = rep
            elif baseline is not None:
                rep["speedup"], rep["efficiency"] = compute_speedup(baseline, rep)
                if cfg.out:
                    write_report(rep, Path(cfg.out) / f"report_{cfg.label}.json")
            reports.append(rep)
    return reports


# -- tables and plots -------------------------------------------------------------------


def speedup_table(reports) -> list[dict]:
    """One row per integrator with the table columns; missing entries are ``None``."""
    rows = {}
    for rep in reports:
        integ = rep["config"]["integrator"]
        row = rows.setdefault(integ, {c: None for c in TABLE_COLUMNS} | {"integrator": integ, "_P": None})
        be = rep["backend"]
        if be == "seq":
            row["sequential_s"] = rep["wall_time_s"]
        elif be == "par":
            row["parallel_s"] = rep["wall_time_s"]
            row["_P"] = int(rep["workers"])
        elif be == "batch":
            row["batched_s"] = rep["wall_time_s"]
    out = []
    for row in rows.values():
        if row["sequential_s"] and row["parallel_s"]:
            row["S_P"] = row["sequential_s"] / row["parallel_s"]
            row["E_P"] = row["S_P"] / row["_P"]
        out.append({c: row[c] for c in TABLE_COLUMNS})
    return out


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def emit_report(reports, out_dir) -> dict:
    """Write the speedup table (CSV and text), one SVG per parameter and a JSON summary."""
    reports = list(reports)
    if not reports:
        raise ConfigError("need at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = speedup_table(reports)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in table:
        w.writerow(["" if row[c] is None else (fmt(row[c]) if isinstance(row[c], float) else row[c])
                    for c in TABLE_COLUMNS])
    (out / "speedup_table.csv").write_text(buf.getvalue())

    cells = [list(TABLE_COLUMNS)] + [[_cell(row[c]) for c in TABLE_COLUMNS] for row in table]
    widths = [max(len(r[i]) for r in cells) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(r, widths)))
             for r in cells]
    (out / "speedup_table.txt").write_text("\n".join(lines) + "\n")

    plots = plot_traces(reports, out)
    summary = {"table": table, "reports": reports, "plots": [p.name for p in plots]}
    write_report(summary, out / "summary.json")
    return summary


def _trace_of(rep):
    if "_trace" in rep:
        tr = rep["_trace"]
        return {"t": tr.t, "mean": tr.theta_mean, "var": tr.theta_var, "names": list(tr.param_names)}
    if rep.get("trace_path") and os.path.exists(rep["trace_path"]):
        return read_trace(rep["trace_path"])
    return None


def plot_traces(reports, out_dir) -> list[Path]:
    """Estimate +- 2 posterior std against time for every parameter, truth dashed."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    traced = [(r, _trace_of(r)) for r in reports]
    traced = [(r, tr) for r, tr in traced if tr is not None]
    if not traced:
        return []
    names = traced[0][1]["names"] or list(traced[0][0].get("param_names", []))
    truth = traced[0][0].get("truth") or []
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "lmmpf", "svg.fonttype": "none"}):
        for k, name in enumerate(names):
            fig = Figure(figsize=(6, 3.5))
            ax = fig.add_subplot()
            for rep, tr in traced:
                label = ExperimentConfig(**rep["config"]).label
                m = tr["mean"][:, k]
                s = np.sqrt(np.maximum(tr["var"][:, k], 0.0))
                line, = ax.plot(tr["t"], m, label=label)
                ax.fill_between(tr["t"], m - 2 * s, m + 2 * s, alpha=0.2, color=line.get_color())
            if k < len(truth):
                ax.axhline(truth[k], color="k", linestyle="--", linewidth=1, label="truth")
            ax.set_xlabel("t")
            ax.set_ylabel(name)
            ax.legend(fontsize="small")
            fig.tight_layout()
            path = Path(out_dir) / f"param_{name}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            paths.append(path)
    return paths
