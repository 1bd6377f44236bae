"""Experiment sweeps: config parsing, seeding, method x repeat runs, CSV/JSON output."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from .engines import DEFAULT_RHO, EngineConfig, Method, RunReport, run_engine
from .errors import ConfigError, DimensionOutOfRange
from .expfam import ClipPolicy
from .mog import (Dataset, MoGModel, PosteriorMoments, assign_labels, f_norm,
                  generate_synthetic, gibbs_ground_truth)
from .privacy import PrivacySpec

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "# dpsep-results v1"
SUMMARY_SCHEMA = "# dpsep-summary v1"
FIGURE_SCHEMA = "# dpsep-figure v1"
RING_LEVEL = 0.98

RESULT_COLUMNS = [
    "name", "method", "repeat", "seed", "mean_f", "cov_f", "avg_f",
    "epsilon_target", "epsilon_achieved", "delta", "sigma",
    "failures", "repairs", "aborted", "error",
]
SUMMARY_COLUMNS = ["name", "method", "runs", "failed_runs", "mean_f", "cov_f", "avg_f"]


@dataclass(frozen=True)
class MethodSpec:
    name: str
    engine: EngineConfig


@dataclass(frozen=True)
class ExperimentConfig:
    model: MoGModel
    n: int
    methods: tuple[MethodSpec, ...]
    repeats: int = 5
    output_dir: str = "out"
    emit_trace: bool = False
    seed: int = 0
    gibbs_sweeps: int = 5000
    gibbs_burn_in: int = 1000
    workers: int = 1

    def __post_init__(self):
        problems = {}
        if not self.methods:
            problems["methods"] = "at least one method is required"
        names = [m.name for m in self.methods]
        dup = sorted({x for x in names if names.count(x) > 1})
        if dup:
            problems["methods"] = f"duplicate method names: {', '.join(dup)}"
        if self.repeats < 1:
            problems["repeats"] = "must be >= 1"
        if self.n < 1:
            problems["n"] = "must be >= 1"
        if self.gibbs_sweeps <= self.gibbs_burn_in:
            problems["gibbs"] = "sweeps must exceed burn_in"
        for i, m in enumerate(self.methods):
            if m.engine.damping / max(self.n, 1) > 1:
                problems[f"methods[{i}].damping"] = "damping/N exceeds 1"
        if problems:
            raise ConfigError(problems)

    def to_json(self) -> dict:
        return {
            "model": self.model.to_json(), "n": self.n, "repeats": self.repeats,
            "output_dir": str(self.output_dir), "emit_trace": self.emit_trace, "seed": self.seed,
            "gibbs": {"sweeps": self.gibbs_sweeps, "burn_in": self.gibbs_burn_in},
            "workers": self.workers,
            "methods": [{"name": m.name, **m.engine.to_json()} for m in self.methods],
        }


def _method_from_json(obj: dict, defaults: dict, where: str, problems: dict) -> Optional[MethodSpec]:
    if not isinstance(obj, dict):
        problems[where] = "must be an object"
        return None
    try:
        method = Method(obj.get("method"))
    except ValueError:
        problems[f"{where}.method"] = f"unknown method {obj.get('method')!r}"
        return None
    kw = dict(defaults)
    for key in ("iterations", "damping", "seed", "trace_every", "rho", "ep_damping"):
        if obj.get(key) is not None:
            kw[key] = obj[key]
    try:
        clip = None if obj.get("clip") is None else ClipPolicy.from_json(obj["clip"])
    except (ValueError, KeyError, TypeError) as exc:
        problems[f"{where}.clip"] = str(exc)
        return None
    privacy = None
    if obj.get("privacy") is not None:
        p = dict(obj["privacy"])
        if clip is not None:
            p.setdefault("clip_c", clip.c)
        p.setdefault("damping", kw.get("damping", 1.0))
        try:
            privacy = PrivacySpec.from_json(p)
        except (ValueError, TypeError, KeyError) as exc:
            problems[f"{where}.privacy"] = str(exc)
            return None
    # DP-SEP defaults to C=1 when no clip is given
    if method is Method.DPSEP and clip is None:
        clip = ClipPolicy(privacy.clip_c if privacy is not None else 1.0)
    try:
        eng = EngineConfig(method=method, clip=clip, privacy=privacy, **kw)
    except ConfigError as exc:
        for k, v in exc.problems.items():
            problems[f"{where}.{k}"] = v
        return None
    except TypeError as exc:
        problems[where] = str(exc)
        return None
    name = obj.get("name") or method.value
    return MethodSpec(str(name), eng)


def config_from_json(obj: dict) -> ExperimentConfig:
    """Build an ExperimentConfig; every field problem is reported at once."""
    problems = {}
    if not isinstance(obj, dict):
        raise ConfigError({"config": "top level must be a JSON object"})
    try:
        model = MoGModel.from_json(obj.get("model", {}))
    except (ValueError, TypeError) as exc:
        problems["model"] = str(exc)
        model = None
    defaults = {"iterations": 100, "damping": 1.0, "rho": DEFAULT_RHO}
    defaults.update({k: v for k, v in obj.get("defaults", {}).items()
                     if k in ("iterations", "damping", "rho", "trace_every", "ep_damping")})
    if obj.get("emit_trace") and "trace_every" not in defaults:
        defaults["trace_every"] = 10
    raw = obj.get("methods")
    if not isinstance(raw, list) or not raw:
        problems["methods"] = "at least one method is required"
        raw = []
    methods = []
    for i, m in enumerate(raw):
        spec = _method_from_json(m, defaults, f"methods[{i}]", problems)
        if spec is not None:
            methods.append(spec)
    gibbs = obj.get("gibbs", {})
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        model=model, n=int(obj.get("n", 1000)), methods=tuple(methods),
        repeats=int(obj.get("repeats", 5)), output_dir=str(obj.get("output_dir", "out")),
        emit_trace=bool(obj.get("emit_trace", False)), seed=int(obj.get("seed", 0)),
        gibbs_sweeps=int(gibbs.get("sweeps", 5000)), gibbs_burn_in=int(gibbs.get("burn_in", 1000)),
        workers=int(obj.get("workers", 1)))


def load_config(path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError({"config": f"cannot read {path}: {exc}"}) from None
    return config_from_json(obj)


def table1_config(output_dir="out", seed: int = 0, repeats: int = 5, n: int = 1000,
                  iterations: int = 100) -> ExperimentConfig:
    """The mixture-model comparison: EP, SEP, clipped SEP and DP-SEP at three budgets."""
    methods = [
        MethodSpec("EP", EngineConfig(Method.EP, iterations=iterations)),
        MethodSpec("SEP", EngineConfig(Method.SEP, iterations=iterations)),
    ]
    for c in (20, 10, 1):
        methods.append(MethodSpec(f"ClippedSEP_C{c}",
                                  EngineConfig(Method.CLIPPED_SEP, iterations=iterations, clip=ClipPolicy(c))))
    for eps in (50, 5, 1):
        methods.append(MethodSpec(f"DPSEP_eps{eps}", EngineConfig(
            Method.DPSEP, iterations=iterations, clip=ClipPolicy(1.0),
            privacy=PrivacySpec(delta=1e-5, epsilon=float(eps), clip_c=1.0))))
    return ExperimentConfig(model=MoGModel(), n=n, methods=tuple(methods), repeats=repeats,
                            output_dir=str(output_dir), seed=seed)


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and a label path."""
    key = json.dumps([int(master), *parts], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "run"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _write_csv(path: Path, schema: str, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        fh.write(schema + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_csv_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _workers(cfg: ExperimentConfig) -> int:
    env = os.environ.get("DPSEP_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError({"DPSEP_WORKERS": f"not an integer: {env!r}"}) from None
    return max(1, cfg.workers)


def _prepare_repeat(args):
    model, n, master, r, sweeps, burn = args
    data = generate_synthetic(model, n, derive_seed(master, "data", r))
    truth = gibbs_ground_truth(data, model, sweeps=sweeps, burn_in=burn, seed=derive_seed(master, "gibbs", r))
    return data, truth


def _run_one(args) -> RunReport:
    name, eng, data, truth, model, r = args
    try:
        report = run_engine(data, model, eng)
    except Exception as exc:  # a failed run is recorded, the sweep goes on
        log.error("run %s repeat %d failed: %s", name, r, exc)
        report = RunReport(method=eng.method.value, seed=eng.seed, posterior=None,
                           config=eng.to_json(), error=f"{type(exc).__name__}: {exc}")
    report.name = name
    if report.posterior is not None:
        report.f_norms = f_norm(report.posterior, truth)
    elif report.error is None:
        report.error = "final posterior is not proper"
    return report


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def resolve_privacy(cfg: ExperimentConfig) -> ExperimentConfig:
    """Calibrate every DP-SEP method once; all repeats share n and T."""
    methods = []
    for m in cfg.methods:
        eng = m.engine
        if eng.privacy is not None:
            eng = replace(eng, privacy=eng.privacy.resolve(cfg.n, eng.iterations))
        methods.append(MethodSpec(m.name, eng))
    return replace(cfg, methods=tuple(methods))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[RunReport]:
    """Run every method on every repeat's dataset and write results/summary/run files."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_privacy(cfg)
    workers = _workers(cfg)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))

    prepared = _map(_prepare_repeat, [(cfg.model, cfg.n, cfg.seed, r, cfg.gibbs_sweeps, cfg.gibbs_burn_in)
                                      for r in range(cfg.repeats)], workers)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for r, (data, truth) in enumerate(prepared):
        data.write_csv(data_dir / f"data_r{r}.csv")
        (data_dir / f"truth_r{r}.json").write_text(json.dumps(truth.to_json()))

    tasks = []
    for r, (data, truth) in enumerate(prepared):
        for m in cfg.methods:
            eng = replace(m.engine, seed=derive_seed(cfg.seed, m.name, r))
            tasks.append((m.name, eng, data, truth, cfg.model, r))
    reports = _map(_run_one, tasks, workers)

    run_dir = out / "runs"
    run_dir.mkdir(exist_ok=True)
    rows = []
    for (name, eng, _, _, _, r), rep in zip(tasks, reports):
        obj = rep.to_json()
        obj["repeat"] = r
        if not cfg.emit_trace:
            obj.pop("trace")
        (run_dir / f"{_slug(name)}_r{r}.json").write_text(json.dumps(obj, indent=2))
        fn = rep.f_norms
        rows.append({
            "name": name, "method": rep.method, "repeat": r, "seed": rep.seed,
            "mean_f": None if fn is None else fn.mean_f,
            "cov_f": None if fn is None else fn.cov_f,
            "avg_f": None if fn is None else fn.avg_f,
            "epsilon_target": None if eng.privacy is None else eng.privacy.epsilon,
            "epsilon_achieved": None if rep.achieved_privacy is None else rep.achieved_privacy[0],
            "delta": None if rep.achieved_privacy is None else rep.achieved_privacy[1],
            "sigma": rep.sigma, "failures": rep.failures, "repairs": rep.repairs,
            "aborted": rep.aborted, "error": rep.error,
        })
    _write_csv(out / "results.csv", RESULTS_SCHEMA, RESULT_COLUMNS, rows)
    _write_csv(out / "summary.csv", SUMMARY_SCHEMA, SUMMARY_COLUMNS, summarize(rows, cfg.methods))
    return reports


def summarize(rows: Sequence[dict], methods: Sequence[MethodSpec]) -> list[dict]:
    out = []
    for m in methods:
        mine = [r for r in rows if r["name"] == m.name]
        ok = [r for r in mine if r["avg_f"] is not None]
        row = {"name": m.name, "method": m.engine.method.value, "runs": len(ok),
               "failed_runs": len(mine) - len(ok)}
        for k in ("mean_f", "cov_f", "avg_f"):
            row[k] = float(np.mean([r[k] for r in ok])) if ok else None
        out.append(row)
    return out


def partial_failure(reports: Sequence[RunReport]) -> bool:
    return any(r.error is not None or r.aborted for r in reports)


def ellipse_rows(posterior: PosteriorMoments, dims: tuple[int, int], level: float = RING_LEVEL) -> list[dict]:
    """Projected means and confidence-ring geometry for each component."""
    d = posterior.means.shape[1]
    i, k = (int(x) for x in dims)
    if not (0 <= i < d and 0 <= k < d) or i == k:
        raise DimensionOutOfRange(f"dims {dims} invalid for d={d}")
    scale = chi2.ppf(level, 2)
    rows = []
    idx = [i, k]
    for j in range(posterior.j):
        mu = posterior.means[j, idx]
        cov = posterior.covs[j][np.ix_(idx, idx)]
        w, v = np.linalg.eigh(cov)
        major = v[:, 1]
        rows.append({
            "component": j, "mean_x": mu[0], "mean_y": mu[1],
            "cov_xx": cov[0, 0], "cov_xy": cov[0, 1], "cov_yy": cov[1, 1],
            "radius_major": math.sqrt(scale * w[1]), "radius_minor": math.sqrt(scale * w[0]),
            "axis_major_x": major[0], "axis_major_y": major[1],
            "angle_deg": math.degrees(math.atan2(major[1], major[0])),
        })
    return rows


ELLIPSE_COLUMNS = ["component", "mean_x", "mean_y", "cov_xx", "cov_xy", "cov_yy",
                   "radius_major", "radius_minor", "axis_major_x", "axis_major_y", "angle_deg"]


def emit_figure_data(report: RunReport, dims: tuple[int, int], out_dir,
                     data: Optional[Dataset] = None, model: Optional[MoGModel] = None) -> list[Path]:
    """Write ring CSV (and point/label CSV when data is given) for one run."""
    if report.posterior is None:
        raise ValueError("report has no proper posterior")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _slug(report.name or report.method)
    rings = out / f"{stem}_rings.csv"
    _write_csv(rings, FIGURE_SCHEMA, ELLIPSE_COLUMNS, ellipse_rows(report.posterior, dims))
    written = [rings]
    if data is not None:
        model = model or MoGModel(j=report.posterior.j, d=data.d)
        labels = assign_labels(report.posterior, data, model)
        i, k = dims
        pts = [{"x": p[i], "y": p[k], "label": int(l)} for p, l in zip(data.points, labels)]
        path = out / f"{stem}_points.csv"
        _write_csv(path, FIGURE_SCHEMA, ["x", "y", "label"], pts)
        written.append(path)
    return written


def report_from_json(obj: dict) -> RunReport:
    """Rebuild the parts of a RunReport needed for figure output."""
    post = None if obj.get("posterior") is None else PosteriorMoments.from_json(obj["posterior"])
    return RunReport(method=obj.get("method", ""), seed=obj.get("seed", 0), posterior=post,
                     name=obj.get("name"))
