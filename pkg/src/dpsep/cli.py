"""Command line entry point: ``dpsep generate|run|calibrate|bound|figure``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .bound import BoundInputs, DEFAULT_M_MULT, default_m_tail, mc_expected_kl, theorem_bound
from .errors import ConfigError, DPSEPError
from .expfam import GaussianNat
from .harness import (emit_figure_data, load_config, partial_failure, report_from_json,
                      run_experiment, table1_config)
from .mog import Dataset, MoGModel, generate_synthetic
from .privacy import DEFAULT_ORDERS, PrivacySpec

log = logging.getLogger("dpsep")


def _json_out(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(args) -> int:
    model = MoGModel(j=args.j, d=args.d, noise_sd=args.noise_sd)
    if args.config:
        model = load_config(args.config).model
    data = generate_synthetic(model, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_csv(out)
    _json_out({"points": str(out), "n": data.n, "d": data.d})
    return 0


def cmd_run(args) -> int:
    from dataclasses import replace
    cfg = load_config(args.config) if args.config else table1_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.repeats is not None:
        cfg = replace(cfg, repeats=args.repeats)
    out = args.out or cfg.output_dir
    reports = run_experiment(cfg, out)
    bad = partial_failure(reports)
    _json_out({"out": str(out), "runs": len(reports),
               "failed": sum(1 for r in reports if r.error or r.aborted)})
    return 2 if bad else 0


def cmd_calibrate(args) -> int:
    orders = tuple(args.grid) if args.grid else DEFAULT_ORDERS
    spec = PrivacySpec(delta=args.delta, epsilon=args.epsilon, orders=orders).resolve(args.n, args.epochs)
    _json_out({"sigma": spec.sigma, "epsilon": spec.epsilon, "achieved_epsilon": spec.achieved_epsilon(),
               "delta": spec.delta, "sampling_rate": spec.sampling_rate, "steps": spec.steps})
    return 0


def _load_posterior(path, component: int) -> GaussianNat:
    obj = json.loads(Path(path).read_text())
    if "eta" in obj and "lambda" in obj:
        return GaussianNat.from_json(obj)
    # a run report: take one component of the final posterior
    post = obj.get("posterior", obj)
    if post is None:
        raise ConfigError({"posterior": "run report has no posterior"})
    mean = np.asarray(post["means"][component], dtype=float)
    cov = np.asarray(post["covs"][component], dtype=float)
    lam = np.linalg.inv(cov)
    return GaussianNat(lam @ mean, lam, proper=True)


def cmd_bound(args) -> int:
    q = _load_posterior(args.posterior, args.component)
    s = args.sigma
    m = default_m_tail(q.dim, s, args.m_mult)
    res = theorem_bound(BoundInputs(q, s, s, args.rho, m))
    mc = mc_expected_kl(q, s, s, args.rho, samples=args.samples, seed=args.seed or 0)
    _json_out({"bound": None if math.isnan(res.bound) else res.bound, "confidence": res.confidence,
               "mc_estimate": mc.estimate, "mc_stderr": mc.stderr, "applicable": res.applicable,
               "reason": res.reason, "m_tail": res.m_tail, "psd_repair_rate": mc.psd_repair_rate})
    return 0


def cmd_figure(args) -> int:
    rep = report_from_json(json.loads(Path(args.report).read_text()))
    data = Dataset.read_csv(args.data) if args.data else None
    model = load_config(args.config).model if args.config else None
    paths = emit_figure_data(rep, tuple(args.dims), args.out or ".", data, model)
    _json_out({"written": [str(p) for p in paths]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpsep", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic mixture dataset as CSV")
    g.add_argument("--config")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--j", type=int, default=4)
    g.add_argument("--d", type=int, default=4)
    g.add_argument("--noise-sd", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data.csv")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run an experiment sweep (default: the 8-method comparison)")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--repeats", type=int)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("calibrate", help="noise multiplier for an (epsilon, delta) target")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--epochs", type=int, required=True)
    c.add_argument("--grid", type=float, nargs="+")
    c.set_defaults(fn=cmd_calibrate)

    b = sub.add_parser("bound", help="KL bound vs Monte-Carlo estimate for one posterior")
    b.add_argument("--posterior", required=True, help="GaussianNat JSON or a run report JSON")
    b.add_argument("--component", type=int, default=0)
    b.add_argument("--sigma", type=float, required=True, help="per-entry noise std (sigma1 = sigma2)")
    b.add_argument("--rho", type=float, default=1e-6)
    b.add_argument("--m-mult", type=float, default=DEFAULT_M_MULT)
    b.add_argument("--samples", type=int, default=100_000)
    b.add_argument("--seed", type=int)
    b.set_defaults(fn=cmd_bound)

    f = sub.add_parser("figure", help="ring and label CSVs for a run report")
    f.add_argument("--report", required=True)
    f.add_argument("--data")
    f.add_argument("--config")
    f.add_argument("--dims", type=int, nargs=2, default=[0, 1])
    f.add_argument("--out")
    f.set_defaults(fn=cmd_figure)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "problems": exc.problems}, indent=2), file=sys.stderr)
        return 1
    except (DPSEPError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
