"""qsdlab command line: classify | spectrum | qsd | simulate | compare | zoo.

Reports are deterministic: JSON with sorted keys and no timestamps, every
numeric setting (seed, dt, truncations, tolerances) echoed back, and the
drift-sign convention note embedded.  CSV output uses '.' decimals, LF line
endings and %.17g floats.  Exit codes: 0 success, 2 usage error (argparse),
3 numerical failure -- in which case a diagnostic.json is written with the
error and whatever partial evidence exists.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .boundary import classify, positivity_criterion
from .model import (CONVENTION_NOTE, DiffusionModel, model_from_json,
                    reduce_unit_diffusion, scale_speed)
from .montecarlo import (SimConfig, dichotomy_probe, histogram_masses,
                         run_ensemble, survival_curve, tv_distance)
from .numerics import QsdlabError
from .spectral import (eigen_fd_oracle, eigen_schrodinger, eigen_shoot,
                       qsd_density)
from .zoo import ZOO, zoo_build

__all__ = ["main"]


def _env_settings() -> dict:
    return {"qsdlab_threads": os.environ.get("QSDLAB_THREADS", "")}


def _emit_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _jsonable(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.floating):
        return _jsonable(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _write_csv(path: str, header: list, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % float(v) for v in row) + "\n")


def _parse_params(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--param needs key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _load_model(args) -> DiffusionModel:
    if getattr(args, "model_json", None):
        with open(args.model_json) as fh:
            return model_from_json(json.load(fh))
    if getattr(args, "zoo", None):
        return zoo_build(args.zoo, _parse_params(getattr(args, "param", None)))
    raise SystemExit("specify a model with --zoo NAME or --model-json FILE")


def _reduced(model: DiffusionModel):
    """(unit-diffusion model, transform-or-None, report fragment)"""
    if model.unit_diffusion:
        return model, None, {"reduced": False}
    red, tr = reduce_unit_diffusion(model)
    return red, tr, {"reduced": True,
                     "reduced_domain": [_jsonable(red.domain[0]),
                                        _jsonable(red.domain[1])],
                     "note": "analysis runs in the unit-diffusion coordinate"}


def _model_report(model: DiffusionModel) -> dict:
    return {"name": model.name, "params": _jsonable(model.params),
            "domain": [_jsonable(model.domain[0]), _jsonable(model.domain[1])],
            "killed": model.killing is not None}


def _spectral(model: DiffusionModel, args):
    method = getattr(args, "method", "auto")
    if method == "auto":
        both_inf = math.isinf(model.domain[0]) and math.isinf(model.domain[1])
        method = "schrodinger" if both_inf else "shoot"
    k = getattr(args, "k", None) or (2 if method == "schrodinger" else 1)
    if method == "shoot":
        trunc = getattr(args, "truncation", None)
        return eigen_shoot(model, K=k, truncations=trunc)
    if method == "fd":
        trunc = getattr(args, "truncation", None)
        tr = None
        if trunc:
            tr = tuple(trunc) if len(trunc) == 2 else float(trunc[0])
        return eigen_fd_oracle(model, grid_size=args.grid_size or 1600,
                               truncation=tr, K=k)
    if method == "schrodinger":
        return eigen_schrodinger(model, K=max(k, 2),
                                 grid_size=args.grid_size or 6000)
    raise SystemExit(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_zoo(args) -> dict:
    return {"models": {name: {"params": _jsonable(entry.params),
                              "doc": entry.doc} for name, entry in ZOO.items()}}


def _cmd_classify(args) -> dict:
    model = _load_model(args)
    red, _, red_info = _reduced(model)
    result = classify(red, tol=args.tol)
    doc = {"model": _model_report(model), "convention": CONVENTION_NOTE,
           "classification": _jsonable(result.to_json()),
           "settings": {"tol": args.tol, **_env_settings()}}
    doc.update(red_info)
    return doc


def _cmd_spectrum(args) -> dict:
    model = _load_model(args)
    red, _, red_info = _reduced(model)
    spec = _spectral(red, args)
    doc = {"model": _model_report(model), "convention": CONVENTION_NOTE,
           "spectrum": _jsonable(spec.to_json()),
           "gap": _jsonable(spec.gap),
           "settings": {"method": spec.method, "k": len(spec.eigenvalues),
                        **_env_settings()}}
    doc.update(red_info)
    if args.oracle and spec.method != "fd":
        trunc = spec.truncation
        tr = trunc[-1] if spec.method == "shoot" else tuple(trunc)
        oracle = eigen_fd_oracle(red, truncation=tr,
                                 K=len(spec.eigenvalues))
        kk = min(len(spec.eigenvalues), len(oracle.eigenvalues))
        diff = float(np.max(np.abs(spec.eigenvalues[:kk]
                                   - oracle.eigenvalues[:kk])))
        doc["oracle"] = {"eigenvalues": _jsonable(oracle.eigenvalues),
                         "max_difference": diff,
                         "agrees_rel": diff <= 1e-4 * (1.0 + abs(spec.lambda0))}
    return doc


def _cmd_qsd(args) -> dict:
    model = _load_model(args)
    red, _, red_info = _reduced(model)
    spec = _spectral(red, args)
    dens = qsd_density(spec, scale_speed(red))
    xs = np.linspace(dens.support[0], dens.support[1], args.points)
    ys = dens.density(xs)
    doc = {"model": _model_report(model), "convention": CONVENTION_NOTE,
           "lambda0": _jsonable(spec.lambda0),
           "Z": dens.Z, "support": list(dens.support),
           "tail_mass": dens.tail_mass,
           "settings": {"method": spec.method, "points": args.points,
                        **_env_settings()}}
    doc.update(red_info)
    if args.csv:
        _write_csv(args.csv, ["x", "density"], zip(xs, ys))
        doc["csv"] = args.csv
    else:
        doc["x"] = _jsonable(xs)
        doc["density"] = _jsonable(ys)
    return doc


def _sim_config(args) -> SimConfig:
    return SimConfig(dt=args.dt, n=args.n, t_max=args.t_max, seed=args.seed,
                     bridge=not args.no_bridge,
                     resample=getattr(args, "resample", False))


def _cmd_simulate(args) -> dict:
    model = _load_model(args)
    red, tr, red_info = _reduced(model)
    if args.x0 is None:
        x0 = float(red.x_ref)
    elif tr is not None:
        x0 = float(tr.forward(np.asarray(args.x0)))
    else:
        x0 = float(args.x0)
    cfg = _sim_config(args)
    record = [float(t) for t in args.record] if args.record else [cfg.t_max]
    res = run_ensemble(red, x0, cfg, record_times=record)
    doc = {"model": _model_report(model), "convention": CONVENTION_NOTE,
           "result": _jsonable(res.to_json()),
           "settings": {"x0": x0, **cfg.to_json(), **_env_settings()}}
    doc.update(red_info)
    if args.fit_survival:
        curve = survival_curve(res)
        doc["survival"] = _jsonable(curve.to_json())
    if args.csv_hist:
        pos = res.final_positions
        if tr is not None:
            pos = np.asarray(tr.inverse(pos), dtype=float)
        if len(pos) == 0:
            raise QsdlabError("no survivors to histogram")
        edges = np.linspace(float(np.min(pos)), float(np.max(pos)),
                            args.bins + 1)
        masses = histogram_masses(pos, edges)
        _write_csv(args.csv_hist, ["bin_lo", "bin_hi", "mass"],
                   zip(edges[:-1], edges[1:], masses))
        doc["csv_hist"] = args.csv_hist
    return doc


def _cmd_compare(args) -> dict:
    """Cross-validate spectral predictions against killed-path sampling."""
    model = _load_model(args)
    red, _, red_info = _reduced(model)
    l, rr = red.domain
    killed_line = red.killing is not None and math.isinf(l) and math.isinf(rr)
    doc = {"model": _model_report(model), "convention": CONVENTION_NOTE,
           "classification": _jsonable(classify(red).to_json()),
           "settings": {"dt": args.dt, "n": args.n, "t_max": args.t_max,
                        "seed": args.seed, **_env_settings()}}
    doc.update(red_info)

    degraded = False
    if not killed_line:
        try:
            pos = positivity_criterion(red, a=l if math.isfinite(l) else red.x_ref)
            doc["positivity"] = _jsonable(pos.to_json())
            degraded = not pos.positive
        except QsdlabError as exc:
            doc["positivity"] = {"error": str(exc)}
            degraded = True

    x0 = args.x0 if args.x0 is not None else float(red.x_ref)
    cfg = _sim_config(args)
    probe = dichotomy_probe(red, x0, cfg)
    doc["dichotomy"] = _jsonable(probe.to_json())

    if degraded or probe.verdict == "Escapes":
        doc["mode"] = "dichotomy-only"
        doc["tv_distance"] = None
        return doc

    spec = _spectral(red, args)
    doc["spectrum"] = _jsonable(spec.to_json())
    doc["gap"] = _jsonable(spec.gap)

    plain = SimConfig(dt=cfg.dt, n=cfg.n, t_max=cfg.t_max, seed=cfg.seed,
                      bridge=cfg.bridge, resample=False)
    res = run_ensemble(red, x0, plain)
    try:
        curve = survival_curve(res)
        doc["survival"] = _jsonable(curve.to_json())
        doc["rate_matches_lambda0"] = bool(
            curve.rate_ci[0] <= spec.lambda0 <= curve.rate_ci[1])
    except QsdlabError as exc:
        doc["survival"] = {"error": str(exc)}

    dens = qsd_density(spec, scale_speed(red))
    cond = SimConfig(dt=cfg.dt, n=cfg.n, t_max=cfg.t_max, seed=cfg.seed + 1,
                     bridge=cfg.bridge, resample=True)
    res2 = run_ensemble(red, x0, cond)
    lo = max(dens.support[0], float(np.quantile(res2.final_positions, 1e-4)))
    hi = min(dens.support[1], float(np.quantile(res2.final_positions, 1 - 1e-4)))
    edges = np.linspace(lo, hi, args.bins + 1)
    tv = tv_distance(histogram_masses(res2.final_positions, edges),
                     dens.bin_masses(edges))
    doc["tv_distance"] = tv
    doc["mode"] = "full"
    return doc


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--zoo", help="zoo model name (see `qsdlab zoo`)")
    p.add_argument("--param", action="append",
                   help="zoo parameter key=value (repeatable)")
    p.add_argument("--model-json", help="path to a serialized model")


def _add_sim_args(p):
    p.add_argument("--x0", type=float, default=None,
                   help="start position (original coordinates); default x_ref")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--t-max", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=20260814)
    p.add_argument("--no-bridge", action="store_true",
                   help="disable the intra-step boundary-hit correction")
    p.add_argument("--bins", type=int, default=40)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="qsdlab",
        description="boundary classification, principal spectrum, "
                    "quasistationary laws and killed-path Monte Carlo for "
                    "one-dimensional diffusions")
    ap.add_argument("--out", help="write the JSON report here instead of stdout")
    ap.add_argument("--diagnostic", default="diagnostic.json",
                    help="where to write failure diagnostics (exit code 3)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zoo", help="list built-in model families")

    p = sub.add_parser("classify", help="Feller boundary classification")
    _add_model_args(p)
    p.add_argument("--tol", type=float, default=1e-9)

    p = sub.add_parser("spectrum", help="bottom eigenvalues")
    _add_model_args(p)
    p.add_argument("--method", choices=["auto", "shoot", "fd", "schrodinger"],
                   default="auto")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--truncation", type=float, nargs="+", default=None)
    p.add_argument("--grid-size", type=int, default=None)
    p.add_argument("--oracle", action="store_true",
                   help="cross-check against the finite-element oracle")

    p = sub.add_parser("qsd", help="quasistationary density")
    _add_model_args(p)
    p.add_argument("--method", choices=["auto", "shoot", "fd", "schrodinger"],
                   default="auto")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--truncation", type=float, nargs="+", default=None)
    p.add_argument("--grid-size", type=int, default=None)
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--csv", help="write (x, density) rows to this CSV")

    p = sub.add_parser("simulate", help="killed-path ensemble")
    _add_model_args(p)
    _add_sim_args(p)
    p.add_argument("--resample", action="store_true",
                   help="respawn dead particles at surviving ones")
    p.add_argument("--record", type=float, nargs="+", default=None)
    p.add_argument("--fit-survival", action="store_true")
    p.add_argument("--csv-hist", help="write the final histogram to this CSV")

    p = sub.add_parser("compare", help="spectral vs Monte Carlo cross-validation")
    _add_model_args(p)
    _add_sim_args(p)
    p.add_argument("--method", choices=["auto", "shoot", "fd", "schrodinger"],
                   default="auto")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--truncation", type=float, nargs="+", default=None)
    p.add_argument("--grid-size", type=int, default=None)
    return ap


_HANDLERS = {"zoo": _cmd_zoo, "classify": _cmd_classify,
             "spectrum": _cmd_spectrum, "qsd": _cmd_qsd,
             "simulate": _cmd_simulate, "compare": _cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # argparse already exits with code 2 on usage errors
    handler = _HANDLERS[args.command]
    try:
        doc = handler(args)
    except QsdlabError as exc:
        diag = {"command": args.command, "error": type(exc).__name__,
                "message": str(exc), "settings": _env_settings()}
        try:
            with open(args.diagnostic, "w", newline="\n") as fh:
                json.dump(diag, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError:
            pass
        print(f"qsdlab: numerical failure: {exc}", file=sys.stderr)
        return 3
    _emit_json(doc, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
