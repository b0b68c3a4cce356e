"""Command-line entry point: ``critexp {exponents,staircase,realize,verify}``.

Settings come from an optional JSON config file (``--config``) overridden by
flags. Output files go to ``--out``, or to ``$CRITEXP_OUTPUT_DIR`` when set,
or to ``./critexp-out``. Exit codes: 0 ok, 2 invalid config, 3 unsupported
case (s = 0), 4 invariant violation, 5 cell budget exhausted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION
from .coefficients import CoefficientPair, critical_exponents_general, diagonal_params
from .errors import BudgetExhausted, CritexpError, InvalidInput, InvariantViolation

OUTPUT_ENV = "CRITEXP_OUTPUT_DIR"
DEFAULT_OUT = "critexp-out"


@dataclass
class RunConfig:
    """All run settings. Field names double as config-file keys."""

    K: float | None = None
    S1: float | None = None
    S2: float | None = None
    sigma1: list | None = None
    sigma2: list | None = None
    N: int = 8
    delta0: float = 0.1
    gamma: float = 0.05
    eps: float = 0.1
    alpha: float = 0.5
    thetas: list = field(default_factory=lambda: [0.0])
    seed: int = 0
    out: str | None = None
    budget: int = 1_000_000
    realize_tol: float | None = None
    max_layer_depth: int = 2
    moment_p: float | None = None

    def validate(self, mode):
        if mode in ("staircase", "realize"):
            if None in (self.K, self.S1, self.S2):
                raise InvalidInput(f"{mode} needs the diagonal parameters K, S1, S2")
        if mode == "exponents":
            has_diag = None not in (self.K, self.S1, self.S2)
            has_mats = self.sigma1 is not None and self.sigma2 is not None
            if not (has_diag or has_mats):
                raise InvalidInput("exponents needs either K, S1, S2 or sigma1 and sigma2")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidInput("N must be a positive integer")
        for name in ("delta0", "gamma", "eps"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise InvalidInput("alpha must lie in (0, 1)")
        if self.budget < 1:
            raise InvalidInput("budget must be positive")
        if not self.thetas:
            raise InvalidInput("theta grid is empty")

    def out_dir(self) -> Path:
        env = os.environ.get(OUTPUT_ENV)
        return Path(env or self.out or DEFAULT_OUT)


def _number(x):
    return int(x) if float(x).is_integer() and "." not in str(x) else float(x)


def _parse_matrix(text):
    # "a,b;c,d"
    try:
        rows = [[float(v) for v in r.split(",")] for r in text.split(";")]
    except ValueError:
        raise InvalidInput(f"cannot parse matrix {text!r}; expected 'a,b;c,d'") from None
    if len(rows) != 2 or any(len(r) != 2 for r in rows):
        raise InvalidInput(f"matrix {text!r} is not 2x2")
    return rows


def parse_theta_grid(text):
    """'0,1.2' (list) or 'start:stop:count' (inclusive linspace); 'pi' is accepted in values."""

    def val(s):
        s = s.strip().replace("pi", str(math.pi))
        try:
            return float(eval(s, {"__builtins__": {}}, {}))  # arithmetic on literals only
        except Exception:
            raise InvalidInput(f"cannot parse angle {s!r}") from None

    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InvalidInput("theta grid range must be start:stop:count")
        return [float(x) for x in np.linspace(val(parts[0]), val(parts[1]), int(parts[2]))]
    return [val(s) for s in text.split(",") if s.strip()]


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known - {"schema"}
    if unknown:
        raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
    if "schema" in data and data["schema"] != SCHEMA_VERSION:
        raise InvalidInput(f"unsupported config schema {data['schema']!r}")
    return {k: v for k, v in data.items() if k != "schema"}


def build_config(args) -> RunConfig:
    base = load_config(args.config) if getattr(args, "config", None) else {}
    for name in ("K", "S1", "S2", "N", "delta0", "gamma", "eps", "alpha", "seed", "out", "budget",
                 "realize_tol", "max_layer_depth", "moment_p"):
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if getattr(args, "sigma1", None):
        base["sigma1"] = _parse_matrix(args.sigma1)
    if getattr(args, "sigma2", None):
        base["sigma2"] = _parse_matrix(args.sigma2)
    if getattr(args, "thetas", None):
        base["thetas"] = parse_theta_grid(args.thetas)
    try:
        cfg = RunConfig(**base)
    except TypeError as exc:
        raise InvalidInput(str(exc)) from None
    cfg.validate(args.command)
    return cfg


def _params(cfg: RunConfig):
    return diagonal_params(*(_number(v) for v in (cfg.K, cfg.S1, cfg.S2)))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finite(x):
    # JSON has no infinity; write non-finite numbers as strings
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


def _json(doc) -> str:
    return json.dumps(_finite(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


# commands ---------------------------------------------------------------


def _diagonal_triple(s1, s2):
    """(K, S1, S2) when the pair has the form diag(1/K, 1/S1), diag(K, S2), else None."""
    if np.count_nonzero(s1 - np.diag(np.diag(s1))) or np.count_nonzero(s2 - np.diag(np.diag(s2))):
        return None
    K = s2[0, 0]
    if not math.isclose(s1[0, 0] * K, 1.0, rel_tol=1e-12):
        return None
    return K, 1 / s1[1, 1], s2[1, 1]


def cmd_exponents(cfg: RunConfig, stream=sys.stdout) -> int:
    report = {"schema": SCHEMA_VERSION, "kind": "exponents"}
    if cfg.sigma1 is not None and cfg.sigma2 is not None:
        pair = CoefficientPair(np.array(cfg.sigma1, float), np.array(cfg.sigma2, float))
        triple = _diagonal_triple(pair.sigma1, pair.sigma2)
    else:
        triple = tuple(_number(v) for v in (cfg.K, cfg.S1, cfg.S2))
        pair = None
    rep = critical_exponents_general(pair) if pair is not None else None
    if rep is not None and rep.degenerate:
        report.update(rep.as_dict())
        report["case"] = "degenerate (single phase)"
    else:
        if triple is not None:
            params = diagonal_params(*triple)  # raises UnsupportedCase for s = 0
            report["diagonal"] = params.as_dict()
            report["case"] = report["diagonal"]["case"]
            rep = rep or critical_exponents_general(params.sigma_pair())
        else:
            report["case"] = "general pair"
        report.update(rep.as_dict())
    text = _json(report)
    stream.write(text)
    if cfg.out or os.environ.get(OUTPUT_ENV):
        _write(cfg.out_dir() / "exponents.json", text)
    return 0


def cmd_staircase(cfg: RunConfig, stream=sys.stdout) -> int:
    from .staircase import iterate, loglog_slope, write_series_csv, write_theta_csv

    params = _params(cfg)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_theta_csv(out / "theta_table.csv", params, cfg.thetas)
    runs = []
    for i, th in enumerate(cfg.thetas):
        res = iterate(params, th, cfg.N, p=cfg.moment_p)
        write_series_csv(out / f"series_{i}.csv", res.mass_series, res.moment_series)
        ns = np.arange(1, cfg.N + 1)
        lo = max(1, cfg.N // 16)
        slope = loglog_slope(ns[lo - 1:], res.mass_series[lo:]) if cfg.N >= 2 else math.nan
        runs.append({"index": i, "theta": th, "p": float(res.theta_functions.p), "mass_slope": slope,
                     "fit_range": [int(lo), int(cfg.N)], "final_mass": res.mass_series[-1],
                     "final_moment": res.moment_series[-1], "pruned_mass": res.nu.pruned_mass})
    summary = {"schema": SCHEMA_VERSION, "kind": "staircase", "config": asdict(cfg), "runs": runs}
    _write(out / "staircase_summary.json", _json(summary))
    stream.write(_json({"runs": runs}))
    return 0


def _summary_stats(pam, coeffs, gamma, p):
    from .analysis import distribution_function, layer_cake_integral, lp_integral, weak_residual
    from .realize import extract_sigma_field

    prof = distribution_function(pam, np.geomspace(2, 8, 25), fit_range=(2, 8))
    sf = extract_sigma_field(pam, coeffs)
    wr = weak_residual(pam, coeffs, gamma, sigma=sf)
    retired = np.array([c.phase in (1, 2) for c in pam.cells])
    row_res = max(np.linalg.norm(sf.residual_a[retired], axis=1).max(initial=0.0),
                  np.linalg.norm(sf.residual_b[retired], axis=1).max(initial=0.0))
    return {
        "cells": len(pam.cells),
        "total_area": float(pam.areas().sum()),
        "distribution_slope_2_8": prof.fitted_slope,
        "lp_integral": lp_integral(pam, p),
        "layer_cake": layer_cake_integral(pam, p),
        "weak_residual_max": float(np.abs(wr.residuals).max()),
        "weak_residual_c": wr.c_ratio,
        "retired_row_residual": float(row_res),
        "retired_ambiguous": int((sf.ambiguous & retired).sum()),
    }, prof


def cmd_realize(cfg: RunConfig, stream=sys.stdout) -> int:
    from .analysis import write_profile_csv, write_summary_json
    from .realize import (
        StaircaseParams,
        audit_nesting,
        build_staircase_map,
        holder_seminorm,
        mesh_to_json,
        retired_target_distance,
        write_mesh_csv,
    )

    params = _params(cfg)
    sp = StaircaseParams(N=cfg.N, delta0=cfg.delta0, gamma=cfg.gamma, eps=cfg.eps, alpha=cfg.alpha,
                         budget=cfg.budget, realize_tol=cfg.realize_tol, max_layer_depth=cfg.max_layer_depth)
    run = build_staircase_map(sp, coeffs=params, on_budget="partial")
    pam = run.map
    p = float(2 * params.K / (params.K + 1))
    stats, prof = _summary_stats(pam, params, cfg.gamma, p)
    audit_nesting(run)
    stats["holder"] = holder_seminorm(pam, cfg.alpha, seed=cfg.seed)
    stats["retired_target_distance"] = retired_target_distance(run, params)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "mesh.json", mesh_to_json(pam))
    write_mesh_csv(out / "mesh.csv", pam)
    write_profile_csv(out / "profile.csv", prof, p)
    diag = {k: v for k, v in run.diagnostics.items() if k != "omega_sandwich"}
    sandwich = [list(r) for r in run.diagnostics["omega_sandwich"]]
    write_summary_json(out / "analysis.json", {"summary": stats, "omega_sandwich": sandwich})
    sched = run.schedule
    manifest = {
        "schema": SCHEMA_VERSION,
        "kind": "manifest",
        "config": asdict(cfg),
        "coefficients": params.as_dict(),
        "schedule": {"delta": sched.delta, "rho": sched.rho[1:], "delta_n": sched.delta_n[1:],
                     "m_const": sched.m_const, "c_hat": sched.c_hat, "dist_S1_T": sched.dist_S1_T,
                     "p_delta0": sched.p_delta0},
        "achieved_depth": run.depth,
        "complete": run.complete,
        "omega_n_areas": run.omega_n_areas[1:],
        "diagnostics": diag,
        "summary": stats,
        "files": {name: _sha256(out / name) for name in ("mesh.json", "mesh.csv", "profile.csv", "analysis.json")},
    }
    _write(out / "manifest.json", _json(manifest))
    stream.write(_json({"achieved_depth": run.depth, "complete": run.complete, "cells": len(pam.cells),
                        "out": str(out)}))
    if not run.complete:
        raise BudgetExhausted(f"{diag.get('budget_message', 'budget exhausted')}; completed depth {run.depth} "
                              f"of {cfg.N}; partial artifacts written to {out}")
    return 0


def cmd_verify(cfg: RunConfig, stream=sys.stdout) -> int:
    """Reload artifacts from the output directory and re-run every mesh invariant."""
    from .realize import (
        audit_boundary,
        audit_continuity,
        audit_partition,
        extract_sigma_field,
        mesh_from_json,
    )
    from .targets import TargetSpec
    from .conformal import conformal_arrays

    out = cfg.out_dir()
    try:
        manifest = json.loads((out / "manifest.json").read_text())
        mesh_text = (out / "mesh.json").read_text()
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot load artifacts from {out}: {exc}") from None
    if manifest.get("schema") != SCHEMA_VERSION:
        raise InvalidInput(f"unsupported manifest schema {manifest.get('schema')!r}")
    pam = mesh_from_json(mesh_text)
    mcfg = manifest["config"]
    params = diagonal_params(*(_number(mcfg[k]) for k in ("K", "S1", "S2")))
    gamma = float(mcfg["gamma"])
    report = {}
    report["area_partition"] = audit_partition(pam)
    report["boundary"] = audit_boundary(pam)
    report["continuity"] = audit_continuity(pam)
    # retired cells: distance to their recorded target below the tolerance they retired with
    spec = TargetSpec(params)
    G = pam.gradients()
    ap, am = conformal_arrays(G.reshape(-1, 2, 2))
    d = np.stack([spec.dist_arrays(ap, am, 1), spec.dist_arrays(ap, am, 2)], axis=-1)
    phases = np.array([c.phase for c in pam.cells])
    levels = np.array([c.level for c in pam.cells])
    rho = np.array(manifest["schedule"]["rho"])  # rho[i] is the tolerance of level i + 1
    retired = phases > 0
    dist_ret = d[retired, phases[retired] - 1]
    tol_ret = rho[levels[retired]]
    bad = np.flatnonzero(dist_ret >= tol_ret)
    if bad.size:
        i = bad[0]
        raise InvariantViolation("retired target distance",
                                 f"{bad.size} retired cells; worst {dist_ret[i]:.3g} >= {tol_ret[i]:.3g}")
    report["retired_target_distance"] = float(dist_ret.max(initial=0.0))
    report["retired_below_gamma"] = bool(report["retired_target_distance"] < gamma)
    extract_sigma_field(pam, params, gamma=max(gamma, float(rho.max())))
    p = float(2 * params.K / (params.K + 1))
    stats, _ = _summary_stats(pam, params, gamma, p)
    recorded = manifest["summary"]
    for key, val in stats.items():
        if key not in recorded or recorded[key] != val:
            raise InvariantViolation("summary statistics", f"{key}: recorded {recorded.get(key)!r}, recomputed {val!r}")
    for name, digest in manifest.get("files", {}).items():
        if name == "mesh.json" or name == "mesh.csv":
            if _sha256(out / name) != digest:
                raise InvariantViolation("file digest", f"{name} differs from the manifest")
    report["summary_match"] = True
    report["status"] = "ok"
    stream.write(_json(report))
    return 0


COMMANDS = {"exponents": cmd_exponents, "staircase": cmd_staircase, "realize": cmd_realize, "verify": cmd_verify}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="critexp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (keys are RunConfig fields)")
        p.add_argument("--out", help=f"output directory (overridden by ${OUTPUT_ENV})")
        p.add_argument("--K", type=float)
        p.add_argument("--S1", type=float)
        p.add_argument("--S2", type=float)

    p = sub.add_parser("exponents", help="critical exponents of a coefficient pair")
    common(p)
    p.add_argument("--sigma1", help="matrix 'a,b;c,d'")
    p.add_argument("--sigma2", help="matrix 'a,b;c,d'")

    p = sub.add_parser("staircase", help="measure-level staircase laminates over a theta grid")
    common(p)
    p.add_argument("--N", type=int)
    p.add_argument("--thetas", help="'0,pi/2' or 'start:stop:count'")
    p.add_argument("--moment-p", dest="moment_p", type=float, help="moment exponent (default p(theta))")

    p = sub.add_parser("realize", help="build the staircase map and write mesh artifacts")
    common(p)
    p.add_argument("--N", type=int)
    p.add_argument("--delta0", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--realize-tol", dest="realize_tol", type=float)
    p.add_argument("--max-layer-depth", dest="max_layer_depth", type=int)

    p = sub.add_parser("verify", help="re-run all invariants on written artifacts")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help=f"artifact directory (overridden by ${OUTPUT_ENV})")
    return ap


def main(argv=None, stream=None) -> int:
    stream = stream or sys.stdout
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    # K, S1, S2 given as integers stay exact
    for name in ("K", "S1", "S2"):
        v = getattr(args, name, None)
        if v is not None and float(v).is_integer():
            setattr(args, name, int(v))
    try:
        if args.command == "verify":
            cfg = build_config(argparse.Namespace(command="verify", config=args.config, out=args.out))
        else:
            cfg = build_config(args)
        return COMMANDS[args.command](cfg, stream)
    except CritexpError as exc:
        name = type(exc).__name__
        print(f"critexp: {name}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
