"""Command line front end: ``proxmed --mode {estimate,simulate,benchmark}``.

Flags win over the ``--config`` INI file, which only fills in flags that were
not given.  Failures print a JSON error object on stderr and exit with

* 2 for configuration errors,
* 3 for data errors,
* 4 for solver errors,
* 5 for I/O errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import ColumnRoles, load_csv
from .errors import ConfigError, IOFailure, ProxmedError

RUN_KEYS = ("mode", "input", "roles", "estimators", "boot", "seed", "scenario", "preset", "out", "threads",
            "reps", "n", "standardize", "root_policy")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxmed", description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=("estimate", "simulate", "benchmark"))
    p.add_argument("--input", help="CSV file to analyse (estimate mode)")
    p.add_argument("--roles", help="role mapping: a file of name=role lines or an inline comma list")
    p.add_argument("--estimators", help="comma list from P-OR, P-HYBRID, P-IPW, P-MR, DR, DML-MR")
    p.add_argument("--boot", type=int, help="bootstrap replicates B")
    p.add_argument("--seed", type=int, help="master seed (generated and recorded when absent)")
    p.add_argument("--scenario", help="scenario ids for simulate mode, e.g. 1,2,3,4")
    p.add_argument("--preset", choices=("fast", "paper"), help="simulate preset (R, B and tolerances)")
    p.add_argument("--fast", dest="preset", action="store_const", const="fast", help="same as --preset fast")
    p.add_argument("--paper", dest="preset", action="store_const", const="paper", help="same as --preset paper")
    p.add_argument("--reps", type=int, help="Monte Carlo replications R (overrides the preset)")
    p.add_argument("--n", type=int, help="sample size per replication (default 1000)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes (default: available CPUs)")
    p.add_argument("--standardize", action="store_true", default=None, help="standardise covariates on load")
    p.add_argument("--root-policy", dest="root_policy", choices=("exact", "nearest"),
                   help="exposure-bridge solver policy when no exact root exists "
                        "(default: exact for estimate, nearest for simulate)")
    p.add_argument("--config", help="INI file with [run], [roles] and [dml] sections")
    p.add_argument("--version", action="version", version=f"proxmed {__version__}")
    return p


def _read_config(path):
    parser = configparser.ConfigParser(delimiters=("=",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parser


def _as_int(name, value):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None


def resolve(args) -> dict:
    """Merge flags with the config file into a plain dict."""
    cfg = {k: getattr(args, k, None) for k in RUN_KEYS}
    roles_map = None
    dml = {}
    if args.config:
        parser = _read_config(args.config)
        if parser.has_section("run"):
            for key, value in parser.items("run"):
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [run]")
                if cfg.get(key) is None:
                    cfg[key] = value
        if parser.has_section("roles"):
            roles_map = dict(parser.items("roles"))
        if parser.has_section("dml"):
            dml = dict(parser.items("dml"))
    for key in ("boot", "seed", "threads", "reps", "n"):
        if cfg.get(key) is not None:
            cfg[key] = _as_int(key, cfg[key])
    if isinstance(cfg.get("standardize"), str):
        cfg["standardize"] = cfg["standardize"].strip().lower() in ("1", "true", "yes", "on")
    if cfg.get("root_policy") is not None and cfg["root_policy"] not in ("exact", "nearest"):
        raise ConfigError(f"root_policy must be exact or nearest, got {cfg['root_policy']!r}")
    if cfg.get("mode") is None:
        raise ConfigError("--mode is required (estimate, simulate or benchmark)")
    if cfg["mode"] not in ("estimate", "simulate", "benchmark"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    if cfg.get("seed") is None:
        cfg["seed"] = int(np.random.SeedSequence().entropy % (2**31))
        cfg["seed_generated"] = True
    cfg["roles_map"] = roles_map
    cfg["dml"] = dml
    return cfg


def _hashable(cfg):
    skip = {"out", "threads", "seed_generated"}
    return {k: v for k, v in cfg.items() if k not in skip}


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out") or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _workers(cfg) -> int:
    if cfg.get("threads"):
        return max(1, int(cfg["threads"]))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def _dml_options(dml: dict) -> dict:
    from .dml import DEFAULT_GRID, ROLES, RoleHyper

    opts = {}
    if "folds" in dml:
        opts["L"] = _as_int("folds", dml["folds"])
    grid = DEFAULT_GRID
    if "lambda_grid" in dml:
        try:
            grid = tuple(float(v) for v in dml["lambda_grid"].split(","))
        except ValueError:
            raise ConfigError("lambda_grid must be a comma list of numbers") from None
    anchors = _as_int("anchors", dml.get("anchors", RoleHyper.anchors))
    select = str(dml.get("lambda_select", "false")).strip().lower() in ("1", "true", "yes", "on")

    def bw(value):
        if value is None or str(value).strip().lower() == "median":
            return None
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"bandwidth must be a number or 'median', got {value!r}") from None

    def lam(key):
        value = dml.get(key, dml.get("lambda"))
        try:
            return None if value is None else float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None

    hyper = {}
    for role in ROLES:
        short = role.split("_")[0]
        sigma = dml.get(f"bandwidth_{role}", dml.get(f"bandwidth_{short}", dml.get("bandwidth")))
        hyper[role] = RoleHyper(sigma_h=bw(sigma), sigma_g=None, lam_h=lam(f"lambda_{short}"),
                                lam_g=lam(f"lambda_{short}"), grid=grid, anchors=anchors,
                                select_lambda=select)
    opts["hyper"] = hyper
    return opts


def cmd_estimate(cfg: dict) -> int:
    from .estimators import estimate, normalize_method

    if not cfg.get("input"):
        raise ConfigError("estimate mode needs --input")
    if cfg.get("roles"):
        roles = ColumnRoles.parse(cfg["roles"])
    elif cfg.get("roles_map"):
        roles = ColumnRoles(cfg["roles_map"])
    else:
        raise ConfigError("estimate mode needs --roles or a [roles] config section")
    methods = [normalize_method(m) for m in (cfg.get("estimators") or "P-MR").split(",") if m.strip()]
    B = 500 if cfg.get("boot") is None else cfg["boot"]
    if B < 0 or B == 1:
        raise ConfigError("--boot must be 0 (no bootstrap) or at least 2")
    d = load_csv(cfg["input"], roles, standardize=bool(cfg.get("standardize")))
    dml_opts = _dml_options(cfg["dml"]) if "DML-MR" in methods else None
    reports = estimate(d, methods, B, cfg["seed"], workers=_workers(cfg), dml_options=dml_opts,
                       root_policy=cfg.get("root_policy") or "exact")

    from .estimators import reports_to_csv
    from .sim import config_hash

    chash = config_hash(_hashable(cfg))
    out = _out_dir(cfg)
    doc = {"config_hash": chash, "seed": cfg["seed"], "n": d.n,
           "dropped_rows": d.diagnostics.get("dropped_rows", 0),
           "reports": [r.to_dict() for r in reports]}
    _write(out / "estimate_report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    table = reports_to_csv(reports).splitlines()
    table[0] += ",config_hash,seed"
    table[1:] = [f"{line},{chash},{cfg['seed']}" for line in table[1:]]
    _write(out / "estimate_summary.csv", "\n".join(table) + "\n")
    _write(out / "provenance.json", json.dumps(_provenance(cfg, chash), indent=2, sort_keys=True) + "\n")
    for r in reports:
        print(f"{r.method:<9} psi={r.psi_hat:.6g} piie={r.piie_hat:.6g} se={r.se:.4g} "
              f"ci=[{r.ci_lo:.4g}, {r.ci_hi:.4g}]")
    return 0


def _provenance(cfg, chash, extra=None):
    doc = {"config_hash": chash, "seed": cfg["seed"], "seed_generated": bool(cfg.get("seed_generated")),
           "config": {k: v for k, v in cfg.items() if k != "seed_generated"},
           "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "version": __version__}
    if extra:
        doc.update(extra)
    return doc


def _parse_scenarios(value) -> list:
    from .sim import ScenarioSpec

    text = str(value or "1,2,3,4").strip().lower()
    if text == "all":
        text = "1,2,3,4"
    return [ScenarioSpec.from_id(v.strip()) for v in text.split(",") if v.strip()]


def cmd_simulate(cfg: dict) -> int:
    from .sim import PRESETS, compare_to_paper, config_hash, provenance, run_scenario, summary_to_dict, table_csv

    specs = _parse_scenarios(cfg.get("scenario"))
    preset = cfg.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; use fast or paper")
    base = PRESETS.get(preset or "fast")
    R = cfg.get("reps") or base["R"]
    B = base["B"] if cfg.get("boot") is None else cfg["boot"]
    n = cfg.get("n") or 1000
    scale = base["tolerance_scale"]
    workers = _workers(cfg)
    policy = cfg.get("root_policy") or "nearest"
    summaries = []
    for spec in specs:
        t0 = time.time()
        s = run_scenario(spec, R=R, n=n, B=B, seed=cfg["seed"], workers=workers, root_policy=policy)
        summaries.append(s)
        print(f"scenario {spec.id}: R={R} n={n} B={B} ({time.time() - t0:.0f}s){' INVALID' if s.invalid else ''}")
        for m, row in s.rows.items():
            print(f"  {m:<9} bias={row.bias:+.3f} mse={row.mse:.3f} coverage={row.coverage:.3f} "
                  f"length={row.length:.3f} failed={row.n_failed} approximate={row.n_approximate}")
    resolved = dict(cfg, reps=R, boot=B, n=n, preset=preset, root_policy=policy)
    chash = config_hash(_hashable(resolved))
    out = _out_dir(cfg)
    _write(out / "table1.csv", table_csv(summaries, chash))
    results = {"config_hash": chash, "seed": cfg["seed"], "summaries": [summary_to_dict(s) for s in summaries]}
    _write(out / "summary.json", json.dumps(results, indent=2, sort_keys=True) + "\n")
    lines = ["scenario,estimator,metric,observed,published,tolerance,passed,config_hash,seed"]
    for s in summaries:
        for m, metric, obs, ref, tol, ok in compare_to_paper(s, scale):
            lines.append(f"{s.scenario},{m},{metric},{obs!r},{ref!r},{tol!r},{int(ok)},{chash},{cfg['seed']}")
    _write(out / "comparison.csv", "\n".join(lines) + "\n")
    prov = provenance(summaries, _hashable(resolved), chash, preset or "fast")
    prov["seed"] = cfg["seed"]
    prov["seed_generated"] = bool(cfg.get("seed_generated"))
    _write(out / "provenance.json", json.dumps(prov, indent=2, sort_keys=True, default=str) + "\n")
    return 0


def cmd_benchmark(cfg: dict) -> int:
    from .benchmark import format_rows, run_benchmark
    from .sim import config_hash

    n = cfg.get("n")
    sizes = (n,) if n else (1000, 10000)
    rows = run_benchmark(sizes, seed=cfg["seed"])
    print(format_rows(rows))
    chash = config_hash(_hashable(cfg))
    out = _out_dir(cfg)
    _write(out / "benchmark.json", json.dumps({"config_hash": chash, "seed": cfg["seed"], "rows": rows}, indent=2))
    return 0


def _fail(exc: ProxmedError) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    residual = getattr(exc, "residual", None)
    if residual is not None:
        doc["residual"] = float(residual)
    print(json.dumps(doc), file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        handler = {"estimate": cmd_estimate, "simulate": cmd_simulate, "benchmark": cmd_benchmark}[cfg["mode"]]
        return handler(cfg)
    except ProxmedError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
