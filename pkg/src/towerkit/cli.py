"""Command-line front end: config parsing, pipeline orchestration, reports.

Configs are JSON; numbers may be written as rational strings "p/q" (exact
mode) or decimals (which force float mode).  All data goes to files in the
output directory, logs go to standard error, and every report embeds the
config hash and arithmetic mode so runs are reproducible byte for byte.

Exit codes: 0 success, 2 invalid config, 3 size cap exceeded, 4 corrupt
trace artifact, 5 hard invariant failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from .distributions import FiniteDist
from .lemma_engine import InvariantError, PreconditionError, SizeCapError
from .splitting import SplittingError, build_split_sequence, make_target
from .tower import (CorruptTraceError, TowerTrace, build_example_tower,
                    build_general_tower, build_rational_tower,
                    certify_theorem1, load_trace_summary, save_trace,
                    sk_distribution, trace_to_json_obj)
from . import skyscraper as sky

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIZE_CAP = 3
EXIT_CORRUPT = 4
EXIT_INVARIANT = 5


class ConfigError(ValueError):
    """Invalid run configuration."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


class _ScalarParser:
    """Parses config numbers, tracking whether any decimal appeared."""

    def __init__(self):
        self.saw_decimal = False

    def __call__(self, x):
        if isinstance(x, bool):
            raise ConfigError(f"expected a number, got {x!r}")
        if isinstance(x, int):
            return Fraction(x)
        if isinstance(x, float):
            self.saw_decimal = True
            return float(x)
        if isinstance(x, str):
            s = x.strip()
            if "/" in s:
                try:
                    return Fraction(s)
                except (ValueError, ZeroDivisionError) as exc:
                    raise ConfigError(f"bad rational {x!r}: {exc}")
            if any(c in s for c in ".eE") and not s.lstrip("+-").isdigit():
                try:
                    v = float(s)
                except ValueError as exc:
                    raise ConfigError(f"bad number {x!r}: {exc}")
                self.saw_decimal = True
                return v
            try:
                return Fraction(int(s))
            except ValueError as exc:
                raise ConfigError(f"bad number {x!r}: {exc}")
        raise ConfigError(f"expected a number, got {x!r}")


@dataclass
class RunConfig:
    """Validated run configuration."""

    kind: str
    mode: str
    raw: dict
    config_hash: str
    target_spec: Optional[dict] = None
    deltas: List = field(default_factory=list)
    epss: List = field(default_factory=list)
    kappas: List = field(default_factory=list)
    e0: Fraction = Fraction(5000)
    rounds: int = 2
    size_cap: int = 10 ** 6
    max_depth: int = 16
    etas: Optional[List] = None
    doubling_tol: float = 0.1
    x_values: Tuple = (Fraction(3, 10), Fraction(1, 2), Fraction(4, 5))
    sk_dist_ks: Optional[List[int]] = None
    k_grid: Optional[List[int]] = None
    skyscraper: dict = field(default_factory=dict)
    workers: int = 1


PRESETS = {
    "example1": {
        "kind": "example",
        "kappas": [f"1/{n}" for n in range(1, 7)],
        "epss": [f"1/{n + 3}" for n in range(1, 7)],
        "e0": "5000",
        "size_cap": 10 ** 7,
        "skyscraper": {
            "alphas": ["1"],
            "bound_alphas": [],
            "t_grid": ["2"],
        },
    },
    "twopoint": {
        "kind": "rational",
        "target": {"family": "points",
                   "atoms": [["1", "1/2"], ["2", "1/2"]]},
        "deltas": ["1/10", "1/12"],
        "epss": ["1/20", "1/24"],
        "rounds": 2,
        "size_cap": 10 ** 6,
        "skyscraper": {
            "base": {
                "kind": "rational",
                "target": {"family": "points",
                           "atoms": [["1/2", "1/2"], ["1", "1/2"]]},
                "deltas": ["1/20"],
                "epss": ["1/40"],
                "rounds": 2,
            },
            "alphas": ["1", "2"],
            "bound_alphas": ["2"],
            "t_grid": ["2"],
        },
    },
    "pareto1": {
        "kind": "general",
        "target": {"family": "pareto", "alpha": "1"},
        "deltas": ["1/3", "1/4"],
        "epss": ["1/3", "1/4"],
        "size_cap": 10 ** 6,
        "skyscraper": {
            "base": {
                "kind": "rational",
                "target": {"family": "points",
                           "atoms": [[f"{j + 1}/8", "1/8"]
                                     for j in range(8)]},
                "deltas": ["1/80"],
                "epss": ["1/160"],
                "rounds": 2,
            },
            "alphas": ["1/2", "3/2"],
            "divergent_alphas": ["3/2"],
            "t_grid": ["2", "4", "8"],
            "rho": "pareto1",
        },
    },
    "lognormal": {
        "kind": "general",
        "target": {"family": "lognormal", "mu": 0.0, "sigma": 1.0},
        "deltas": ["1/3", "1/4"],
        "epss": ["1/3", "1/4"],
        "size_cap": 10 ** 6,
        "skyscraper": {
            "alphas": ["1"],
            "bound_alphas": [],
            "t_grid": ["2"],
        },
    },
}


def _config_hash(obj: dict) -> str:
    data = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(data.encode()).hexdigest()[:16]


def load_config(path: Optional[str], preset: Optional[str],
                mode: Optional[str], cap: Optional[int],
                workers: Optional[int]) -> RunConfig:
    if path is None and preset is None:
        raise ConfigError("need --config or --preset")
    obj: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        obj.update(json.loads(json.dumps(PRESETS[preset])))
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                obj.update(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    if cap is not None:
        obj["size_cap"] = cap
    if mode is not None:
        obj["mode"] = mode
    parse = _ScalarParser()
    kind = obj.get("kind")
    if kind not in ("rational", "example", "general"):
        raise ConfigError(f"kind must be rational|example|general, "
                          f"got {kind!r}")
    deltas = [parse(x) for x in obj.get("deltas", [])]
    epss = [parse(x) for x in obj.get("epss", [])]
    kappas = [parse(x) for x in obj.get("kappas", [])]
    etas = obj.get("etas")
    if etas is not None:
        etas = [parse(x) for x in etas]
    for name, seq in (("deltas", deltas), ("epss", epss)):
        if any(x <= 0 for x in seq):
            raise ConfigError(f"{name} must be positive")
        if any(b > a for a, b in zip(seq, seq[1:])):
            raise ConfigError(f"{name} must be nonincreasing")
    if kind == "example":
        if not kappas or len(kappas) != len(epss):
            raise ConfigError("example runs need matching kappas and epss")
    else:
        if not deltas or len(deltas) != len(epss):
            raise ConfigError("runs need matching nonempty deltas and epss")
    target_spec = obj.get("target")
    if kind != "example" and target_spec is None:
        raise ConfigError("target specification is required")
    size_cap = int(obj.get("size_cap", 10 ** 6))
    if size_cap <= 0:
        raise ConfigError("size_cap must be positive")
    cfg_mode = obj.get("mode", "exact")
    if cfg_mode not in ("exact", "float"):
        raise ConfigError(f"mode must be exact|float, got {cfg_mode!r}")
    sky_obj = dict(obj.get("skyscraper", {}))
    x_values = tuple(parse(x) for x in obj.get(
        "x_values", ["3/10", "1/2", "4/5"]))
    if parse.saw_decimal and cfg_mode == "exact":
        _log("note: decimal literals in config force float mode")
        cfg_mode = "float"
    obj_for_hash = dict(obj)
    cfg = RunConfig(
        kind=kind, mode=cfg_mode, raw=obj,
        config_hash=_config_hash(obj_for_hash),
        target_spec=target_spec, deltas=deltas, epss=epss, kappas=kappas,
        e0=Fraction(parse(obj.get("e0", "5000"))),
        rounds=int(obj.get("rounds", 2)), size_cap=size_cap,
        max_depth=int(obj.get("max_depth", 16)), etas=etas,
        doubling_tol=float(obj.get("doubling_tol", 0.1)),
        x_values=x_values,
        sk_dist_ks=obj.get("sk_dist_ks"),
        k_grid=obj.get("k_grid"),
        skyscraper=sky_obj,
        workers=int(workers or obj.get("workers", 1)))
    return cfg


def _target_from_spec(spec: dict, mode: str):
    params = dict(spec)
    family = params.pop("family", None)
    if family is None:
        raise ConfigError("target needs a family")
    parse = _ScalarParser()
    if family == "points":
        atoms = [(parse(v), Fraction(parse(m)))
                 for v, m in params.pop("atoms")]
        if mode == "float":
            atoms = [(float(v), m) for v, m in atoms]
        return make_target("points", atoms=atoms)
    if family == "pareto":
        return make_target("pareto", alpha=parse(params["alpha"]))
    if family == "lognormal":
        return make_target("lognormal", mu=float(params.get("mu", 0.0)),
                           sigma=float(params.get("sigma", 1.0)))
    if family == "shifted_exponential":
        return make_target("shifted_exponential",
                           shift=parse(params.get("shift", 0)),
                           rate=parse(params["rate"]))
    if family == "table":
        rows = [(Fraction(parse(u)), parse(v))
                for u, v in params["rows"]]
        return make_target("table", rows=rows)
    raise ConfigError(f"unknown target family {family!r}")


def _finite_target(spec: dict, mode: str) -> FiniteDist:
    if spec.get("family") != "points":
        raise ConfigError("this run kind needs a finitely supported target")
    return _target_from_spec(spec, mode).dist


def _report_header(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "mode": cfg.mode}


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def build_tower_from_config(cfg: RunConfig) -> TowerTrace:
    if cfg.kind == "example":
        trace = build_example_tower(cfg.kappas, cfg.epss, e0=cfg.e0,
                                    size_cap=cfg.size_cap)
    elif cfg.kind == "rational":
        target = _finite_target(cfg.target_spec, cfg.mode)
        trace = build_rational_tower(target, cfg.deltas, cfg.epss,
                                     rounds=cfg.rounds,
                                     size_cap=cfg.size_cap, mode=cfg.mode)
    else:
        target = _target_from_spec(cfg.target_spec, cfg.mode)
        trace = build_general_tower(target, cfg.deltas, cfg.epss,
                                    max_depth=cfg.max_depth,
                                    rounds=max(1, cfg.rounds - 1),
                                    size_cap=cfg.size_cap, etas=cfg.etas)
    trace.config_hash = cfg.config_hash
    trace.mode = cfg.mode
    return trace


def cmd_split(cfg: RunConfig, out: str) -> int:
    if cfg.kind == "example":
        raise ConfigError("split requires a target-based run")
    target = _target_from_spec(cfg.target_spec, cfg.mode)
    seq = build_split_sequence(target, [float(e) for e in cfg.epss],
                               max_depth=cfg.max_depth)
    report = dict(_report_header(cfg))
    report.update({
        "depths": list(seq.depths),
        "costs": list(seq.costs),
        "tail_bounds": list(seq.tail_bounds),
        "floor_r": str(seq.floor_r),
        "dominates": seq.dominates,
    })
    _write_json(os.path.join(out, "split.json"), report)
    _log(f"split: depths {seq.depths}, floor {seq.floor_r}")
    return EXIT_OK


def cmd_build(cfg: RunConfig, out: str) -> int:
    try:
        trace = build_tower_from_config(cfg)
    except SizeCapError as exc:
        partial = dict(_report_header(cfg))
        partial["error"] = f"size cap: {exc}"
        _write_json(os.path.join(out, "tower.json"), partial)
        _log(f"build: size cap exceeded: {exc}")
        return EXIT_SIZE_CAP
    save_trace(trace, os.path.join(out, "tower.json"))
    ok = all(st.cert_valid in (True, None) for st in trace.stages)
    _log(f"build: height {trace.height}, {len(trace.stages)} stages, "
         f"certificates {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_verify(cfg: RunConfig, out: str) -> int:
    tower_path = os.path.join(out, "tower.json")
    if not os.path.exists(tower_path):
        _log("verify: tower.json not found; run build first")
        return EXIT_CORRUPT
    try:
        summary = load_trace_summary(tower_path)
    except CorruptTraceError as exc:
        _log(f"verify: corrupt trace: {exc}")
        return EXIT_CORRUPT
    if summary.get("config_hash") != cfg.config_hash:
        _log("verify: trace was built from a different config")
        return EXIT_CORRUPT
    if cfg.k_grid is not None and not cfg.k_grid:
        _log("verify: empty k grid")
        return EXIT_CONFIG
    trace = build_tower_from_config(cfg)
    if trace_to_json_obj(trace)["gamma_checksum"] != \
            summary.get("gamma_checksum"):
        _log("verify: gamma table checksum mismatch")
        return EXIT_CORRUPT
    rep = certify_theorem1(trace, x_values=cfg.x_values,
                           doubling_tol=cfg.doubling_tol,
                           k_grid=cfg.k_grid)
    ks = cfg.sk_dist_ks or [max(1, trace.height // 2), trace.height]
    for k in ks:
        sk_distribution(trace, int(k)).to_csv(
            os.path.join(out, f"skdist_{int(k)}.csv"))
    report = dict(_report_header(cfg))
    report.update({
        "k_grid_size": len(rep.k_grid),
        "stage_eps_ok": rep.stage_eps_ok,
        "lower_bound_ok": rep.lower_bound_ok,
        "doubling_ok": rep.doubling_ok,
        "max_vasershtein": max(rep.vasershtein.values()),
        "lower_bound_failures": [
            [k, str(x), str(lhs), str(rhs)]
            for k, x, lhs, rhs, ok in rep.lower_bound_checks if not ok],
    })
    _write_json(os.path.join(out, "verify_report.json"), report)
    _log(f"verify: eps {rep.stage_eps_ok}, lower {rep.lower_bound_ok}, "
         f"doubling {rep.doubling_ok}")
    return EXIT_OK if rep.ok() else EXIT_INVARIANT


def _pareto1_rho(alpha: float, t: float) -> float:
    """Tail integral of Y^alpha for a Pareto(1) target."""
    if alpha >= 1:
        return math.inf
    return float(t) ** (1 - 1 / alpha) / (1 / alpha - 1)


def cmd_skyscraper(cfg: RunConfig, out: str) -> int:
    parse = _ScalarParser()
    sky_cfg = cfg.skyscraper
    base_cfg = sky_cfg.get("base")
    if base_cfg is not None:
        base_obj = dict(cfg.raw)
        base_obj.update(base_cfg)
        base_run = RunConfig(
            kind=base_cfg.get("kind", cfg.kind), mode=cfg.mode,
            raw=base_obj, config_hash=cfg.config_hash,
            target_spec=base_cfg.get("target"),
            deltas=[parse(x) for x in base_cfg.get("deltas", [])],
            epss=[parse(x) for x in base_cfg.get("epss", [])],
            kappas=[parse(x) for x in base_cfg.get("kappas", [])],
            rounds=int(base_cfg.get("rounds", cfg.rounds)),
            size_cap=cfg.size_cap)
        trace = build_tower_from_config(base_run)
    else:
        trace = build_tower_from_config(cfg)
    try:
        it = sky.integerize(trace, Fraction(parse(
            sky_cfg.get("eta", "1/1000"))))
    except sky.SkyscraperError as exc:
        _log(f"skyscraper: {exc}")
        return EXIT_CONFIG
    if sky_cfg.get("inject_tail_fault"):
        # test hook: inflate the heaviest weights so the occupation tail
        # bound must fail and the hard-invariant exit path is exercised
        weights = {}
        for s in it.symbols:
            w = it.weights[s].copy()
            cut = int(len(w) * 0.7)
            order = w.argsort()
            w[order[cut:]] *= 4
            weights[s] = w
        it = sky.IntegerTower(it.trace, it.symbols, weights, it.time_unit,
                              it.occupation_target, it.eta,
                              it.perturbations)
    horizon = it.covered_horizon()
    wmax = max(int(it.weights[s].max()) for s in it.symbols)
    n_points = int(sky_cfg.get("n_points", 16))
    n_grid = sorted(set(
        n for n in (int(horizon * 1.2 ** -j) for j in range(n_points))
        if n >= 4 * wmax))
    if not n_grid:
        _log("skyscraper: no admissible time horizons under the cap")
        return EXIT_CONFIG
    tail_constant = Fraction(parse(sky_cfg.get("tail_constant", "2")))
    tol = float(sky_cfg.get("tol", 0.15))
    try:
        if it.height * it.size <= 512:
            sky.check_duality(it)
        inv = sky.check_inversion(
            it, n_grid, tol=tol, tail_constant=tail_constant,
            x_values=tuple(parse(x) for x in sky_cfg.get(
                "x_values", ["5/4", "3/2", "2"])))
    except (sky.InversionError, InvariantError) as exc:
        _log(f"skyscraper: hard invariant failed: {exc}")
        return EXIT_INVARIANT
    for n in (n_grid[0], n_grid[-1]):
        inv.reports[n].to_csv(os.path.join(out, f"occupation_{n}.csv"))
    rho_fn = _pareto1_rho if sky_cfg.get("rho") == "pareto1" else None
    alphas = [float(parse(a)) for a in sky_cfg.get("alphas", ["1"])]
    t_grid = [float(parse(t)) for t in sky_cfg.get("t_grid", ["2"])]
    divergent = [float(parse(a))
                 for a in sky_cfg.get("divergent_alphas", [])]
    rows = sky.are_diagnostic(it, alphas, n_grid, t_grid, rho_fn=rho_fn,
                              divergent_alphas=divergent,
                              tail_constant=tail_constant)
    report = dict(_report_header(cfg))
    report["inversion"] = {
        "tol": tol,
        "top_ok": inv.top_ok,
        "occupation_distances": {str(n): inv.occ_distances[n]
                                 for n in inv.n_grid},
        "return_time_distances": {str(n): inv.phi_distances[n]
                                  for n in inv.n_grid},
    }
    _write_json(os.path.join(out, "inversion_report.json"), report)
    are_report = dict(_report_header(cfg))
    are_report["alphas"] = [{
        "alpha": r.alpha,
        "mode": r.mode,
        "bound_ok": r.bound_ok,
        "a_alpha": {str(n): v for n, v in r.a_alpha.items()},
        "ratio_to_a1": {str(n): v for n, v in r.ratio_to_a1.items()},
        "u_sup": {str(t): v for t, v in r.u_sup.items()},
        "rho": {str(t): v for t, v in r.rho.items()},
    } for r in rows]
    _write_json(os.path.join(out, "are_report.json"), are_report)
    bound_alphas = sky_cfg.get("bound_alphas")
    if bound_alphas is None:
        checked = rows
    else:
        wanted = {float(parse(a)) for a in bound_alphas}
        checked = [r for r in rows if r.alpha in wanted]
    hard_ok = inv.ok() and all(r.bound_ok in (True, None) for r in checked)
    _log(f"skyscraper: inversion {'pass' if inv.ok() else 'FAIL'}, "
         f"{len(rows)} alpha rows")
    return EXIT_OK if hard_ok else EXIT_INVARIANT


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="towerkit",
        description="build and certify cutting-and-stacking towers")
    parser.add_argument("command",
                        choices=["split", "build", "verify", "skyscraper",
                                 "all"])
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--mode", choices=["exact", "float"], default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--cap", type=int, default=None,
                        help="override the height cap")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.mode, args.cap,
                          args.workers)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    steps = {
        "split": [cmd_split],
        "build": [cmd_build],
        "verify": [cmd_verify],
        "skyscraper": [cmd_skyscraper],
        "all": [cmd_build, cmd_verify, cmd_skyscraper],
    }[args.command]
    if args.command == "all" and cfg.kind != "example":
        steps = [cmd_split] + steps
    for step in steps:
        try:
            code = step(cfg, args.out)
        except (ConfigError, SplittingError, PreconditionError) as exc:
            _log(f"invalid configuration: {exc}")
            return EXIT_CONFIG
        except SizeCapError as exc:
            _log(f"size cap exceeded: {exc}")
            return EXIT_SIZE_CAP
        except CorruptTraceError as exc:
            _log(f"corrupt artifact: {exc}")
            return EXIT_CORRUPT
        except InvariantError as exc:
            _log(f"hard invariant failed: {exc}")
            return EXIT_INVARIANT
        if code != EXIT_OK:
            return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
