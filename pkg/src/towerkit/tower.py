"""Stagewise tower construction with certified partial-sum distributions.

A tower is built by repeatedly extending a block array: the common scale
grows stage by stage while the array stays exactly distributed like the
target variable.  The trace records the normalizer chain b(k) = k*gamma(k),
per-stage change masses, and measured transport distances, from which the
distributional-limit claims are certified at finite resolution.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blocks import (Block, cyclic_partial_sums_units, is_normalized,
                     self_concat)
from .distributions import (INF, FiniteDist, empirical_vasershtein)
from .lemma_engine import (BlockArray, ExtensionCertificate, GammaTable,
                           InvariantError, PreconditionError, SizeCapError,
                           basic_extend, choose_mu, extension_step,
                           straightening_step)
from .splitting import SplitSequence, TargetDist, build_split_sequence

DEFAULT_BICYCLE_M = Fraction(9, 8)


@dataclass(frozen=True)
class StageRecord:
    """Summary of one construction stage."""

    index: int
    height: int
    scale: Fraction
    delta: float
    eps: float
    change_mass: Fraction
    cert_valid: Optional[bool]


@dataclass
class TowerTrace:
    """Full record of a tower construction."""

    kind: str                    # "rational", "example", or "general"
    target: FiniteDist
    stages: List[StageRecord]
    final: BlockArray
    global_gamma: GammaTable
    deltas: Tuple[float, ...]
    epss: Tuple[float, ...]
    certs: Tuple
    bicycle_m: Fraction = DEFAULT_BICYCLE_M
    floor_r: Optional[Fraction] = None
    config_hash: str = ""
    mode: str = "exact"

    @property
    def height(self) -> int:
        return self.final.height

    def change_ledger(self) -> Fraction:
        return self.final.change_mass()

    def residual_mass_bound(self, after_stage: int) -> float:
        """Bound on the mass still to be moved after the given stage."""
        return float(sum(Fraction(e).limit_denominator(10 ** 12)
                         for e in self.epss[after_stage:]))


def b_of(trace: TowerTrace, k: int):
    """Normalizing sequence b(k) = k * gamma(k)."""
    return k * trace.global_gamma.gamma(k)


def _check_monotone_growth(old: BlockArray, new: BlockArray) -> None:
    """Every new block must dominate the tiling of its predecessor."""
    for s in old.symbols:
        wo, wn = old.blocks[s], new.blocks[s]
        if len(wn) % len(wo) != 0:
            raise InvariantError("stage height must be a multiple")
        reps = len(wn) // len(wo)
        if wo.is_float:
            tiled = np.tile(wo.units * wo.scale, reps)
            if not (wn.units * wn.scale >= tiled - 1e-12).all():
                raise InvariantError("weights decreased across a stage")
        else:
            ratio = Fraction(wo.scale) / Fraction(wn.scale)
            if ratio.denominator != 1:
                # compare in exact rational units of the finer scale
                tiled = np.tile(wo.units.astype(object) * ratio.numerator, reps)
                cur = wn.units.astype(object) * ratio.denominator
            else:
                tiled = np.tile(wo.units.astype(object) * int(ratio), reps)
                cur = wn.units.astype(object)
            if not (cur >= tiled).all():
                raise InvariantError("weights decreased across a stage")


def build_rational_tower(target: FiniteDist, deltas: Sequence,
                         epss: Sequence, rounds: int = 2,
                         size_cap: int = 10 ** 6,
                         mode: str = "exact",
                         cert_dense: int = 512,
                         cert_geo: int = 128) -> TowerTrace:
    """Pure extension chain for a finitely supported rational target.

    Stage n applies a gentle extension with parameters (delta_n, eps_n);
    delta_1 must stay below a ninth of the smallest target value so that
    the uniform-metric certificates transfer to a sharp lower bound on the
    partial sums.
    """
    deltas = [Fraction(d) for d in deltas]
    epss = [Fraction(e) for e in epss]
    if len(deltas) != len(epss) or not deltas:
        raise PreconditionError("need matching nonempty delta/eps schedules")
    if any(e > d for d, e in zip(deltas, epss)):
        raise PreconditionError("eps_n must not exceed delta_n")
    min_y = target.min_value()
    if min_y == INF or not deltas[0] < Fraction(min_y) / 9:
        raise PreconditionError(
            f"delta_1 = {deltas[0]} must be below min(Y)/9 = {min_y}/9")
    # one symbol per unit of target mass, so the array is label-distributed
    den = 1
    for m in target.masses:
        den = den * m.denominator // math.gcd(den, m.denominator)
    symbols = []
    values = {}
    blocks = {}
    for v, m in zip(target.values, target.masses):
        for j in range(int(m * den)):
            s = (len(symbols), v)
            symbols.append(s)
            values[s] = Fraction(v)
            blocks[s] = Block.from_weights([v]) if mode == "exact" \
                else Block.from_weights([float(v)])
    arr = BlockArray(tuple(symbols), blocks, values,
                     Fraction(1) if mode == "exact" else 1.0)
    stages: List[StageRecord] = []
    certs = []
    g_anchors: List[Tuple[int, Fraction]] = [(1, Fraction(1))]
    e_anchors: List[Tuple[int, float]] = []
    for n, (d, e) in enumerate(zip(deltas, epss), start=1):
        arr_new, cert = extension_step(arr, d, e, rounds=rounds,
                                       size_cap=size_cap,
                                       cert_dense=cert_dense,
                                       cert_geo=cert_geo)
        _check_monotone_growth(arr, arr_new)
        if not cert.is_valid():
            raise InvariantError(f"stage {n} certificate failed at "
                                 f"k={cert.failures()[:3]}")
        certs.append(cert)
        for k, g in cert.gamma.anchors:
            if not g_anchors or k > g_anchors[-1][0]:
                g_anchors.append((k, g))
        e_anchors.append((arr_new.height, float(e)))
        stages.append(StageRecord(n, arr_new.height, Fraction(arr_new.scale),
                                  float(d), float(e), arr_new.change_mass(),
                                  cert.is_valid()))
        arr = arr_new
    gamma = GammaTable(tuple(g_anchors), tuple(e_anchors), mode="linear")
    return TowerTrace("rational", target, stages, arr, gamma,
                      tuple(float(d) for d in deltas),
                      tuple(float(e) for e in epss), tuple(certs))


def build_example_tower(kappas: Sequence, epss: Sequence,
                        qs: Optional[Sequence[int]] = None,
                        e0: Fraction = Fraction(5000),
                        size_cap: int = 10 ** 7) -> TowerTrace:
    """Single-block tower with prescribed mean increments.

    Stage n adds kappa_n to the mean through one basic extension; the
    change ledger collects exactly one touched level per stage.  The
    normalizer uses the stagewise-constant convention
    b(N) = N * E(stage n) for heights N in [h_n, h_{n+1}).
    """
    kappas = [Fraction(k) for k in kappas]
    epss = [Fraction(e) for e in epss]
    if len(kappas) != len(epss) or not kappas:
        raise PreconditionError("need matching nonempty kappa/eps schedules")
    e0 = Fraction(e0)
    w = Block.from_weights([e0])
    sym = ("w",)
    mean = e0
    anchors = [(1, e0)]
    e_anchors = []
    stages: List[StageRecord] = []
    target = FiniteDist.point(Fraction(1))
    for n, (kap, e) in enumerate(zip(kappas, epss), start=1):
        if kap > e * mean:
            raise PreconditionError(
                f"stage {n}: kappa={kap} exceeds eps*E = {e * mean}")
        q = int(1 / e) + 1 if qs is None else int(qs[n - 1])
        mu = choose_mu(w, kap, q, e, size_cap=size_cap)
        w = basic_extend(w, kap, q, mu, delta=e, size_cap=size_cap)
        mean = mean + kap
        if Fraction(w.stats().mean) != mean:
            raise InvariantError("mean increment failed to be exact")
        if not is_normalized(w, e):
            raise InvariantError(f"stage {n} block is not eps-normalized")
        anchors.append((len(w), mean))
        e_anchors.append((len(w), float(e)))
        stages.append(StageRecord(n, len(w), mean / e0, float(e), float(e),
                                  Fraction(w.changed_count(), len(w)), True))
    arr = BlockArray(sym, {"w": w}, {"w": Fraction(1)}, mean)
    gamma = GammaTable(tuple(anchors), tuple(e_anchors), mode="constant")
    return TowerTrace("example", target, stages, arr, gamma,
                      tuple(float(e) for e in epss),
                      tuple(float(e) for e in epss), tuple())


def build_general_tower(target: TargetDist, deltas: Sequence,
                        epss: Sequence, max_depth: int = 16,
                        rounds: int = 1,
                        size_cap: int = 10 ** 6,
                        etas: Optional[Sequence] = None,
                        cert_dense: int = 512,
                        cert_geo: int = 128) -> TowerTrace:
    """Alternating straightening and extension stages for a general target.

    The target is discretized along a dyadic splitting sequence; each
    refinement is folded into the array by a straightening step and each
    stage ends with a gentle extension.  The top dyadic cell is truncated
    to the quantile floor R so weights stay finite; the clipped mass is
    2^-depth of the first representation.
    """
    deltas = [Fraction(d) for d in deltas]
    epss = [Fraction(e) for e in epss]
    # blend coarseness of the straightening stages; the certified distance
    # bound is eps + splitting cost regardless, while the compounded height
    # grows like (eta*q*h)^2, so a coarse blend keeps the construction small
    etas = [Fraction(1, 2)] * len(deltas) if etas is None \
        else [Fraction(x) for x in etas]
    seq = build_split_sequence(target, [float(e) for e in epss],
                               max_depth=max_depth)
    floor_r = seq.floor_r
    reps = seq.reps

    def rationalize(v):
        # float quantiles are rounded up to a coarse rational grid so the
        # exact block arithmetic keeps bounded denominators
        if isinstance(v, float):
            return Fraction(math.ceil(v * 16), 16)
        return Fraction(v)

    r_cap = rationalize(floor_r) if floor_r != INF else INF

    def clipped(rep):
        return [rationalize(v) if v != INF and v <= floor_r else r_cap
                for v in rep.cell_values]

    rep0 = reps[0]
    vals0 = clipped(rep0)
    symbols = tuple(range(rep0.size))
    arr = BlockArray(symbols,
                     {j: Block.from_weights([vals0[j]]) for j in symbols},
                     {j: vals0[j] for j in symbols}, Fraction(1))
    stages: List[StageRecord] = []
    certs = []
    g_anchors: List[Tuple[int, Fraction]] = [(1, Fraction(1))]
    e_anchors: List[Tuple[int, float]] = []
    k_flat = 1
    for n, (d, e) in enumerate(zip(deltas, epss), start=1):
        if n > 1 and n - 2 < len(reps) - 1:
            fine = reps[n - 1]
            coarse = reps[n - 2]
            fine_vals = clipped(fine)
            shift = fine.depth - coarse.depth
            from .distributions import Splitting, SymRep
            fine_sym = SymRep(tuple(range(fine.size)),
                              dict(enumerate(fine_vals)))
            coarse_sym = SymRep(tuple(arr.symbols),
                                {s: arr.values[s] for s in arr.symbols})
            pi = {j: j >> shift for j in range(fine.size)}
            split = Splitting(fine_sym, coarse_sym, pi)
            arr, srep = straightening_step(arr, split, e, etas[n - 1],
                                           size_cap=size_cap)
            if not srep.is_valid():
                raise InvariantError(f"straightening at stage {n} failed")
            k_flat = arr.height
        arr_new, cert = extension_step(arr, d, e, rounds=rounds,
                                       size_cap=size_cap,
                                       cert_dense=cert_dense,
                                       cert_geo=cert_geo)
        if not cert.is_valid():
            raise InvariantError(f"stage {n} certificate failed")
        certs.append(cert)
        for k, g in cert.gamma.anchors:
            if k > g_anchors[-1][0]:
                g_anchors.append((k, Fraction(g)))
        e_anchors.append((arr_new.height, float(e)))
        stages.append(StageRecord(n, arr_new.height, Fraction(arr_new.scale),
                                  float(d), float(e), arr_new.change_mass(),
                                  cert.is_valid()))
        arr = arr_new
    # plain tiling pushes the top decade of heights past the last scale
    # jump, where the normalizer is flat and b(2k)/b(k) sits at 2
    tile = 1
    while arr.height * tile < 20 * k_flat and \
            arr.height * 2 * tile <= size_cap:
        tile *= 2
    if tile > 1:
        arr = BlockArray(arr.symbols,
                         {s: self_concat(arr.blocks[s], tile)
                          for s in arr.symbols}, arr.values, arr.scale)
        g_anchors.append((arr.height, Fraction(arr.scale)))
        e_anchors.append((arr.height, float(epss[-1])))
    gamma = GammaTable(tuple(g_anchors), tuple(e_anchors), mode="linear")
    tgt = arr.label_dist()
    trace = TowerTrace("general", tgt, stages, arr, gamma,
                       tuple(float(d) for d in deltas),
                       tuple(float(e) for e in epss), tuple(certs))
    trace.floor_r = r_cap if floor_r != INF else None
    return trace


# -- distribution of the partial sums --------------------------------------


@dataclass(frozen=True)
class SkDistReport:
    """Exact distribution of S_k over all (position, block) pairs."""

    k: int
    entries: tuple          # ((value, count), ...) sorted by value
    total: int

    def dist(self) -> FiniteDist:
        return FiniteDist([(v, Fraction(c, self.total))
                           for v, c in self.entries])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "count", "mass"])
            for v, c in self.entries:
                writer.writerow([str(v), c, f"{c}/{self.total}"])


def sk_distribution(trace: TowerTrace, k: int) -> SkDistReport:
    """Uniform distribution of S_k(nu) over all blocks and positions."""
    arr = trace.final
    counts: Dict = {}
    for s in arr.symbols:
        w = arr.blocks[s]
        units = cyclic_partial_sums_units(w, k)
        uniq, cnt = np.unique(units, return_counts=True)
        for u, c in zip(uniq, cnt):
            v = w.scale * int(u) if not w.is_float else w.scale * float(u)
            counts[v] = counts.get(v, 0) + int(c)
    total = arr.height * arr.size
    entries = tuple(sorted(counts.items()))
    return SkDistReport(k, entries, total)


# -- certification ---------------------------------------------------------


def tower_k_grid(trace: TowerTrace, pad: int = 64, geo: int = 256,
                 exhaustive_below: int = 4096) -> List[int]:
    """Stage boundaries with a local window, plus geometric fill; every k
    when the final height is small enough."""
    h = trace.height
    lo = 1
    if h <= exhaustive_below:
        return list(range(lo, h + 1))
    ks = set()
    bounds = [1] + [st.height for st in trace.stages]
    for b in bounds:
        for k in range(max(lo, b - pad), min(h, b + pad) + 1):
            ks.add(k)
    x = 1.0
    ratio = h ** (1.0 / geo)
    for _ in range(geo):
        x *= ratio
        ks.add(min(h, max(lo, int(round(x)))))
    return sorted(ks)


@dataclass(frozen=True)
class Theorem1Report:
    """Certification summary for a tower trace."""

    k_grid: tuple
    vasershtein: dict           # k -> measured L1 transport distance
    stage_eps_ok: bool
    lower_bound_ok: bool
    lower_bound_checks: tuple   # ((k, x, lhs, rhs, ok), ...)
    doubling_ratios: tuple      # ((k, b(2k)/b(k)), ...) in the top window
    doubling_ok: bool

    def ok(self) -> bool:
        return self.stage_eps_ok and self.lower_bound_ok and self.doubling_ok


def _stage_eps_at(trace: TowerTrace, k: int) -> float:
    bounds = [st.height for st in trace.stages]
    for st in trace.stages:
        if k <= st.height:
            return st.eps
    return trace.stages[-1].eps


def certify_theorem1(trace: TowerTrace,
                     x_values: Sequence = (Fraction(3, 10), Fraction(1, 2),
                                           Fraction(4, 5)),
                     doubling_tol: float = 0.1,
                     k_grid: Optional[Sequence[int]] = None) -> Theorem1Report:
    """Measure the distributional convergence claims of a finished tower.

    Checks, on the verification grid: the L1 transport distance between
    S_k/b(k) and the target stays within the stage epsilon; the exact cdf
    lower bound P(S_k < x b(k)) <= P(Y <= M x) with the configured
    constant M; and b(2k)/b(k) near 2 over the top decade of heights.
    """
    arr = trace.final
    y = trace.target
    grid = list(k_grid) if k_grid is not None else tower_k_grid(trace)
    m = trace.bicycle_m
    vas = {}
    eps_ok = True
    checks = []
    lower_ok = True
    exact = not arr.blocks[arr.symbols[0]].is_float
    for k in grid:
        g = trace.global_gamma.gamma(k)
        units_by_sym = {s: cyclic_partial_sums_units(arr.blocks[s], k)
                        for s in arr.symbols}
        ratios = np.concatenate(
            [units_by_sym[s].astype(float) *
             (float(arr.blocks[s].scale) / (k * float(g)))
             for s in arr.symbols])
        vas[k] = empirical_vasershtein(ratios, y)
        if not vas[k] <= _stage_eps_at(trace, k) + 1e-12:
            eps_ok = False
        for x in x_values:
            x = Fraction(x)
            rhs = y.cdf(Fraction(m * x))
            lhs = Fraction(0)
            thresh = x * k * Fraction(g)
            for s in arr.symbols:
                w = arr.blocks[s]
                units = units_by_sym[s]
                # S < thresh  <=>  units < thresh/scale, decided exactly
                if exact:
                    bound = thresh / Fraction(w.scale)
                    cut = bound.numerator // bound.denominator
                    if bound.denominator == 1:
                        n_below = int((units < cut).sum())
                    else:
                        n_below = int((units <= cut).sum())
                else:
                    n_below = int((units * w.scale < float(thresh)).sum())
                lhs += Fraction(n_below, arr.height * arr.size)
            ok = lhs <= rhs
            if not ok:
                lower_ok = False
            checks.append((k, x, lhs, rhs, ok))
    h = trace.height
    ratios = []
    doubling_ok = True
    k = max(1, h // 20)
    step = max(1, (h // 2 - k) // 32)
    while 2 * k <= h:
        r = float(b_of(trace, 2 * k)) / float(b_of(trace, k))
        ratios.append((k, r))
        if abs(r - 2) > doubling_tol:
            doubling_ok = False
        k += step
    return Theorem1Report(tuple(grid), vas, eps_ok, lower_ok, tuple(checks),
                          tuple(ratios), doubling_ok)


# -- serialization ---------------------------------------------------------


def trace_to_json_obj(trace: TowerTrace) -> dict:
    gamma_obj = trace.global_gamma.to_json_obj()
    return {
        "kind": trace.kind,
        "mode": trace.mode,
        "config_hash": trace.config_hash,
        "target": trace.target.to_json_obj(),
        "height": trace.height,
        "bicycle_m": str(trace.bicycle_m),
        "floor_r": str(trace.floor_r) if trace.floor_r is not None else None,
        "deltas": list(trace.deltas),
        "epss": list(trace.epss),
        "stages": [{"index": st.index, "height": st.height,
                    "scale": str(st.scale), "delta": st.delta,
                    "eps": st.eps, "change_mass": str(st.change_mass),
                    "cert_valid": st.cert_valid} for st in trace.stages],
        "gamma": gamma_obj,
        "gamma_checksum": trace.global_gamma.checksum(),
    }


def save_trace(trace: TowerTrace, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(trace_to_json_obj(trace), fh, indent=1, sort_keys=True)
        fh.write("\n")


class CorruptTraceError(RuntimeError):
    """A serialized trace failed its integrity check."""


def load_trace_summary(path: str) -> dict:
    """Load and integrity-check a serialized trace (summary only)."""
    with open(path) as fh:
        obj = json.load(fh)
    gamma = GammaTable.from_json_obj(obj["gamma"])
    if gamma.checksum() != obj["gamma_checksum"]:
        raise CorruptTraceError(
            f"gamma table checksum mismatch in {path}")
    return obj
