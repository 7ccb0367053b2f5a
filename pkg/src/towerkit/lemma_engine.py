"""Mean-extension machinery for labeled block arrays.

The central move enlarges the mean of a block by tiling it and adding a
sparse arithmetic progression of weight bumps.  Applied to a whole array of
blocks it raises the common scale while keeping the array exactly
distributed like its label variable, keeping every weight at least its old
value, and touching only a small fraction of positions.  Certificates record
measured transport distances of the normalized partial sums against the
label distribution along a growing normalizer.
"""

from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_left
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blocks import (Block, BlockError, Scalar, concat_many,
                     cyclic_partial_sums_units, is_normalized, self_concat)
from .distributions import (FiniteDist, Splitting, empirical_uniform_gap,
                            empirical_vasershtein)

DEFAULT_SIZE_CAP = 10 ** 6


class SizeCapError(RuntimeError):
    """A construction would exceed the configured height cap."""


class PreconditionError(ValueError):
    """An extension was requested outside its domain of validity."""


class InvariantError(RuntimeError):
    """A hard invariant failed during construction."""


def le_sqrt(x: Fraction, rad: Fraction) -> bool:
    """Exact decision of x <= sqrt(rad) for rationals with rad >= 0."""
    if x <= 0:
        return True
    return x * x <= rad


def ge_one_minus_2sqrt(ratio: Fraction, rad: Fraction) -> bool:
    """Exact decision of ratio >= 1 - 2*sqrt(rad)."""
    return le_sqrt((1 - ratio) / 2, rad)


def make_k_grid(lo: int, hi: int, dense_cap: int = 4096,
                geo_cap: int = 256) -> List[int]:
    """Verification grid: every k in [lo, min(hi, dense_cap)], then at most
    geo_cap geometrically spaced k up to hi."""
    if lo < 1 or hi < lo:
        raise ValueError(f"bad k range [{lo}, {hi}]")
    grid = list(range(lo, min(hi, dense_cap) + 1))
    if hi > dense_cap:
        start = max(lo, dense_cap)
        ratio = (hi / start) ** (1.0 / geo_cap)
        seen = set(grid)
        x = float(start)
        for _ in range(geo_cap):
            x *= ratio
            k = min(hi, int(round(x)))
            if k not in seen and k > start:
                seen.add(k)
                grid.append(k)
        if hi not in seen:
            grid.append(hi)
    return sorted(set(grid))


@dataclass(frozen=True)
class BlockArray:
    """Array of equal-length blocks labeled by the symbols of a finite
    random variable, with E(block(s)) = scale * value(s) exactly."""

    symbols: tuple
    blocks: dict      # symbol -> Block
    values: dict      # symbol -> Fraction (label variable)
    scale: Scalar     # common mean multiplier c

    def __post_init__(self):
        if not self.symbols:
            raise PreconditionError("array needs at least one symbol")
        if set(self.blocks) != set(self.symbols) or \
                set(self.values) != set(self.symbols):
            raise PreconditionError("blocks and values must cover the symbols")
        hs = {len(self.blocks[s]) for s in self.symbols}
        if len(hs) != 1:
            raise PreconditionError(f"blocks must share one length, got {hs}")
        for s in self.symbols:
            st = self.blocks[s].stats()
            expected = self.scale * self.values[s]
            if not self.blocks[s].is_float:
                if st.mean != expected:
                    raise PreconditionError(
                        f"block mean for {s!r} is {st.mean}, "
                        f"expected scale*value = {expected}")
            elif not math.isclose(float(st.mean), float(expected),
                                  rel_tol=1e-9):
                raise PreconditionError(
                    f"block mean for {s!r} is {st.mean}, expected {expected}")

    @property
    def height(self) -> int:
        return len(self.blocks[self.symbols[0]])

    @property
    def size(self) -> int:
        return len(self.symbols)

    def label_dist(self) -> FiniteDist:
        return FiniteDist.uniform([self.values[s] for s in self.symbols])

    def change_mass(self) -> Fraction:
        changed = sum(self.blocks[s].changed_count() for s in self.symbols)
        return Fraction(changed, self.height * self.size)

    def min_value(self) -> Fraction:
        return min(self.values[s] for s in self.symbols)

    def max_value(self) -> Fraction:
        return max(self.values[s] for s in self.symbols)

    def ratios(self, k: int, norm) -> np.ndarray:
        """S_k(nu)/(k*norm) over all positions of all blocks (unordered)."""
        out = []
        for s in self.symbols:
            w = self.blocks[s]
            units = cyclic_partial_sums_units(w, k)
            if w.is_float:
                out.append(units * (float(w.scale) / (k * float(norm))))
            else:
                out.append(units.astype(float) *
                           (float(w.scale) / (k * float(norm))))
        return np.concatenate(out)


@dataclass(frozen=True)
class GammaTable:
    """Piecewise normalizer gamma(k) given by anchors, with a matching
    allowance schedule eps(k).

    ``mode`` is "linear" (interpolate between anchors) or "constant"
    (steps: gamma(k) = g_i on [k_i, k_{i+1})).
    """

    anchors: tuple             # ((k_0, g_0), ..., (k_m, g_m)), k increasing
    eps_anchors: tuple         # ((k_0, e_0), ...), e nonincreasing
    mode: str = "linear"

    def __post_init__(self):
        ks = [k for k, _ in self.anchors]
        gs = [g for _, g in self.anchors]
        if ks != sorted(set(ks)):
            raise PreconditionError("gamma anchors must have increasing k")
        if any(b < a for a, b in zip(gs, gs[1:])):
            raise PreconditionError("gamma must be nondecreasing")
        es = [e for _, e in self.eps_anchors]
        if any(b > a for a, b in zip(es, es[1:])):
            raise PreconditionError("eps schedule must be nonincreasing")
        if self.mode not in ("linear", "constant"):
            raise PreconditionError(f"unknown gamma mode {self.mode!r}")

    def gamma(self, k):
        ks = [a for a, _ in self.anchors]
        gs = [g for _, g in self.anchors]
        if k <= ks[0]:
            return gs[0]
        if k >= ks[-1]:
            return gs[-1]
        i = bisect_left(ks, k)
        if ks[i] == k:
            return gs[i]
        if self.mode == "constant":
            return gs[i - 1]
        k0, k1 = ks[i - 1], ks[i]
        g0, g1 = gs[i - 1], gs[i]
        t = Fraction(k - k0, k1 - k0) if not isinstance(g0, float) \
            else (k - k0) / (k1 - k0)
        return g0 + (g1 - g0) * t

    def eps(self, k) -> float:
        ks = [a for a, _ in self.eps_anchors]
        es = [e for _, e in self.eps_anchors]
        if k <= ks[0]:
            return float(es[0])
        if k >= ks[-1]:
            return float(es[-1])
        i = bisect_left(ks, k)
        if ks[i] == k:
            return float(es[i])
        k0, k1 = ks[i - 1], ks[i]
        e0, e1 = float(es[i - 1]), float(es[i])
        return e0 + (e1 - e0) * (k - k0) / (k1 - k0)

    def max_step(self):
        """Largest increment of gamma between consecutive integers."""
        best = 0
        for (k0, g0), (k1, g1) in zip(self.anchors, self.anchors[1:]):
            if self.mode == "constant":
                step = g1 - g0
            else:
                step = Fraction(g1 - g0, k1 - k0) if not isinstance(g0, float) \
                    else (g1 - g0) / (k1 - k0)
            if step > best:
                best = step
        return best

    def to_json_obj(self) -> dict:
        def enc(x):
            if isinstance(x, Fraction):
                return f"{x.numerator}/{x.denominator}"
            return repr(float(x))
        return {"mode": self.mode,
                "anchors": [[int(k), enc(g)] for k, g in self.anchors],
                "eps": [[int(k), repr(float(e))] for k, e in self.eps_anchors]}

    def checksum(self) -> str:
        blob = json.dumps(self.to_json_obj(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_json_obj(cls, obj: dict) -> "GammaTable":
        def dec(s):
            return Fraction(s) if "/" in s or s.lstrip("-").isdigit() \
                else float(s)
        return cls(tuple((int(k), dec(g)) for k, g in obj["anchors"]),
                   tuple((int(k), float(e)) for k, e in obj["eps"]),
                   obj["mode"])


@dataclass(frozen=True)
class ExtensionCertificate:
    """Measured evidence that an extended array stays distributed like its
    label variable along the normalizer chain."""

    k_grid: tuple
    distances: dict            # k -> measured transport distance
    gamma: GammaTable
    change_mass: Fraction
    delta: float
    eps_target: float
    metric: str = "uniform"    # "uniform" or "vasershtein"

    def failures(self) -> List[int]:
        return [k for k in self.k_grid
                if not self.distances[k] < self.gamma.eps(k)]

    def is_valid(self) -> bool:
        return not self.failures() and self.change_mass < self.delta


# -- basic extension -------------------------------------------------------


def _add_bumps(w: Block, m: int, bump: Scalar, spacing: int) -> Block:
    """w^{(m copies)} with ``bump`` added at positions spacing, 2*spacing,...
    (1-based), marking those positions as changed."""
    big = self_concat(w, m)
    h = len(big)
    if h % spacing != 0:
        raise PreconditionError("bump spacing must divide the tiled length")
    if big.is_float:
        units = big.units.copy()
        idx = np.arange(spacing - 1, h, spacing)
        units[idx] += float(bump) / big.scale
        changed = big.changed_mask.copy()
        changed[idx] = True
        return Block(units, big.scale, changed)
    bump = Fraction(bump)
    ratio = bump / big.scale
    units = big.units
    scale = big.scale
    if ratio.denominator != 1:
        f = ratio.denominator
        if int(units.max()) * f * h >= (1 << 62):
            raise SizeCapError("rescaled weights exceed the integer range")
        units = units * np.int64(f)
        scale = scale / f
        ratio = ratio * f
    else:
        units = units.copy()
    idx = np.arange(spacing - 1, h, spacing)
    units[idx] += np.int64(ratio)
    changed = big.changed_mask.copy()
    changed[idx] = True
    return Block(units, scale, changed)


def basic_extend(w: Block, kappa: Scalar, q: int, mu: int,
                 delta: Optional[Scalar] = None,
                 size_cap: int = DEFAULT_SIZE_CAP) -> Block:
    """Tile w into mu*q copies and add kappa*q*h at every q*h-th position.

    The result has mean E(w) + kappa exactly and dominates the plain tiling
    pointwise.  When ``delta`` is given the preconditions kappa <= delta*E(w)
    and q > 1/delta are enforced.
    """
    if q < 2:
        raise PreconditionError(f"q must be at least 2, got {q}")
    if mu < 1:
        raise PreconditionError(f"mu must be at least 1, got {mu}")
    h = len(w)
    if not w.is_float:
        kappa = Fraction(kappa)
    if kappa < 0:
        raise PreconditionError("kappa must be nonnegative")
    if delta is not None:
        d = Fraction(delta) if not w.is_float else float(delta)
        if kappa > d * w.stats().mean:
            raise PreconditionError(
                f"kappa={kappa} exceeds delta*E = {d * w.stats().mean}")
        if q * d <= 1:
            raise PreconditionError(f"q={q} must exceed 1/delta")
    m = mu * q
    if m * h > size_cap:
        raise SizeCapError(f"extended height {m * h} exceeds cap {size_cap}")
    if kappa == 0:
        return self_concat(w, m)
    return _add_bumps(w, m, kappa * q * h, q * h)


def choose_mu(w: Block, kappa: Scalar, q: int, delta: Scalar,
              size_cap: int = DEFAULT_SIZE_CAP,
              max_mu: int = 1 << 20) -> int:
    """Least mu making the basic extension delta-normalized.

    Normalization of the extension is monotone in mu (the partial-sum
    deviation profile is mu-independent while the admissible-k threshold
    grows linearly with mu), so a doubling search followed by bisection
    finds the least witness.
    """
    def ok(mu: int) -> bool:
        wp = basic_extend(w, kappa, q, mu, size_cap=size_cap)
        return is_normalized(wp, delta)

    max_mu = min(max_mu, size_cap // (q * len(w)))
    if max_mu < 1:
        raise SizeCapError(f"even mu=1 exceeds height cap {size_cap}")
    if ok(1):
        return 1
    hi = 2
    while not ok(hi):
        hi *= 2
        if hi > max_mu:
            raise SizeCapError(f"no admissible mu up to {max_mu}")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def choose_tile(w: Block, eps: Scalar, size_cap: int = DEFAULT_SIZE_CAP) -> int:
    """Least number of plain copies making the tiling eps-normalized.

    Tiling leaves the deviation profile unchanged while the admissible-k
    threshold grows linearly with the copy count, so the property is
    monotone and a doubling search followed by bisection is exact.
    """
    if is_normalized(w, eps):
        return 1
    hi = 2
    while not is_normalized(self_concat(w, hi), eps):
        hi *= 2
        if hi * len(w) > size_cap:
            raise SizeCapError(
                f"normalizing tile count exceeds height cap {size_cap}")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if is_normalized(self_concat(w, mid), eps):
            hi = mid
        else:
            lo = mid
    return hi


def basic_extend_array(arr: BlockArray, kappas: Dict, q: int,
                       delta: Scalar, mu: Optional[int] = None,
                       size_cap: int = DEFAULT_SIZE_CAP) -> Tuple[BlockArray, int]:
    """Extend every block with its own kappa but shared q and mu.

    kappas must scale the labels: kappa(s) = lam * scale * value(s) for a
    common lam, so the extended array is again exactly label-distributed.
    """
    if set(kappas) != set(arr.symbols):
        raise PreconditionError("kappas must cover exactly the symbols")
    lams = {s: Fraction(kappas[s]) / (Fraction(arr.scale) * arr.values[s])
            for s in arr.symbols} if not arr.blocks[arr.symbols[0]].is_float \
        else {s: float(kappas[s]) / (float(arr.scale) * float(arr.values[s]))
              for s in arr.symbols}
    lam = lams[arr.symbols[0]]
    for s in arr.symbols:
        if not arr.blocks[s].is_float and lams[s] != lam:
            raise PreconditionError(
                "kappas must be proportional to the label values")
    if mu is None:
        mu = max(choose_mu(arr.blocks[s], kappas[s], q, delta, size_cap)
                 for s in arr.symbols)
    blocks = {s: basic_extend(arr.blocks[s], kappas[s], q, mu,
                              size_cap=size_cap)
              for s in arr.symbols}
    new_scale = arr.scale * (1 + lam)
    return BlockArray(arr.symbols, blocks, arr.values, new_scale), mu


# -- compound extension ----------------------------------------------------


@dataclass(frozen=True)
class CompoundRound:
    p_before: Fraction
    p_after: Fraction
    q: int
    mu: int
    height: int        # block height after this round


@dataclass(frozen=True)
class CompoundReport:
    """Schedule and measured deviations of a compound extension."""

    rounds: tuple
    t_map: dict                # symbol -> exact mean multiplier
    beta: Fraction             # bound on p-steps
    base_height: int
    delta_grid: tuple          # ((k, delta_k), ...) nonincreasing in k

    def p_of_k(self, k: int) -> Fraction:
        """Proportion of the mean change already present at window scale k."""
        if k <= self.base_height:
            return Fraction(0)
        for r in self.rounds:
            if k <= r.height:
                return r.p_after
        return Fraction(1)

    def p_steps(self) -> List[Fraction]:
        return [r.p_after - r.p_before for r in self.rounds]


def _delta_k(ratios: np.ndarray) -> float:
    """Least d with  fraction of positions deviating by more than d  <= d.

    ``ratios`` holds |S_k/(k E_k) - 1| over all positions.
    """
    d = np.sort(ratios)[::-1]
    n = len(d)
    best = float(d[0])
    for j in range(n + 1):
        tail = float(d[j]) if j < n else 0.0
        cand = max(tail, j / n)
        if cand < best:
            best = cand
        if j / n >= best:
            break
    return best


def compound_extend(arr: BlockArray, t_map: Dict, beta: Scalar,
                    eps_out: Scalar, delta: Scalar,
                    size_cap: int = DEFAULT_SIZE_CAP,
                    k_grid: Optional[Sequence[int]] = None
                    ) -> Tuple[BlockArray, CompoundReport]:
    """Multiply each block mean exactly by t_map(s) >= 1 through a chain of
    basic extensions whose mean-proportion p advances by at most beta per
    round, ending eps_out-normalized.

    All blocks share the spacing q and the per-round mu, so they remain a
    block array throughout.
    """
    if set(t_map) != set(arr.symbols):
        raise PreconditionError("t_map must cover exactly the symbols")
    t = {s: Fraction(t_map[s]) for s in arr.symbols}
    if any(v < 1 for v in t.values()):
        raise PreconditionError("mean multipliers must be at least 1")
    beta = Fraction(beta)
    d = Fraction(delta)
    eps_out = Fraction(eps_out)
    if beta <= 0 or d <= 0 or eps_out <= 0:
        raise PreconditionError("beta, delta and eps_out must be positive")
    q = int(1 / d) + 1
    e0 = {s: Fraction(arr.scale) * arr.values[s] for s in arr.symbols}
    growing = [s for s in arr.symbols if t[s] > 1]
    base_h = arr.height
    # keep the proportion steps on a coarse rational grid, so weight
    # denominators stay small and the exact fast path keeps applying
    grid_den = 60
    p = Fraction(0)
    cur = arr
    rounds: List[CompoundRound] = []
    while p < 1:
        if growing:
            cap = min(d * (1 + p * (t[s] - 1)) / (t[s] - 1) for s in growing)
        else:
            cap = 1 - p
        inc = min(beta, 1 - p, cap)
        inc = Fraction(math.floor(inc * grid_den), grid_den)
        if inc <= 0:
            raise PreconditionError(
                "compound schedule cannot advance; beta or delta too small "
                f"for the 1/{grid_den} step grid")
        p_next = p + inc
        if 1 - p <= min(beta, cap):
            p_next = Fraction(1)
            inc = 1 - p
        kappas = {s: e0[s] * (t[s] - 1) * inc for s in arr.symbols}
        blocks = {s: basic_extend(cur.blocks[s], kappas[s], q, 1,
                                  size_cap=size_cap)
                  for s in arr.symbols}
        # means are now e0*(1 + p_next*(t-1)); fold them into the values and
        # keep a unit scale, since the multipliers need not be proportional
        new_vals = {s: Fraction(blocks[s].stats().mean) for s in arr.symbols}
        cur = BlockArray(arr.symbols, blocks, new_vals, Fraction(1))
        p = p_next
        rounds.append(CompoundRound(rounds[-1].p_after if rounds else
                                    Fraction(0), p, q, 1, cur.height))
    # a plain tiling fixes the admissible-k threshold without moving means
    tile = max(choose_tile(cur.blocks[s], eps_out / 2, size_cap)
               for s in arr.symbols)
    if tile > 1:
        if cur.height * tile > size_cap:
            raise SizeCapError(
                f"normalized height {cur.height * tile} exceeds {size_cap}")
        cur = BlockArray(arr.symbols,
                         {s: self_concat(cur.blocks[s], tile)
                          for s in arr.symbols}, cur.values, cur.scale)
        rounds.append(CompoundRound(p, p, q, tile, cur.height))
    # final array: values are the target labels, scale absorbs the rest when
    # the multipliers are proportional; otherwise keep unit scale
    final_vals = {s: e0[s] * t[s] for s in arr.symbols}
    final = BlockArray(arr.symbols, cur.blocks, final_vals, Fraction(1))
    for s in arr.symbols:
        if Fraction(final.blocks[s].stats().mean) != final_vals[s]:
            raise InvariantError("exact mean multiplication failed")
    report_rounds = tuple(rounds)
    rep = CompoundReport(report_rounds, dict(t), beta, base_h, tuple())
    if k_grid is None:
        k_grid = make_k_grid(base_h, final.height, dense_cap=min(
            4096, max(base_h * 4, 64)), geo_cap=64)
    deltas = []
    for k in k_grid:
        devs = []
        for s in arr.symbols:
            w = final.blocks[s]
            ek = e0[s] * (1 + rep.p_of_k(k) * (t[s] - 1))
            units = cyclic_partial_sums_units(w, k)
            ratio = units.astype(float) * float(w.scale) / (k * float(ek))
            devs.append(np.abs(ratio - 1.0))
        deltas.append(_delta_k(np.concatenate(devs)))
    # enforce the nonincreasing shape by a running maximum from the right
    for i in range(len(deltas) - 2, -1, -1):
        deltas[i] = max(deltas[i], deltas[i + 1])
    rep = CompoundReport(report_rounds, dict(t), beta, base_h,
                         tuple(zip(k_grid, deltas)))
    return final, rep


# -- full extension step ---------------------------------------------------


def extension_step(arr: BlockArray, delta: Scalar, eps: Scalar,
                   rounds: int = 3, mode: str = "gentle",
                   size_cap: int = DEFAULT_SIZE_CAP,
                   cert_dense: int = 4096, cert_geo: int = 256
                   ) -> Tuple[BlockArray, ExtensionCertificate]:
    """Produce a strictly larger-scale array that is still exactly
    label-distributed, moves less than ``delta`` of the mass, and carries a
    certificate of closeness to the label distribution along a gamma chain.

    ``gentle`` mode grows the scale by a small factor using bump sizes that
    stay uniformly negligible at every window length, and certifies in the
    L-infinity transport metric.  ``transitive`` mode multiplies the scale
    by an integer factor larger than the label spread by blending every
    block into every target label, and certifies in the L1 transport metric
    (large but rare bumps are unavoidable there).
    """
    d = Fraction(delta)
    e = Fraction(eps)
    if not 0 < e <= d:
        raise PreconditionError("need 0 < eps <= delta")
    if mode == "gentle":
        return _extension_gentle(arr, d, e, rounds, size_cap,
                                 cert_dense, cert_geo)
    if mode == "transitive":
        return _extension_transitive(arr, d, e, size_cap,
                                     cert_dense, cert_geo)
    raise PreconditionError(f"unknown extension mode {mode!r}")


def _certify(arr_new: BlockArray, gamma: GammaTable, k_lo: int, k_hi: int,
             delta: Fraction, eps: Fraction, change: Fraction,
             metric: str, dense_cap: int = 4096,
             geo_cap: int = 256) -> ExtensionCertificate:
    y = arr_new.label_dist()
    grid = make_k_grid(k_lo, k_hi, dense_cap=dense_cap, geo_cap=geo_cap)
    distances = {}
    for k in grid:
        vals = arr_new.ratios(k, gamma.gamma(k))
        if metric == "uniform":
            distances[k] = empirical_uniform_gap(vals, y)
        else:
            distances[k] = empirical_vasershtein(vals, y)
    return ExtensionCertificate(tuple(grid), distances, gamma, change,
                                float(delta), float(eps), metric)


def _extension_gentle(arr: BlockArray, delta: Fraction, eps: Fraction,
                      rounds: int, size_cap: int,
                      cert_dense: int = 4096, cert_geo: int = 256
                      ) -> Tuple[BlockArray, ExtensionCertificate]:
    if rounds < 1:
        raise PreconditionError("gentle extension needs at least one round")
    q = 2 * (int(1 / delta) + 1)
    # dyadic bump coefficient: every bump is theta*value(s), keeping weight
    # denominators bounded while window excess stays below eps/4
    theta_cap = eps * Fraction(arr.scale) / (4 * (rounds + 1))
    j = 0
    while Fraction(1, 2 ** j) > theta_cap:
        j += 1
    theta = Fraction(1, 2 ** j)
    h0 = arr.height
    cur = arr
    heights = [h0]
    scales = [Fraction(arr.scale)]
    eps_round = eps / 2
    for r in range(rounds):
        h = cur.height
        kappas = {s: theta * cur.values[s] / (q * h) for s in cur.symbols}
        cur, mu = basic_extend_array(cur, kappas, q, eps_round,
                                     size_cap=size_cap)
        heights.append(cur.height)
        scales.append(Fraction(cur.scale))
    span = heights[-1] - h0
    # allowance decays from delta at the old height to eps at the new one
    anchors_e = [(h0, float(delta))]
    ks = sorted({min(heights[-1], h0 * 2 ** i)
                 for i in range(1, 64) if h0 * 2 ** i < heights[-1]})
    for k in ks:
        frac = Fraction(heights[-1] - k, span) * Fraction(h0, k)
        anchors_e.append((k, float(eps + (delta - eps) * frac)))
    anchors_e.append((heights[-1], float(eps)))
    gamma = GammaTable(tuple(zip(heights, scales)), tuple(anchors_e),
                       mode="linear")
    if gamma.max_step() > delta:
        raise InvariantError("gamma chain step exceeds delta")
    cert = _certify(cur, gamma, h0, heights[-1], delta, eps,
                    cur.change_mass(), "uniform", cert_dense, cert_geo)
    return cur, cert


def _extension_transitive(arr: BlockArray, delta: Fraction, eps: Fraction,
                          size_cap: int,
                          cert_dense: int = 4096, cert_geo: int = 256
                          ) -> Tuple[BlockArray, ExtensionCertificate]:
    vals = arr.values
    f_min, f_max = arr.min_value(), arr.max_value()
    k_factor = int(2 * f_max / f_min) + 1
    h0 = arr.height
    c0 = Fraction(arr.scale)
    # one blended constituent per (source, target) pair, extended along a
    # shared schedule so all pieces keep a common length
    pair_syms = tuple((s, t_sym) for s in arr.symbols
                      for t_sym in arr.symbols)
    pair_arr = BlockArray(pair_syms,
                          {(s, t_sym): arr.blocks[s]
                           for s, t_sym in pair_syms},
                          {(s, t_sym): vals[s] for s, t_sym in pair_syms},
                          c0)
    t_map = {(s, t_sym): Fraction(k_factor) * vals[t_sym] / vals[s]
             for s, t_sym in pair_syms}
    per_piece_cap = size_cap // len(arr.symbols)
    pieces_arr, _ = compound_extend(pair_arr, t_map, beta=Fraction(1, 2),
                                    eps_out=eps / 2, delta=delta,
                                    size_cap=per_piece_cap, k_grid=[h0])
    blocks = {}
    for t_sym in arr.symbols:
        parts = [pieces_arr.blocks[(s, t_sym)] for s in arr.symbols]
        blocks[t_sym] = concat_many(parts)
    new_scale = c0 * k_factor
    new = BlockArray(arr.symbols, blocks, vals, new_scale)
    # double until the assembled blocks are eps-normalized
    t_copies = 1
    while not all(is_normalized(new.blocks[s], eps) for s in arr.symbols):
        t_copies *= 2
        if new.height * 2 > size_cap:
            raise SizeCapError("transitive extension exceeds the height cap")
        new = BlockArray(arr.symbols,
                         {s: self_concat(new.blocks[s], 2)
                          for s in arr.symbols}, vals, new_scale)
    h1 = new.height
    gamma = GammaTable(((h0, c0), (h1, new_scale)),
                       ((h0, float(delta)), (h1 - 1, float(delta)),
                        (h1, float(eps))), mode="linear")
    cert = _certify(new, gamma, h0, h1, delta, eps, new.change_mass(),
                    "vasershtein", cert_dense, cert_geo)
    return new, cert


# -- straightening ---------------------------------------------------------


@dataclass(frozen=True)
class StraighteningReport:
    """Blend schedule from a coarse label to a fine one along a splitting."""

    k_factor: Fraction
    beta_table: GammaTable          # beta(k) normalizer chain
    q_grid: tuple                   # ((k, q_k), ...) blend weights
    distances: dict                 # k -> vasershtein distance to the blend
    bound: float                    # allowance eps + splitting cost

    def failures(self) -> List[int]:
        return [k for k, _ in self.q_grid
                if not self.distances[k] < self.bound]

    def is_valid(self) -> bool:
        return not self.failures()


def straightening_step(arr: BlockArray, split: Splitting, eps: Scalar,
                       eta: Scalar, size_cap: int = DEFAULT_SIZE_CAP
                       ) -> Tuple[BlockArray, StraighteningReport]:
    """Refine a coarse-labeled array along a splitting of its label.

    Each fine symbol xi lifts the block of its coarse image and compounds
    it by K*g(xi)/f(pi(xi)) with K just above the worst ratio f/g, so the
    refined array is exactly distributed like the fine label at scale K
    times the old scale.  Partial sums at window scale k look like a blend
    of the two labels with weight q_k moving monotonically from 0 to 1.
    """
    eps = Fraction(eps)
    eta = Fraction(eta)
    if eps <= 0 or eta <= 0:
        raise PreconditionError("eps and eta must be positive")
    coarse_syms = set(arr.symbols)
    if set(split.coarse.symbols) != coarse_syms:
        raise PreconditionError(
            "splitting coarse symbols must match the array symbols")
    f = {s: Fraction(arr.values[s]) for s in arr.symbols}
    g = {x: Fraction(split.fine.values[x]) for x in split.fine.symbols}
    ratios = [f[split.pi[x]] / g[x] for x in split.fine.symbols]
    # round the lift factor up to the 1/64 grid to keep denominators small
    k_factor = Fraction(math.ceil((max(ratios) + Fraction(1, 64)) * 64), 64)
    c0 = Fraction(arr.scale)
    fine_syms = tuple(split.fine.symbols)
    lifted = BlockArray(fine_syms,
                        {x: arr.blocks[split.pi[x]] for x in fine_syms},
                        {x: f[split.pi[x]] for x in fine_syms}, c0)
    t_map = {x: k_factor * g[x] / f[split.pi[x]] for x in fine_syms}
    refined, rep = compound_extend(lifted, t_map, beta=eta, eps_out=eps,
                                   delta=eta, size_cap=size_cap)
    final = BlockArray(fine_syms, refined.blocks, g, c0 * k_factor)
    h0, h1 = arr.height, final.height
    grid = make_k_grid(h0, h1, dense_cap=min(2048, 4 * h0), geo_cap=64)
    beta_anchors = []
    q_grid = []
    distances = {}
    prev_q = None
    for k in grid:
        p = rep.p_of_k(k)
        beta_k = c0 * ((1 - p) + p * k_factor)
        q_k = (k_factor * p) / ((1 - p) + p * k_factor)
        if prev_q is not None and q_k < prev_q:
            raise InvariantError("blend weight must be monotone in k")
        prev_q = q_k
        beta_anchors.append((k, beta_k))
        q_grid.append((k, q_k))
        blend = FiniteDist.uniform(
            [(1 - q_k) * f[split.pi[x]] + q_k * g[x] for x in fine_syms])
        vals = final.ratios(k, beta_k)
        distances[k] = empirical_vasershtein(vals, blend)
    if q_grid[0][1] != 0:
        raise InvariantError("blend weight must start at 0")
    bound = float(eps) + split.cost()
    beta_table = GammaTable(tuple(beta_anchors),
                            ((h0, float(1)), (h1, float(1))), mode="linear")
    report = StraighteningReport(k_factor, beta_table, tuple(q_grid),
                                 distances, bound)
    return final, report
