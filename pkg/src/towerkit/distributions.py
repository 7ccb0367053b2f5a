"""Finite distributions on (0, infinity] and metrics between them.

Distances between distributions are taken after the compactifying change of
variable x -> arctan(x), so that the point at infinity is an honest atom at
pi/2.  Masses are exact rationals; only the final arctan evaluations use
floats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

Value = Union[Fraction, float]  # a positive rational, a float, or math.inf

INF = math.inf


class DistError(ValueError):
    """Invalid distribution or invalid metric query."""


def rho(x: Value, y: Value) -> float:
    """Compactified distance |arctan(x) - arctan(y)| on [0, infinity]."""
    for v in (x, y):
        if v != INF and v < 0:
            raise DistError(f"rho is defined on nonnegative values, got {v}")
    ax = math.pi / 2 if x == INF else math.atan(float(x))
    ay = math.pi / 2 if y == INF else math.atan(float(y))
    return abs(ax - ay)


def _parse_value(s) -> Value:
    if isinstance(s, (int, Fraction)):
        return Fraction(s)
    if isinstance(s, float):
        return s
    if s == "inf":
        return INF
    if "/" in s:
        return Fraction(s)
    if "." in s or "e" in s or "E" in s:
        return float(s)
    return Fraction(s)


def _format_value(v: Value) -> str:
    if v == INF:
        return "inf"
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}" if v.denominator != 1 \
            else str(v.numerator)
    return repr(float(v))


class FiniteDist:
    """Finitely supported probability distribution on (0, infinity].

    Atoms are kept sorted with strictly increasing values and exact positive
    rational masses summing to 1.  The value ``math.inf`` is a legal atom.
    """

    __slots__ = ("values", "masses")

    def __init__(self, atoms: Sequence[Tuple[Value, Fraction]]):
        if not atoms:
            raise DistError("distribution needs at least one atom")
        merged: Dict[Value, Fraction] = {}
        for v, m in atoms:
            if not isinstance(v, float):
                v = Fraction(v)
            m = Fraction(m)
            if v != INF and v <= 0:
                raise DistError(f"atom value must be positive, got {v}")
            if m <= 0:
                raise DistError(f"atom mass must be positive, got {m}")
            merged[v] = merged.get(v, Fraction(0)) + m
        vals = sorted(merged, key=lambda v: (v == INF, v))
        self.values: List[Value] = vals
        self.masses: List[Fraction] = [merged[v] for v in vals]
        if sum(self.masses) != 1:
            raise DistError(f"masses must sum to 1, got {sum(self.masses)}")

    @classmethod
    def point(cls, value: Value) -> "FiniteDist":
        return cls([(value, Fraction(1))])

    @classmethod
    def uniform(cls, values: Sequence[Value]) -> "FiniteDist":
        n = len(values)
        return cls([(v, Fraction(1, n)) for v in values])

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FiniteDist):
            return NotImplemented
        return self.values == other.values and self.masses == other.masses

    def __repr__(self) -> str:
        pairs = ", ".join(f"{_format_value(v)}:{m}" for v, m in
                          zip(self.values, self.masses))
        return f"FiniteDist({pairs})"

    def atoms(self) -> List[Tuple[Value, Fraction]]:
        return list(zip(self.values, self.masses))

    def cdf(self, t: Value) -> Fraction:
        """P(X <= t), exact."""
        acc = Fraction(0)
        for v, m in zip(self.values, self.masses):
            if v == INF:
                if t == INF:
                    acc += m
                continue
            if t != INF and v > t:
                break
            acc += m
        return acc

    def cdf_below(self, t: Value) -> Fraction:
        """P(X < t), exact."""
        acc = Fraction(0)
        for v, m in zip(self.values, self.masses):
            if v == INF or (t != INF and v >= t):
                break
            acc += m
        return acc

    def quantile(self, u: Fraction) -> Value:
        """Left-continuous quantile: inf of t with P(X <= t) >= u."""
        u = Fraction(u)
        if not 0 < u <= 1:
            raise DistError(f"quantile level must be in (0, 1], got {u}")
        acc = Fraction(0)
        for v, m in zip(self.values, self.masses):
            acc += m
            if acc >= u:
                return v
        return self.values[-1]

    def min_value(self) -> Value:
        return self.values[0]

    def max_value(self) -> Value:
        return self.values[-1]

    def mean(self) -> Value:
        """Exact mean; infinity if an atom sits at infinity."""
        if self.values and self.values[-1] == INF:
            return INF
        if any(isinstance(v, float) for v in self.values):
            return math.fsum(float(v) * float(m)
                             for v, m in zip(self.values, self.masses))
        return sum((v * m for v, m in zip(self.values, self.masses)),
                   Fraction(0))

    def scaled(self, c) -> "FiniteDist":
        """Distribution of c*X for a positive rational or float c."""
        if c <= 0:
            raise DistError("scaling factor must be positive")
        out = []
        for v, m in zip(self.values, self.masses):
            out.append((INF if v == INF else
                        (v * c if isinstance(v, Fraction) and
                         isinstance(c, (int, Fraction)) else float(v) * float(c)),
                        m))
        return FiniteDist(out)

    # -- serialization -----------------------------------------------------

    def to_json_obj(self) -> dict:
        return {"atoms": [{"value": _format_value(v),
                           "mass": f"{m.numerator}/{m.denominator}"}
                          for v, m in zip(self.values, self.masses)]}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "FiniteDist":
        atoms = [(_parse_value(a["value"]), Fraction(a["mass"]))
                 for a in obj["atoms"]]
        return cls(atoms)

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json(cls, s: str) -> "FiniteDist":
        return cls.from_json_obj(json.loads(s))


def _merged_segments(p: FiniteDist, q: FiniteDist):
    """Common refinement of the quantile step functions of p and q.

    Yields (length, vp, vq): a maximal interval of levels u in (0, 1] of the
    given rational length on which both quantiles are constant.
    """
    ip = iq = 0
    ap, aq = p.masses[0], q.masses[0]
    u = Fraction(0)
    while True:
        step = min(ap, aq)
        yield step, p.values[ip], q.values[iq]
        u += step
        if u == 1:
            return
        ap -= step
        aq -= step
        if ap == 0:
            ip += 1
            ap = p.masses[ip]
        if aq == 0:
            iq += 1
            aq = q.masses[iq]


def vasershtein(p: FiniteDist, q: FiniteDist) -> float:
    """L1 transport distance in the arctan metric.

    Computed as the integral of rho between the two quantile functions over
    the common refinement of their rational level breakpoints; the
    comonotone coupling is optimal on the line.
    """
    return math.fsum(float(step) * rho(vp, vq)
                     for step, vp, vq in _merged_segments(p, q))


def uniform_dist(p: FiniteDist, q: FiniteDist) -> float:
    """L-infinity transport distance in the arctan metric.

    Equals the sup over levels of the quantile gap, evaluated on the common
    refinement of the level breakpoints.
    """
    return max(rho(vp, vq) for step, vp, vq in _merged_segments(p, q))


def cdf_dominates_below(p: FiniteDist, q: FiniteDist, r: Value) -> bool:
    """Exact check of P(X <= t) <= Q(X <= t) for every t < r.

    Both cdfs are right-continuous step functions, so it is enough to test
    at the atom values of either distribution that lie below r.
    """
    points = set()
    for d in (p, q):
        for v in d.values:
            if v != INF and (r == INF or v < r):
                points.add(v)
    return all(p.cdf(t) <= q.cdf(t) for t in points)


def array_mean_dist(blocks, c) -> "FiniteDist":
    """Distribution of E(w)/c over the blocks of an array (uniform weights)."""
    vals = []
    for w in blocks:
        e = w.stats().mean
        vals.append(e / c if isinstance(e, Fraction) and
                    isinstance(c, (int, Fraction)) else float(e) / float(c))
    return FiniteDist.uniform(vals)


def _atan_partitioned(vals, dist: FiniteDist):
    """Arctan-transform the sample and partition it at the order-statistic
    ranks needed by the segment boundaries of ``dist``.

    Returns (arr, n, segments) with one (a, b, av) triple per atom: the
    rational mass range (a, b] and the arctan of the atom value.
    """
    import numpy as np
    arr = np.asarray(vals, dtype=float)
    n = arr.size
    if n == 0:
        raise DistError("empirical sample must be nonempty")
    arr = np.where(np.isinf(arr), math.pi / 2, np.arctan(arr))
    segments = []
    kth = set()
    acc = Fraction(0)
    for v, m in zip(dist.values, dist.masses):
        av = math.pi / 2 if v == INF else math.atan(float(v))
        a, b = acc, acc + m
        an, bn = a * n, b * n
        for r in (an.numerator // an.denominator,
                  -((-an.numerator) // an.denominator),
                  bn.numerator // bn.denominator - 1,
                  bn.numerator // bn.denominator):
            if 0 <= r < n:
                kth.add(int(r))
        segments.append((a, b, av))
        acc = b
    arr = np.partition(arr, sorted(kth))
    return arr, n, segments


def empirical_uniform_gap(vals, dist: FiniteDist) -> float:
    """L-infinity transport distance between the empirical distribution of a
    value array (uniform weights, possibly math.inf entries) and a finite
    distribution.

    The empirical quantile is constant on ((j-1)/n, j/n], so the sup of the
    quantile gap is attained at the extreme empirical values inside each
    atom segment of the reference distribution.
    """
    arr, n, segments = _atan_partitioned(vals, dist)
    best = 0.0
    for a, b, av in segments:
        an, bn = a * n, b * n
        j_lo = int(an.numerator // an.denominator)
        j_hi = int(bn.numerator // bn.denominator) - \
            (1 if bn.denominator == 1 else 0)
        gap = max(abs(float(arr[j_lo]) - av), abs(float(arr[j_hi]) - av))
        if gap > best:
            best = gap
    return best


def empirical_vasershtein(vals, dist: FiniteDist) -> float:
    """L1 transport distance between the empirical distribution of a value
    array (uniform weights) and a finite distribution, integrated exactly
    over the common refinement of the level breakpoints."""
    import numpy as np
    arr, n, segments = _atan_partitioned(vals, dist)
    total = 0.0
    for a, b, av in segments:
        an, bn = a * n, b * n
        full_lo = int(-((-an.numerator) // an.denominator))
        full_hi = int(bn.numerator // bn.denominator)   # exclusive
        if full_hi > full_lo:
            total += float(np.abs(arr[full_lo:full_hi] - av).sum()) / n
        if an.denominator != 1:
            j = an.numerator // an.denominator
            hi = min(Fraction(j + 1, n), b)
            total += float(hi - a) * abs(float(arr[j]) - av)
        if bn.denominator != 1:
            j = bn.numerator // bn.denominator
            if an.denominator == 1 or j != an.numerator // an.denominator:
                lo = max(Fraction(j, n), a)
                total += float(b - lo) * abs(float(arr[j]) - av)
    return total


@dataclass(frozen=True)
class SymRep:
    """Finite symbol space with a value for each symbol.

    Models a random variable as a function on a finite uniform probability
    space; symbols are hashable labels.
    """

    symbols: tuple
    values: dict  # symbol -> Value

    def __post_init__(self):
        if len(self.symbols) == 0:
            raise DistError("symbol space must be nonempty")
        if set(self.symbols) != set(self.values):
            raise DistError("values must be given for exactly the symbols")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def dist(self) -> FiniteDist:
        return FiniteDist.uniform([self.values[s] for s in self.symbols])


@dataclass(frozen=True)
class Splitting:
    """Uniform-fiber factor map between two symbol spaces.

    ``pi`` sends each symbol of ``fine`` to a symbol of ``coarse``; every
    fiber must have the same cardinality, so that pushing the uniform
    measure forward gives the uniform measure again.
    """

    fine: SymRep
    coarse: SymRep
    pi: dict  # fine symbol -> coarse symbol

    def __post_init__(self):
        if set(self.pi) != set(self.fine.symbols):
            raise DistError("pi must be defined on exactly the fine symbols")
        counts: Dict[object, int] = {s: 0 for s in self.coarse.symbols}
        for s, t in self.pi.items():
            if t not in counts:
                raise DistError(f"pi maps {s!r} outside the coarse symbols")
            counts[t] += 1
        sizes = set(counts.values())
        if len(sizes) != 1 or 0 in sizes:
            raise DistError(f"fibers of pi must have equal size, got {counts}")

    def fiber_size(self) -> int:
        return self.fine.size // self.coarse.size

    def cost(self) -> float:
        """Average rho-gap between the fine value and the lifted coarse value.

        An epsilon bound on this quantity makes the two distributions
        epsilon-close in the L1 transport metric.
        """
        n = self.fine.size
        return math.fsum(rho(self.fine.values[s],
                             self.coarse.values[self.pi[s]])
                         for s in self.fine.symbols) / n
