"""Core block calculus.

A block is a positive weight vector.  Concatenation of blocks models the
stacking of labeled columns, self-concatenation models cutting a column into
equal slices and restacking, and the cyclic partial sums S_k are the Birkhoff
sums of the column labels read cyclically.

Weights are stored as integer multiples of a common rational (or float)
``scale``.  This keeps all block arithmetic exact in exact mode while allowing
towers with millions of levels to live in a single int64 numpy array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Tuple, Union

import numpy as np

Scalar = Union[int, Fraction, float]

# Guard against int64 overflow in h * prefix products used by the
# normalization test.  Blocks whose h * Sigma(units) exceeds this fall back to
# exact Python integers.
_INT64_SAFE = 1 << 62

# Relative comparison slack used in float mode.
_FLOAT_RTOL = 1e-9


class BlockError(ValueError):
    """Invalid block or invalid block operation."""


def _as_fraction(x: Scalar) -> Fraction:
    if isinstance(x, float):
        return Fraction(x)
    return Fraction(x)


def _common_scale(a: "Block", b: "Block") -> Tuple[Scalar, int, int]:
    """Return (scale, ma, mb) with a.scale == scale*ma and b.scale == scale*mb."""
    if a.scale == b.scale:
        return a.scale, 1, 1
    if isinstance(a.scale, float) or isinstance(b.scale, float):
        raise BlockError("cannot merge float-mode blocks with mismatched scales")
    sa, sb = Fraction(a.scale), Fraction(b.scale)
    g = Fraction(math.gcd(sa.numerator * sb.denominator, sb.numerator * sa.denominator),
                 sa.denominator * sb.denominator)
    ma = sa / g
    mb = sb / g
    assert ma.denominator == 1 and mb.denominator == 1
    return g, int(ma), int(mb)


@dataclass(frozen=True)
class BlockStats:
    """Length, max, total and mean of a block (exact in exact mode)."""

    length: int
    max: Scalar
    total: Scalar
    mean: Scalar


class Block:
    """Positive weight vector with cached prefix sums.

    Positions are 1-based.  ``units`` holds the weights divided by ``scale``;
    in exact mode the entries are positive integers and ``scale`` is a
    positive Fraction, in float mode ``units`` is float64 and ``scale`` is
    the float 1.0 (or any positive float).
    """

    __slots__ = ("units", "scale", "prefix", "_changed")

    def __init__(self, units: Sequence[int], scale: Scalar = 1,
                 changed: Optional[np.ndarray] = None):
        arr = np.asarray(units)
        if arr.ndim != 1 or arr.size == 0:
            raise BlockError("block must be a nonempty vector")
        if isinstance(scale, float) or arr.dtype.kind == "f":
            arr = arr.astype(np.float64)
            scale = float(scale)
        else:
            arr = arr.astype(np.int64)
            scale = _as_fraction(scale)
        if scale <= 0:
            raise BlockError("scale must be positive")
        if not (arr > 0).all():
            raise BlockError("block weights must be positive")
        self.units = arr
        self.scale = scale
        pre = np.zeros(arr.size + 1, dtype=arr.dtype)
        np.cumsum(arr, out=pre[1:])
        self.prefix = pre
        # Optional boolean mask of positions whose weight differs from the
        # weight inherited from the coarsest ancestor block (change ledger).
        self._changed = changed

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_weights(cls, weights: Sequence[Scalar]) -> "Block":
        """Build a block from rational or float weights."""
        if len(weights) == 0:
            raise BlockError("block must be nonempty")
        if any(isinstance(w, float) for w in weights):
            return cls(np.asarray([float(w) for w in weights]), 1.0)
        fracs = [_as_fraction(w) for w in weights]
        den = 1
        for f in fracs:
            den = den * f.denominator // math.gcd(den, f.denominator)
        units = [int(f * den) for f in fracs]
        return cls(units, Fraction(1, den))

    # -- basics ------------------------------------------------------------

    def __len__(self) -> int:
        return int(self.units.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Block):
            return NotImplemented
        if len(self) != len(other):
            return False
        if self.scale == other.scale:
            return bool((self.units == other.units).all())
        return self.weights() == other.weights()

    def __hash__(self):  # pragma: no cover - blocks are not meant for sets
        return hash((len(self), self.scale, self.units.tobytes()))

    def __repr__(self) -> str:
        if len(self) <= 8:
            return f"Block({self.weights()})"
        return f"Block(h={len(self)}, E={self.stats().mean})"

    def weight(self, j: int) -> Scalar:
        """Weight at 1-based position j."""
        if not 1 <= j <= len(self):
            raise IndexError(f"position {j} out of range 1..{len(self)}")
        return self.scale * int(self.units[j - 1]) if not self.is_float \
            else self.scale * float(self.units[j - 1])

    def weights(self) -> list:
        if self.is_float:
            return [self.scale * float(u) for u in self.units]
        return [self.scale * int(u) for u in self.units]

    @property
    def is_float(self) -> bool:
        return isinstance(self.scale, float)

    @property
    def changed_mask(self) -> np.ndarray:
        """Boolean mask of positions carrying a perturbed weight."""
        if self._changed is None:
            return np.zeros(len(self), dtype=bool)
        return self._changed

    def changed_count(self) -> int:
        return 0 if self._changed is None else int(self._changed.sum())

    # -- statistics --------------------------------------------------------

    def total_units(self) -> int:
        return int(self.prefix[-1]) if not self.is_float else float(self.prefix[-1])

    def stats(self) -> BlockStats:
        h = len(self)
        tot_u = self.total_units()
        max_u = self.units.max()
        if self.is_float:
            total = self.scale * float(tot_u)
            return BlockStats(h, self.scale * float(max_u), total, total / h)
        total = self.scale * tot_u
        return BlockStats(h, self.scale * int(max_u), total, total / h)


def concat(w: Block, v: Block) -> Block:
    """Concatenation w ⊙ v (stacking the second column on the first)."""
    scale, mw, mv = _common_scale(w, v)
    units = np.concatenate([w.units * mw, v.units * mv])
    changed = None
    if w._changed is not None or v._changed is not None:
        changed = np.concatenate([w.changed_mask, v.changed_mask])
    return Block(units, scale, changed)


def concat_many(blocks: Sequence[Block]) -> Block:
    if not blocks:
        raise BlockError("cannot concatenate an empty sequence of blocks")
    out = blocks[0]
    for b in blocks[1:]:
        out = concat(out, b)
    return out


def self_concat(w: Block, m: int) -> Block:
    """m-fold self concatenation w^{⊙m}."""
    if m < 1:
        raise BlockError(f"self-concatenation count must be >= 1, got {m}")
    if m == 1:
        return w
    units = np.tile(w.units, m)
    changed = np.tile(w.changed_mask, m) if w._changed is not None else None
    return Block(units, w.scale, changed)


def cyclic_partial_sum(w: Block, k: int, nu: int) -> Scalar:
    """S_k(w)(nu): sum of k consecutive weights starting at position nu,
    indices taken cyclically (mod h)."""
    h = len(w)
    if not 1 <= nu <= h:
        raise IndexError(f"position {nu} out of range 1..{h}")
    if k < 0:
        raise BlockError("k must be nonnegative")
    t = nu - 1 + k
    tot = w.prefix[-1]
    wraps, r = divmod(t, h)
    if w.is_float:
        units = float(wraps) * float(tot) + float(w.prefix[r]) - float(w.prefix[nu - 1])
        return w.scale * units
    units = wraps * int(tot) + int(w.prefix[r]) - int(w.prefix[nu - 1])
    return w.scale * units


def cyclic_partial_sums_units(w: Block, k: int) -> np.ndarray:
    """Vector of S_k(w)(nu)/scale over nu = 1..h (unit counts)."""
    h = len(w)
    pre = w.prefix
    tot = pre[-1]
    wraps, r = divmod(k, h)
    if r == 0:
        return np.full(h, wraps * tot, dtype=pre.dtype)
    # S_k(nu) = wraps*tot + pre[(nu-1+r) mod h applied through the split]
    head = pre[r:h + 1] - pre[0:h + 1 - r]          # nu-1 in [0, h-r]
    tail = tot - pre[h - r + 1:h] + pre[1:r]        # nu-1 in [h-r+1, h-1]
    return wraps * tot + np.concatenate([head, tail])


def stats(w: Block) -> BlockStats:
    return w.stats()


def _deviation_units(w: Block) -> np.ndarray:
    """D(t) = h*prefix[t] - t*Sigma for t = 0..h.

    S_k(w)(nu) deviates from kE(w) by (D((nu-1+k) mod h) - D(nu-1)) / h, for
    every k >= 0, because whole cycles contribute exactly their mean.
    """
    h = len(w)
    pre = w.prefix
    tot = pre[-1]
    if not w.is_float and h * int(tot) >= _INT64_SAFE:
        t = np.arange(h + 1, dtype=object)
        return h * pre.astype(object) - t * int(tot)
    t = np.arange(h + 1, dtype=pre.dtype)
    return h * pre - t * tot


def _max_shift_absdiff(dev: np.ndarray, k: int, h: int):
    """max over s in 0..h-1 of |dev[(s+k) mod h] - dev[s]| and an argmax s."""
    d = dev[:h]
    shifted = np.roll(d, -(k % h))
    diff = np.abs(shifted - d)
    s = int(np.argmax(diff))
    return diff[s], s


def _shift_scan(dev: np.ndarray, h: int, k0: int, kk: int, violates):
    """Exact scan of the shifted-deviation test over every k in [k0, kk].

    ``violates(k, m)`` decides whether amplitude m breaks the allowance at k.
    Whole ranges of k are first tested against their sliding-window extremes
    at the smallest allowance of the range; only ranges that fail the coarse
    test are bisected, down to single shifts where the test is sharp.  Returns
    None when every k passes, else a witness (k, s) with s a 0-based position.
    """
    from scipy.ndimage import maximum_filter1d, minimum_filter1d
    d = dev[:h]
    d2 = np.concatenate([d, d])
    stack = [(k0, kk)]
    while stack:
        k1, k2 = stack.pop()
        if k1 % h == 0:
            # shift 0 never deviates
            if k1 == k2:
                continue
            k1 += 1
        wrap = (k1 // h) * h + h - 1
        if k2 > wrap:
            stack.append((wrap + 1, k2))
            k2 = wrap
        r1 = k1 % h
        width = k2 - k1 + 1
        lo = r1 + width // 2
        mf = maximum_filter1d(d2, width)[lo:lo + h]
        mn = minimum_filter1d(d2, width)[lo:lo + h]
        amp = max((mf - d).max(), (d - mn).max())
        if not violates(k1, amp):
            continue
        if k1 == k2:
            diff = np.abs(d2[r1:r1 + h] - d)
            return k1, int(np.argmax(diff))
        mid = (k1 + k2) // 2
        stack.append((mid + 1, k2))
        stack.append((k1, mid))
    return None


def is_normalized(w: Block, eps: Scalar, witness: bool = False):
    """Decide whether S_k(w) = kE(w)(1 ± eps) for every k >= eps*Sigma(w)/M(w).

    The quantifier over all k is decided exactly: the deviation of S_k from
    kE(w) depends only on k mod h (via the h-periodic deviation profile D),
    while the allowance eps*kE(w) grows with k, so it is enough to check the
    smallest admissible k in each residue class, and no class needs checking
    once the allowance exceeds twice the amplitude of D.

    Returns bool, or (bool, witness) with witness = (k, nu) on failure when
    ``witness`` is true.
    """
    h = len(w)
    tot = w.total_units()
    max_u = int(w.units.max()) if not w.is_float else float(w.units.max())
    dev = _deviation_units(w)

    if w.is_float:
        e = float(eps)
        if e <= 0:
            raise BlockError("eps must be positive")
        k0 = max(1, math.ceil(e * tot / max_u - _FLOAT_RTOL))
        dstar = float(np.abs(dev[:h]).max())
        # allowance at k, in the same units as dev: eps * k * Sigma
        if 2.0 * dstar <= e * k0 * tot * (1 + _FLOAT_RTOL):
            return (True, None) if witness else True
        kstop = math.ceil(2.0 * dstar / (e * tot))
        hit = _shift_scan(dev, h, k0, min(k0 + h - 1, kstop),
                          lambda k, m: float(m) > e * k * tot * (1 + _FLOAT_RTOL))
        if hit is not None:
            return (False, (hit[0], hit[1] + 1)) if witness else False
        return (True, None) if witness else True

    e = _as_fraction(eps)
    if e <= 0:
        raise BlockError("eps must be positive")
    a, b = e.numerator, e.denominator
    # k0 = ceil(eps * Sigma / M) with Sigma, M in units (scale cancels)
    k0 = max(1, -((-a * tot) // (b * max_u)))
    dstar = int(np.abs(dev[:h]).max()) if dev.dtype != object \
        else max(abs(int(x)) for x in dev[:h])
    if 2 * b * dstar <= a * k0 * tot:
        return (True, None) if witness else True
    kstop = -((-2 * b * dstar) // (a * tot))
    kk = min(k0 + h - 1, kstop)
    if dev.dtype == object:
        for k in range(k0, kk + 1):
            m, s = _max_shift_absdiff(dev, k, h)
            if b * int(m) > a * k * tot:
                return (False, (k, s + 1)) if witness else False
        return (True, None) if witness else True
    hit = _shift_scan(dev, h, k0, kk,
                      lambda k, m: b * int(m) > a * k * tot)
    if hit is not None:
        return (False, (hit[0], hit[1] + 1)) if witness else False
    return (True, None) if witness else True
