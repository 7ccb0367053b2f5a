"""Unit tests for the integer return-time tower and its occupation laws."""

import random
from fractions import Fraction as F

import numpy as np
import pytest

from towerkit.distributions import FiniteDist
from towerkit.lemma_engine import InvariantError
from towerkit.skyscraper import (IntegerTower, SkyscraperError,
                                 are_diagnostic, check_duality,
                                 check_inversion, integerize, inverse_target,
                                 occupation_counts, occupation_distribution,
                                 occupation_mean_via_levels,
                                 return_time_partial_sums)
from towerkit.tower import build_rational_tower


def toy_tower(weights_by_symbol, target=None):
    """Hand-built integer tower for oracle tests (no trace attached)."""
    symbols = tuple(weights_by_symbol)
    weights = {s: np.asarray(w, dtype=np.int64)
               for s, w in weights_by_symbol.items()}
    y = target or FiniteDist.point(1)
    return IntegerTower(None, symbols, weights, F(1), y, F(1, 1000))


@pytest.fixture(scope="module")
def base_trace():
    # return times distributed like 1/Y for Y uniform on {1, 2}
    z = FiniteDist.uniform([F(1, 2), F(1)])
    return build_rational_tower(z, [F(1, 20)], [F(1, 40)], rounds=2)


@pytest.fixture(scope="module")
def int_tower(base_trace):
    return integerize(base_trace)


class TestInverseTarget:
    def test_two_point(self):
        z = FiniteDist.uniform([F(1, 2), F(1)])
        assert inverse_target(z) == FiniteDist.uniform([1, 2])

    def test_masses_preserved(self):
        z = FiniteDist([(F(1, 3), F(1, 4)), (F(2), F(3, 4))])
        inv = inverse_target(z)
        assert inv.cdf(F(1, 2)) == F(3, 4)
        assert inv.cdf(F(3)) == F(1)


class TestIntegerize:
    def test_weights_positive_integers(self, int_tower):
        for s in int_tower.symbols:
            w = int_tower.weights[s]
            assert w.dtype == np.int64
            assert int(w.min()) >= 1

    def test_exact_mode_zero_perturbation(self, base_trace, int_tower):
        assert all(p == 0 for p in int_tower.perturbations.values())
        # weights times the tick reproduce the original block weights
        arr = base_trace.final
        for s in int_tower.symbols:
            w = arr.blocks[s]
            exact = [int(u) * F(w.scale) / int_tower.time_unit
                     for u in w.units]
            assert exact == list(int_tower.weights[s])

    def test_means_match_target(self, base_trace, int_tower):
        arr = base_trace.final
        for s in int_tower.symbols:
            mean = F(int(int_tower.weights[s].sum()), int_tower.height)
            assert mean * int_tower.time_unit == \
                F(arr.scale) * arr.values[s]

    def test_rejects_bad_eta(self, base_trace):
        with pytest.raises(SkyscraperError):
            integerize(base_trace, F(0))


class TestReturnTimes:
    def test_against_orbit_oracle(self):
        rng = random.Random(71)
        it = toy_tower({"a": [rng.randint(1, 9) for _ in range(7)]})
        w = list(it.weights["a"])
        h = len(w)
        for pos in range(1, h + 1):
            acc = 0
            for j in range(1, 30):
                acc += w[(pos - 1 + j - 1) % h]
                assert return_time_partial_sums(it, j, ("a", pos)) == acc

    def test_position_only_addressing(self):
        it = toy_tower({"a": [2, 3, 4]})
        assert return_time_partial_sums(it, 2, 1) == \
            return_time_partial_sums(it, 2, ("a", 1))


class TestOccupation:
    def oracle_counts(self, weights, n):
        h = len(weights)
        out = []
        for pos in range(h):
            acc, j = 0, 0
            while True:
                acc += weights[(pos + j) % h]
                if acc > n:
                    break
                j += 1
            out.append(j)
        return out

    def test_counts_against_oracle(self):
        rng = random.Random(83)
        for _ in range(20):
            w = [rng.randint(1, 12) for _ in range(rng.randint(1, 9))]
            it = toy_tower({"a": w})
            for n in (1, 5, 17, 103):
                got = occupation_counts(it, n)["a"]
                assert list(got) == self.oracle_counts(w, n)

    def test_mean_via_levels_agrees(self):
        it = toy_tower({"a": [2, 5, 3], "b": [4, 1, 6]})
        for n in (7, 20, 55):
            counts = occupation_counts(it, n)
            direct = F(sum(int(counts[s].sum()) for s in it.symbols),
                       it.height * it.size)
            assert occupation_mean_via_levels(it, n) == direct

    def test_distribution_total_mass(self, int_tower):
        n = 6 * max(int(int_tower.weights[s].max())
                    for s in int_tower.symbols)
        rep = occupation_distribution(int_tower, n)
        assert sum(rep.dist.masses) == 1
        assert rep.dist.mean() == occupation_mean_via_levels(int_tower, n)

    def test_early_time_rejected(self):
        it = toy_tower({"a": [5, 9, 7]})
        with pytest.raises(SkyscraperError):
            occupation_distribution(it, 3)


class TestDuality:
    def test_exhaustive_small_towers(self):
        rng = random.Random(97)
        for _ in range(8):
            h = rng.randint(1, 12)
            weights = {"a": [rng.randint(1, 9) for _ in range(h)],
                       "b": [rng.randint(1, 9) for _ in range(h)]}
            assert check_duality(toy_tower(weights))

    def test_corrupted_counts_detected(self):
        it = toy_tower({"a": [3, 4, 5]})
        # break the roof structure behind the prefix cache: a non-monotone
        # prefix desynchronizes the vectorized count from the orbit sums
        it._prefixes["a"] = np.array([0, 7, 3, 12])
        with pytest.raises(InvariantError):
            check_duality(it)

    def test_height_limit(self):
        it = toy_tower({"a": [1] * 600})
        with pytest.raises(SkyscraperError):
            check_duality(it)


class TestInversionTable:
    def test_a_of_monotone(self, int_tower):
        ns = [10, 100, 1000, 10 ** 4, 10 ** 5]
        vals = [int_tower.a_of(n) for n in ns]
        assert vals == sorted(vals)

    def test_a_of_inverts_b_at_anchors(self, int_tower):
        ks, bs = int_tower._inversion_table()
        for k, b in zip(ks, bs):
            if b > 0:
                assert int_tower.a_of(b) == k

    def test_covered_horizon(self, int_tower):
        h = int_tower.covered_horizon()
        assert int_tower.a_of(h) <= int_tower.trace.height + 1


class TestInversion:
    def test_two_point_inversion(self, int_tower):
        horizon = int_tower.covered_horizon()
        wmax = max(int(int_tower.weights[s].max())
                   for s in int_tower.symbols)
        n_grid = sorted({int(horizon * 1.3 ** -j) for j in range(10)
                         if int(horizon * 1.3 ** -j) >= 4 * wmax})
        rep = check_inversion(int_tower, n_grid)
        assert rep.ok()
        assert rep.top_ok and rep.tail_ok
        top = [n for n in rep.n_grid if n * 10 >= rep.n_grid[-1]]
        for n in top:
            assert rep.occ_distances[n] <= 0.15

    def test_alpha_moment_ratio(self, int_tower):
        horizon = int_tower.covered_horizon()
        wmax = max(int(int_tower.weights[s].max())
                   for s in int_tower.symbols)
        n_grid = sorted({int(horizon * 1.3 ** -j) for j in range(8)
                         if int(horizon * 1.3 ** -j) >= 4 * wmax})
        rows = are_diagnostic(int_tower, [1.0, 2.0], n_grid, [2.0])
        by_alpha = {r.alpha: r for r in rows}
        assert by_alpha[1.0].mode == "integrable"
        # E[Y^2]^(1/2) / E[Y] for Y uniform on {1,2}
        expected = (2.5 ** 0.5) / 1.5
        top = [n for n in n_grid if n * 10 >= n_grid[-1]]
        for n in top:
            assert by_alpha[2.0].ratio_to_a1[n] == \
                pytest.approx(expected, abs=0.01)

    def test_divergent_mode_flag(self, int_tower):
        n_grid = [int_tower.covered_horizon()]
        rows = are_diagnostic(int_tower, [1.5], n_grid, [2.0],
                              divergent_alphas=[1.5])
        assert rows[0].mode == "divergent"
        assert rows[0].bound_ok is None

    def test_sup_norm_mode(self, int_tower):
        n_grid = [int_tower.covered_horizon()]
        rows = are_diagnostic(int_tower, [float("inf")], n_grid, [2.0])
        assert rows[0].mode == "sup-norm"
