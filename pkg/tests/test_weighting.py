"""Density tables, inverse-density weights, balancing, uniform sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from canopyreg.evaluation import BinSpec
from canopyreg.weighting import (
    FLOOR_REFERENCES,
    PdfTable,
    WeightTable,
    balanced_subset,
    fit_kde,
    inverse_pdf_weights,
    silverman_bandwidth,
    uniform_test_sample,
)


@dataclass
class FakePoint:
    agbd: float
    ch: float = 0.0
    cc: float = 0.0


@dataclass
class FakeTile:
    values: list

    def quality_points(self):
        return [FakePoint(v) for v in self.values]


def chi2_uniformity(stats, spec):
    """Pearson chi-squared against a uniform histogram over occupied range."""
    idx = np.clip(np.floor((np.asarray(stats) - spec.low) / spec.size), 0, spec.n_bins - 1).astype(int)
    counts = np.bincount(idx, minlength=spec.n_bins).astype(float)
    lo, hi = np.flatnonzero(counts)[[0, -1]]
    counts = counts[lo:hi + 1]
    expected = counts.sum() / len(counts)
    return float(((counts - expected) ** 2 / expected).sum())


class TestFitKde:
    def test_uniform_values_flat_interior(self, rng):
        spec = BinSpec(0.0, 100.0, 2.0)
        table = fit_kde(rng.uniform(0, 100, size=40000), bin_spec=spec)
        interior = table.pdf[10:-10]
        assert np.ptp(interior) / interior.mean() < 0.05

    def test_point_mass_peaks_at_value(self):
        spec = BinSpec(0.0, 100.0, 2.0)
        vals = np.full(500, 37.0)
        vals[0] = 37.0001  # keep two distinct values
        table = fit_kde(vals, bandwidth=1.0, bin_spec=spec)
        assert table.bin_index(37.0) == int(np.argmax(table.pdf))

    def test_normalization(self, rng):
        spec = BinSpec(0.0, 100.0, 2.0)
        table = fit_kde(rng.gamma(2.0, 12.0, size=3000), bin_spec=spec)
        assert table.pdf.sum() * spec.size == pytest.approx(1.0, abs=1e-3)

    def test_degenerate_input_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            fit_kde([5.0, 5.0, 5.0], bin_spec=BinSpec(0, 10, 1))
        with pytest.raises(ValueError, match="distinct"):
            fit_kde([5.0], bin_spec=BinSpec(0, 10, 1))

    def test_silverman_scale(self, rng):
        vals = rng.normal(0.0, 2.0, size=1000)
        bw = silverman_bandwidth(vals)
        assert 0.9 * 2.0 * 1000 ** -0.2 * 0.7 < bw < 0.9 * 2.0 * 1000 ** -0.2 * 1.3


class TestInverseWeights:
    def test_constant_pdf_gives_unit_weights(self):
        spec = BinSpec(0.0, 100.0, 5.0)
        table = PdfTable(spec, np.full(spec.n_bins, 1.0 / 100.0))
        wt = inverse_pdf_weights(table, floor_reference=100.0)
        assert np.allclose(wt.weights, 1.0)

    def test_halved_density_doubles_weight(self):
        spec = BinSpec(0.0, 10.0, 1.0)
        pdf = np.full(10, 0.1)
        pdf[3] = 0.05
        pdf[9] = 0.04  # floor bin stays the rarest so the cap is inactive
        pdf /= pdf.sum() * spec.size
        wt = inverse_pdf_weights(PdfTable(spec, pdf), floor_reference=10.0)
        assert wt.weights[3] / wt.weights[0] == pytest.approx(2.0, rel=1e-9)

    def test_floor_caps_rare_tail(self, rng):
        spec = BinSpec(0.0, 500.0, 5.0)
        vals = np.concatenate([rng.gamma(2.0, 40.0, size=20000), [450.0, 460.0]])
        table = fit_kde(vals, bin_spec=spec)
        wt = inverse_pdf_weights(table, floor_reference=300.0)
        floor_w = wt.lookup(300.0)
        for v in (310.0, 400.0, 480.0, 1e6):
            assert wt.lookup(v) == pytest.approx(floor_w)
            assert wt.lookup(v) <= floor_w + 1e-12

    def test_mean_weight_one_over_fitted_distribution(self, rng):
        spec = BinSpec(0.0, 500.0, 5.0)
        vals = rng.gamma(2.0, 40.0, size=30000)
        table = fit_kde(vals, bin_spec=spec)
        wt = inverse_pdf_weights(table, floor_reference=300.0)
        assert float((table.pdf * wt.weights).sum() * spec.size) == pytest.approx(1.0, rel=1e-9)
        # empirical check on fresh draws from the same law
        fresh = np.clip(rng.gamma(2.0, 40.0, size=30000), 0, 499.9)
        assert wt.lookup(fresh).mean() == pytest.approx(1.0, abs=0.05)

    def test_lookup_matches_table_bins_exactly(self, rng):
        spec = BinSpec(0.0, 50.0, 5.0)
        table = fit_kde(rng.uniform(0, 50, 500), bin_spec=spec)
        wt = inverse_pdf_weights(table, floor_reference=50.0)
        for v in (0.0, 4.999, 5.0, 27.3, 49.999):
            b = int(np.floor(v / 5.0))
            assert wt.lookup(v) == wt.weights[b]

    def test_weighted_histogram_uniform(self, rng):
        spec = BinSpec(0.0, 300.0, 30.0)
        vals = rng.exponential(100.0, size=200000)
        vals = vals[vals < 300.0][:120000]  # truncate, do not clip-pile the tail
        table = fit_kde(vals, bin_spec=spec)
        wt = inverse_pdf_weights(table, floor_reference=300.0)
        hist, _ = np.histogram(vals, bins=spec.edges(), weights=wt.lookup(vals))
        hist /= hist.mean()
        assert np.all(np.abs(hist - 1.0) < 0.10)

    def test_json_round_trip(self, rng):
        spec = BinSpec(0.0, 100.0, 10.0)
        table = fit_kde(rng.uniform(0, 100, 200), bin_spec=spec)
        wt = inverse_pdf_weights(table, floor_reference=80.0, variable="cc")
        back = WeightTable.from_json(wt.to_json())
        assert back.variable == "cc"
        assert back.floor_reference == 80.0
        assert np.array_equal(back.edges, wt.edges)
        assert np.array_equal(back.weights, wt.weights)

    def test_non_positive_weights_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            WeightTable("agbd", np.array([0.0, 1.0]), np.array([0.0]), 300.0)

    def test_floor_references_documented(self):
        assert FLOOR_REFERENCES["agbd"] == 300.0
        assert FLOOR_REFERENCES["ch"] == 3000.0


class TestBalancedSubset:
    def test_already_uniform_keeps_everything(self, rng):
        # 50 tiles per bin, statistics pinned near the four bin centers
        locs = [c for c in (12.5, 37.5, 62.5, 87.5) for _ in range(50)]
        tiles = [FakeTile(list(rng.normal(loc, 0.5, size=25))) for loc in locs]
        spec = BinSpec(0.0, 100.0, 25.0)
        out = balanced_subset(tiles, spec)
        assert len(out) == len(tiles)

    def test_identical_statistics_degenerate(self):
        tiles = [FakeTile([42.0] * 25) for _ in range(10)]
        out = balanced_subset(tiles, BinSpec(0.0, 100.0, 10.0))
        assert out == tiles

    def test_two_cluster_input_improves_uniformity(self, rng):
        lows = [FakeTile(list(rng.normal(20, 1.0, size=25))) for _ in range(300)]
        highs = [FakeTile(list(rng.normal(80, 1.0, size=25))) for _ in range(30)]
        tiles = lows + highs
        spec = BinSpec(0.0, 100.0, 25.0)
        with pytest.warns(UserWarning):  # the gap between clusters is empty
            out = balanced_subset(tiles, spec, seed=3)
        stats_before = [np.percentile(t.values, 75) for t in tiles]
        stats_after = [np.percentile(t.values, 75) for t in out]
        assert chi2_uniformity(stats_after, spec) < chi2_uniformity(stats_before, spec)
        assert len(out) < len(tiles)

    def test_empty_interior_bin_warns(self, rng):
        lows = [FakeTile(list(rng.normal(10, 1.0, size=25))) for _ in range(40)]
        highs = [FakeTile(list(rng.normal(90, 1.0, size=25))) for _ in range(10)]
        with pytest.warns(UserWarning, match="best achievable"):
            balanced_subset(lows + highs, BinSpec(0.0, 100.0, 10.0), seed=1)

    def test_small_tiles_rejected(self):
        with pytest.raises(ValueError, match="at least 20"):
            balanced_subset([FakeTile([1.0] * 5)], BinSpec(0, 10, 1))

    def test_deterministic_under_seed(self, rng):
        tiles = [FakeTile(list(rng.normal(loc, 2.0, size=25)))
                 for loc in rng.uniform(10, 90, size=100)]
        spec = BinSpec(0.0, 100.0, 10.0)
        a = balanced_subset(tiles, spec, seed=7)
        b = balanced_subset(tiles, spec, seed=7)
        assert [id(t) for t in a] == [id(t) for t in b]


class TestUniformTestSample:
    @staticmethod
    def _table(rng, vals, spec, floor):
        return {"agbd": inverse_pdf_weights(fit_kde(vals, bin_spec=spec), floor_reference=floor)}

    def test_uniform_input_constant_acceptance(self, rng):
        spec = BinSpec(0.0, 100.0, 5.0)
        vals = rng.uniform(0, 100, size=50000)
        tables = self._table(rng, vals, spec, 100.0)
        pts = [FakePoint(v) for v in vals[:20000]]
        out = uniform_test_sample(pts, tables, seed=5)
        # constant weights: acceptance ratio is near 1 everywhere
        assert len(out) / len(pts) > 0.95

    def test_output_histogram_uniform_within_10pct(self, rng):
        spec = BinSpec(0.0, 300.0, 30.0)
        vals = rng.exponential(100.0, size=200000)
        vals = vals[vals < 300.0][:120000]
        tables = self._table(rng, vals, spec, 300.0)
        pts = [FakePoint(v) for v in vals]
        out = uniform_test_sample(pts, tables, seed=11)
        hist, _ = np.histogram([p.agbd for p in out], bins=spec.edges())
        hist = hist / hist.mean()
        assert np.all(np.abs(hist - 1.0) < 0.10)

    def test_values_beyond_floor_always_accepted(self, rng):
        spec = BinSpec(0.0, 500.0, 5.0)
        vals = np.concatenate([rng.gamma(2.0, 30.0, size=30000), rng.uniform(300, 480, size=50)])
        tables = self._table(rng, vals, spec, 300.0)
        rare = [FakePoint(v) for v in np.linspace(300, 490, 40)]
        out = uniform_test_sample(rare, tables, seed=2)
        assert len(out) == len(rare)

    def test_deterministic_and_validated(self, rng):
        spec = BinSpec(0.0, 100.0, 10.0)
        vals = rng.uniform(0, 100, 1000)
        tables = self._table(rng, vals, spec, 100.0)
        pts = [FakePoint(v) for v in vals[:100]]
        assert [p.agbd for p in uniform_test_sample(pts, tables, seed=9)] == \
               [p.agbd for p in uniform_test_sample(pts, tables, seed=9)]
        with pytest.raises(ValueError, match="no weight table"):
            uniform_test_sample(pts, tables, variable="ch")
