"""Synthetic world: model equations, intervals, geometry, container format."""
from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import spearmanr

from canopyreg.synth import (
    ALONG_TRACK_SPACING_PX,
    LinearModel,
    PFT_CLASSES,
    PointLabel,
    RH_QUANTILES,
    TRACKS_PER_PASS,
    allometric_agb,
    confidence_interval,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_default_strata,
    median_composite,
    predict_agbd,
    save_dataset,
    standard_error,
    t_quantile,
    track_position,
    transform_agbd,
)


def t_quantile_oracle(p, dof):
    """Independent oracle: integrate the t density and bisect the CDF."""
    from math import gamma, pi, sqrt

    norm = gamma((dof + 1) / 2.0) / (sqrt(dof * pi) * gamma(dof / 2.0))
    pdf = lambda x: norm * (1.0 + x * x / dof) ** (-(dof + 1) / 2.0)

    def cdf(t):
        if t >= 0:
            return 0.5 + quad(pdf, 0.0, t)[0]
        return 0.5 - quad(pdf, t, 0.0)[0]

    lo, hi = -500.0, 500.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestLinearModel:
    def test_identity_example(self):
        m = LinearModel("DBT", np.array([1.0]), "identity")
        assert predict_agbd(np.array([100.0]), m) == pytest.approx(100.0)

    def test_sqrt_inverse(self):
        m = LinearModel("DBT", np.array([1.0]), "sqrt")
        assert predict_agbd(np.array([10.0]), m) == pytest.approx(100.0)

    def test_log_inverse(self):
        m = LinearModel("DBT", np.array([1.0]), "log")
        assert predict_agbd(np.array([np.log(50.0)]), m) == pytest.approx(50.0)

    def test_round_trip_all_transforms(self, rng):
        for transform in ("identity", "sqrt", "log"):
            m = LinearModel("EBT", np.array([0.7, 1.3]), transform, bias=0.2)
            for _ in range(25):
                x = rng.uniform(0.1, 4.0, size=2)
                z = float(x @ m.coeffs + m.bias)  # positive by construction
                agbd = predict_agbd(x, m)
                assert transform_agbd(agbd, m) == pytest.approx(z, rel=1e-9)

    def test_identity_negative_preimage_clamped(self):
        m = LinearModel("DBT", np.array([1.0]), "identity", bias=-5.0)
        assert predict_agbd(np.array([1.0]), m) == 0.0

    def test_log_transform_rejects_non_positive(self):
        m = LinearModel("DBT", np.array([1.0]), "log")
        with pytest.raises(ValueError, match="log"):
            transform_agbd(0.0, m)

    def test_asymmetric_cov_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            LinearModel("DBT", np.array([1.0, 1.0]), "log", cov=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_indefinite_cov_rejected(self):
        with pytest.raises(ValueError, match="semi-definite"):
            LinearModel("DBT", np.array([1.0, 1.0]), "log", cov=np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestStandardError:
    def test_zero_cov(self):
        m = LinearModel("DBT", np.array([1.0, 2.0]), "log", mse=9.0)
        assert standard_error(np.array([5.0, 7.0]), m) == pytest.approx(3.0)

    def test_quadratic_form(self):
        m = LinearModel("DBT", np.array([0.0, 0.0]), "log", mse=0.0, cov=np.eye(2))
        assert standard_error(np.array([3.0, 4.0]), m) == pytest.approx(5.0)

    def test_monotone_in_mse(self):
        x = np.array([1.0, 2.0])
        ses = [
            standard_error(x, LinearModel("DBT", np.array([0.0, 0.0]), "log", mse=mse, cov=np.eye(2)))
            for mse in (0.0, 1.0, 10.0, 100.0)
        ]
        assert all(a < b for a, b in zip(ses, ses[1:]))


class TestConfidenceInterval:
    def test_zero_se_degenerate(self):
        lo, hi = confidence_interval(42.0, 0.0, 0.05, 30)
        assert lo == hi == pytest.approx(42.0)

    def test_large_n_half_width_near_1p96(self):
        lo, hi = confidence_interval(0.0, 1.0, 0.05, 100000)
        assert (hi - lo) / 2.0 == pytest.approx(1.959964, abs=0.01)

    def test_symmetric_about_center(self):
        lo, hi = confidence_interval(10.0, 2.5, 0.1, 25)
        assert (lo + hi) / 2.0 == pytest.approx(10.0)

    def test_invalid_dof_rejected(self):
        with pytest.raises(ValueError, match="n must exceed 2"):
            confidence_interval(1.0, 1.0, 0.05, 2)

    @pytest.mark.parametrize("p,dof", [(0.975, 5), (0.975, 28), (0.9, 3), (0.995, 48), (0.6, 12)])
    def test_t_quantile_matches_integration_oracle(self, p, dof):
        assert t_quantile(p, dof) == pytest.approx(t_quantile_oracle(p, dof), abs=1e-6)

    def test_t_quantile_symmetry(self):
        assert t_quantile(0.25, 9) == pytest.approx(-t_quantile(0.75, 9), abs=1e-9)
        assert t_quantile(0.5, 9) == 0.0


class TestAllometric:
    def test_identity_in_log_space(self):
        assert allometric_agb(73.0, 0.0, 1.0) == pytest.approx(73.0)

    def test_direct_evaluation(self):
        assert allometric_agb(50.0, np.log(2.0), 1.0) == pytest.approx(100.0)

    def test_power_law_doubling(self):
        for b in (0.8, 1.0, 1.4):
            r = allometric_agb(200.0, -1.0, b) / allometric_agb(100.0, -1.0, b)
            assert r == pytest.approx(2.0 ** b, rel=1e-12)

    def test_non_positive_lcm_rejected(self):
        with pytest.raises(ValueError, match="lcm"):
            allometric_agb(0.0, 1.0, 1.0)


class TestSceneGeneration:
    def test_footprints_follow_track_geometry_exactly(self):
        tile = generate_scene(123)
        meta = tile.latent["track_meta"]
        params = tile.latent["pass_params"]
        h, w = tile.channels.shape[1:]
        for p, k, j, r, c in meta:
            theta, offset, phase = params[p]
            pr, pc = track_position(h, w, theta, offset, phase, int(k), int(j))
            assert int(np.rint(pr)) == r and int(np.rint(pc)) == c
        assert np.all(meta[:, 1] >= 0) and np.all(meta[:, 1] < TRACKS_PER_PASS)

    def test_along_track_spacing(self):
        tile = generate_scene(321)
        meta = tile.latent["track_meta"]
        for key in {(p, k) for p, k, *_ in meta}:
            rows = meta[(meta[:, 0] == key[0]) & (meta[:, 1] == key[1])]
            rows = rows[np.argsort(rows[:, 2])]
            for a, b in zip(rows[:-1], rows[1:]):
                dist = np.hypot(float(b[3] - a[3]), float(b[4] - a[4]))
                want = (b[2] - a[2]) * ALONG_TRACK_SPACING_PX
                assert abs(dist - want) <= 1.5  # two half-pixel roundings

    def test_each_footprint_labels_one_pixel(self):
        tile = generate_scene(55)
        coords = [(p.row, p.col) for p in tile.points]
        assert len(coords) == len(set(coords))
        for p in tile.points:
            assert 0 <= p.row < 64 and 0 <= p.col < 64

    def test_rh_non_decreasing_and_quality_count(self):
        tile = generate_scene(9)
        assert len(tile.quality_points()) >= 20
        for p in tile.points:
            assert np.all(np.diff(p.rh) >= 0)
            assert p.pft in PFT_CLASSES

    def test_bit_deterministic_under_seed(self):
        a = generate_scene(777)
        b = generate_scene(777)
        assert np.array_equal(a.channels, b.channels)
        assert a.geo == b.geo
        assert len(a.points) == len(b.points)
        for pa, pb in zip(a.points, b.points):
            assert (pa.row, pa.col, pa.agbd, pa.cc, pa.se, pa.pft, pa.quality) == (
                pb.row, pb.col, pb.agbd, pb.cc, pb.se, pb.pft, pb.quality)
            assert np.array_equal(pa.rh, pb.rh)

    def test_channel_layout_ranges(self):
        tile = generate_scene(31)
        ch = tile.channels
        assert ch.shape[0] == 13
        assert ch[:11].min() >= 0.0 and ch[:11].max() <= 1.0
        assert ch[11:].min() >= -1.0 and ch[11:].max() <= 1.0
        # lon/lat channels are near-constant ramps of the tile geo
        lon, lat = tile.geo
        assert abs(ch[11].mean() - lon / 180.0) < 1e-3
        assert abs(ch[12].mean() - lat / 90.0) < 1e-3

    def test_radar_saturates_with_height(self):
        tile = generate_scene(64, 128, 128)
        chh = tile.latent["ch"].astype(np.float64).ravel()
        vv = tile.channels[6].astype(np.float64).ravel()
        low = vv[chh < 200].mean()
        mid = vv[(chh > 600) & (chh < 900)].mean()
        tall = vv[chh > 2000]
        taller = vv[chh > 2800]
        assert low < mid < tall.mean()
        # saturation: the response flattens at the top of the height range
        assert taller.mean() - tall.mean() < mid - low

    def test_se_tracks_latent_biomass(self):
        tiles = generate_dataset(11, 400)
        lat, se = [], []
        for t in tiles:
            for p in t.quality_points():
                lat.append(float(t.latent["agbd"][p.row, p.col]))
                se.append(p.se)
        assert len(lat) >= 10000
        rho = spearmanr(np.array(se), np.array(lat)).statistic
        assert rho > 0.8

    def test_undersized_tile_rejected(self):
        with pytest.raises(ValueError, match=">= 64"):
            generate_scene(1, 32, 32)


class TestMedianComposite:
    def test_single_scene_identity(self, rng):
        scene = rng.uniform(size=(3, 4, 4)).astype(np.float32)
        comp, gap = median_composite([scene], [np.zeros((4, 4))])
        assert np.allclose(comp, scene)
        assert not gap.any()

    def test_odd_count_median(self):
        scenes = [np.full((1, 1), v) for v in (1.0, 2.0, 9.0)]
        comp, gap = median_composite(scenes, [np.zeros((1, 1))] * 3)
        assert comp[0, 0] == 2.0

    def test_masked_observations_excluded(self):
        scenes = [np.full((2, 2), v) for v in (1.0, 5.0, 9.0)]
        masks = [np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2))]
        comp, gap = median_composite(scenes, masks)
        assert np.allclose(comp, 3.0)  # median of {1, 5}
        assert not gap.any()

    def test_fully_masked_pixel_gap_flagged(self):
        scenes = [np.ones((2, 2)), np.full((2, 2), 3.0)]
        masks = [np.array([[1, 0], [0, 0]]), np.array([[1, 0], [0, 0]])]
        comp, gap = median_composite(scenes, masks)
        assert gap[0, 0] and not gap[0, 1]
        assert comp[0, 0] == 0.0
        assert comp[1, 1] == 2.0

    def test_channel_scenes_with_2d_masks(self, rng):
        scenes = [rng.uniform(size=(3, 2, 2)) for _ in range(3)]
        masks = [np.zeros((2, 2)) for _ in range(3)]
        comp, gap = median_composite(scenes, masks)
        assert comp.shape == (3, 2, 2)
        assert gap.shape == (2, 2)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mask shape"):
            median_composite([np.ones((2, 2))], [np.zeros((3, 3))])


class TestDatasetContainer:
    def test_bit_exact_round_trip(self, tmp_path):
        tiles = generate_dataset(5, 3)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_dataset(tiles, p1)
        loaded = load_dataset(p1)
        save_dataset(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(tiles, loaded):
            assert np.array_equal(a.channels, b.channels)
            assert a.geo == pytest.approx(b.geo)
            assert len(a.points) == len(b.points)
            for pa, pb in zip(a.points, b.points):
                assert pa.row == pb.row and pa.col == pb.col
                assert pa.agbd == pytest.approx(np.float32(pb.agbd))
                assert np.array_equal(pa.rh, pb.rh)
            for k in a.latent:
                assert np.allclose(np.asarray(a.latent[k], dtype=np.float64),
                                   np.asarray(b.latent[k], dtype=np.float64), atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTADATASET")
        with pytest.raises(ValueError, match="magic"):
            load_dataset(p)

    def test_point_validation(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            PointLabel(0, 0, 1.0, np.array([5, 4, 3, 2, 1, 1, 1], dtype=np.float32), 50.0, 1.0, "DBT")
        with pytest.raises(ValueError, match="pft"):
            PointLabel(0, 0, 1.0, np.arange(7, dtype=np.float32), 50.0, 1.0, "XYZ")
