"""Synthetic world generator: linear per-stratum biomass models, footprint
track geometry, latent canopy fields, the 13-channel forward map, median
compositing, and a binary dataset container.

Everything here is the verifiable ground truth that the learning stack is
tested against. Scene synthesis is bit-deterministic under its seed; the
dataset container round-trips bit-exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import betainc

PFT_CLASSES = ("DBT", "EBT", "ENT", "GSW")
RH_QUANTILES = (40, 50, 60, 70, 80, 90, 98)

# channel layout of TileSample.channels
OPTICAL_BANDS = tuple(range(6))       # red, green, blue, nir, swir, thermal roles
RADAR_BANDS = (6, 7)                  # vv, vh roles
TERRAIN_BANDS = (8, 9, 10)            # altitude, aspect, slope
LONLAT_BANDS = (11, 12)
N_CHANNELS = 13

PIXEL_SIZE_M = 10.0
TRACKS_PER_PASS = 8
TRACK_SEPARATION_PX = 60.0
ALONG_TRACK_SPACING_PX = 6.0

_MAGIC = b"CRGDS001"

_POINT_DTYPE = np.dtype(
    [
        ("row", "<u2"),
        ("col", "<u2"),
        ("agbd", "<f4"),
        ("rh", "<f4", (len(RH_QUANTILES),)),
        ("cc", "<f4"),
        ("se", "<f4"),
        ("pft", "u1"),
        ("quality", "u1"),
    ]
)


@dataclass(frozen=True)
class LinearModel:
    """Per-stratum linear biomass model with a value transform.

    Maps a predictor row x to transform^-1(x @ coeffs + bias); mse and cov
    feed the standard error of Eq.-3 form.
    """

    stratum: str
    coeffs: np.ndarray
    transform: str
    bias: float = 0.0
    mse: float = 0.0
    cov: np.ndarray = None
    n_fit: int = 50

    def __post_init__(self):
        if self.transform not in ("identity", "sqrt", "log"):
            raise ValueError(f"unknown transform '{self.transform}'")
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        object.__setattr__(self, "coeffs", coeffs)
        cov = self.cov
        if cov is None:
            cov = np.zeros((coeffs.size, coeffs.size))
        cov = np.asarray(cov, dtype=np.float64)
        if cov.shape != (coeffs.size, coeffs.size):
            raise ValueError(f"cov shape {cov.shape} does not match {coeffs.size} coefficients")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("cov must be symmetric")
        eigmin = float(np.linalg.eigvalsh(cov).min())
        if eigmin < -1e-9:
            raise ValueError(f"cov must be positive semi-definite (min eigenvalue {eigmin})")
        object.__setattr__(self, "cov", cov)
        if self.mse < 0:
            raise ValueError(f"mse must be >= 0, got {self.mse}")


def transform_agbd(agbd: float, model: LinearModel) -> float:
    """Apply the model's transform h to a biomass density value."""
    if model.transform == "identity":
        return float(agbd)
    if model.transform == "sqrt":
        if agbd < 0:
            raise ValueError(f"sqrt transform needs agbd >= 0, got {agbd}")
        return float(np.sqrt(agbd))
    if agbd <= 0:
        raise ValueError(f"log transform needs agbd > 0, got {agbd}")
    return float(np.log(agbd))


def predict_agbd(x: np.ndarray, model: LinearModel) -> float:
    """Invert the transformed linear prediction into Mg/ha.

    The linear pre-image is clamped at 0 for the identity and sqrt
    transforms so predictions stay physical (and sqrt stays monotone).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.coeffs.shape:
        raise ValueError(f"predictor shape {x.shape} does not match coefficients {model.coeffs.shape}")
    z = float(x @ model.coeffs + model.bias)
    if model.transform == "identity":
        return max(z, 0.0)
    if model.transform == "sqrt":
        return max(z, 0.0) ** 2
    return float(np.exp(z))


def standard_error(x: np.ndarray, model: LinearModel) -> float:
    """sqrt(mse + x @ cov @ x) for one predictor row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.coeffs.shape:
        raise ValueError(f"predictor shape {x.shape} does not match coefficients {model.coeffs.shape}")
    radicand = model.mse + float(x @ model.cov @ x)
    assert radicand >= 0.0, f"negative SE radicand {radicand}"
    return float(np.sqrt(radicand))


def _t_cdf(t: float, dof: float) -> float:
    if t == 0.0:
        return 0.5
    ib = betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return 1.0 - 0.5 * ib if t > 0 else 0.5 * ib


def t_quantile(p: float, dof: float) -> float:
    """Student-t quantile by bisecting the regularized incomplete beta CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if dof <= 0:
        raise ValueError(f"dof must be positive, got {dof}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, dof)
    hi = 1.0
    while _t_cdf(hi, dof) < p:
        hi *= 2.0
        if hi > 1e9:
            raise ValueError(f"t quantile diverges for p={p}, dof={dof}")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _t_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def confidence_interval(agbd: float, se: float, alpha: float = 0.05, n: int = 50) -> tuple:
    """Symmetric t interval agbd +/- t(1 - alpha/2, n-2) * se."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if n <= 2:
        raise ValueError(f"n must exceed 2 for n-2 degrees of freedom, got {n}")
    if se < 0:
        raise ValueError(f"se must be >= 0, got {se}")
    half = t_quantile(1.0 - alpha / 2.0, n - 2) * se
    return (float(agbd - half), float(agbd + half))


def allometric_agb(lcm: float, a: float, b: float, re_site: float = 0.0) -> float:
    """exp(a + b ln(lcm) + re_site); lcm is the mean canopy RH metric in cm."""
    if lcm <= 0:
        raise ValueError(f"lcm must be positive, got {lcm}")
    return float(np.exp(a + b * np.log(lcm) + re_site))


@dataclass
class PointLabel:
    """One footprint's labels, rasterized to a single pixel."""

    row: int
    col: int
    agbd: float
    rh: np.ndarray  # cm, one value per RH_QUANTILES entry, non-decreasing
    cc: float
    se: float
    pft: str
    quality: bool = True

    def __post_init__(self):
        rh = np.asarray(self.rh, dtype=np.float32)
        if rh.shape != (len(RH_QUANTILES),):
            raise ValueError(f"rh must have {len(RH_QUANTILES)} entries, got shape {rh.shape}")
        if np.any(np.diff(rh) < 0):
            raise ValueError("rh must be non-decreasing across quantiles")
        object.__setattr__(self, "rh", rh)
        if self.pft not in PFT_CLASSES:
            raise ValueError(f"unknown pft '{self.pft}', expected one of {PFT_CLASSES}")
        if not 0.0 <= self.cc <= 100.0:
            raise ValueError(f"cc must lie in [0, 100], got {self.cc}")

    @property
    def ch(self) -> float:
        """Canopy height label: the top stored RH quantile, cm."""
        return float(self.rh[-1])


@dataclass
class TileSample:
    """One training tile: 13-channel raster plus its sparse point labels."""

    channels: np.ndarray
    points: list
    geo: tuple = (0.0, 0.0)
    latent: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != N_CHANNELS:
            raise ValueError(f"channels must be ({N_CHANNELS}, H, W), got {self.channels.shape}")

    def quality_points(self) -> list:
        return [p for p in self.points if p.quality]


def make_default_strata() -> dict:
    """Log-linear biomass model per plant-functional-type stratum.

    Predictors are [1, ln(lcm_cm), lcm_cm/100]; the third coefficient is
    zero so predictions follow the allometric power law exactly, while its
    covariance entry makes the standard error grow with canopy size and
    hence with biomass.
    """
    cov = np.diag([4.0, 2.0, 2.5])
    return {
        "DBT": LinearModel("DBT", np.array([-2.6, 1.10, 0.0]), "log", bias=0.05, mse=120.0, cov=cov, n_fit=60),
        "EBT": LinearModel("EBT", np.array([-3.3, 1.20, 0.0]), "log", bias=-0.03, mse=220.0, cov=cov, n_fit=80),
        "ENT": LinearModel("ENT", np.array([-2.3, 1.00, 0.0]), "log", bias=0.02, mse=80.0, cov=cov, n_fit=55),
        "GSW": LinearModel("GSW", np.array([-3.2, 0.90, 0.0]), "log", bias=0.0, mse=16.0, cov=cov, n_fit=40),
    }


def stratum_predictors(lcm_cm: float) -> np.ndarray:
    """Predictor row for the default strata, derived from the RH mean."""
    safe = max(float(lcm_cm), 1.0)
    return np.array([1.0, np.log(safe), safe / 100.0])


LCM_FLOOR_CM = 30.0
_RH_RATIOS = np.asarray(RH_QUANTILES, dtype=np.float64) / RH_QUANTILES[-1]


def rh_fractions(profile) -> np.ndarray:
    """Per-quantile height fractions (q/98)^(1/profile); monotone in q."""
    prof = np.asarray(profile, dtype=np.float64)
    return np.power(_RH_RATIOS, 1.0 / prof[..., None])


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
    f -= f.min()
    peak = f.max()
    if peak > 0:
        f /= peak
    return f


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def _latent_fields(rng: np.random.Generator, h: int, w: int, strata: dict) -> dict:
    g_ch = _smooth_field(rng, h, w, 9.0)
    g_gap = _smooth_field(rng, h, w, 7.0)
    g_prof = _smooth_field(rng, h, w, 11.0)
    g_sp = _smooth_field(rng, h, w, 13.0)
    g_cc = _smooth_field(rng, h, w, 6.0)

    veg = _logistic((g_gap - 0.30) / 0.07)
    ch = 3200.0 * g_ch ** 1.6 * veg
    profile = 0.45 + 0.5 * g_prof
    fracs = rh_fractions(profile.ravel()).reshape(h, w, len(RH_QUANTILES))
    lcm = ch * fracs.mean(axis=2)

    pft = np.full((h, w), PFT_CLASSES.index("GSW"), dtype=np.uint8)
    forest = ch >= 250.0
    tier = np.digitize(g_sp, [1.0 / 3.0, 2.0 / 3.0])
    pft[forest] = tier[forest]  # 0 DBT, 1 EBT, 2 ENT

    agbd = np.zeros((h, w))
    grown = lcm > LCM_FLOOR_CM
    for idx, name in enumerate(PFT_CLASSES):
        model = strata[name]
        sel = grown & (pft == idx)
        if np.any(sel):
            a, b = model.coeffs[0], model.coeffs[1]
            agbd[sel] = np.exp(a + b * np.log(lcm[sel]) + model.bias)

    cc = np.clip(100.0 * (1.0 - np.exp(-ch / 900.0)) * (0.8 + 0.4 * g_cc), 0.0, 100.0)

    return {
        "ch": ch,
        "cc": cc,
        "agbd": agbd,
        "lcm": lcm,
        "profile": profile,
        "pft": pft,
        "fracs": fracs,
    }


def _build_channels(rng: np.random.Generator, latent: dict, geo: tuple) -> np.ndarray:
    h, w = latent["ch"].shape
    n_ch = latent["ch"] / 3200.0
    n_cc = latent["cc"] / 100.0
    n_p = (latent["profile"] - 0.45) / 0.5
    g_x = _smooth_field(rng, h, w, 8.0)
    g_r1 = _smooth_field(rng, h, w, 10.0)
    g_r2 = _smooth_field(rng, h, w, 10.0)
    g_alt = _smooth_field(rng, h, w, 14.0)

    def noise(scale=0.012):
        return scale * rng.standard_normal((h, w))

    bands = np.empty((N_CHANNELS, h, w))
    bands[0] = 0.32 - 0.20 * n_cc - 0.05 * n_ch + 0.04 * g_x + noise()
    bands[1] = 0.24 - 0.06 * n_cc + 0.08 * n_ch + 0.03 * g_x + noise()
    bands[2] = 0.18 - 0.12 * n_cc - 0.02 * n_p + noise()
    bands[3] = 0.22 + 0.45 * n_cc + 0.10 * n_ch + noise()
    bands[4] = 0.30 - 0.10 * n_cc + 0.12 * n_p + noise()
    bands[5] = 0.55 - 0.18 * n_cc - 0.10 * n_ch + 0.05 * g_x + noise()
    # radar roles saturate with canopy height
    bands[6] = 0.12 + 0.72 * _logistic((latent["ch"] - 650.0) / 260.0) + 0.05 * g_r1 + noise()
    bands[7] = 0.08 + 0.68 * _logistic((latent["ch"] - 520.0) / 230.0) + 0.06 * g_r2 + noise()
    np.clip(bands[:8], 0.0, 1.0, out=bands[:8])

    gy, gx_ = np.gradient(g_alt)
    bands[8] = g_alt
    bands[9] = (np.arctan2(gy, gx_) / np.pi + 1.0) / 2.0
    bands[10] = np.clip(np.hypot(gy, gx_) * 8.0, 0.0, 1.0)

    lon, lat = geo
    cols = np.arange(w) - w / 2.0
    rows = np.arange(h) - h / 2.0
    bands[11] = np.clip((lon + cols[None, :] * 1e-4) / 180.0, -1.0, 1.0) * np.ones((h, 1))
    bands[12] = np.clip((lat - rows[:, None] * 1e-4) / 90.0, -1.0, 1.0) * np.ones((1, w))
    return bands.astype(np.float32)


def track_position(h: int, w: int, theta: float, offset: float, phase: float,
                   track: int, step: int) -> tuple:
    """Continuous (row, col) of one footprint given its pass parameters."""
    center = np.array([h / 2.0, w / 2.0])
    d = np.array([np.cos(theta), np.sin(theta)])
    perp = np.array([-np.sin(theta), np.cos(theta)])
    anchor = center + ((track - (TRACKS_PER_PASS - 1) / 2.0) * TRACK_SEPARATION_PX + offset) * perp
    pos = anchor + (phase + step * ALONG_TRACK_SPACING_PX) * d
    return float(pos[0]), float(pos[1])


def _lay_tracks(rng: np.random.Generator, h: int, w: int) -> tuple:
    """Footprint candidates as (pass, track, step, row, col) int rows.

    Each pass lays TRACKS_PER_PASS parallel lines separated by
    TRACK_SEPARATION_PX, sampled every ALONG_TRACK_SPACING_PX; only
    in-bounds rasterized pixels are kept.
    """
    n_passes = int(rng.integers(2, 4))
    half_diag = float(np.hypot(h, w)) / 2.0
    n_steps = int(np.ceil(half_diag / ALONG_TRACK_SPACING_PX)) + 1
    params = []
    rows = []
    for p in range(n_passes):
        theta = rng.uniform(0.0, np.pi)
        offset = rng.uniform(-TRACK_SEPARATION_PX / 2.0, TRACK_SEPARATION_PX / 2.0)
        phase = rng.uniform(0.0, ALONG_TRACK_SPACING_PX)
        params.append((theta, offset, phase))
        for k in range(TRACKS_PER_PASS):
            for j in range(-n_steps, n_steps + 1):
                pr, pc = track_position(h, w, theta, offset, phase, k, j)
                r, c = int(np.rint(pr)), int(np.rint(pc))
                if 0 <= r < h and 0 <= c < w:
                    rows.append((p, k, j, r, c))
    meta = np.array(rows, dtype=np.int32) if rows else np.empty((0, 5), dtype=np.int32)
    return meta, np.array(params, dtype=np.float64)


def _sample_points(rng: np.random.Generator, latent: dict, meta: np.ndarray,
                   strata: dict) -> tuple:
    points = []
    seen = set()
    keep_rows = []
    for p, k, j, r, c in meta:
        if (r, c) in seen:
            continue
        seen.add((r, c))
        keep_rows.append((p, k, j, r, c))
        ch_true = float(latent["ch"][r, c])
        noisy_ch = max(ch_true * (1.0 + 0.02 * rng.standard_normal()), 0.0)
        rh = (noisy_ch * latent["fracs"][r, c]).astype(np.float32)
        lcm_label = float(rh.mean())
        pft = PFT_CLASSES[latent["pft"][r, c]]
        model = strata[pft]
        x = stratum_predictors(lcm_label)
        se = standard_error(x, model)
        base = predict_agbd(x, model) if lcm_label > LCM_FLOOR_CM else 0.0
        agbd = max(base + se * rng.standard_normal(), 0.0)
        cc = float(np.clip(latent["cc"][r, c] + 2.0 * rng.standard_normal(), 0.0, 100.0))
        quality = bool(rng.random() > 0.04)
        points.append(PointLabel(int(r), int(c), float(agbd), rh, cc, float(se), pft, quality))
    meta_kept = np.array(keep_rows, dtype=np.int32) if keep_rows else np.empty((0, 5), dtype=np.int32)
    return points, meta_kept


def generate_scene(seed, height: int = 64, width: int = 64, geo=None,
                   strata: dict = None, min_points: int = 20,
                   with_latent: bool = True) -> TileSample:
    """Generate one synthetic tile; deterministic under `seed`.

    Tiles whose usable footprint count falls below min_points are
    regenerated from the same stream; a bounded number of attempts guards
    against a pathological configuration.
    """
    if height < 64 or width < 64:
        raise ValueError(f"tile extents must be >= 64, got {height}x{width}")
    strata = strata if strata is not None else make_default_strata()
    rng = np.random.default_rng(seed)
    if geo is None:
        geo = (float(rng.uniform(-180.0, 180.0)), float(rng.uniform(-51.6, 51.6)))
    for _ in range(40):
        latent = _latent_fields(rng, height, width, strata)
        candidates, pass_params = _lay_tracks(rng, height, width)
        points, meta = _sample_points(rng, latent, candidates, strata)
        if sum(p.quality for p in points) >= min_points:
            channels = _build_channels(rng, latent, geo)
            stored = {}
            if with_latent:
                stored = {
                    "ch": latent["ch"].astype(np.float32),
                    "cc": latent["cc"].astype(np.float32),
                    "agbd": latent["agbd"].astype(np.float32),
                    "lcm": latent["lcm"].astype(np.float32),
                    "pft": latent["pft"],
                    "track_meta": meta,
                    "pass_params": pass_params,
                }
            return TileSample(channels, points, geo, stored)
    raise RuntimeError(
        f"could not place {min_points} usable footprints on a {height}x{width} tile after 40 attempts"
    )


def generate_dataset(seed: int, n_tiles: int, height: int = 64, width: int = 64,
                     strata: dict = None, with_latent: bool = True) -> list:
    """Independent tiles with per-tile RNG streams derived from (seed, index)."""
    return [
        generate_scene([seed, i], height, width, strata=strata, with_latent=with_latent)
        for i in range(n_tiles)
    ]


def median_composite(stack: list, masks: list) -> tuple:
    """Per-pixel median over unmasked observations plus a gap mask.

    masks entries are binary (H, W) arrays where 1 marks a pixel masked
    OUT (cloud); pixels masked in every scene come back gap-flagged with
    value 0.
    """
    if len(stack) < 1:
        raise ValueError("need at least one scene")
    if len(stack) != len(masks):
        raise ValueError(f"{len(stack)} scenes but {len(masks)} masks")
    scenes = [np.asarray(s) for s in stack]
    shape = scenes[0].shape
    for s in scenes:
        if s.shape != shape:
            raise ValueError(f"scene shapes disagree: {s.shape} vs {shape}")
    spatial = shape[-2:]
    for m in masks:
        if np.asarray(m).shape != spatial:
            raise ValueError(f"mask shape {np.asarray(m).shape} does not match scene spatial {spatial}")
    data = np.stack(scenes).astype(np.float64)
    mask = np.stack([np.broadcast_to(np.asarray(m, bool), shape) for m in masks])
    arr = np.ma.masked_array(data, mask=mask)
    med = np.ma.median(arr, axis=0)
    gap = np.all(mask, axis=0)
    if gap.ndim == 3:
        gap = gap.all(axis=0)
    out = np.asarray(med.filled(0.0), dtype=scenes[0].dtype)
    return out, gap


# ---------------------------------------------------------------------------
# dataset container


def _points_to_records(points: list) -> np.ndarray:
    rec = np.zeros(len(points), dtype=_POINT_DTYPE)
    for i, p in enumerate(points):
        rec[i] = (p.row, p.col, p.agbd, p.rh, p.cc, p.se, PFT_CLASSES.index(p.pft), int(p.quality))
    return rec


def _records_to_points(rec: np.ndarray) -> list:
    return [
        PointLabel(
            int(r["row"]), int(r["col"]), float(r["agbd"]), np.array(r["rh"], dtype=np.float32),
            float(r["cc"]), float(r["se"]), PFT_CLASSES[int(r["pft"])], bool(r["quality"])
        )
        for r in rec
    ]


def save_dataset(tiles: list, path) -> None:
    """Write tiles to the binary container; header JSON + raw planes per tile."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tiles)))
        for tile in tiles:
            latent_desc = [
                {"key": k, "shape": list(v.shape), "dtype": v.dtype.str}
                for k, v in tile.latent.items()
            ]
            header = {
                "geo": [float(tile.geo[0]), float(tile.geo[1])],
                "shape": list(tile.channels.shape),
                "n_points": len(tile.points),
                "latent": latent_desc,
            }
            hb = json.dumps(header, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(hb)))
            fh.write(hb)
            fh.write(np.ascontiguousarray(tile.channels, dtype="<f4").tobytes())
            fh.write(_points_to_records(tile.points).tobytes())
            for k, v in tile.latent.items():
                fh.write(np.ascontiguousarray(v).tobytes())


def load_dataset(path) -> list:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a dataset file: bad magic {magic!r}")
        (n_tiles,) = struct.unpack("<I", fh.read(4))
        tiles = []
        for _ in range(n_tiles):
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            shape = tuple(header["shape"])
            n_elems = int(np.prod(shape))
            channels = np.frombuffer(fh.read(4 * n_elems), dtype="<f4").reshape(shape).copy()
            rec = np.frombuffer(fh.read(_POINT_DTYPE.itemsize * header["n_points"]), dtype=_POINT_DTYPE)
            latent = {}
            for desc in header["latent"]:
                dt = np.dtype(desc["dtype"])
                cnt = int(np.prod(desc["shape"])) if desc["shape"] else 1
                buf = fh.read(dt.itemsize * cnt)
                latent[desc["key"]] = np.frombuffer(buf, dtype=dt).reshape(desc["shape"]).copy()
            tiles.append(TileSample(channels, _records_to_points(rec), tuple(header["geo"]), latent))
    return tiles
