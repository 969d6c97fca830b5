"""Tiled map production and change accounting.

Full rasters rarely fit one forward pass, so inference slides a tile
window with enough padding that every kept pixel has its complete
receptive field inside the tile. Stitching the tile interiors then
reproduces a single whole-raster pass except for border effects the
padding already absorbs. Downstream: a height-threshold forest mask and
year-over-year canopy-cover-loss accounting with a CO2 equivalent.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .network import NetworkParams, forward, receptive_field_radius

FOREST_CH_CM = 500.0
CC_LOSS_THRESHOLD = 20.0
PIXEL_AREA_HA = 0.01  # 10 m pixels
CARBON_FRACTION = 0.47
CO2_PER_BIOMASS = CARBON_FRACTION * 44.0 / 12.0  # dry biomass -> CO2 mass

RASTER_DTYPE = "<f4"
SIDECAR_NAME = "raster.json"


@dataclass
class DeployGrid:
    """Sliding-window layout over one raster.

    Consecutive tiles overlap by 2*pad; only each tile's interior
    (pad pixels in from every edge) lands in the output, so the
    step between tile origins is tile_size - 2*pad.
    """

    height: int
    width: int
    tile_size: int = 64
    pad: int = 28
    gap_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"raster extents must be positive, got {self.height}x{self.width}")
        if self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")
        if 2 * self.pad >= self.tile_size:
            raise ValueError(f"pad {self.pad} must stay below tile_size/2 = {self.tile_size / 2}")
        if self.gap_mask is not None:
            gm = np.asarray(self.gap_mask)
            if gm.shape != (self.height, self.width):
                raise ValueError(f"gap mask shape {gm.shape} does not match raster "
                                 f"{(self.height, self.width)}")
            self.gap_mask = (gm != 0).astype(np.uint8)

    @property
    def step(self) -> int:
        return self.tile_size - 2 * self.pad

    @property
    def n_rows(self) -> int:
        return math.ceil(self.height / self.step)

    @property
    def n_cols(self) -> int:
        return math.ceil(self.width / self.step)


def padded_raster(raster: np.ndarray, grid: DeployGrid) -> np.ndarray:
    """The zero-padded canvas the tiles are cut from.

    The raster sits at offset (pad, pad); the canvas extends to the last
    tile's far edge so every tile slice is exactly tile_size square.
    """
    c = raster.shape[0]
    hp = (grid.n_rows - 1) * grid.step + grid.tile_size
    wp = (grid.n_cols - 1) * grid.step + grid.tile_size
    canvas = np.zeros((c, hp, wp), dtype=np.float32)
    canvas[:, grid.pad:grid.pad + grid.height, grid.pad:grid.pad + grid.width] = raster
    return canvas


def tiled_inference(params: NetworkParams, raster: np.ndarray, grid: DeployGrid) -> dict:
    """Stitched prediction planes for one raster.

    Returns {variable: map, "sigma_" + variable: map, ..., "gap_mask": map}
    at raster resolution. CC is clamped to [0, 100]; the input gap mask
    (all-valid when the grid carries none) passes through unchanged.
    """
    raster = np.asarray(raster, dtype=np.float32)
    if raster.ndim != 3 or raster.shape[0] != params.config.input_channels:
        raise ValueError(f"raster must be ({params.config.input_channels}, H, W), "
                         f"got {raster.shape}")
    if raster.shape[1:] != (grid.height, grid.width):
        raise ValueError(f"grid {(grid.height, grid.width)} does not match raster "
                         f"{raster.shape[1:]}")
    radius = receptive_field_radius(params.config)
    if grid.pad < radius:
        raise ValueError(f"pad {grid.pad} below receptive-field radius {radius}")
    down = 2 ** (params.config.levels - 1)
    if grid.tile_size % down or grid.step % down:
        raise ValueError(f"tile_size and step must be multiples of {down}, "
                         f"got {grid.tile_size} and {grid.step}")

    canvas = padded_raster(raster, grid)
    planes = None
    for i in range(grid.n_rows):
        r0 = i * grid.step
        ih = min(grid.step, grid.height - r0)
        for j in range(grid.n_cols):
            c0 = j * grid.step
            iw = min(grid.step, grid.width - c0)
            tile = canvas[:, r0:r0 + grid.tile_size, c0:c0 + grid.tile_size]
            pred = forward(params, tile)
            if planes is None:
                planes = {}
                for v in pred.values:
                    planes[v] = np.zeros((grid.height, grid.width), dtype=np.float32)
                for v in pred.sigmas:
                    planes["sigma_" + v] = np.zeros((grid.height, grid.width), dtype=np.float32)
            win = (slice(grid.pad, grid.pad + ih), slice(grid.pad, grid.pad + iw))
            out = (slice(r0, r0 + ih), slice(c0, c0 + iw))
            for v, m in pred.values.items():
                planes[v][out] = m[win]
            for v, m in pred.sigmas.items():
                planes["sigma_" + v][out] = m[win]
    if "cc" in planes:
        np.clip(planes["cc"], 0.0, 100.0, out=planes["cc"])
    if grid.gap_mask is not None:
        planes["gap_mask"] = grid.gap_mask.astype(np.float32)
    else:
        planes["gap_mask"] = np.zeros((grid.height, grid.width), dtype=np.float32)
    return planes


def forest_mask(ch_map: np.ndarray) -> np.ndarray:
    """Forested land: canopy height above the 500 cm threshold."""
    return (np.asarray(ch_map) > FOREST_CH_CM).astype(np.uint8)


def mask_area_ha(mask: np.ndarray, pixel_area_ha: float = PIXEL_AREA_HA) -> float:
    return float(np.count_nonzero(mask) * pixel_area_ha)


@dataclass(frozen=True)
class ChangeReport:
    """One year pair's loss accounting; biomass in Mt, area in ha."""

    loss_area_ha: float
    biomass_delta_mt: float
    co2_mt: float
    label: str = ""

    def __post_init__(self):
        if self.loss_area_ha < 0:
            raise ValueError(f"loss area must be non-negative, got {self.loss_area_ha}")
        if not math.isclose(self.co2_mt, self.biomass_delta_mt * CO2_PER_BIOMASS,
                            rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("co2_mt must equal biomass_delta_mt times the "
                             f"conversion factor {CO2_PER_BIOMASS}")

    def to_json(self) -> str:
        return json.dumps({"loss_area_ha": self.loss_area_ha,
                           "biomass_delta_mt": self.biomass_delta_mt,
                           "co2_mt": self.co2_mt,
                           "label": self.label}, sort_keys=True)


def change_detection(cc_t1: np.ndarray, cc_t2: np.ndarray, forest_t1: np.ndarray,
                     agbd_t1: np.ndarray | None = None, agbd_t2: np.ndarray | None = None,
                     *, threshold: float = CC_LOSS_THRESHOLD,
                     pixel_area_ha: float = PIXEL_AREA_HA, label: str = "") -> tuple:
    """Canopy-cover loss mask and its aggregated report.

    A pixel counts as loss when it was forested at t1 and cover dropped
    by more than the threshold. The biomass delta sums agbd_t1 - agbd_t2
    over the loss mask (omitted when either map is missing).
    """
    cc_t1 = np.asarray(cc_t1, dtype=np.float64)
    cc_t2 = np.asarray(cc_t2, dtype=np.float64)
    forest = np.asarray(forest_t1)
    for name, m in (("cc_t2", cc_t2), ("forest_t1", forest)):
        if m.shape != cc_t1.shape:
            raise ValueError(f"{name} shape {m.shape} does not match {cc_t1.shape}")
    loss = ((forest != 0) & (cc_t1 - cc_t2 > threshold)).astype(np.uint8)
    delta_mt = 0.0
    if agbd_t1 is not None and agbd_t2 is not None:
        agbd_t1 = np.asarray(agbd_t1, dtype=np.float64)
        agbd_t2 = np.asarray(agbd_t2, dtype=np.float64)
        for name, m in (("agbd_t1", agbd_t1), ("agbd_t2", agbd_t2)):
            if m.shape != cc_t1.shape:
                raise ValueError(f"{name} shape {m.shape} does not match {cc_t1.shape}")
        sel = loss != 0
        # Mg/ha * ha -> Mg; 1e6 Mg per Mt
        delta_mt = float(((agbd_t1[sel] - agbd_t2[sel]) * pixel_area_ha).sum() / 1e6)
    report = ChangeReport(mask_area_ha(loss, pixel_area_ha), delta_mt,
                          delta_mt * CO2_PER_BIOMASS, label)
    return loss, report


def save_raster(outdir, planes: dict, meta: dict | None = None) -> None:
    """Write each plane as little-endian float32 with a JSON sidecar."""
    if not planes:
        raise ValueError("no planes to save")
    shapes = {p.shape for p in planes.values()}
    if len(shapes) != 1:
        raise ValueError(f"planes disagree on shape: {sorted(shapes)}")
    (h, w) = shapes.pop()
    os.makedirs(outdir, exist_ok=True)
    for name in sorted(planes):
        np.ascontiguousarray(planes[name], dtype=RASTER_DTYPE).tofile(
            os.path.join(outdir, name + ".f32"))
    sidecar = {"shape": [int(h), int(w)], "dtype": RASTER_DTYPE,
               "planes": sorted(planes), "meta": meta or {}}
    with open(os.path.join(outdir, SIDECAR_NAME), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_raster(outdir) -> tuple:
    """Planes and metadata previously written by save_raster."""
    with open(os.path.join(outdir, SIDECAR_NAME)) as fh:
        sidecar = json.load(fh)
    h, w = sidecar["shape"]
    planes = {}
    for name in sidecar["planes"]:
        data = np.fromfile(os.path.join(outdir, name + ".f32"), dtype=RASTER_DTYPE)
        if data.size != h * w:
            raise ValueError(f"plane '{name}' has {data.size} values, expected {h * w}")
        planes[name] = data.reshape(h, w)
    return planes, sidecar["meta"]
