"""Inverse-density sample weighting and distribution-balancing utilities.

Rare high-value samples are upweighted by the reciprocal of a kernel
density estimate of the training distribution, with the reciprocal capped
at a per-variable floor reference so extreme values never receive less
weight than the reference. The same tables drive tile-level subset
balancing and uniform test-point sampling.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .evaluation import BinSpec, DEFAULT_BIN_SPECS

# Value caps beyond which the density floor applies: 300 Mg/ha for
# biomass, 3000 cm for canopy height. Cover is bounded at 100% anyway.
FLOOR_REFERENCES = {"agbd": 300.0, "ch": 3000.0, "cc": 100.0}


@dataclass(frozen=True)
class PdfTable:
    """Discretized density: values at bin centers of a BinSpec grid."""

    spec: BinSpec
    pdf: np.ndarray

    def __post_init__(self):
        pdf = np.asarray(self.pdf, dtype=np.float64)
        if pdf.shape != (self.spec.n_bins,):
            raise ValueError(f"pdf has {pdf.shape} values for {self.spec.n_bins} bins")
        if not np.all(np.isfinite(pdf)) or np.any(pdf < 0):
            raise ValueError("pdf values must be finite and non-negative")
        object.__setattr__(self, "pdf", pdf)

    def bin_index(self, values) -> np.ndarray:
        """Half-open bin index, clipped into range at both ends."""
        idx = np.floor((np.asarray(values, dtype=np.float64) - self.spec.low) / self.spec.size)
        return np.clip(idx, 0, self.spec.n_bins - 1).astype(np.intp)

    def at(self, values) -> np.ndarray:
        return self.pdf[self.bin_index(values)]


def silverman_bandwidth(values: np.ndarray) -> float:
    """Rule-of-thumb kernel width 0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1))
    q75, q25 = np.percentile(values, [75.0, 25.0])
    spread = min(std, (q75 - q25) / 1.34) or std
    return 0.9 * spread * len(values) ** (-0.2)


def fit_kde(values, bandwidth: float | None = None, bin_spec: BinSpec | None = None,
            variable: str = "agbd") -> PdfTable:
    """Gaussian KDE evaluated at bin centers, normalized over the range.

    Mass falling outside [low, high) is reflected back at both edges so
    densities near the boundaries are not artificially depressed; the
    discrete normalization then makes sum(pdf) * size == 1 exactly.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) < 2 or np.ptp(values) == 0.0:
        raise ValueError("need at least 2 distinct values to fit a density")
    spec = bin_spec if bin_spec is not None else DEFAULT_BIN_SPECS[variable]
    if bandwidth is None:
        bandwidth = silverman_bandwidth(values)
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")

    centers = spec.centers()
    # Reflection: evaluating at x, 2*low - x, and 2*high - x is equivalent
    # to folding the kernel tails back into the support.
    pdf = np.zeros(spec.n_bins)
    for grid in (centers, 2.0 * spec.low - centers, 2.0 * spec.high - centers):
        z = (grid[:, None] - values[None, :]) / bandwidth
        pdf += np.exp(-0.5 * z * z).sum(axis=1)
    pdf /= len(values) * bandwidth * np.sqrt(2.0 * np.pi)
    pdf /= pdf.sum() * spec.size
    return PdfTable(spec, pdf)


@dataclass(frozen=True)
class WeightTable:
    """Per-bin inverse-density sample weights with O(1) lookup.

    Weights are 1/max(pdf, pdf_at_floor), normalized so the weighted mean
    over the fitted distribution is 1; queries beyond floor_reference are
    capped to the floor bin so rare extremes keep the floor weight.
    """

    variable: str
    edges: np.ndarray
    weights: np.ndarray
    floor_reference: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if edges.ndim != 1 or len(edges) != len(weights) + 1:
            raise ValueError(f"{len(edges)} edges cannot delimit {len(weights)} bins")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("weights must be finite and positive")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    def lookup(self, values) -> np.ndarray:
        """Table weight for each value; pure indexing, no density re-fit."""
        v = np.minimum(np.asarray(values, dtype=np.float64), self.floor_reference)
        idx = np.clip(np.searchsorted(self.edges, v, side="right") - 1, 0, len(self.weights) - 1)
        return self.weights[idx]

    def to_json(self) -> str:
        return json.dumps(
            {
                "variable": self.variable,
                "edges": self.edges.tolist(),
                "weights": self.weights.tolist(),
                "floor_reference": self.floor_reference,
                "meta": self.meta,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "WeightTable":
        d = json.loads(text)
        return cls(d["variable"], np.array(d["edges"]), np.array(d["weights"]),
                   d["floor_reference"], d.get("meta", {}))


def inverse_pdf_weights(table: PdfTable, floor_reference: float,
                        variable: str = "agbd") -> WeightTable:
    """Reciprocal-density weights, floored and normalized to mean 1.

    The normalization averages over the fitted distribution itself
    (sum over bins of pdf * weight * width == 1), so a typical training
    sample carries weight near 1 regardless of how skewed the data are.
    """
    pdf_floor = float(table.at(floor_reference))
    if pdf_floor <= 0:
        # empty tail: fall back to the smallest positive density
        positive = table.pdf[table.pdf > 0]
        if len(positive) == 0:
            raise ValueError("density is zero everywhere")
        pdf_floor = float(positive.min())
    raw = 1.0 / np.maximum(table.pdf, pdf_floor)
    mean_w = float((table.pdf * raw).sum() * table.spec.size)
    return WeightTable(
        variable,
        table.spec.edges(),
        raw / mean_w,
        floor_reference,
        meta={"pdf_floor": pdf_floor, "bin_size": table.spec.size},
    )


def _tile_statistic(tile, variable: str = "agbd") -> float:
    """Aggregation statistic used for tile balancing: 75th percentile of
    the tile's usable point values."""
    pts = tile.quality_points() if hasattr(tile, "quality_points") else list(tile)
    if len(pts) < 20:
        raise ValueError(f"tile has {len(pts)} usable points, need at least 20")
    vals = [getattr(p, variable) if variable != "ch" else p.ch for p in pts]
    return float(np.percentile(np.asarray(vals, dtype=np.float64), 75.0))


def balanced_subset(tiles: list, target_distribution: BinSpec | None = None,
                    variable: str = "agbd", seed: int = 0,
                    tolerance: float = 0.10) -> list:
    """Rejection-sample tiles so their aggregate statistic is near-uniform.

    Each tile is kept with probability target_share / empirical_share of
    its statistic's bin, scaled so the rarest occupied bin keeps
    everything. Infeasible targets (empty bins inside the observed range)
    degrade gracefully: the best achievable subset is returned with a
    warning rather than an error.
    """
    if not tiles:
        return []
    stats = np.array([_tile_statistic(t, variable) for t in tiles])
    if np.ptp(stats) == 0.0:
        return list(tiles)  # uniformity cannot improve on a point mass

    if target_distribution is None:
        lo, hi = float(stats.min()), float(stats.max())
        target_distribution = BinSpec(lo, np.nextafter(hi, np.inf), (np.nextafter(hi, np.inf) - lo) / 8.0)
    spec = target_distribution
    idx = np.clip(np.floor((stats - spec.low) / spec.size), 0, spec.n_bins - 1).astype(np.intp)
    counts = np.bincount(idx, minlength=spec.n_bins).astype(np.float64)

    occupied = counts > 0
    if np.ptp(counts[occupied]) / counts[occupied].max() <= tolerance:
        return list(tiles)  # already uniform within tolerance

    first, last = np.flatnonzero(occupied)[[0, -1]]
    interior = np.zeros_like(occupied)
    interior[first:last + 1] = True
    if (interior & ~occupied).any():
        warnings.warn("target has empty bins inside the observed range; "
                      "returning the best achievable balance", stacklevel=2)

    # keep probability per bin: rarest occupied bin keeps all its tiles
    floor_count = counts[occupied].min()
    keep_prob = np.where(occupied, floor_count / np.maximum(counts, 1.0), 0.0)
    rng = np.random.default_rng([seed, 0x5eb5])
    keep = rng.random(len(tiles)) < keep_prob[idx]
    inside = (stats >= spec.low) & (stats < spec.high)
    keep |= ~inside  # out-of-range tiles are not the balancing target
    return [t for t, k in zip(tiles, keep) if k]


def uniform_test_sample(points: list, tables: dict, seed: int = 0,
                        variable: str = "agbd") -> list:
    """Accept points with probability proportional to their table weight.

    The acceptance probability is weight(v)/max weight, so the floor bin
    (and everything beyond the floor reference) is always accepted.
    """
    if variable not in tables:
        raise ValueError(f"no weight table for variable {variable!r}")
    table = tables[variable]
    vals = np.array([getattr(p, variable) if variable != "ch" else p.ch for p in points])
    if len(vals) == 0:
        return []
    w = table.lookup(vals)
    rng = np.random.default_rng([seed, 0xACCE])
    accept = rng.random(len(vals)) < w / table.weights.max()
    return [p for p, a in zip(points, accept) if a]
