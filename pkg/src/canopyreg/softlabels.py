"""Dense target assembly from sparse points.

Unlabeled pixels borrow the value of the spectrally most similar labeled
pixel (cosine similarity over the six optical-role bands, hard argmax),
or, once a teacher network exists, its predicted maps. Labeled pixels
always keep their measured values exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkParams, forward

OPTICAL_SLICE = slice(0, 6)


@dataclass
class LabelMap:
    """Per-variable target maps sharing one hard-pixel mask."""

    targets: dict
    hard_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.hard_mask)
        if mask.ndim != 2:
            raise ValueError(f"hard_mask must be (H, W), got {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("hard_mask must be binary")
        for name, t in self.targets.items():
            if np.asarray(t).shape != mask.shape:
                raise ValueError(
                    f"target {name!r} shape {np.asarray(t).shape} != mask shape {mask.shape}")
        object.__setattr__(self, "hard_mask", mask.astype(np.uint8))

    @property
    def n_hard(self) -> int:
        return int(self.hard_mask.sum())

    @property
    def n_soft(self) -> int:
        return int(self.hard_mask.size - self.hard_mask.sum())


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """x.y / (|x||y|); zero vectors are defined to have similarity 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {x.shape} and {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(x @ y / (nx * ny))


def _point_values(point, variable: str) -> float:
    return float(point.ch if variable == "ch" else getattr(point, variable))


def hard_label_map(points: list, shape: tuple,
                   variables: tuple = ("agbd", "ch", "cc")) -> LabelMap:
    """Sparse maps: point values at their pixels, zero elsewhere.

    When several points land on one pixel the first in input order wins.
    """
    h, w = shape
    mask = np.zeros((h, w), dtype=np.uint8)
    targets = {v: np.zeros((h, w)) for v in variables}
    for p in points:
        if not (0 <= p.row < h and 0 <= p.col < w):
            raise ValueError(f"point ({p.row}, {p.col}) outside {shape}")
        if mask[p.row, p.col]:
            continue
        mask[p.row, p.col] = 1
        for v in variables:
            targets[v][p.row, p.col] = _point_values(p, v)
    return LabelMap(targets, mask)


def spectral_soft_labels(bands: np.ndarray, hard_points: list,
                         variables: tuple = ("agbd", "ch", "cc")) -> LabelMap:
    """Assign each pixel the values of its most similar labeled pixel.

    Rows of the pixel matrix and the labeled-pixel matrix are L2
    normalized, so the similarity matrix is one matmul; ties (including
    all-zero spectra, which score 0 everywhere) resolve to the lowest
    hard-point index in input order.
    """
    bands = np.asarray(bands, dtype=np.float64)
    if bands.ndim != 3 or bands.shape[0] != 6:
        raise ValueError(f"bands must be (6, H, W), got {bands.shape}")
    if not hard_points:
        raise ValueError("need at least one hard point")
    h, w = bands.shape[1:]
    hard = hard_label_map(hard_points, (h, w), variables)

    rows = bands.reshape(6, h * w).T
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    unit = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)

    seen, keep = set(), []
    for i, p in enumerate(hard_points):
        if (p.row, p.col) not in seen:
            seen.add((p.row, p.col))
            keep.append(i)
    pts = [hard_points[i] for i in keep]
    flat = np.array([p.row * w + p.col for p in pts])
    sim = unit @ unit[flat].T
    assign = np.argmax(sim, axis=1)

    targets = {}
    for v in variables:
        vals = np.array([_point_values(p, v) for p in pts])
        m = vals[assign].reshape(h, w)
        m[hard.hard_mask == 1] = hard.targets[v][hard.hard_mask == 1]
        targets[v] = m
    return LabelMap(targets, hard.hard_mask)


def combine(hard: LabelMap, soft: dict) -> LabelMap:
    """Elementwise blend: mask picks the hard value, else the soft value."""
    m = hard.hard_mask.astype(np.float64)
    targets = {}
    for v, hv in hard.targets.items():
        if v not in soft:
            raise ValueError(f"soft values missing variable {v!r}")
        sv = np.asarray(soft[v], dtype=np.float64)
        if sv.shape != m.shape:
            raise ValueError(f"soft map {v!r} shape {sv.shape} != {m.shape}")
        targets[v] = m * hv + (1.0 - m) * sv
    return LabelMap(targets, hard.hard_mask)


def teacher_targets(teacher: NetworkParams, sample,
                    variables: tuple = ("agbd", "ch", "cc")) -> LabelMap:
    """Teacher-predicted maps with measured points overriding their pixels."""
    pred = forward(teacher, np.asarray(sample.channels, dtype=np.float64))
    hard = hard_label_map(sample.quality_points(), sample.channels.shape[1:], variables)
    return combine(hard, {v: pred.values[v] for v in variables})
