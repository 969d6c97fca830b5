"""Assessment tooling: global metrics, binned error profiles, coverage
curves, per-class breakdowns, and uncertainty-ordered series.

All reductions are pure and order-independent; quantiles use numpy's
linear interpolation between order statistics so derived expectations
are exact. Reports serialize deterministically (sorted keys, no
timestamps) to support byte-identical reruns.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr


@dataclass(frozen=True)
class BinSpec:
    """Half-open value bins [low, low+size), ..., covering [low, high)."""

    low: float
    high: float
    size: float

    def __post_init__(self):
        if not (self.high > self.low):
            raise ValueError(f"bin range empty: [{self.low}, {self.high})")
        if self.size <= 0:
            raise ValueError(f"bin size must be positive, got {self.size}")
        n = (self.high - self.low) / self.size
        if abs(n - round(n)) > 1e-9:
            raise ValueError("bin size must divide the range evenly")

    @property
    def n_bins(self) -> int:
        return int(round((self.high - self.low) / self.size))

    def edges(self) -> np.ndarray:
        return self.low + self.size * np.arange(self.n_bins + 1)

    def centers(self) -> np.ndarray:
        return self.low + self.size * (np.arange(self.n_bins) + 0.5)

    def index(self, values) -> np.ndarray:
        """Half-open bin index; out-of-range values map to -1."""
        v = np.asarray(values, dtype=np.float64)
        idx = np.floor((v - self.low) / self.size).astype(np.intp)
        idx[(v < self.low) | (v >= self.high)] = -1
        return idx


DEFAULT_BIN_SPECS = {
    "agbd": BinSpec(0.0, 500.0, 5.0),
    "ch": BinSpec(0.0, 5000.0, 50.0),
    "cc": BinSpec(0.0, 100.0, 1.0),
}

PFT_SET = ("DBT", "EBT", "ENT", "GSW")


@dataclass(frozen=True)
class EvalPair:
    y_true: float
    y_pred: float
    sigma_pred: float | None = None
    se_true: float | None = None
    pft: str | None = None
    variable: str = "agbd"

    def __post_init__(self):
        vals = [self.y_true, self.y_pred]
        if self.sigma_pred is not None:
            if self.sigma_pred <= 0:
                raise ValueError(f"sigma_pred must be positive, got {self.sigma_pred}")
            vals.append(self.sigma_pred)
        if self.se_true is not None:
            vals.append(self.se_true)
        if not np.all(np.isfinite(vals)):
            raise ValueError("pair fields must be finite")


def pairs_from_arrays(y_true, y_pred, sigma_pred=None, se_true=None,
                      pft=None, variable: str = "agbd") -> list:
    n = len(y_true)
    get = lambda a, i: None if a is None else float(a[i])
    return [
        EvalPair(float(y_true[i]), float(y_pred[i]), get(sigma_pred, i),
                 get(se_true, i), None if pft is None else pft[i], variable)
        for i in range(n)
    ]


def _errors(pairs) -> tuple:
    yt = np.array([p.y_true for p in pairs], dtype=np.float64)
    yp = np.array([p.y_pred for p in pairs], dtype=np.float64)
    return yt, yp, yp - yt


def global_metrics(pairs: list) -> dict:
    """corr (Pearson), ME, MAE, MAPE (%), RMSE, R2.

    MAPE is averaged over pairs with y_true != 0 only; the number of
    excluded pairs is reported so small denominators can't hide.
    """
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs, got {len(pairs)}")
    yt, yp, err = _errors(pairs)
    nonzero = yt != 0
    mape = float(np.mean(np.abs(err[nonzero] / yt[nonzero])) * 100.0) if nonzero.any() else None
    sst = float(((yt - yt.mean()) ** 2).sum())
    if yt.std() > 0 and yp.std() > 0:
        corr = float(np.corrcoef(yt, yp)[0, 1])
    else:
        corr = None
    return {
        "corr": corr,
        "me": float(err.mean()),
        "mae": float(np.abs(err).mean()),
        "mape": mape,
        "mape_excluded": int((~nonzero).sum()),
        "rmse": float(np.sqrt((err ** 2).mean())),
        "r2": None if sst == 0 else float(1.0 - (err ** 2).sum() / sst),
        "count": len(pairs),
    }


def binned_profile(pairs: list, spec: BinSpec, min_count: int = 50) -> list:
    """Per-bin error statistics over y_true bins; linear-interp quantiles."""
    yt, _, err = _errors(pairs)
    idx = spec.index(yt)
    rows = []
    for b in range(spec.n_bins):
        e = err[idx == b]
        row = {
            "low": float(spec.low + b * spec.size),
            "high": float(spec.low + (b + 1) * spec.size),
            "count": int(len(e)),
            "reliable": bool(len(e) >= min_count),
        }
        if len(e):
            q5, q25, q50, q75, q95 = np.quantile(e, [0.05, 0.25, 0.5, 0.75, 0.95])
            row.update({
                "median_error": float(q50),
                "median_abs_error": float(np.median(np.abs(e))),
                "iqr": [float(q25), float(q75)],
                "range90": [float(q5), float(q95)],
            })
        else:
            row.update({"median_error": None, "median_abs_error": None,
                        "iqr": None, "range90": None})
        rows.append(row)
    return rows


def coverage_profile(pairs: list, spec: BinSpec) -> dict:
    """Fraction of pairs with z = |y_true - y_pred| / sigma below 1."""
    sig = np.array([p.sigma_pred if p.sigma_pred is not None else np.nan for p in pairs])
    if np.isnan(sig).any():
        raise ValueError("coverage requires sigma_pred on every pair")
    if (sig <= 0).any():
        raise ValueError("sigma_pred must be positive")
    yt, yp, err = _errors(pairs)
    z = np.abs(err) / sig
    idx = spec.index(yt)
    bins = []
    for b in range(spec.n_bins):
        zb = z[idx == b]
        bins.append({
            "low": float(spec.low + b * spec.size),
            "high": float(spec.low + (b + 1) * spec.size),
            "count": int(len(zb)),
            "fraction": float((zb < 1.0).mean()) if len(zb) else None,
        })
    return {"global": float((z < 1.0).mean()), "bins": bins}


def pft_breakdown(pairs: list) -> dict:
    """variable -> class -> {rmse, count}; unknown classes are an error."""
    table: dict = {}
    for p in pairs:
        if p.pft not in PFT_SET:
            raise ValueError(f"unknown pft class {p.pft!r}")
        table.setdefault(p.variable, {}).setdefault(p.pft, []).append(p.y_pred - p.y_true)
    return {
        var: {
            cls: {"rmse": float(np.sqrt(np.mean(np.square(errs)))), "count": len(errs)}
            for cls, errs in sorted(classes.items())
        }
        for var, classes in sorted(table.items())
    }


def uncertainty_ordered_profile(pairs: list, alpha: float = 0.05,
                                n_fit: int = 50) -> dict:
    """Pairs sorted by y_true with model sigma, measurement SE, and CI.

    The confidence interval is the measurement's own (centered on y_true
    with its standard error); rank_corr is the Spearman correlation of
    |prediction error| with the measurement SE.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    from .synth import confidence_interval

    order = np.argsort([p.y_true for p in pairs], kind="stable")
    out = {"y_true": [], "y_pred": [], "sigma": [], "se": [], "ci_low": [], "ci_high": []}
    for i in order:
        p = pairs[i]
        if p.se_true is None:
            raise ValueError("ordered profile requires se_true on every pair")
        lo, hi = confidence_interval(p.y_true, p.se_true, alpha, n_fit)
        out["y_true"].append(p.y_true)
        out["y_pred"].append(p.y_pred)
        out["sigma"].append(p.sigma_pred)
        out["se"].append(p.se_true)
        out["ci_low"].append(lo)
        out["ci_high"].append(hi)
    err = np.abs(np.array(out["y_pred"]) - np.array(out["y_true"]))
    se = np.array(out["se"])
    if len(pairs) > 2 and np.ptp(se) > 0 and np.ptp(err) > 0:
        out["rank_corr"] = float(spearmanr(err, se).statistic)
    else:
        out["rank_corr"] = None
    return out


@dataclass
class EvalReport:
    """Per-variable assessment bundle with deterministic serialization."""

    variables: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_variable(self, name: str, pairs: list, spec: BinSpec | None = None,
                     min_count: int = 50, with_coverage: bool = False) -> None:
        spec = spec or DEFAULT_BIN_SPECS[name]
        entry = {
            "global": global_metrics(pairs),
            "binned": binned_profile(pairs, spec, min_count),
        }
        if with_coverage:
            entry["coverage"] = coverage_profile(pairs, spec)
        self.variables[name] = entry

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "variables": self.variables},
                          sort_keys=True, indent=2)

    def binned_csv(self, variable: str) -> str:
        rows = self.variables[variable]["binned"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["low", "high", "count", "reliable", "median_error",
                         "median_abs_error", "iqr_lo", "iqr_hi", "p5", "p95"])
        for r in rows:
            iqr = r["iqr"] or (None, None)
            rng = r["range90"] or (None, None)
            writer.writerow([r["low"], r["high"], r["count"], int(r["reliable"]),
                             r["median_error"], r["median_abs_error"],
                             iqr[0], iqr[1], rng[0], rng[1]])
        return buf.getvalue()

    def save(self, json_path, csv_dir=None) -> None:
        with open(json_path, "w") as f:
            f.write(self.to_json())
        if csv_dir is not None:
            from pathlib import Path

            for var in sorted(self.variables):
                Path(csv_dir, f"profile_{var}.csv").write_text(self.binned_csv(var))
