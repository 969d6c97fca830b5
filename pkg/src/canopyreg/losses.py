"""Heteroscedastic regression loss with hard/soft balancing and schedules.

Per pixel the loss is 0.5 * [(target - pred)^2 / sigma^2 + ln sigma^2]
plus an optional lam_reg * sigma^2 penalty; the constant 2*pi term is
dropped. Hard (point-labeled) and soft (propagated) pixels are balanced
by count-normalized weights, the per-variable terms combine through the
alpha weights and a per-sample inverse-density weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossWeights:
    """Balancing and combination weights for one training sample."""

    lambda_h: float = 1.0
    lambda_s: float = 0.0
    lambda_reg: dict = field(default_factory=dict)  # per variable
    alpha: tuple = (1.0, 1.0, 1.0)
    sample_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_h <= 0:
            raise ValueError(f"lambda_h must be > 0, got {self.lambda_h}")
        if self.lambda_s < 0:
            raise ValueError(f"lambda_s must be >= 0, got {self.lambda_s}")
        if any(a < 0 for a in self.alpha):
            raise ValueError(f"alpha weights must be >= 0, got {self.alpha}")


def _check_sigma(sigma: np.ndarray, fixed_sigma: bool) -> None:
    if not fixed_sigma and np.any(sigma <= 0):
        raise ValueError("sigma must be positive everywhere when not fixed")


def nll_map(target: np.ndarray, pred: np.ndarray, sigma=None, lam_reg: float = 0.0,
            fixed_sigma: bool = False) -> np.ndarray:
    """Per-pixel negative log likelihood map.

    With fixed_sigma the sigma argument is ignored and sigma == 1, which
    reduces the map to 0.5 * residual^2 (plus the constant lam_reg).
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    resid2 = np.square(target - pred)
    if fixed_sigma:
        return 0.5 * resid2 + lam_reg
    if sigma is None:
        raise ValueError("sigma is required when fixed_sigma is false")
    if sigma.shape != target.shape:
        raise ValueError(f"sigma shape {sigma.shape} does not match target {target.shape}")
    _check_sigma(sigma, fixed_sigma)
    var = np.square(sigma)
    return 0.5 * (resid2 / var + np.log(var)) + lam_reg * var


def nll_grads(target: np.ndarray, pred: np.ndarray, sigma=None, lam_reg: float = 0.0,
              fixed_sigma: bool = False) -> tuple:
    """Analytic (d/dpred, d/dsigma) of nll_map; d/dsigma is None when fixed."""
    if fixed_sigma:
        return pred - target, None
    _check_sigma(sigma, fixed_sigma)
    resid = target - pred
    grad_pred = -resid / np.square(sigma)
    grad_sigma = -np.square(resid) / sigma ** 3 + 1.0 / sigma + 2.0 * lam_reg * sigma
    return grad_pred, grad_sigma


def balance_weight_map(mask: np.ndarray, n_hard: int, n_soft: int,
                       lambda_h: float, lambda_s: float) -> np.ndarray:
    """Per-pixel weights lambda_h/n_h on hard pixels, lambda_s/n_s on soft."""
    if n_hard < 1:
        raise ValueError("sample has no hard pixels; skipping (needs >= 1 labeled pixel)")
    m = mask.astype(np.float64)
    w = (lambda_h / n_hard) * m
    if n_soft > 0 and lambda_s > 0:
        w = w + (lambda_s / n_soft) * (1.0 - m)
    return w


def balance(loss_map: np.ndarray, mask: np.ndarray, n_hard: int, n_soft: int,
            lambda_h: float = 1.0, lambda_s: float = 0.0) -> float:
    """Count-balanced reduction of a per-pixel loss map to a scalar."""
    if loss_map.shape != mask.shape:
        raise ValueError(f"loss map shape {loss_map.shape} does not match mask {mask.shape}")
    w = balance_weight_map(mask, n_hard, n_soft, lambda_h, lambda_s)
    return float(np.sum(w * np.asarray(loss_map, dtype=np.float64)))


def soft_weight_schedule(epoch: int, initial_epochs: int, total_epochs: int,
                         start: float = 1.0, mid: float = 1e-3, end: float = 1e-2) -> float:
    """Piecewise geometric soft-label weight over the training epochs.

    Decays start -> mid across the initial epochs, then rises mid -> end
    across the remaining ones; both legs interpolate in log space.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if not 0 < initial_epochs <= total_epochs:
        raise ValueError(f"initial_epochs {initial_epochs} outside (0, {total_epochs}]")
    if epoch <= initial_epochs:
        frac = epoch / initial_epochs
        return float(start * (mid / start) ** frac)
    last = total_epochs - 1
    if last == initial_epochs:
        return float(end)
    frac = (epoch - initial_epochs) / (last - initial_epochs)
    return float(mid * (end / mid) ** frac)


def total_loss(balanced: dict, alpha=None, sample_weight: float = 1.0) -> float:
    """alpha-weighted sum of per-variable balanced losses times sample weight.

    `balanced` maps variable name to scalar; iteration order fixes the
    pairing with alpha.
    """
    names = list(balanced)
    if alpha is None:
        alpha = (1.0,) * len(names)
    if len(alpha) != len(names):
        raise ValueError(f"alpha has {len(alpha)} entries for {len(names)} variables")
    acc = 0.0
    for a, name in zip(alpha, names):
        if a < 0:
            raise ValueError(f"alpha weights must be >= 0, got {a}")
        acc += a * balanced[name]
    return float(sample_weight * acc)


def optimal_sigma_sq(residual: float, lam_reg: float) -> float:
    """Per-pixel argmin of the regularized NLL over sigma^2, closed form.

    Setting the sigma derivative to zero gives
    2*lam*s^2 + s = r^2 with s = sigma^2; the positive root follows.
    """
    r2 = residual * residual
    if lam_reg == 0.0:
        return r2
    return (-1.0 + math.sqrt(1.0 + 8.0 * lam_reg * r2)) / (4.0 * lam_reg)
