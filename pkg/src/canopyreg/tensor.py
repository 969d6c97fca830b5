"""Dense-array layer primitives with explicit analytic backward passes.

Arrays are plain numpy ndarrays in channel-height-width layout. float32 is
the training dtype; every op equally accepts float64, which the gradient
checks rely on for headroom. All functions are pure and deterministic:
given the same inputs (and the same RNG for the initializers) they return
bitwise identical results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# (top, bottom, left, right); a plain int means the same pad on all sides
Padding = "int | tuple[int, int, int, int]"


@dataclass
class LayerGrad:
    """Gradients produced by one layer's backward pass.

    grad_params is ordered as the layer's parameters appear in its forward
    signature, e.g. (grad_kernel, grad_bias) for a convolution.
    """

    grad_input: np.ndarray
    grad_params: tuple = ()


def _pad4(padding) -> tuple:
    if isinstance(padding, (int, np.integer)):
        if padding < 0:
            raise ValueError(f"padding must be non-negative, got {padding}")
        return (int(padding),) * 4
    pads = tuple(int(p) for p in padding)
    if len(pads) != 4 or any(p < 0 for p in pads):
        raise ValueError(f"padding must be an int or 4 non-negative ints, got {padding!r}")
    return pads


def _conv_checks(x: np.ndarray, kernel: np.ndarray, stride: int, padding) -> tuple:
    if x.ndim != 3:
        raise ValueError(f"conv2d input must be (C, H, W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be (O, C, kh, kw), got shape {kernel.shape}")
    o, kc, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 2, 3):
        raise ValueError(f"kernel must be square with size in {{1, 2, 3}}, got {kh}x{kw}")
    if kc != x.shape[0]:
        raise ValueError(
            f"kernel expects {kc} input channels but input has {x.shape[0]} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    pt, pb, pl, pr = _pad4(padding)
    ho = (x.shape[1] + pt + pb - kh) // stride + 1
    wo = (x.shape[2] + pl + pr - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {(pt, pb, pl, pr)}"
        )
    return (pt, pb, pl, pr), ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias=None, *, stride: int = 1, padding=0) -> np.ndarray:
    """Cross-correlate x (C,H,W) with kernel (O,C,kh,kw) into (O,H',W')."""
    (pt, pb, pl, pr), ho, wo = _conv_checks(x, kernel, stride, padding)
    o, _, kh, kw = kernel.shape
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = kernel.reshape(o, -1) @ cols
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError(f"bias must have shape ({o},), got {bias.shape}")
        out = out + bias[:, None]
    return out.reshape(o, ho, wo)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, *, stride: int = 1, padding=0) -> LayerGrad:
    """Analytic gradients of conv2d w.r.t. input, kernel and bias."""
    (pt, pb, pl, pr), ho, wo = _conv_checks(x, kernel, stride, padding)
    o, c, kh, kw = kernel.shape
    if grad_out.shape != (o, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output ({o}, {ho}, {wo})")
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    gmat = grad_out.reshape(o, -1)
    grad_kernel = (gmat @ cols.T).reshape(kernel.shape)
    grad_bias = gmat.sum(axis=1)
    dcols = (kernel.reshape(o, -1).T @ gmat).reshape(c, kh, kw, ho, wo)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    h, w = x.shape[1], x.shape[2]
    grad_input = dxp[:, pt : pt + h, pl : pl + w]
    return LayerGrad(grad_input=grad_input, grad_params=(grad_kernel, grad_bias))


@lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype_name: str) -> np.ndarray:
    """(2n, n) interpolation matrix: half-pixel source centers, edges clamped."""
    m = np.zeros((2 * n, n), dtype=np.dtype(dtype_name))
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        f = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        m[o, lo] += 1.0 - f
        m[o, hi] += f
    m.setflags(write=False)
    return m


def bilinear_upsample2x(x: np.ndarray) -> np.ndarray:
    """Double both spatial extents of x (C,H,W) by bilinear interpolation."""
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError(f"upsample input must be (C, H, W) with positive extents, got {x.shape}")
    mr = _upsample_matrix(x.shape[1], x.dtype.name)
    mc = _upsample_matrix(x.shape[2], x.dtype.name)
    return np.einsum("ih,chw,jw->cij", mr, x, mc, optimize=True)


def bilinear_upsample2x_backward(grad_out: np.ndarray, input_shape: tuple) -> LayerGrad:
    c, h, w = input_shape
    if grad_out.shape != (c, 2 * h, 2 * w):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output ({c}, {2*h}, {2*w})")
    mr = _upsample_matrix(h, grad_out.dtype.name)
    mc = _upsample_matrix(w, grad_out.dtype.name)
    grad_input = np.einsum("ih,cij,jw->chw", mr, grad_out, mc, optimize=True)
    return LayerGrad(grad_input=grad_input)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> LayerGrad:
    return LayerGrad(grad_input=grad_out * (x > 0))


def softplus(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) to avoid overflow."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus_backward(grad_out: np.ndarray, x: np.ndarray) -> LayerGrad:
    # d/dx softplus = sigmoid(x); same stabilized form
    sig = np.empty_like(np.asarray(x, dtype=grad_out.dtype))
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    return LayerGrad(grad_input=grad_out * sig)


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    """Uniform init on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class AdamState:
    """First/second moment estimates per parameter name plus the step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple:
    """One bias-corrected Adam update, in place on the arrays in `params`.

    Only parameters present in `grads` are touched; a non-finite gradient
    aborts the whole step before any parameter changes.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient provided for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'; step aborted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.v[name] = v
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
