"""Compact strided-conv encoder, feature-pyramid decoder, and 1x1-conv
prediction heads with per-stage freezing and head extension.

The network maps a (13, H, W) tile to per-variable value maps and
strictly positive uncertainty maps at input resolution. All parameters
live in a flat name -> array dict so the optimizer, freeze masks, and
checkpoints can treat tensors uniformly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import (
    AdamState,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d,
    conv2d_backward,
    glorot_uniform,
    relu,
    relu_backward,
    softplus,
    softplus_backward,
)

CHECKPOINT_MAGIC = b"CRNET001"


class Stage(Enum):
    """Training stages determining which tensors the optimizer may touch."""

    STAGE1 = "stage1"        # everything trainable
    STAGE2 = "stage2"        # value heads only
    STAGE3 = "stage3"        # sigma heads only
    FINETUNE_RH = "finetune_rh"  # extended heads only


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 13
    encoder_channels: tuple = (16, 32, 64)
    decoder_feature_dim: int = 32
    head_hidden_dims: tuple = (32, 32, 1)
    value_heads: tuple = ("agbd", "ch", "cc")
    n_sigma_heads: int = 3
    output_scales: tuple = ()  # ((head_name, scale), ...) applied to final maps

    def __post_init__(self):
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if len(self.encoder_channels) < 2:
            raise ValueError("encoder needs at least 2 levels")
        if self.decoder_feature_dim <= 0:
            raise ValueError("decoder_feature_dim must be positive")
        if self.n_sigma_heads > len(self.value_heads):
            raise ValueError(
                f"{self.n_sigma_heads} sigma heads exceed {len(self.value_heads)} value heads")
        if len(self.head_hidden_dims) < 1 or self.head_hidden_dims[-1] != 1:
            raise ValueError("head dims must end with a single output map")
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "head_hidden_dims", tuple(self.head_hidden_dims))
        object.__setattr__(self, "value_heads", tuple(self.value_heads))
        object.__setattr__(self, "output_scales", tuple(tuple(p) for p in self.output_scales))

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def sigma_heads(self) -> tuple:
        return tuple("sigma_" + v for v in self.value_heads[: self.n_sigma_heads])


@dataclass
class Prediction:
    """Per-variable value maps and (positive) uncertainty maps, (H, W)."""

    values: dict
    sigmas: dict


@dataclass
class NetworkParams:
    config: NetworkConfig
    tensors: dict
    freeze_mask: dict  # name -> True means frozen for the current stage
    opt: AdamState
    extended_heads: tuple = ()
    scales: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def trainable_names(self) -> list:
        return [n for n in sorted(self.tensors) if not self.freeze_mask[n]]


def _tensor_shapes(config: NetworkConfig, heads: tuple | None = None) -> dict:
    """Name -> shape map for the base network plus the given value heads."""
    shapes = {}
    prev = config.input_channels
    for i, c in enumerate(config.encoder_channels):
        shapes[f"enc{i}a_w"] = (c, prev, 3, 3)
        shapes[f"enc{i}a_b"] = (c,)
        shapes[f"enc{i}b_w"] = (c, c, 3, 3)
        shapes[f"enc{i}b_b"] = (c,)
        prev = c
    d = config.decoder_feature_dim
    src = config.encoder_channels[-1]
    for l in range(config.levels - 2, -1, -1):
        shapes[f"dec{l}up_w"] = (d, src, 2, 2)
        shapes[f"dec{l}up_b"] = (d,)
        shapes[f"dec{l}a_w"] = (d, d + config.encoder_channels[l], 3, 3)
        shapes[f"dec{l}a_b"] = (d,)
        shapes[f"dec{l}b_w"] = (d, d, 3, 3)
        shapes[f"dec{l}b_b"] = (d,)
        src = d
    if heads is None:
        heads = config.value_heads + config.sigma_heads
    for name in heads:
        prev = d
        for j, dim in enumerate(config.head_hidden_dims):
            shapes[f"head_{name}_{j}_w"] = (dim, prev, 1, 1)
            shapes[f"head_{name}_{j}_b"] = (dim,)
            prev = dim
    return shapes


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form tensor element count without allocating anything."""
    return int(sum(int(np.prod(s)) for s in _tensor_shapes(config).values()))


def _init_tensors(shapes: dict, seed_key: list, dtype) -> dict:
    rng = np.random.default_rng(seed_key)
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            out_c, in_c, kh, kw = shape
            t = glorot_uniform(rng, shape, fan_in=in_c * kh * kw, fan_out=out_c * kh * kw)
            tensors[name] = t.astype(dtype)
    return tensors


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> NetworkParams:
    """Glorot-initialized network; two builds from one seed are identical."""
    tensors = _init_tensors(_tensor_shapes(config), [seed, 0x6E70], dtype)
    params = NetworkParams(
        config=config,
        tensors=tensors,
        freeze_mask={n: False for n in tensors},
        opt=AdamState(),
        scales=dict(config.output_scales),
    )
    return params


def extend_heads(params: NetworkParams, n_new: int, seed: int,
                 names: list | None = None, output_scale: float = 1.0) -> NetworkParams:
    """Add freshly initialized value heads; existing tensors are untouched."""
    if n_new <= 0:
        raise ValueError(f"n_new must be positive, got {n_new}")
    if names is None:
        names = [f"ext{i}" for i in range(n_new)]
    if len(names) != n_new:
        raise ValueError(f"{len(names)} names for {n_new} new heads")
    clash = set(names) & (set(params.config.value_heads) | set(params.extended_heads))
    if clash:
        raise ValueError(f"head names already in use: {sorted(clash)}")
    dtype = next(iter(params.tensors.values())).dtype
    shapes = {}
    d = params.config.decoder_feature_dim
    for name in names:
        prev = d
        for j, dim in enumerate(params.config.head_hidden_dims):
            shapes[f"head_{name}_{j}_w"] = (dim, prev, 1, 1)
            shapes[f"head_{name}_{j}_b"] = (dim,)
            prev = dim
    new = _init_tensors(shapes, [seed, 0xE27E], dtype)
    params.tensors.update(new)
    params.freeze_mask.update({n: False for n in new})
    params.extended_heads = params.extended_heads + tuple(names)
    for name in names:
        params.scales[name] = output_scale
    return params


def set_freeze(params: NetworkParams, stage: Stage,
               variables: tuple | None = None) -> NetworkParams:
    """Stage freeze policy; `variables` narrows stage 2/3 to named heads."""
    cfg = params.config

    def head_tensors(head_names):
        return {n for n in params.tensors
                if any(n.startswith(f"head_{h}_") for h in head_names)}

    if stage is Stage.STAGE1:
        trainable = set(params.tensors)
    elif stage is Stage.STAGE2:
        heads = tuple(variables) if variables else cfg.value_heads
        unknown = set(heads) - set(cfg.value_heads)
        if unknown:
            raise ValueError(f"unknown value heads: {sorted(unknown)}")
        trainable = head_tensors(heads)
    elif stage is Stage.STAGE3:
        heads = tuple("sigma_" + v for v in (variables or cfg.value_heads[: cfg.n_sigma_heads]))
        unknown = set(heads) - set(cfg.sigma_heads)
        if unknown:
            raise ValueError(f"unknown sigma heads: {sorted(unknown)}")
        trainable = head_tensors(heads)
    elif stage is Stage.FINETUNE_RH:
        if not params.extended_heads:
            raise ValueError("no extended heads to fine-tune; call extend_heads first")
        trainable = head_tensors(params.extended_heads)
    else:
        raise ValueError(f"unknown stage {stage!r}")

    for name in params.tensors:
        params.freeze_mask[name] = name not in trainable
    return params


def _check_input(config: NetworkConfig, x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[0] != config.input_channels:
        raise ValueError(
            f"input must be ({config.input_channels}, H, W), got {x.shape}")
    div = 2 ** (config.levels - 1)
    if x.shape[1] % div or x.shape[2] % div:
        raise ValueError(
            f"spatial extents {x.shape[1:]} must be divisible by {div}")


def _encoder_decoder_forward(params: NetworkParams, x: np.ndarray) -> tuple:
    t = params.tensors
    cfg = params.config
    cache = {"x": x, "enc": [], "feats": [], "dec": []}
    h = x
    for i in range(cfg.levels):
        stride = 1 if i == 0 else 2
        za = conv2d(h, t[f"enc{i}a_w"], t[f"enc{i}a_b"], stride=stride, padding=1)
        a = relu(za)
        zb = conv2d(a, t[f"enc{i}b_w"], t[f"enc{i}b_b"], padding=1)
        f = relu(zb)
        cache["enc"].append((h, za, a, zb))
        cache["feats"].append(f)
        h = f
    out = cache["feats"][-1]
    for l in range(cfg.levels - 2, -1, -1):
        up_in = out
        up = bilinear_upsample2x(up_in)
        # 2x2 kernel keeps extents with one-sided (bottom/right) padding
        zu = conv2d(up, t[f"dec{l}up_w"], t[f"dec{l}up_b"], padding=(0, 1, 0, 1))
        u = relu(zu)
        cat = np.concatenate([u, cache["feats"][l]], axis=0)
        za = conv2d(cat, t[f"dec{l}a_w"], t[f"dec{l}a_b"], padding=1)
        a = relu(za)
        zb = conv2d(a, t[f"dec{l}b_w"], t[f"dec{l}b_b"], padding=1)
        out = relu(zb)
        cache["dec"].append((l, up_in, up, zu, cat, za, a, zb))
    return out, cache


def _head_specs(params: NetworkParams) -> list:
    cfg = params.config
    specs = [(v, v, "relu") for v in cfg.value_heads + params.extended_heads]
    specs += [("sigma_" + v, v, "softplus") for v in cfg.value_heads[: cfg.n_sigma_heads]]
    return specs


def _heads_forward(params: NetworkParams, feats: np.ndarray) -> tuple:
    t = params.tensors
    n = len(params.config.head_hidden_dims)
    values, sigmas, hcache = {}, {}, {}
    for tensor_head, var, final in _head_specs(params):
        h = feats
        steps = []
        for j in range(n):
            z = conv2d(h, t[f"head_{tensor_head}_{j}_w"], t[f"head_{tensor_head}_{j}_b"])
            steps.append((h, z))
            if j < n - 1:
                h = relu(z)
            else:
                h = relu(z) if final == "relu" else softplus(z)
        hcache[tensor_head] = steps
        out = h[0] * params.scales.get(tensor_head, 1.0)
        (values if final == "relu" else sigmas)[var] = out
    return Prediction(values, sigmas), hcache


def forward_features(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Final decoder feature map (D, H, W) at input resolution."""
    _check_input(params.config, x)
    out, _ = _encoder_decoder_forward(params, x)
    return out


def heads_forward(params: NetworkParams, feats: np.ndarray) -> Prediction:
    """Prediction from a precomputed feature map (frozen-backbone path)."""
    pred, _ = _heads_forward(params, feats)
    return pred


def forward(params: NetworkParams, x: np.ndarray) -> Prediction:
    return heads_forward(params, forward_features(params, x))


def forward_cached(params: NetworkParams, x: np.ndarray) -> tuple:
    """Prediction plus the activation cache needed by backward()."""
    _check_input(params.config, x)
    feats, cache = _encoder_decoder_forward(params, x)
    pred, hcache = _heads_forward(params, feats)
    cache["features"] = feats
    cache["heads"] = hcache
    return pred, cache


def heads_forward_cached(params: NetworkParams, feats: np.ndarray) -> tuple:
    """heads_forward plus the cache accepted by heads_backward (for
    training prediction heads against a frozen, precomputed backbone)."""
    pred, hcache = _heads_forward(params, feats)
    return pred, {"features": feats, "heads": hcache}


def _heads_backward(params: NetworkParams, hcache: dict, feats: np.ndarray,
                    grad_values: dict, grad_sigmas: dict) -> tuple:
    t = params.tensors
    n = len(params.config.head_hidden_dims)
    grads = {}
    gfeats = np.zeros_like(feats)
    for tensor_head, var, final in _head_specs(params):
        gmap = (grad_values if final == "relu" else grad_sigmas).get(var)
        if gmap is None:
            continue
        g = np.asarray(gmap)[None] * params.scales.get(tensor_head, 1.0)
        steps = hcache[tensor_head]
        for j in range(n - 1, -1, -1):
            h_in, z = steps[j]
            act = final if j == n - 1 else "relu"
            g = (relu_backward(g, z) if act == "relu" else softplus_backward(g, z)).grad_input
            lg = conv2d_backward(g, h_in, t[f"head_{tensor_head}_{j}_w"])
            grads[f"head_{tensor_head}_{j}_w"] = lg.grad_params[0]
            grads[f"head_{tensor_head}_{j}_b"] = lg.grad_params[1]
            g = lg.grad_input
        gfeats += g
    return grads, gfeats


def heads_backward(params: NetworkParams, cache: dict,
                   grad_values: dict, grad_sigmas: dict) -> tuple:
    """Head-tensor gradients plus the gradient w.r.t. the feature map."""
    return _heads_backward(params, cache["heads"], cache["features"],
                           grad_values, grad_sigmas)


def backward(params: NetworkParams, cache: dict,
             grad_values: dict, grad_sigmas: dict) -> dict:
    """Gradients of a scalar loss w.r.t. every tensor on the used paths.

    grad_values/grad_sigmas hold dLoss/dmap for any subset of the output
    maps; heads without a provided gradient contribute nothing and their
    tensors are absent from the result.
    """
    t = params.tensors
    cfg = params.config
    grads, g = _heads_backward(params, cache["heads"], cache["features"],
                               grad_values, grad_sigmas)

    d = cfg.decoder_feature_dim
    gfeat_levels = [np.zeros_like(f) for f in cache["feats"]]
    for l, up_in, up, zu, cat, za, a, zb in reversed(cache["dec"]):
        g = relu_backward(g, zb).grad_input
        lg = conv2d_backward(g, a, t[f"dec{l}b_w"], padding=1)
        grads[f"dec{l}b_w"] = lg.grad_params[0]
        grads[f"dec{l}b_b"] = lg.grad_params[1]
        g = relu_backward(lg.grad_input, za).grad_input
        lg = conv2d_backward(g, cat, t[f"dec{l}a_w"], padding=1)
        grads[f"dec{l}a_w"] = lg.grad_params[0]
        grads[f"dec{l}a_b"] = lg.grad_params[1]
        gcat = lg.grad_input
        gfeat_levels[l] += gcat[d:]
        g = relu_backward(gcat[:d], zu).grad_input
        lg = conv2d_backward(g, up, t[f"dec{l}up_w"], padding=(0, 1, 0, 1))
        grads[f"dec{l}up_w"] = lg.grad_params[0]
        grads[f"dec{l}up_b"] = lg.grad_params[1]
        g = bilinear_upsample2x_backward(lg.grad_input, up_in.shape).grad_input
    gfeat_levels[-1] += g

    gnext = None
    for i in range(cfg.levels - 1, -1, -1):
        h_in, za, a, zb = cache["enc"][i]
        g = gfeat_levels[i] if gnext is None else gfeat_levels[i] + gnext
        g = relu_backward(g, zb).grad_input
        lg = conv2d_backward(g, a, t[f"enc{i}b_w"], padding=1)
        grads[f"enc{i}b_w"] = lg.grad_params[0]
        grads[f"enc{i}b_b"] = lg.grad_params[1]
        g = relu_backward(lg.grad_input, za).grad_input
        stride = 1 if i == 0 else 2
        lg = conv2d_backward(g, h_in, t[f"enc{i}a_w"], stride=stride, padding=1)
        grads[f"enc{i}a_w"] = lg.grad_params[0]
        grads[f"enc{i}a_b"] = lg.grad_params[1]
        gnext = lg.grad_input
    return grads


def receptive_field_radius(config: NetworkConfig) -> int:
    """Conservative input-pixel radius influencing one output pixel."""
    r, s = 0, 1
    r += 2  # level 0: two 3x3 convs at stride 1
    for _ in range(1, config.levels):
        r += s       # strided 3x3
        s *= 2
        r += s       # second 3x3
    for _ in range(config.levels - 1):
        r += s       # bilinear mixes one coarse step
        s //= 2
        r += s       # 2x2 conv
        r += 2 * s   # two 3x3 convs
    return r


def save_checkpoint(params: NetworkParams, path) -> None:
    """Versioned container: JSON header + little-endian float32 tensors."""
    names = sorted(params.tensors)
    opt_names = sorted(set(params.opt.m) & set(params.tensors))
    header = {
        "config": {
            "input_channels": params.config.input_channels,
            "encoder_channels": list(params.config.encoder_channels),
            "decoder_feature_dim": params.config.decoder_feature_dim,
            "head_hidden_dims": list(params.config.head_hidden_dims),
            "value_heads": list(params.config.value_heads),
            "n_sigma_heads": params.config.n_sigma_heads,
            "output_scales": [list(p) for p in params.config.output_scales],
        },
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
        "freeze": {n: bool(params.freeze_mask[n]) for n in names},
        "extended": list(params.extended_heads),
        "scales": {k: float(v) for k, v in sorted(params.scales.items())},
        "opt": {"names": opt_names, "step": int(params.opt.step)},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes())
        for n in opt_names:
            f.write(np.ascontiguousarray(params.opt.m[n], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(params.opt.v[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        c = header["config"]
        config = NetworkConfig(
            input_channels=c["input_channels"],
            encoder_channels=tuple(c["encoder_channels"]),
            decoder_feature_dim=c["decoder_feature_dim"],
            head_hidden_dims=tuple(c["head_hidden_dims"]),
            value_heads=tuple(c["value_heads"]),
            n_sigma_heads=c["n_sigma_heads"],
            output_scales=tuple(tuple(p) for p in c["output_scales"]),
        )
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            data = np.frombuffer(f.read(4 * count), dtype="<f4")
            tensors[entry["name"]] = data.reshape(shape).astype(np.float32)
        opt = AdamState()
        opt.step = int(header["opt"]["step"])
        for n in header["opt"]["names"]:
            count = tensors[n].size
            opt.m[n] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(
                tensors[n].shape).astype(np.float32)
            opt.v[n] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(
                tensors[n].shape).astype(np.float32)
    return NetworkParams(
        config=config,
        tensors=tensors,
        freeze_mask={n: bool(header["freeze"][n]) for n in tensors},
        opt=opt,
        extended_heads=tuple(header["extended"]),
        scales={k: float(v) for k, v in header["scales"].items()},
    )
