"""Staged trainer: role-swapped dense-target pretraining, per-variable
head fine-tuning on balanced subsets, uncertainty calibration, and RH
head extension.

Optimization runs in normalized target units (raw value divided by the
head's output scale) so all variables contribute at comparable magnitude
under equal alpha weights; logged metrics and predictions stay in raw
units. Every random draw derives from the config seed, so identical
configs reproduce identical checkpoints byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .losses import balance_weight_map, nll_grads, nll_map, soft_weight_schedule, total_loss
from .network import (
    NetworkConfig,
    NetworkParams,
    Prediction,
    Stage,
    backward,
    build_network,
    extend_heads,
    forward,
    forward_features,
    heads_backward,
    heads_forward_cached,
    forward_cached,
    save_checkpoint,
    set_freeze,
)
from .softlabels import LabelMap, hard_label_map, spectral_soft_labels, teacher_targets
from .synth import LCM_FLOOR_CM, PFT_CLASSES, RH_QUANTILES, make_default_strata
from .tensor import AdamState, adam_step
from .weighting import (
    DEFAULT_BIN_SPECS,
    FLOOR_REFERENCES,
    balanced_subset,
    fit_kde,
    inverse_pdf_weights,
)

TARGET_SCALES = {"agbd": 100.0, "ch": 1000.0, "cc": 50.0}
RH_SCALE = 1000.0  # cm, same order as canopy height
# soft anchor weight for the head fine-tuning stage (end value of the
# stage-1 schedule); keeps heads near their pretrained outputs off-point
STAGE2_SOFT_WEIGHT = 1e-2


def default_network_config() -> NetworkConfig:
    """Desk-scale network with raw-unit output scales on every head."""
    scales = []
    for v, s in TARGET_SCALES.items():
        scales.append((v, s))
        scales.append(("sigma_" + v, s))
    return NetworkConfig(output_scales=tuple(scales))


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss or gradient aborts training.

    `checkpoint` names the last parameter snapshot written before the
    divergent step, or None when no checkpoint directory was given.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 24
    stage2_epochs: int = 6
    stage3_epochs: int = 6
    rh_epochs: int = 1
    batch_size: int = 8
    warmup_fraction: float = 0.04
    lr_min: float = 1e-7
    lr_peak: float = 1e-4
    lr_peak_heads: float = 3e-3  # frozen-backbone stages move few weights, so larger steps
    initial_epochs: int = 8
    swap_extra_epochs: int = 8
    seed: int = 0
    stage: str = "stage1"
    lam_h: float = 1.0
    lam_s_override: float | None = None  # None follows soft_weight_schedule
    lam_reg: float = 1e-4
    stage3_rounds: int = 4
    coverage_target: float = 0.68
    val_improve_threshold: float = 0.01
    swap_enabled: bool = True
    alpha: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs", "rh_epochs",
                     "batch_size", "initial_epochs", "stage3_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.swap_extra_epochs < 0:
            raise ValueError(f"swap_extra_epochs must be >= 0, got {self.swap_extra_epochs}")
        if not self.lr_min < self.lr_peak:
            raise ValueError(f"lr_min {self.lr_min} must be below lr_peak {self.lr_peak}")
        if not self.lr_min < self.lr_peak_heads:
            raise ValueError(f"lr_min {self.lr_min} must be below lr_peak_heads {self.lr_peak_heads}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.initial_epochs > self.stage1_epochs:
            raise ValueError("initial_epochs cannot exceed stage1_epochs")
        if self.stage not in {s.value for s in Stage}:
            raise ValueError(f"unknown stage '{self.stage}'")
        object.__setattr__(self, "alpha", tuple(self.alpha))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "alpha" in d:
            d["alpha"] = tuple(d["alpha"])
        return cls(**d)


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from lr_min to lr_peak, then cosine decay to lr_min."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = max(1, round(config.warmup_fraction * total_steps))
    if step <= warmup:
        return config.lr_min + (config.lr_peak - config.lr_min) * step / warmup
    frac = (step - warmup) / (total_steps - 1 - warmup)
    return config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class RoleState:
    """Which of the two swapped networks currently generates targets.

    The teacher is "spectral" only before the first network has trained;
    afterwards it is always the previous iteration's student, whose
    weights stay untouched for the whole iteration.
    """

    net_a: NetworkParams | None = None
    net_b: NetworkParams | None = None
    current_teacher: str = "spectral"  # "spectral", "a", or "b"
    iteration: int = 0
    epochs_this_iteration: int = 0

    def teacher_net(self) -> NetworkParams | None:
        if self.current_teacher == "spectral":
            return None
        return self.net_a if self.current_teacher == "a" else self.net_b

    def student_slot(self) -> str:
        return "b" if self.current_teacher == "a" else "a"

    def promote(self, student: NetworkParams) -> None:
        """The finished student becomes the next iteration's teacher."""
        slot = self.student_slot()
        if slot == "a":
            self.net_a = student
        else:
            self.net_b = student
        self.current_teacher = slot
        self.iteration += 1


class TrainLog:
    """Append-only CSV training curve; rows also stay in memory."""

    COLUMNS = ("stage", "iteration", "epoch", "loss", "lr", "lambda_s", "val_mae", "coverage")

    def __init__(self, path=None):
        self.rows = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._fh.write(",".join(self.COLUMNS) + "\n")
            self._fh.flush()

    @staticmethod
    def _fmt(value) -> str:
        if value is None or value == "":
            return ""
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def row(self, **kw) -> None:
        unknown = set(kw) - set(self.COLUMNS)
        if unknown:
            raise ValueError(f"unknown log columns: {sorted(unknown)}")
        rec = {c: kw.get(c, "") for c in self.COLUMNS}
        self.rows.append(rec)
        if self._fh is not None:
            self._fh.write(",".join(self._fmt(rec[c]) for c in self.COLUMNS) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def tensor_checksum(params: NetworkParams, prefixes: tuple | None = None) -> str:
    """SHA-256 over the named tensors' bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name]).tobytes())
    return h.hexdigest()


def _point_value(point, variable: str) -> float:
    if variable == "ch":
        return float(point.ch)
    if variable.startswith("rh"):
        q = int(variable[2:])
        return float(point.rh[RH_QUANTILES.index(q)])
    return float(getattr(point, variable))


def predict_tile(params: NetworkParams, tile, clamp_cc: bool = True) -> Prediction:
    """Raw-unit prediction for one tile; CC is clamped to its valid range."""
    channels = tile.channels if hasattr(tile, "channels") else tile
    pred = forward(params, np.asarray(channels, dtype=np.float32))
    if clamp_cc and "cc" in pred.values:
        pred.values["cc"] = np.clip(pred.values["cc"], 0.0, 100.0)
    return pred


def point_mae(params: NetworkParams, tiles: list, variable: str = "agbd") -> float:
    """Mean absolute error against quality points, raw units."""
    errs = []
    for tile in tiles:
        pred = predict_tile(params, tile)
        m = pred.values[variable]
        for p in tile.quality_points():
            errs.append(abs(float(m[p.row, p.col]) - _point_value(p, variable)))
    if not errs:
        raise ValueError("no quality points to evaluate")
    return float(np.mean(errs))


def coverage_fraction(params: NetworkParams, tiles: list, variable: str = "agbd") -> float:
    """Fraction of quality points with |error| below one predicted sigma."""
    inside = total = 0
    for tile in tiles:
        pred = predict_tile(params, tile)
        vm, sm = pred.values[variable], pred.sigmas[variable]
        for p in tile.quality_points():
            z = abs(float(vm[p.row, p.col]) - _point_value(p, variable)) / float(sm[p.row, p.col])
            inside += z < 1.0
            total += 1
    if total == 0:
        raise ValueError("no quality points to evaluate")
    return inside / total


def fit_weight_table(tiles: list, variable: str = "agbd"):
    """Inverse-density sample weights from the tiles' quality points."""
    values = [_point_value(p, variable) for t in tiles for p in t.quality_points()]
    key = "ch" if variable.startswith("rh") else variable
    pdf = fit_kde(values, bin_spec=DEFAULT_BIN_SPECS[key], variable=variable)
    floor = FLOOR_REFERENCES[key]
    if variable.startswith("rh"):
        # lower quantiles never reach the canopy-top reference height, so
        # anchor the rare-tail weight inside this head's own support
        floor = min(floor, float(np.percentile(values, 99.0)))
    return inverse_pdf_weights(pdf, floor, variable)


@dataclass
class _Sample:
    """One sub-tile ready for the optimizer: inputs, normalized targets."""

    x: np.ndarray           # (13, h, w) channels or (D, h, w) features
    targets: dict           # variable -> normalized target map
    mask: np.ndarray
    n_hard: int
    n_soft: int
    weight: float = 1.0
    weights: dict | None = None  # per-head weights (RH fine-tune)


def _quadrant_slices(h: int, w: int) -> list:
    h2, w2 = h // 2, w // 2
    return [
        (slice(0, h2), slice(0, w2)),
        (slice(0, h2), slice(w2, w)),
        (slice(h2, h), slice(0, w2)),
        (slice(h2, h), slice(w2, w)),
    ]


def _scale_of(params_or_cfg, variable: str) -> float:
    scales = params_or_cfg.scales if hasattr(params_or_cfg, "scales") else dict(params_or_cfg.output_scales)
    return float(scales.get(variable, 1.0))


def _split_samples(x_full: np.ndarray, lmap: LabelMap, scales: dict,
                   weight_table=None, weight_tables: dict | None = None) -> list:
    """Quadrant sub-tiles; ones without any hard pixel are dropped.

    The scalar sample weight is the table lookup of the quadrant's mean
    hard value for the table's variable; with per-head tables a weight is
    recorded for each head instead.
    """
    h, w = x_full.shape[1:]
    out = []
    for rs, cs in _quadrant_slices(h, w):
        mask = lmap.hard_mask[rs, cs]
        n_hard = int(mask.sum())
        if n_hard == 0:
            continue
        sel = mask == 1
        targets = {v: lmap.targets[v][rs, cs] / scales.get(v, 1.0) for v in lmap.targets}
        weight = 1.0
        per_head = None
        if weight_table is not None:
            mean_raw = float(lmap.targets[weight_table.variable][rs, cs][sel].mean())
            weight = float(weight_table.lookup(mean_raw))
        if weight_tables is not None:
            per_head = {}
            for v, table in weight_tables.items():
                mean_raw = float(lmap.targets[v][rs, cs][sel].mean())
                per_head[v] = float(table.lookup(mean_raw))
        out.append(_Sample(x_full[:, rs, cs], targets, mask, n_hard,
                           mask.size - n_hard, weight, per_head))
    return out


def _name_tag(name: str) -> int:
    """Stable per-name RNG stream tag, independent of training order."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def _apply_batch(params: NetworkParams, opt: AdamState, grads_list: list, lr: float) -> None:
    """Average the per-sample gradients and take one optimizer step.

    Raises if any gradient touches a tensor the current freeze mask
    protects; the whole batch is rejected before any update.
    """
    acc = {}
    for grads in grads_list:
        for name, g in grads.items():
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g.copy()
    frozen = [n for n in acc if params.freeze_mask.get(n, True)]
    if frozen:
        raise RuntimeError(f"gradients for frozen tensors: {sorted(frozen)[:4]}")
    inv = 1.0 / len(grads_list)
    for name in acc:
        acc[name] *= inv
    adam_step({n: params.tensors[n] for n in acc}, acc, opt, lr)


def _stage1_loss_grads(student: NetworkParams, sample: _Sample, lam_s: float,
                       config: TrainConfig) -> tuple:
    variables = student.config.value_heads
    pred, cache = forward_cached(student, sample.x)
    wmap = balance_weight_map(sample.mask, sample.n_hard, sample.n_soft,
                              config.lam_h, lam_s)
    parts, grad_values = {}, {}
    for v in variables:
        s = _scale_of(student, v)
        p_n = pred.values[v] / s
        t_n = sample.targets[v]
        parts[v] = float(np.sum(wmap * nll_map(t_n, p_n, fixed_sigma=True)))
        gp, _ = nll_grads(t_n, p_n, fixed_sigma=True)
        grad_values[v] = (gp * wmap * (sample.weight / s)).astype(np.float32)
    for a, v in zip(config.alpha, variables):
        if a != 1.0:
            grad_values[v] *= np.float32(a)
    loss = total_loss(parts, config.alpha, sample.weight)
    grads = backward(student, cache, grad_values, {})
    return loss, grads


def _save(params: NetworkParams, checkpoint_dir, name: str):
    if checkpoint_dir is None:
        return None
    path = os.path.join(checkpoint_dir, name)
    save_checkpoint(params, path)
    return path


def train_stage1(train_tiles: list, config: TrainConfig, val_tiles: list | None = None,
                 *, network_config: NetworkConfig | None = None, weight_table=None,
                 log: TrainLog | None = None, checkpoint_dir=None) -> NetworkParams:
    """Dense-target pretraining with periodic teacher/student role swaps.

    Iteration 0 trains against spectral-similarity targets; afterwards a
    fresh student trains against the frozen previous student's predicted
    maps, for swap_extra_epochs longer each iteration. Stops when the
    validation MAE improves by less than val_improve_threshold between
    iterations or the stage epoch budget runs out, and returns the
    best-validation student.
    """
    if not train_tiles:
        raise ValueError("train_stage1 needs at least one tile")
    net_cfg = network_config if network_config is not None else default_network_config()
    if len(config.alpha) != len(net_cfg.value_heads):
        raise ValueError(f"{len(config.alpha)} alpha weights for {len(net_cfg.value_heads)} heads")
    variables = net_cfg.value_heads
    scales = dict(net_cfg.output_scales)
    log = log if log is not None else TrainLog()
    table = weight_table if weight_table is not None else fit_weight_table(train_tiles, "agbd")
    eval_tiles = val_tiles if val_tiles else train_tiles

    role = RoleState()
    budget = config.stage1_epochs
    global_epoch = 0
    last_good = None
    best = None  # (val_mae, params)
    prev_val = None

    while budget > 0:
        k = role.iteration
        epochs_k = config.initial_epochs + k * config.swap_extra_epochs
        if not config.swap_enabled:
            epochs_k = budget
        epochs_k = min(epochs_k, budget)

        teacher = role.teacher_net()
        if teacher is None:
            hard_only = config.lam_s_override == 0.0
            maps = []
            for t in train_tiles:
                pts = t.quality_points()
                if hard_only:
                    maps.append(hard_label_map(pts, t.channels.shape[1:], variables))
                else:
                    maps.append(spectral_soft_labels(t.channels[:6], pts, variables))
        else:
            teacher_sum = tensor_checksum(teacher)
            maps = [teacher_targets(teacher, t, variables) for t in train_tiles]

        samples = []
        for tile, lmap in zip(train_tiles, maps):
            x = np.asarray(tile.channels, dtype=np.float32)
            samples.extend(_split_samples(x, lmap, scales, weight_table=table))
        if not samples:
            raise ValueError("no sub-tiles with hard pixels in the training set")

        student = build_network(net_cfg, seed=config.seed * 100003 + 1009 * k)
        set_freeze(student, Stage.STAGE1)
        role.epochs_this_iteration = epochs_k

        steps_per_epoch = math.ceil(len(samples) / config.batch_size)
        total_steps = epochs_k * steps_per_epoch
        step = 0
        for e in range(epochs_k):
            if config.lam_s_override is not None:
                lam_s = config.lam_s_override
            else:
                lam_s = soft_weight_schedule(min(global_epoch, config.stage1_epochs - 1),
                                             config.initial_epochs, config.stage1_epochs)
            rng = np.random.default_rng([config.seed, 0x51, k, e])
            order = rng.permutation(len(samples))
            epoch_loss = 0.0
            lr = config.lr_min
            try:
                for batch in _batches(order, config.batch_size):
                    lr = lr_schedule(step, total_steps, config)
                    grads_list = []
                    for i in batch:
                        loss, grads = _stage1_loss_grads(student, samples[int(i)], lam_s, config)
                        if not math.isfinite(loss):
                            raise TrainingDiverged(
                                f"non-finite loss at iteration {k} epoch {e}", last_good)
                        epoch_loss += loss
                        grads_list.append(grads)
                    _apply_batch(student, student.opt, grads_list, lr)
                    step += 1
            except ValueError as err:
                raise TrainingDiverged(f"optimizer aborted: {err}", last_good) from err
            log.row(stage="stage1", iteration=k, epoch=global_epoch,
                    loss=epoch_loss / len(samples), lr=lr, lambda_s=lam_s)
            global_epoch += 1
        budget -= epochs_k

        if teacher is not None and tensor_checksum(teacher) != teacher_sum:
            raise RuntimeError("teacher parameters changed within an iteration")

        val = point_mae(student, eval_tiles, variables[0])
        log.row(stage="stage1", iteration=k, epoch=global_epoch - 1, val_mae=val)
        last_good = _save(student, checkpoint_dir, f"stage1_iter{k}.ckpt") or last_good
        if best is None or val < best[0]:
            best = (val, student)
        role.promote(student)
        if not config.swap_enabled:
            break
        if prev_val is not None and (prev_val - val) < config.val_improve_threshold * prev_val:
            break
        prev_val = val

    params = best[1]
    _save(params, checkpoint_dir, "stage1.ckpt")
    return params


def _feature_samples(params: NetworkParams, tiles: list, label_maps: list,
                     weight_table=None, weight_tables: dict | None = None) -> list:
    """Frozen-backbone sub-tiles: features are computed once per tile."""
    samples = []
    for tile, lmap in zip(tiles, label_maps):
        feats = forward_features(params, np.asarray(tile.channels, dtype=np.float32))
        samples.extend(_split_samples(feats, lmap, params.scales,
                                      weight_table=weight_table, weight_tables=weight_tables))
    return samples


def _run_head_epochs(params: NetworkParams, opt: AdamState, samples: list,
                     config: TrainConfig, epochs: int, seed_key: list,
                     sample_step, log: TrainLog, stage_label: str,
                     iteration: int = 0, lambda_s: float = 0.0,
                     last_good=None) -> None:
    """Shared epoch/batch loop for the frozen-backbone stages."""
    sched = replace(config, lr_peak=config.lr_peak_heads)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    for e in range(epochs):
        rng = np.random.default_rng(seed_key + [e])
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        lr = config.lr_min
        try:
            for batch in _batches(order, config.batch_size):
                lr = lr_schedule(step, total_steps, sched)
                grads_list = []
                for i in batch:
                    loss, grads = sample_step(samples[int(i)])
                    if not math.isfinite(loss):
                        raise TrainingDiverged(f"non-finite loss in {stage_label}", last_good)
                    epoch_loss += loss
                    grads_list.append(grads)
                _apply_batch(params, opt, grads_list, lr)
                step += 1
        except ValueError as err:
            raise TrainingDiverged(f"optimizer aborted: {err}", last_good) from err
        log.row(stage=stage_label, iteration=iteration, epoch=e,
                loss=epoch_loss / len(samples), lr=lr, lambda_s=lambda_s)


def train_stage2(params: NetworkParams, datasets: dict, config: TrainConfig,
                 val_tiles: list | None = None, *, log: TrainLog | None = None,
                 checkpoint_dir=None) -> NetworkParams:
    """Fine-tune each value head on its balanced subset, backbone frozen.

    Targets are the current network's own maps with measured points
    overriding their pixels, so off-point pixels act as a weak anchor
    (weight STAGE2_SOFT_WEIGHT) while the re-weighted points drive the
    update. Heads are disjoint, so the outcome does not depend on the
    order the variables are processed in.
    """
    unknown = set(datasets) - set(params.config.value_heads)
    if unknown:
        raise ValueError(f"datasets for unknown heads: {sorted(unknown)}")
    log = log if log is not None else TrainLog()
    last_good = _save(params, checkpoint_dir, "stage2_init.ckpt")
    for v in sorted(datasets):
        tiles = datasets[v]
        if not tiles:
            raise ValueError(f"empty dataset for variable '{v}'")
        table = fit_weight_table(tiles, v)
        maps = [teacher_targets(params, t, variables=(v,)) for t in tiles]
        samples = _feature_samples(params, tiles, maps, weight_table=table)
        set_freeze(params, Stage.STAGE2, variables=(v,))
        opt = AdamState()
        scale = _scale_of(params, v)

        def sample_step(smp, v=v, scale=scale):
            pred, cache = heads_forward_cached(params, smp.x)
            p_n = pred.values[v] / scale
            wmap = balance_weight_map(smp.mask, smp.n_hard, smp.n_soft,
                                      config.lam_h, STAGE2_SOFT_WEIGHT)
            loss = float(np.sum(wmap * nll_map(smp.targets[v], p_n, fixed_sigma=True)))
            gp, _ = nll_grads(smp.targets[v], p_n, fixed_sigma=True)
            gv = (gp * wmap * (smp.weight / scale)).astype(np.float32)
            grads, _ = heads_backward(params, cache, {v: gv}, {})
            return loss * smp.weight, grads

        _run_head_epochs(params, opt, samples, config, config.stage2_epochs,
                         [config.seed, 0x52, _name_tag(v)], sample_step,
                         log, f"stage2:{v}", lambda_s=STAGE2_SOFT_WEIGHT,
                         last_good=last_good)
        if val_tiles:
            log.row(stage=f"stage2:{v}", epoch=config.stage2_epochs - 1,
                    val_mae=point_mae(params, val_tiles, v))
    _save(params, checkpoint_dir, "stage2.ckpt")
    return params


def train_stage3(params: NetworkParams, datasets: dict, config: TrainConfig,
                 val_tiles: list | None = None, *, log: TrainLog | None = None,
                 checkpoint_dir=None) -> NetworkParams:
    """Calibrate the sigma heads with the full likelihood plus lam_reg.

    Only measured pixels carry loss: a soft pixel's target would be the
    frozen value head's own output, whose zero residual would drive sigma
    to zero there. Each round retrains the sigma head from its incoming
    state under a candidate lam_reg, then the coverage on held-out points
    picks the best candidate (larger lam_reg shrinks sigma, lowering
    coverage).
    """
    heads = params.config.value_heads[: params.config.n_sigma_heads]
    unknown = set(datasets) - set(heads)
    if unknown:
        raise ValueError(f"datasets for heads without sigma: {sorted(unknown)}")
    log = log if log is not None else TrainLog()
    last_good = _save(params, checkpoint_dir, "stage3_init.ckpt")
    for v in sorted(datasets):
        tiles = datasets[v]
        if not tiles:
            raise ValueError(f"empty dataset for variable '{v}'")
        eval_tiles = val_tiles if val_tiles else tiles
        table = fit_weight_table(tiles, v)
        maps = [hard_label_map(t.quality_points(), t.channels.shape[1:], (v,)) for t in tiles]
        samples = _feature_samples(params, tiles, maps, weight_table=table)
        set_freeze(params, Stage.STAGE3, variables=(v,))
        scale = _scale_of(params, v)
        sigma_names = [n for n in params.tensors if n.startswith(f"head_sigma_{v}_")]
        start = {n: params.tensors[n].copy() for n in sigma_names}

        lam = config.lam_reg
        best = None  # (|coverage - target|, tensors, lam, coverage)
        for r in range(config.stage3_rounds):
            for n, t in start.items():
                params.tensors[n][...] = t
            opt = AdamState()

            def sample_step(smp, v=v, scale=scale, lam=lam):
                pred, cache = heads_forward_cached(params, smp.x)
                p_n = pred.values[v] / scale
                s_n = pred.sigmas[v] / scale
                wmap = balance_weight_map(smp.mask, smp.n_hard, smp.n_soft, config.lam_h, 0.0)
                loss = float(np.sum(wmap * nll_map(smp.targets[v], p_n, s_n, lam_reg=lam)))
                _, gs = nll_grads(smp.targets[v], p_n, s_n, lam_reg=lam)
                gsig = (gs * wmap * (smp.weight / scale)).astype(np.float32)
                grads, _ = heads_backward(params, cache, {}, {v: gsig})
                return loss * smp.weight, grads

            _run_head_epochs(params, opt, samples, config, config.stage3_epochs,
                             [config.seed, 0x53, _name_tag(v), r], sample_step,
                             log, f"stage3:{v}", iteration=r, last_good=last_good)
            cov = coverage_fraction(params, eval_tiles, v)
            log.row(stage=f"stage3:{v}", iteration=r, epoch=config.stage3_epochs - 1,
                    coverage=cov)
            gap = abs(cov - config.coverage_target)
            if best is None or gap < best[0]:
                best = (gap, {n: params.tensors[n].copy() for n in sigma_names}, lam, cov)
            lam = lam * 4.0 if cov > config.coverage_target else lam / 4.0
        for n, t in best[1].items():
            params.tensors[n][...] = t
    _save(params, checkpoint_dir, "stage3.ckpt")
    return params


def _rh_label_map(points: list, shape: tuple, quantiles: tuple) -> LabelMap:
    """Sparse per-quantile RH maps (cm), first point winning a pixel."""
    h, w = shape
    mask = np.zeros((h, w), dtype=np.uint8)
    idx = [RH_QUANTILES.index(q) for q in quantiles]
    targets = {f"rh{q}": np.zeros((h, w)) for q in quantiles}
    for p in points:
        rh = getattr(p, "rh", None)
        if rh is None:
            raise ValueError(f"point ({p.row}, {p.col}) lacks RH targets")
        if len(rh) != len(RH_QUANTILES):
            raise ValueError(f"point ({p.row}, {p.col}) has {len(rh)} RH values, "
                             f"expected {len(RH_QUANTILES)}")
        if mask[p.row, p.col]:
            continue
        mask[p.row, p.col] = 1
        for q, i in zip(quantiles, idx):
            targets[f"rh{q}"][p.row, p.col] = float(rh[i])
    return LabelMap(targets, mask)


def finetune_rh(params: NetworkParams, tiles: list, rh_quantiles=RH_QUANTILES,
                config: TrainConfig = None, val_tiles: list | None = None, *,
                log: TrainLog | None = None, checkpoint_dir=None) -> NetworkParams:
    """Extend the network with one head per RH quantile and train them.

    Everything but the new heads stays frozen; each head carries its own
    inverse-density point weights. Targets exist only at measured pixels,
    so the loss is hard-only.
    """
    config = config if config is not None else TrainConfig()
    qs = tuple(int(q) for q in rh_quantiles)
    if len(qs) == 0 or any(q not in RH_QUANTILES for q in qs):
        raise ValueError(f"rh_quantiles must come from {RH_QUANTILES}, got {qs}")
    if list(qs) != sorted(qs) or len(set(qs)) != len(qs):
        raise ValueError("rh_quantiles must be strictly increasing")
    if not tiles:
        raise ValueError("finetune_rh needs at least one tile")
    names = [f"rh{q}" for q in qs]
    log = log if log is not None else TrainLog()

    maps = [_rh_label_map(t.quality_points(), t.channels.shape[1:], qs) for t in tiles]
    tables = {name: fit_weight_table(tiles, name) for name in names}

    params = extend_heads(params, len(names), seed=config.seed * 100003 + 0xE7,
                          names=names, output_scale=RH_SCALE)
    set_freeze(params, Stage.FINETUNE_RH)
    last_good = _save(params, checkpoint_dir, "finetune_rh_init.ckpt")
    samples = _feature_samples(params, tiles, maps, weight_tables=tables)
    opt = AdamState()

    def sample_step(smp):
        pred, cache = heads_forward_cached(params, smp.x)
        wmap = balance_weight_map(smp.mask, smp.n_hard, smp.n_soft, config.lam_h, 0.0)
        loss = 0.0
        grad_values = {}
        for name in names:
            p_n = pred.values[name] / RH_SCALE
            w = smp.weights[name]
            loss += w * float(np.sum(wmap * nll_map(smp.targets[name], p_n, fixed_sigma=True)))
            gp, _ = nll_grads(smp.targets[name], p_n, fixed_sigma=True)
            grad_values[name] = (gp * wmap * (w / RH_SCALE)).astype(np.float32)
        grads, _ = heads_backward(params, cache, grad_values, {})
        return loss, grads

    _run_head_epochs(params, opt, samples, config, config.rh_epochs,
                     [config.seed, 0x2F], sample_step, log, "finetune_rh",
                     last_good=last_good)
    if val_tiles:
        log.row(stage="finetune_rh", epoch=config.rh_epochs - 1,
                val_mae=point_mae(params, val_tiles, names[-1]))
    _save(params, checkpoint_dir, "finetune_rh.ckpt")
    return params


def rh_predictions(params: NetworkParams, channels: np.ndarray) -> np.ndarray:
    """Stacked RH maps (cm) sorted per pixel so quantile order holds."""
    if not params.extended_heads:
        raise ValueError("network has no RH heads; run finetune_rh first")
    pred = forward(params, np.asarray(channels, dtype=np.float32))
    stack = np.stack([pred.values[name] for name in params.extended_heads])
    return np.sort(stack, axis=0)


def agbd_from_rh(rh_maps: np.ndarray, pft_map: np.ndarray, strata: dict | None = None) -> np.ndarray:
    """Biomass density from predicted RH maps through the stratum models.

    The canopy metric is the mean over the quantile maps; pixels at or
    below the growth floor map to zero, like the labels themselves.
    """
    strata = strata if strata is not None else make_default_strata()
    lcm = np.asarray(rh_maps, dtype=np.float64).mean(axis=0)
    pft = np.asarray(pft_map)
    if pft.shape != lcm.shape:
        raise ValueError(f"pft map shape {pft.shape} does not match {lcm.shape}")
    out = np.zeros_like(lcm)
    grown = lcm > LCM_FLOOR_CM
    for idx, name in enumerate(PFT_CLASSES):
        model = strata[name]
        sel = grown & (pft == idx)
        if np.any(sel):
            a, b = float(model.coeffs[0]), float(model.coeffs[1])
            out[sel] = np.exp(a + b * np.log(lcm[sel]) + model.bias)
    return out


def run_pipeline(train_tiles: list, val_tiles: list, config: TrainConfig,
                 outdir=None, network_config: NetworkConfig | None = None) -> NetworkParams:
    """Stages 1-3 end to end: pretrain, balance, fine-tune, calibrate."""
    log = TrainLog(os.path.join(outdir, "training_log.csv") if outdir else None)
    try:
        params = train_stage1(train_tiles, config, val_tiles,
                              network_config=network_config, log=log, checkpoint_dir=outdir)
        subsets = {}
        for v in params.config.value_heads:
            subsets[v] = balanced_subset(train_tiles, variable=v, seed=config.seed)
        params = train_stage2(params, subsets, config, val_tiles, log=log, checkpoint_dir=outdir)
        sigma_vars = params.config.value_heads[: params.config.n_sigma_heads]
        params = train_stage3(params, {v: subsets[v] for v in sigma_vars}, config,
                              val_tiles, log=log, checkpoint_dir=outdir)
    finally:
        log.close()
    return params
