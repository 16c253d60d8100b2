"""Patch-based training of one segmentation stage.

Stages:

* ``periosteal``: raw intensity in, periosteal mask out.
* ``endosteal``: intensity zeroed outside the dilated ground-truth periosteal
  mask in, endosteal mask out. ``mask_input=False`` trains on raw intensity
  instead (the ablation variant).

One epoch draws one patch per training subject, in a shuffled order. Every
random choice comes from a generator seeded by ``(seed, stage, fold, t)``,
with ``t`` the Adam step counter at the start of the run, so resumed runs
stay deterministic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_sample
from .errors import NumericFailure
from .inference import Segmenter, binarize, plan_windows, predict_volume, stage2_input
from .metrics import confusion, dsc
from .nn import VNetModel, adam_step, softmax_cross_entropy
from .nn.checkpoint import checkpoint_bytes, checkpoint_from_bytes
from .nn.vnet import PRESETS
from .volgrid import Mask3, Volume3

STAGES = ("periosteal", "endosteal")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 800
    patch_size: tuple = (192, 192, 64)  # (x, y, z)
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_interval: int = 10
    # share of patches forced to contain femur voxels
    foreground_fraction: float = 0.5
    intensity_offset: float = 0.0
    intensity_scale: float = 1000.0
    # dilation (voxels) of the periosteal mask when masking stage-2 input
    mask_margin: int = 1
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if not (self.learning_rate > 0 and self.batch_size >= 1 and self.epochs >= 0):
            raise ValueError("learning_rate and batch_size must be positive, epochs >= 0")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError("patch_size must be three positive ints")
        if not 0 <= self.foreground_fraction <= 1:
            raise ValueError("foreground_fraction must lie in [0, 1]")
        if self.intensity_scale <= 0 or self.val_interval < 1 or self.mask_margin < 0:
            raise ValueError("intensity_scale, val_interval must be positive, mask_margin >= 0")


@dataclass
class Subject:
    """One training or validation case, already loaded."""

    sid: str
    intensity: Volume3
    periosteal: Mask3
    endosteal: Mask3


@dataclass
class LogRow:
    epoch: int
    loss: float
    val_dsc: float | None
    seconds: float


@dataclass
class TrainResult:
    model: VNetModel
    log: list = field(default_factory=list)
    best_dsc: float | None = None
    best_epoch: int | None = None


def stage_target(subject: Subject, stage: str) -> Mask3:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    return subject.periosteal if stage == "periosteal" else subject.endosteal


def _stage_code(stage: str) -> int:
    return STAGES.index(stage)


def sample_patch_origin(mask: np.ndarray, patch_zyx, rng, want_foreground: bool):
    """Patch corner (z, y, x). Foreground patches contain a random femur voxel."""
    dims = mask.shape
    if any(p > d for p, d in zip(patch_zyx, dims)):
        raise ValueError(f"patch {patch_zyx} larger than volume {dims}")
    if want_foreground and mask.any():
        fg = np.flatnonzero(mask)
        v = np.unravel_index(fg[rng.integers(fg.size)], dims)
        lo = [max(0, c - p + 1) for c, p in zip(v, patch_zyx)]
        hi = [min(d - p, c) for c, p, d in zip(v, patch_zyx, dims)]
        return tuple(int(rng.integers(a, b + 1)) for a, b in zip(lo, hi))
    return tuple(int(rng.integers(0, d - p + 1)) for p, d in zip(patch_zyx, dims))


def _crop(arr, origin, size):
    (z, y, x), (dz, dy, dx) = origin, size
    return arr[z:z + dz, y:y + dy, x:x + dx]


def make_training_patch(subject: Subject, stage: str, cfg: TrainConfig, aug: AugmentConfig,
                        rng: np.random.Generator, mask_input: bool = True):
    """One (input, target) pair in raw intensity units, shapes (D, H, W)."""
    px, py, pz = cfg.patch_size
    size = (pz, py, px)
    want_fg = rng.random() < cfg.foreground_fraction
    origin = sample_patch_origin(subject.periosteal.data, size, rng, want_fg)
    sp = subject.intensity.spacing
    vol = Volume3(_crop(subject.intensity.data, origin, size), sp)
    peri = Mask3(_crop(subject.periosteal.data, origin, size), sp)
    target = Mask3(_crop(stage_target(subject, stage).data, origin, size), sp)
    if cfg.augment:
        vol, (peri, target), _ = augment_sample(vol, [peri, target], aug, int(rng.integers(2**63 - 1)))
    if stage == "endosteal" and mask_input:
        vol = stage2_input(vol, peri.data, cfg.mask_margin)
    return vol.data, target.data


def validation_dsc(model: VNetModel, subjects, stage: str, cfg: TrainConfig, mask_input: bool = True) -> float:
    """Mean DSC at a fixed 0.5 threshold, half-overlapping windows."""
    seg = Segmenter(model, cfg.intensity_offset, cfg.intensity_scale)
    scores = []
    depth = cfg.patch_size[2]
    for s in subjects:
        vol = s.intensity
        if stage == "endosteal" and mask_input:
            vol = stage2_input(vol, s.periosteal.data, cfg.mask_margin)
        nx, ny, nz = vol.dims
        plan = plan_windows(nz, depth, (nx, ny), stride=max(1, depth // 2))
        pred = binarize(predict_volume(seg, vol, plan), 0.5)
        truth = stage_target(s, stage)
        c = confusion(pred, truth)
        scores.append(dsc(c) if c.tp + c.fp + c.fn else 1.0)
    return float(np.mean(scores))


def train_model(train_subjects, val_subjects, stage: str, cfg: TrainConfig, aug: AugmentConfig,
                preset="tiny", seed: int = 0, fold: int | None = None, mask_input: bool = True,
                model: VNetModel | None = None, progress=None) -> TrainResult:
    """Train one stage; returns the best-validation model (last if no validation)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if not train_subjects:
        raise ValueError("no training subjects")
    if model is None:
        vcfg = PRESETS[preset] if isinstance(preset, str) else preset
        model = VNetModel(vcfg, seed=seed)
    model.adam.beta1, model.adam.beta2, model.adam.eps = cfg.beta1, cfg.beta2, cfg.eps
    fold_code = 0 if fold is None else fold + 1
    rng = np.random.default_rng([seed, _stage_code(stage), fold_code, model.adam.t])
    seg = Segmenter(model, cfg.intensity_offset, cfg.intensity_scale)

    result = TrainResult(model)
    best_blob = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_subjects))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_subjects[i] for i in order[start:start + cfg.batch_size]]
            xs, ys = zip(*(make_training_patch(s, stage, cfg, aug, rng, mask_input) for s in batch))
            x = seg.normalize(np.stack(xs))[:, None]
            y = np.stack(ys)
            onehot = np.stack([~y, y], axis=1).astype(model.dtype)
            logits = model.forward(x, train=True)
            loss, grad = softmax_cross_entropy(logits, onehot)
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}")
            model.zero_grad()
            model.backward(grad)
            adam_step(model, cfg.learning_rate)
            losses.append(float(loss))
        val = None
        if val_subjects and (epoch % cfg.val_interval == 0 or epoch == cfg.epochs):
            val = validation_dsc(model, val_subjects, stage, cfg, mask_input)
            if result.best_dsc is None or val > result.best_dsc:
                result.best_dsc, result.best_epoch = val, epoch
                best_blob = checkpoint_bytes(model)
        row = LogRow(epoch, float(np.mean(losses)), val, time.perf_counter() - t0)
        result.log.append(row)
        if progress:
            progress(row)
    if best_blob is not None:
        result.model = checkpoint_from_bytes(best_blob)
    return result
