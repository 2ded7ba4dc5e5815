"""Segmentation losses and deep-supervision aggregation.

All losses are computed per sample and per non-background class, then
averaged, so a batch loss is the mean of per-sample losses. That property
is what makes gradient accumulation equivalent to a larger batch.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ConfigurationError

SMOOTH = 1e-5


@dataclass
class LossConfig:
    kind: str = "dice"  # dice | focal_tversky
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    focal_gamma: float = 2.0
    ds_weights: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("dice", "focal_tversky"):
            raise ConfigurationError(f"unknown loss kind: {self.kind}")
        if abs(self.tversky_alpha + self.tversky_beta - 1.0) > 1e-9:
            raise ConfigurationError("tversky alpha + beta must equal 1")
        if self.focal_gamma <= 0:
            raise ConfigurationError("focal gamma must be > 0")
        if self.ds_weights != "uniform":
            raise ConfigurationError(f"unknown ds weighting: {self.ds_weights}")


def one_hot(labels, classes=2):
    """(B,D,H,W) integer labels -> (B,C,D,H,W) one-hot float array."""
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    out = np.zeros((labels.shape[0], classes) + labels.shape[1:], dtype=np.float64)
    for c in range(classes):
        out[:, c] = labels == c
    return out


def _as_target_tensor(pred, target):
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != tgt.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {tgt.shape}")
    return tgt


def _flatten_per_class(t):
    # (B,C,D,H,W) -> (B,C,N)
    B, C = t.shape[:2]
    return t.reshape((B, C, -1))


def dice_loss(pred, target):
    """1 - soft Dice averaged over samples and non-background classes."""
    tgt = _as_target_tensor(pred, target)
    p = _flatten_per_class(pred)
    t = _flatten_per_class(tgt)
    inter = (p * t).sum(axis=2)  # (B,C)
    sums = p.sum(axis=2) + t.sum(axis=2)
    dice = ((2.0 * inter + SMOOTH) / (sums + SMOOTH))
    fg = _drop_background(dice)
    return 1.0 - fg.mean()


def focal_tversky_loss(pred, target, config=None):
    """Mean over samples/classes of (1 - Tversky index)^(1/gamma)."""
    config = config or LossConfig(kind="focal_tversky")
    tgt = _as_target_tensor(pred, target)
    p = _flatten_per_class(pred)
    t = _flatten_per_class(tgt)
    tp = (p * t).sum(axis=2)
    fn = ((1.0 - p) * t).sum(axis=2)
    fp = (p * (1.0 - t)).sum(axis=2)
    ti = (tp + SMOOTH) / (tp + config.tversky_alpha * fn + config.tversky_beta * fp + SMOOTH)
    fg = _drop_background(ti)
    return ((1.0 - fg) ** (1.0 / config.focal_gamma)).mean()


def _drop_background(per_class):
    """(B,C) tensor -> (B,C-1) tensor without class 0."""
    B, C = per_class.shape
    if C < 2:
        raise ValueError("need at least one non-background class")
    mask = np.zeros((C, C - 1))
    for c in range(1, C):
        mask[c, c - 1] = 1.0
    return ad.matmul(per_class, Tensor(mask.astype(per_class.dtype)))


def loss_fn(pred, target, config):
    if config.kind == "dice":
        return dice_loss(pred, target)
    return focal_tversky_loss(pred, target, config)


def downsample_target(target, levels):
    """Nearest-neighbor halving chain; returned coarse-to-fine.

    Matches the coarse-to-fine ordering of deep-supervision outputs: entry 0
    has been halved levels-1 times, the last entry is the original target.
    """
    target = np.asarray(target)
    pyramid = [target]
    for _ in range(levels - 1):
        t = pyramid[-1]
        pyramid.append(t[..., ::2, ::2, ::2])
    return pyramid[::-1]


def deep_supervision_loss(preds, targets, config):
    """Uniformly weighted mean of per-level losses.

    preds/targets are coarse-to-fine lists; targets are one-hot arrays.
    Returns (total scalar Tensor, list of per-level float values).
    """
    if len(preds) != len(targets):
        raise ConfigurationError(
            f"{len(preds)} prediction levels vs {len(targets)} target levels")
    per_level = [loss_fn(p, t, config) for p, t in zip(preds, targets)]
    total = per_level[0]
    for lv in per_level[1:]:
        total = total + lv
    total = total * (1.0 / len(per_level))
    return total, [float(lv.data) for lv in per_level]


def dice_score(pred_mask, gt_mask):
    """Hard Dice between two binary masks; 1.0 when both are empty."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    denom = pred_mask.sum() + gt_mask.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred_mask, gt_mask).sum() / denom
