"""Set-prediction losses for the tracker (per frame) and refiner (per video)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .matcher import CostWeights, GroundTruthTrack
from .numerics import Tensor, as_tensor, log_softmax, sigmoid, softplus


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    mask: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1  # CE weight for slots left unmatched
    dice_smooth: float = 1.0

    def costs(self) -> CostWeights:
        return CostWeights(self.cls, self.mask, self.dice)


def bce_with_logits(logits, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the last two axes, one value per leading index."""
    x = as_tensor(logits)
    per_pixel = softplus(x) - x * Tensor(target.astype(np.float64))
    return per_pixel.mean(axis=(-2, -1))


def dice_loss(logits, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    p = sigmoid(as_tensor(logits))
    t = Tensor(target.astype(np.float64))
    num = (p * t).sum(axis=(-2, -1)) * 2.0 + smooth
    den = p.sum(axis=(-2, -1)) + t.sum(axis=(-2, -1)) + smooth
    return 1.0 - num / den


def _class_targets(num_slots: int, no_object: int, frames: int, gts, perm, weights: LossWeights,
                   per_frame: bool) -> np.ndarray:
    """CE weight tensor ``[frames, N, K+1]``: one nonzero entry per slot and frame."""
    w = np.zeros((frames, num_slots, no_object + 1))
    w[:, :, no_object] = weights.no_object
    for g, s in zip(gts, perm):
        w[:, s, :] = 0.0
        if per_frame:
            present = g.masks.reshape(frames, -1).any(axis=1)
            w[present, s, g.class_id] = 1.0
            w[~present, s, no_object] = 1.0
        else:
            w[:, s, g.class_id] = 1.0
    return w


def loss_tracker(class_logits, mask_logits, gts: Sequence[GroundTruthTrack], perm,
                 weights: LossWeights = LossWeights()) -> Tensor:
    """Sum of per-frame losses over every frame with the assignment held fixed.

    ``class_logits[T, N, K+1]``, ``mask_logits[T, N, H, W]``; ``perm[i]`` is
    the slot of ground-truth track ``i``.
    """
    class_logits, mask_logits = as_tensor(class_logits), as_tensor(mask_logits)
    T, N, K1 = class_logits.shape
    ce_w = _class_targets(N, K1 - 1, T, gts, perm, weights, per_frame=True)
    loss = (log_softmax(class_logits, axis=-1) * Tensor(-ce_w)).sum() * weights.cls
    if gts:
        slots = np.asarray(perm, dtype=np.int64)
        pred = mask_logits[:, slots]  # [T, G, H, W]
        target = np.stack([g.masks for g in gts], axis=1)
        loss = loss + bce_with_logits(pred, target).sum() * weights.mask
        loss = loss + dice_loss(pred, target, weights.dice_smooth).sum() * weights.dice
    return loss


def frame_loss(class_logits, mask_logits, gts: Sequence[GroundTruthTrack], perm, t: int,
               weights: LossWeights = LossWeights()) -> Tensor:
    """Loss of frame ``t`` alone: ``class_logits[N, K+1]``, ``mask_logits[N, H, W]``."""
    cl = as_tensor(class_logits).reshape(1, *as_tensor(class_logits).shape)
    ml = as_tensor(mask_logits)
    ml = ml.reshape(1, *ml.shape)
    sliced = [GroundTruthTrack(g.track_id, g.class_id, g.is_thing, 0, g.masks[t:t + 1]) for g in gts]
    return loss_tracker(cl, ml, sliced, perm, weights)


def loss_refiner(class_logits, mask_logits, gts: Sequence[GroundTruthTrack], perm,
                 weights: LossWeights = LossWeights()) -> Tensor:
    """Per-track video loss: one class term per slot plus mask terms summed over frames.

    ``class_logits[N, K+1]`` is the video-level prediction, ``mask_logits[T, N, H, W]``.
    """
    class_logits, mask_logits = as_tensor(class_logits), as_tensor(mask_logits)
    N, K1 = class_logits.shape
    ce_w = _class_targets(N, K1 - 1, 1, gts, perm, weights, per_frame=False)[0]
    loss = (log_softmax(class_logits, axis=-1) * Tensor(-ce_w)).sum() * weights.cls
    if gts:
        slots = np.asarray(perm, dtype=np.int64)
        pred = mask_logits[:, slots]
        target = np.stack([g.masks for g in gts], axis=1)
        loss = loss + bce_with_logits(pred, target).sum() * weights.mask
        loss = loss + dice_loss(pred, target, weights.dice_smooth).sum() * weights.dice
    return loss
