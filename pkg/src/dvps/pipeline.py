"""Inference: segmenter queries -> pre-matching -> tracker -> refiner -> panoptic video."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .datamodel import (STAGES, FrameQueries, FuseConfig, PanopticVideo, VideoClip, assemble_video,
                        clip_features, panoptic_fuse, rasterize_clip)
from .matcher import prematch_frames
from .metrics import merge_scales
from .model import ModelConfig, Params
from .refiner import per_frame_class_logits, refiner_forward
from .numerics import Tensor
from .tracker import tracker_forward


def stage_queries(queries: Sequence[FrameQueries], stage: str, *, tracker: Params | None = None,
                  refiner: Params | None = None, model: ModelConfig | None = None):
    """Class logits ``[T, N, K+1]`` and mask embeddings ``[T, N, Dm]`` after ``stage``."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    if stage != "prematch" and (tracker is None or model is None):
        raise ValueError(f"stage {stage!r} needs a tracker checkpoint")
    if stage == "refiner" and refiner is None:
        raise ValueError("stage 'refiner' needs a refiner checkpoint")
    aligned, _ = prematch_frames(queries)
    if stage == "prematch":
        return (np.stack([f.class_logits for f in aligned]),
                np.stack([f.mask_embeddings for f in aligned]))
    seq = Tensor(np.stack([f.embeddings for f in aligned]))
    trk = tracker_forward(seq, tracker, model)
    if stage == "tracker":
        return trk.class_logits.data, trk.mask_embeddings.data
    out = refiner_forward(trk.queries, refiner, model)
    return per_frame_class_logits(out), out.mask_embeddings.data


def _scaled_size(h: int, w: int, short: int) -> tuple[int, int]:
    if h <= w:
        return short, max(1, round(w * short / h))
    return max(1, round(h * short / w)), short


def predict(queries: Sequence[FrameQueries], clip: VideoClip, stage: str, thing_classes: Sequence[bool], *,
            tracker: Params | None = None, refiner: Params | None = None, model: ModelConfig | None = None,
            scales: Sequence[int] | None = None, fuse: FuseConfig = FuseConfig()) -> PanopticVideo:
    """Run the pipeline up to ``stage`` and fuse every frame into one panoptic video.

    ``scales`` lists short-side resolutions; each one decodes masks from
    resampled pixel features and the per-scale logits are averaged at the
    clip's own resolution.
    """
    if len(queries) != clip.T:
        raise ValueError(f"{len(queries)} query frames for a {clip.T}-frame clip")
    class_logits, mask_emb = stage_queries(queries, stage, tracker=tracker, refiner=refiner, model=model)
    if scales:
        preds = []
        for s in scales:
            scaled = clip.resized(*_scaled_size(clip.H, clip.W, int(s)))
            preds.append((s, rasterize_clip(mask_emb, clip_features(scaled)).data, class_logits))
        mask_logits, class_logits = merge_scales(preds, (clip.H, clip.W))
    else:
        mask_logits = rasterize_clip(mask_emb, clip_features(clip)).data
    return assemble_video([panoptic_fuse(mask_logits[t], class_logits[t], thing_classes, fuse)
                           for t in range(clip.T)])
