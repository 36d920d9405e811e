"""Temporal refiner over whole tracked sequences.

Every block works on each object slot independently along time: a
short-term temporal convolution, long-term self-attention across all
frames, then an FFN, each pre-normalized with a residual connection. The
video-level class comes from a softmax-weighted temporal average of the
refined queries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Params
from .numerics import Tensor, as_tensor, conv1d_temporal, linear, mlp, multi_head_attention, norm, softmax
from .tracker import class_head, mask_head


@dataclass
class RefinerOutput:
    queries: Tensor  # [T, N, D]
    mask_embeddings: Tensor  # [T, N, Dm]
    class_logits: Tensor  # [N, K+1], one prediction per slot for the whole video
    frame_weights: Tensor  # [T, N]


def temporal_decoder_block(q, params: Params, cfg: ModelConfig, prefix: str) -> Tensor:
    """One block over ``q[T, ..., N, D]``; slots never exchange information."""
    x = as_tensor(q).swapaxes(0, -2)  # time moves next to the feature axis
    x = x + conv1d_temporal(norm(x, params, prefix + "norm_conv"),
                            params[prefix + "conv.kernel"], params[prefix + "conv.bias"])
    h = norm(x, params, prefix + "norm_attn")
    x = x + multi_head_attention(h, h, h, params, cfg.heads, prefix + "attn.")
    x = x + mlp(norm(x, params, prefix + "norm_ffn"), params, prefix + "ffn", 2)
    return x.swapaxes(0, -2)


def temporal_weighting(q_rf, W, b) -> tuple[Tensor, Tensor]:
    """Softmax-over-time weighted sum of ``q_rf[T, N, D]``; returns ``([N, D], weights[T, N])``.

    Extra batch axes between T and N are carried through.
    """
    q_rf = as_tensor(q_rf)
    if q_rf.ndim < 3 or q_rf.shape[0] < 1:
        raise ValueError(f"temporal weighting needs [T, N, D] with T >= 1, got {q_rf.shape}")
    logits = linear(q_rf, W, b)  # [T, N, 1]
    w = softmax(logits, axis=0)
    pooled = (w * q_rf).sum(axis=0)
    return pooled, w.reshape(q_rf.shape[:-1])


def refiner_forward(q_tr, params: Params, cfg: ModelConfig) -> RefinerOutput:
    x = as_tensor(getattr(q_tr, "queries", q_tr))
    if x.ndim < 3 or x.shape[0] < 1:
        raise ValueError(f"refiner input must be [T, N, D] with T >= 1, got {x.shape}")
    for l in range(cfg.refiner_layers):
        x = temporal_decoder_block(x, params, cfg, f"refiner.block{l}.")
    pooled, weights = temporal_weighting(x, params["refiner.weight.w"], params["refiner.weight.b"])
    masks = mask_head(norm(x, params, "refiner.out_norm"), params, "refiner.")
    logits = class_head(norm(pooled, params, "refiner.out_norm"), params, "refiner.")
    return RefinerOutput(x, masks, logits, weights)


def per_frame_class_logits(out: RefinerOutput) -> np.ndarray:
    """Video-level logits repeated for every frame, ``[T, N, K+1]``."""
    t = out.queries.shape[0]
    return np.broadcast_to(out.class_logits.data, (t,) + out.class_logits.shape).copy()
