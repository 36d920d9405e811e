"""Referring tracker: cascaded transformer denoising blocks run frame by frame.

Each block is pre-normalized:

    x = RCA(ID, Q, K, V)            ID + MHA(Q, K, V)
    x = x + SelfAttn(norm(x))
    x = x + FFN(norm(x))

With the default binding, ID and Q come from the previous frame's denoised
queries and K/V from the current frame's noisy queries, so each block adds
what it finds in the current frame to the object it already follows. The
binding ``("noisy", "reference", "noisy", "noisy")`` instead starts from
the current frame's pre-matched query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Params
from .numerics import Tensor, as_tensor, linear, mlp, multi_head_attention, norm, stack


@dataclass
class TrackerOutput:
    queries: Tensor  # [T, N, D]
    class_logits: Tensor  # [T, N, K+1]
    mask_embeddings: Tensor  # [T, N, Dm]


def rca(ID, Q, K, V, params: Params, heads: int, prefix: str = "") -> Tensor:
    """``ID + MHA(Q, K, V)``."""
    ID, Q = as_tensor(ID), as_tensor(Q)
    if ID.shape != Q.shape:
        raise ValueError(f"ID {ID.shape} and Q {Q.shape} must agree")
    return ID + multi_head_attention(Q, K, V, params, heads, prefix)


def td_block(noisy, reference, params: Params, cfg: ModelConfig, prefix: str) -> Tensor:
    noisy, reference = as_tensor(noisy), as_tensor(reference)
    normed = {
        "noisy": norm(noisy, params, prefix + "norm_mem"),
        "reference": norm(reference, params, prefix + "norm_ref"),
    }
    raw = {"noisy": noisy, "reference": reference}
    id_src, q_src, k_src, v_src = cfg.rca_binding
    x = rca(raw[id_src], normed[q_src], normed[k_src], normed[v_src], params, cfg.heads, prefix + "rca.")
    h = norm(x, params, prefix + "norm_self")
    x = x + multi_head_attention(h, h, h, params, cfg.heads, prefix + "self.")
    x = x + mlp(norm(x, params, prefix + "norm_ffn"), params, prefix + "ffn", 2)
    return x


def denoise_frame(noisy, reference, params: Params, cfg: ModelConfig) -> Tensor:
    x = as_tensor(noisy)
    for l in range(cfg.tracker_layers):
        x = td_block(x, reference, params, cfg, f"tracker.block{l}.")
    return x


def class_head(q, params: Params, prefix: str = "tracker.") -> Tensor:
    return linear(q, params[prefix + "class.w"], params[prefix + "class.b"])


def mask_head(q, params: Params, prefix: str = "tracker.") -> Tensor:
    return mlp(q, params, prefix + "mask", 3)


def tracker_forward(prematched, params: Params, cfg: ModelConfig) -> TrackerOutput:
    """Denoise pre-matched queries ``[T, N, D]``; frame 1 references itself.

    Batch axes between T and N are allowed (``[T, B, N, D]``).
    """
    seq = getattr(prematched, "queries", prematched)
    seq = as_tensor(seq)
    if seq.ndim < 3 or seq.shape[0] < 1:
        raise ValueError(f"tracker input must be [T, N, D] with T >= 1, got {seq.shape}")
    outs = []
    ref = seq[0]
    for t in range(seq.shape[0]):
        q = denoise_frame(seq[t], ref, params, cfg)
        outs.append(q)
        ref = q
    queries = stack(outs)
    h = norm(queries, params, "tracker.out_norm")
    return TrackerOutput(queries, class_head(h, params), mask_head(h, params))


def tracker_numpy(prematched: np.ndarray, params: Params, cfg: ModelConfig) -> dict:
    out = tracker_forward(Tensor(prematched), params, cfg)
    return {
        "queries": out.queries.data,
        "class_logits": out.class_logits.data,
        "mask_embeddings": out.mask_embeddings.data,
    }
