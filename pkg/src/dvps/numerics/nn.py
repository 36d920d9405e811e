"""Neural building blocks composed from tensor primitives.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names;
each block reads the keys under its own prefix.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, concat, layer_norm, matmul, relu, softmax, as_tensor

LN_EPS = 1e-5


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` broadcast over the leading extents of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if x.ndim == 1:
        y = matmul(x.reshape(1, -1), W).reshape(W.shape[1])
    else:
        y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias {b.shape} for output width {W.shape[1]}")
        y = y + b
    return y


def norm(x, params: dict, prefix: str) -> Tensor:
    return layer_norm(x, params[prefix + ".gamma"], params[prefix + ".beta"], LN_EPS)


def multi_head_attention(Q, K, V, params: dict, heads: int, prefix: str = "") -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    Shapes are ``Q[..., Nq, D]``, ``K[..., Nk, D]``, ``V[..., Nk, D]``; leading
    extents are treated as independent batches. Projection weights are read
    from ``params`` under ``prefix`` + ``wq, bq, wk, bk, wv, bv, wo, bo``.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    D = Q.shape[-1]
    if D % heads != 0:
        raise ValueError(f"model width {D} not divisible by {heads} heads")
    if K.shape != V.shape or K.shape[-1] != D:
        raise ValueError(f"attention extents: Q {Q.shape}, K {K.shape}, V {V.shape}")
    p = lambda k: params[prefix + k]  # noqa: E731
    dh = D // heads

    def split(x):
        lead = x.shape[:-1]
        return x.reshape(*lead, heads, dh).swapaxes(-2, -3)

    q = split(linear(Q, p("wq"), p("bq")))
    k = split(linear(K, p("wk"), p("bk")))
    v = split(linear(V, p("wv"), p("bv")))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v).swapaxes(-2, -3)
    ctx = ctx.reshape(*Q.shape[:-1], D)
    return linear(ctx, p("wo"), p("bo"))


def conv1d_temporal(x, kernel, bias=None) -> Tensor:
    """'Same' 1-D convolution along axis -2 of ``x[..., T, D]`` with zero padding.

    ``kernel[j]`` is a ``D x D`` map applied to ``x[t + j - k//2]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {k}")
    T, D = x.shape[-2], x.shape[-1]
    if T < 1:
        raise ValueError("temporal convolution needs T >= 1")
    if kernel.shape[1:] != (D, D):
        raise ValueError(f"kernel {kernel.shape} does not match width {D}")
    pad = k // 2
    out = None
    for j in range(k):
        lo, hi = j - pad, j - pad + T  # source frame range for this tap
        src_lo, src_hi = max(lo, 0), min(hi, T)
        if src_lo >= src_hi:
            continue
        seg = x[..., src_lo:src_hi, :]
        before, after = src_lo - lo, hi - src_hi
        if before or after:
            parts = []
            lead = x.shape[:-2]
            if before:
                parts.append(Tensor(np.zeros(lead + (before, D))))
            parts.append(seg)
            if after:
                parts.append(Tensor(np.zeros(lead + (after, D))))
            seg = concat(parts, axis=-2)
        term = matmul(seg, kernel[j])
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


def mlp(x, params: dict, prefix: str, layers: int) -> Tensor:
    """ReLU MLP with ``layers`` linear maps ``prefix.{i}.w/b``; no activation after the last."""
    h = x
    for i in range(layers):
        h = linear(h, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if i < layers - 1:
            h = relu(h)
    return h


# parameter initializers

def init_linear(rng: np.random.Generator, params: dict, prefix: str, din: int, dout: int,
                wname: str = "w", bname: str = "b") -> None:
    bound = math.sqrt(6.0 / (din + dout))
    params[f"{prefix}{wname}"] = Tensor(rng.uniform(-bound, bound, (din, dout)), requires_grad=True)
    params[f"{prefix}{bname}"] = Tensor(np.zeros(dout), requires_grad=True)


def init_norm(params: dict, prefix: str, d: int) -> None:
    params[prefix + ".gamma"] = Tensor(np.ones(d), requires_grad=True)
    params[prefix + ".beta"] = Tensor(np.zeros(d), requires_grad=True)


def init_attention(rng: np.random.Generator, params: dict, prefix: str, d: int) -> None:
    for n in "qkvo":
        init_linear(rng, params, prefix, d, d, f"w{n}", f"b{n}")


def init_mlp(rng: np.random.Generator, params: dict, prefix: str, dims: list[int]) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(rng, params, f"{prefix}.{i}.", a, b)
