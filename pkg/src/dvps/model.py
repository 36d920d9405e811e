"""Model dimensions and parameter containers for the tracker and refiner."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import formats
from .errors import ConfigError, IntegrityError
from .numerics import Tensor
from .numerics.nn import init_attention, init_linear, init_mlp, init_norm, norm

BINDING_SOURCES = ("noisy", "reference")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    mask_dim: int = 32
    num_classes: int = 7
    tracker_layers: int = 3
    refiner_layers: int = 3
    ffn_mult: int = 4
    kernel_size: int = 5
    # sources for (ID, Q, K, V) of the referring cross-attention
    rca_binding: tuple = ("reference", "reference", "noisy", "noisy")

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        b = tuple(self.rca_binding)
        if len(b) != 4 or any(s not in BINDING_SOURCES for s in b):
            raise ConfigError(f"rca_binding must be four of {BINDING_SOURCES}")
        object.__setattr__(self, "rca_binding", b)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rca_binding"] = list(self.rca_binding)
        return d

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.embed_dim


Params = dict  # dotted name -> Tensor


def _heads(rng, p: Params, prefix: str, cfg: ModelConfig) -> None:
    d = cfg.embed_dim
    init_norm(p, prefix + "out_norm", d)
    init_linear(rng, p, prefix + "class.", d, cfg.num_classes + 1)
    init_mlp(rng, p, prefix + "mask", [d, d, d, cfg.mask_dim])


def init_tracker(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    d = cfg.embed_dim
    for l in range(cfg.tracker_layers):
        b = f"tracker.block{l}."
        init_norm(p, b + "norm_ref", d)
        init_norm(p, b + "norm_mem", d)
        init_attention(rng, p, b + "rca.", d)
        init_norm(p, b + "norm_self", d)
        init_attention(rng, p, b + "self.", d)
        init_norm(p, b + "norm_ffn", d)
        init_mlp(rng, p, b + "ffn", [d, cfg.ffn_dim, d])
    _heads(rng, p, "tracker.", cfg)
    return p


def init_refiner(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    d, k = cfg.embed_dim, cfg.kernel_size
    for l in range(cfg.refiner_layers):
        b = f"refiner.block{l}."
        init_norm(p, b + "norm_conv", d)
        bound = np.sqrt(6.0 / (k * d + d))
        p[b + "conv.kernel"] = Tensor(rng.uniform(-bound, bound, (k, d, d)), requires_grad=True)
        p[b + "conv.bias"] = Tensor(np.zeros(d), requires_grad=True)
        init_norm(p, b + "norm_attn", d)
        init_attention(rng, p, b + "attn.", d)
        init_norm(p, b + "norm_ffn", d)
        init_mlp(rng, p, b + "ffn", [d, cfg.ffn_dim, d])
    init_linear(rng, p, "refiner.weight.", d, 1)
    _heads(rng, p, "refiner.", cfg)
    return p


def zero_residual_branches(p: Params) -> Params:
    """Copy of ``p`` with every branch output projection zeroed (blocks become identities)."""
    out = dict(p)
    for name, t in p.items():
        leaf = name.split(".")
        if (
            (len(leaf) >= 2 and leaf[-2] in ("rca", "self", "attn") and leaf[-1] in ("wo", "bo"))
            or (len(leaf) >= 3 and leaf[-3] == "ffn" and leaf[-2] == "1")
            or (len(leaf) >= 2 and leaf[-2] == "conv")
        ):
            out[name] = Tensor(np.zeros(t.shape), requires_grad=t.requires_grad)
    return out


def fit_heads(p: Params, queries: np.ndarray, class_logits: np.ndarray, mask_embeddings: np.ndarray,
              prefix: str = "tracker.", ridge: float = 1e-3) -> Params:
    """Copy of ``p`` whose class and mask heads reproduce a segmenter's decoders.

    ``queries[M, D]`` are segmenter queries with their ``class_logits[M, K+1]``
    and ``mask_embeddings[M, Dm]``. Both heads are ridge-regression fits on the
    output-normalized queries; the mask fit only uses queries the segmenter
    classifies as objects, since the fuse step never reads the masks of
    "no object" queries. The three-layer mask MLP realizes the linear fit
    ``A`` exactly by routing ``relu(xA)`` and ``relu(-xA)`` through the hidden
    layers, which needs ``2 * Dm <= D``.
    """
    d = queries.shape[-1]
    dm = mask_embeddings.shape[-1]
    if 2 * dm > d:
        raise ConfigError(f"head fit needs embed_dim >= 2 * mask_dim, got {d} and {dm}")
    x = norm(Tensor(queries), p, prefix + "out_norm").data
    x1 = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    gram = x1.T @ x1 + ridge * len(x1) * np.eye(d + 1)
    wc = np.linalg.solve(gram, x1.T @ class_logits)
    is_obj = class_logits.argmax(-1) != class_logits.shape[-1] - 1
    if not is_obj.any():
        raise ValueError("no object queries to fit the mask head on")
    obj = x1[is_obj]
    gram = obj.T @ obj + ridge * len(obj) * np.eye(d + 1)
    wm = np.linalg.solve(gram, obj.T @ mask_embeddings[is_obj])
    out = dict(p)

    def put(name, value):
        out[prefix + name] = Tensor(np.ascontiguousarray(value), requires_grad=p[prefix + name].requires_grad)

    put("class.w", wc[:d])
    put("class.b", wc[d])
    w0 = np.zeros((d, d))
    b0 = np.zeros(d)
    w0[:, :dm], w0[:, dm:2 * dm] = wm[:d], -wm[:d]
    b0[:dm], b0[dm:2 * dm] = wm[d], -wm[d]
    put("mask.0.w", w0)
    put("mask.0.b", b0)
    put("mask.1.w", np.eye(d))
    put("mask.1.b", np.zeros(d))
    w2 = np.zeros((d, dm))
    w2[:dm], w2[dm:2 * dm] = np.eye(dm), -np.eye(dm)
    put("mask.2.w", w2)
    put("mask.2.b", np.zeros(dm))
    return out


def fit_reference_attention(p: Params, reference: np.ndarray, current: np.ndarray, queries: np.ndarray,
                            cfg: ModelConfig, sharpness: float = 6.0, gain: float = 10.0) -> Params:
    """Copy of ``p`` whose referring cross-attention starts as a nearest-neighbour lookup.

    ``reference[M, D]`` and ``current[M, D]`` are queries of one object in two
    consecutive frames and ``queries`` a sample of all queries. The query and
    key projections of every head become the leading discriminant directions:
    those with the largest ratio of between-query spread to frame-to-frame
    drift. Each head then attends to the current query that best matches
    its reference, and the value path copies that query, scaled by ``gain``
    so it outweighs the identity path.
    """
    d, dh = cfg.embed_dim, cfg.embed_dim // cfg.heads
    if len(reference) != len(current) or not len(reference):
        raise ValueError("need matching, non-empty reference and current samples")
    out = dict(p)
    for l in range(cfg.tracker_layers):
        b = f"tracker.block{l}."
        ref = norm(Tensor(reference), p, b + "norm_ref").data
        cur = norm(Tensor(current), p, b + "norm_mem").data
        allq = norm(Tensor(queries), p, b + "norm_mem").data
        diff = cur - ref
        drift = diff.T @ diff / (2 * len(diff))
        drift += 1e-2 * np.trace(drift) / d * np.eye(d) + 1e-9 * np.eye(d)
        spread = np.cov(allq.T)
        chol = np.linalg.cholesky(drift)
        inv = np.linalg.inv(chol)
        evals, evecs = np.linalg.eigh(inv @ spread @ inv.T)
        w = inv.T @ evecs[:, ::-1][:, :dh] * np.sqrt(sharpness)
        proj = np.tile(w, (1, cfg.heads))
        values = {"wq": proj, "wk": proj, "wv": np.eye(d), "wo": gain * np.eye(d)}
        for name, value in values.items():
            key = b + "rca." + name
            out[key] = Tensor(np.ascontiguousarray(value), requires_grad=p[key].requires_grad)
        for name in ("bq", "bk", "bv", "bo"):
            key = b + "rca." + name
            out[key] = Tensor(np.zeros(d), requires_grad=p[key].requires_grad)
    return out


def frozen(p: Params) -> Params:
    """Constant copy of ``p``: no gradients flow into these tensors."""
    return {k: Tensor(v.data) for k, v in p.items()}


def trainable(p: Params) -> Params:
    return {k: Tensor(v.data, requires_grad=True) for k, v in p.items()}


def save_model(path, params: Params, cfg: ModelConfig, extra: dict | None = None) -> None:
    tensors = {k: v.data for k, v in params.items()}
    for k, v in cfg.to_dict().items():
        if k == "rca_binding":
            v = [BINDING_SOURCES.index(s) for s in v]
        tensors[f"meta.model.{k}"] = np.asarray(v, dtype=np.float64)
    for k, v in (extra or {}).items():
        tensors[k] = np.asarray(v, dtype=np.float64)
    formats.save_checkpoint(path, tensors)


def load_model(path, prefix: str) -> tuple[Params, ModelConfig, dict]:
    """Load the ``prefix`` namespace (``tracker`` or ``refiner``) from a checkpoint."""
    raw = formats.load_checkpoint(path)
    meta = {}
    for k, v in raw.items():
        if k.startswith("meta.model."):
            name = k[len("meta.model."):]
            meta[name] = [BINDING_SOURCES[int(i)] for i in v] if name == "rca_binding" else int(v)
    cfg = ModelConfig.from_dict(meta)
    params = {k: Tensor(v) for k, v in raw.items() if k.startswith(prefix + ".")}
    if not params:
        raise IntegrityError(f"{path} holds no {prefix} parameters")
    extra = {k: v for k, v in raw.items() if not k.startswith(prefix + ".") and not k.startswith("meta.model.")}
    return params, cfg, extra
