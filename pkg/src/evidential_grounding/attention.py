"""Flipped cross-attention fusion block.

One block runs a cross-attention whose projections are shared between the
two directions (video tokens query the text, text tokens query the video),
then a separate self-attention on each branch. Blocks stack by feeding both
outputs forward.

Functions take numpy arrays or tape tensors; arrays in, arrays out.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_BLOCKS = 4
PROJECTIONS = ("w_q", "w_k", "w_v", "w_o")


class Modality(str, enum.Enum):
    VIDEO = "video"
    TEXT = "text"


@dataclass
class FeatureSequence:
    tokens: np.ndarray
    modality: Modality

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.modality = Modality(self.modality)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be L x D with L >= 1, got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("tokens must be finite")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class AttentionParams:
    """Projection matrices for one block.

    ``cross`` is read by both cross directions. ``self_video``/``self_text``
    belong to the per-branch self-attention. A ``None`` projection set means
    identity (projection-free mode).
    """

    cross: dict | None = None
    self_video: dict | None = None
    self_text: dict | None = None
    shared_cross: bool = True
    cross_text: dict | None = None

    def __post_init__(self):
        for group in (self.cross, self.self_video, self.self_text, self.cross_text):
            if group is None:
                continue
            for key in PROJECTIONS:
                w = group[key]
                shape = w.shape if isinstance(w, ad.Tensor) else np.shape(w)
                if len(shape) != 2 or shape[0] != shape[1]:
                    raise ValueError(f"projection {key} must be square, got {shape}")
        if not self.shared_cross and self.cross_text is None:
            raise ValueError("unshared cross attention needs cross_text projections")

    @classmethod
    def identity(cls) -> "AttentionParams":
        return cls()

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, shared_cross: bool = True,
               requires_grad: bool = False) -> "AttentionParams":
        def group():
            scale = 1.0 / math.sqrt(dim)
            return {k: ad.Tensor(rng.normal(0.0, scale, (dim, dim)), requires_grad=requires_grad)
                    for k in PROJECTIONS}

        return cls(cross=group(), self_video=group(), self_text=group(),
                   shared_cross=shared_cross, cross_text=None if shared_cross else group())

    def tensors(self, prefix: str = "") -> dict:
        out = {}
        groups = {"cross": self.cross, "self_video": self.self_video,
                  "self_text": self.self_text, "cross_text": self.cross_text}
        for gname, group in groups.items():
            if group is None:
                continue
            for k, w in group.items():
                out[f"{prefix}{gname}.{k}"] = w
        return out

    def parameter_count(self) -> int:
        return sum(int(np.prod(np.shape(ad.as_tensor(w).data)))
                   for w in self.tensors().values())


def _wrap(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def _unwrap(out: ad.Tensor, like):
    return out if isinstance(like, ad.Tensor) else out.data


def _attend(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise ad.ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def scaled_dot_attention(queries, keys, values):
    """softmax(Q K^T / sqrt(d_k)) V with a row-wise softmax."""
    out = _attend(_wrap(queries), _wrap(keys), _wrap(values))
    return _unwrap(out, queries)


def attention_weights(queries, keys) -> np.ndarray:
    q, k = np.asarray(queries, dtype=np.float64), np.asarray(keys, dtype=np.float64)
    return ad.softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])).data


def _projected(x: ad.Tensor, ctx: ad.Tensor, proj: dict | None) -> ad.Tensor:
    if proj is None:
        return _attend(x, ctx, ctx)
    out = _attend(ad.matmul(x, proj["w_q"]), ad.matmul(ctx, proj["w_k"]),
                  ad.matmul(ctx, proj["w_v"]))
    return ad.matmul(out, proj["w_o"])


def _layer_norm(x: ad.Tensor, eps: float = 1e-5) -> ad.Tensor:
    centred = x - ad.mean(x, axis=-1, keepdims=True)
    var = ad.mean(ad.square(centred), axis=-1, keepdims=True)
    return centred / ad.sqrt(var + eps)


@dataclass(frozen=True)
class BlockOptions:
    residual: bool = False
    layer_norm: bool = False


def _sublayer(x, ctx, proj, opts: BlockOptions):
    out = _projected(x, ctx, proj)
    if opts.residual:
        out = out + x
    if opts.layer_norm:
        out = _layer_norm(out)
    return out


def rff_block_tensors(video: ad.Tensor, text: ad.Tensor, params: AttentionParams,
                      opts: BlockOptions = BlockOptions()) -> tuple[ad.Tensor, ad.Tensor]:
    if video.shape[-1] != text.shape[-1]:
        raise ad.ShapeError(f"branch dims differ: {video.shape[-1]} vs {text.shape[-1]}")
    text_cross = params.cross if params.shared_cross else params.cross_text
    cv = _sublayer(video, text, params.cross, opts)
    cq = _sublayer(text, video, text_cross, opts)
    return (_sublayer(cv, cv, params.self_video, opts),
            _sublayer(cq, cq, params.self_text, opts))


def rff_block(video, text, params: AttentionParams, opts: BlockOptions = BlockOptions()):
    """One fusion block. Output lengths equal input lengths per branch."""
    if isinstance(video, FeatureSequence):
        v, q = rff_block_tensors(_wrap(video.tokens), _wrap(text.tokens), params, opts)
        return (FeatureSequence(v.data, Modality.VIDEO), FeatureSequence(q.data, Modality.TEXT))
    v, q = rff_block_tensors(_wrap(video), _wrap(text), params, opts)
    return _unwrap(v, video), _unwrap(q, text)


def rff_stack(video, text, params_per_layer: Sequence[AttentionParams], n: int | None = None,
              opts: BlockOptions = BlockOptions()):
    """Apply ``n`` blocks (default: one per parameter set)."""
    if not params_per_layer:
        raise ValueError("params_per_layer is empty")
    n = len(params_per_layer) if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(params_per_layer):
        raise ValueError(f"{n} blocks requested but {len(params_per_layer)} parameter sets given")
    for layer in params_per_layer[:n]:
        video, text = rff_block(video, text, layer, opts)
    return video, text


def stack_parameter_count(dim: int, n: int, shared_cross: bool = True) -> int:
    """Projection entries in an n-block stack: 12 D^2 per block when shared, 16 D^2 otherwise."""
    per_block = (3 if shared_cross else 4) * len(PROJECTIONS) * dim * dim
    return n * per_block
