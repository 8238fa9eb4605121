"""Temporal-grounding head losses and 1-D non-maximum suppression.

Losses accept floats/arrays (returning floats) or tape tensors (returning
tensors), so the trainer and the tests share one implementation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels

FOCAL_EPS = 1e-7
DEFAULT_TAU = 0.07
DEFAULT_NMS_THRESHOLD = 0.7


@dataclass(frozen=True)
class Span:
    start: float
    end: float

    def __post_init__(self):
        if not self.start <= self.end:
            raise ValueError(f"span start {self.start} > end {self.end}")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class ClipLabel:
    foreground: int
    saliency: float
    offsets: tuple[float, float] | None = None

    def __post_init__(self):
        if self.foreground not in (0, 1):
            raise ValueError("foreground flag must be 0 or 1")
        if self.foreground and (self.offsets is None or min(self.offsets) < 0):
            raise ValueError("foreground clips need non-negative offsets")


@dataclass(frozen=True)
class GroundingWeights:
    lambda_l1: float = 1.0
    lambda_iou: float = 1.0
    lambda_f: float = 1.0
    lambda_inter: float = 1.0
    lambda_intra: float = 1.0
    tau: float = DEFAULT_TAU
    top_k: int = 4

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_iou", "lambda_f", "lambda_inter", "lambda_intra"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, ad.Tensor) for x in xs)


def _out(t: ad.Tensor, tensor_mode: bool):
    if tensor_mode:
        return t
    return float(t.data) if t.data.ndim == 0 else t.data


# focal ------------------------------------------------------------------------

def focal_loss(pred, target, gamma: float = 2.0, alpha: float = 0.9,
               positive_only: bool = False):
    """Binary focal loss on a foreground probability.

    The positive branch is ``-alpha (1-p)^gamma log p``; negatives use the
    usual ``-(1-alpha) p^gamma log(1-p)`` unless ``positive_only``.
    """
    tensor_mode = _any_tensor(pred)
    p_raw = ad.as_tensor(pred)
    if np.any((p_raw.data < 0) | (p_raw.data > 1)):
        raise ValueError("pred must lie in [0, 1]")
    target = np.asarray(target, dtype=np.float64)
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("target must be 0 or 1")
    p = ad.clip(p_raw, FOCAL_EPS, 1.0 - FOCAL_EPS)
    pos = -alpha * ad.power(1.0 - p, gamma) * ad.log(p)
    if positive_only:
        neg = ad.Tensor(np.zeros(p.shape))
    else:
        neg = -(1.0 - alpha) * ad.power(p, gamma) * ad.log(1.0 - p)
    return _out(ad.where(target == 1, pos, neg), tensor_mode)


# boundary -----------------------------------------------------------------------

def smooth_l1(pred, target, beta: float = 1.0):
    """Smooth-L1 per coordinate, summed over the last axis."""
    tensor_mode = _any_tensor(pred, target)
    diff = ad.as_tensor(pred) - ad.as_tensor(target)
    a = ad.tabs(diff)
    quad = ad.where(a.data < beta, 0.5 * ad.square(diff) / beta, a - 0.5 * beta)
    return _out(ad.tsum(quad, axis=-1), tensor_mode)


def temporal_iou(s1, e1, s2, e2):
    """Plain IoU of [s1, e1] and [s2, e2] (elementwise)."""
    s1, e1, s2, e2 = (np.asarray(x, dtype=np.float64) for x in (s1, e1, s2, e2))
    inter = np.maximum(0.0, np.minimum(e1, e2) - np.maximum(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    same = (s1 == s2) & (e1 == e2)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), np.where(same, 1.0, 0.0))


def generalized_iou_1d(pred_start, pred_end, true_start, true_end):
    """IoU minus the fraction of the hull not covered by the union.

    Two zero-length spans (empty union) score 1 when they coincide and 0
    otherwise, which keeps the range at (-1, 1].
    """
    tensor_mode = _any_tensor(pred_start, pred_end, true_start, true_end)
    ps, pe, ts, te = (ad.as_tensor(x) for x in (pred_start, pred_end, true_start, true_end))
    inter = ad.relu(ad.minimum(pe, te) - ad.maximum(ps, ts))
    union = (pe - ps) + (te - ts) - inter
    hull = ad.maximum(pe, te) - ad.minimum(ps, ts)
    points = union.data <= 0
    same = (ps.data == ts.data) & (pe.data == te.data)
    safe_union = ad.where(points, 1.0, union)
    safe_hull = ad.where(hull.data <= 0, 1.0, hull)
    giou = inter / safe_union - (hull - union) / safe_hull
    giou = ad.where(points, np.where(same, 1.0, 0.0), giou)
    return _out(giou, tensor_mode)


def boundary_loss(pred_offsets, true_offsets, pred_span, true_span, f,
                  weights: GroundingWeights = GroundingWeights()):
    """Smooth-L1 on offsets plus (1 - gIoU) on spans, foreground clips only."""
    tensor_mode = _any_tensor(pred_offsets, pred_span)
    f = np.asarray(f, dtype=np.float64)
    if isinstance(pred_span, Span):
        pred_span = (pred_span.start, pred_span.end)
    if isinstance(true_span, Span):
        true_span = (true_span.start, true_span.end)
    if tensor_mode and isinstance(pred_span, ad.Tensor):
        ps, pe = pred_span[..., 0], pred_span[..., 1]
    else:
        ps, pe = pred_span[0], pred_span[1]
    ts, te = np.asarray(true_span, dtype=np.float64)[..., 0], np.asarray(true_span, dtype=np.float64)[..., 1]
    l1 = smooth_l1(ad.as_tensor(pred_offsets), ad.as_tensor(true_offsets))
    giou = generalized_iou_1d(ad.as_tensor(ps), ad.as_tensor(pe), ts, te)
    loss = weights.lambda_l1 * l1 + weights.lambda_iou * (1.0 - giou)
    return _out(loss * f, tensor_mode)


# saliency -----------------------------------------------------------------------

def cosine_scores(video, sentence, eps: float = 0.0):
    """Cosine similarity of each video token (rows) with the sentence vector."""
    tensor_mode = _any_tensor(video, sentence)
    v, s = ad.as_tensor(video), ad.as_tensor(sentence)
    vn = ad.sqrt(ad.tsum(ad.square(v), axis=-1, keepdims=True) + eps)
    sn = ad.sqrt(ad.tsum(ad.square(s), axis=-1, keepdims=True) + eps)
    if np.any(vn.data == 0) or np.any(sn.data == 0):
        raise ValueError("zero-norm vector in cosine similarity")
    if s.ndim == v.ndim - 1:
        s = ad.reshape(s, s.shape[:-1] + (1, s.shape[-1]))
        sn = ad.reshape(sn, sn.shape[:-1] + (1, 1))
    dots = ad.tsum(v * s, axis=-1, keepdims=True)
    return _out(ad.reshape(dots / (vn * sn), dots.shape[:-1]), tensor_mode)


def saliency_scores(video, sentence):
    if hasattr(video, "tokens"):
        video = video.tokens
    return cosine_scores(video, sentence)


def intra_video_contrastive(scores, positive_index: int, negative_set: Sequence[int],
                            tau: float = DEFAULT_TAU):
    """-log softmax of the positive against itself plus the negatives."""
    tensor_mode = _any_tensor(scores)
    s = ad.as_tensor(scores)
    if s.data.size == 0:
        raise ValueError("empty score list")
    idx = np.concatenate([[positive_index], np.asarray(negative_set, dtype=np.int64)]).astype(np.int64)
    logits = s[idx] * (1.0 / tau)
    return _out(ad.logsumexp(logits, axis=-1) - logits[0], tensor_mode)


def intra_negative_set(saliency, positive_index: int) -> np.ndarray:
    s = np.asarray(saliency, dtype=np.float64)
    return np.flatnonzero(s < s[positive_index])


def clip_trace_contrastive(pos, neg):
    """Negative mean of the diagonal of pos @ neg^T."""
    tensor_mode = _any_tensor(pos, neg)
    p, n = ad.as_tensor(pos), ad.as_tensor(neg)
    if p.shape != n.shape:
        raise ValueError(f"pos {p.shape} and neg {n.shape} must match")
    k = p.shape[-2] if p.ndim >= 2 else 0
    if k == 0:
        raise ValueError("need K >= 1 pairs")
    diag = ad.tsum(p * n, axis=-1)
    return _out(-ad.mean(diag, axis=-1), tensor_mode)


def select_trace_pairs(saliency, foreground, top_k: int,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the K positive and K negative clips for the trace loss.

    With saliency labels: positives are foreground clips by descending
    saliency, negatives background clips by ascending saliency. Without
    (``saliency is None``): a seeded random draw from each side.
    """
    fg = np.flatnonzero(np.asarray(foreground) == 1)
    bg = np.flatnonzero(np.asarray(foreground) == 0)
    k = min(top_k, fg.size, bg.size)
    if k == 0:
        return fg[:0], bg[:0]
    if saliency is None:
        if rng is None:
            raise ValueError("random pair selection needs an rng")
        return np.sort(rng.choice(fg, k, replace=False)), np.sort(rng.choice(bg, k, replace=False))
    s = np.asarray(saliency, dtype=np.float64)
    pos = fg[np.argsort(-s[fg], kind="stable")][:k]
    neg = bg[np.argsort(s[bg], kind="stable")][:k]
    return pos, neg


def inter_video_contrastive(score_matrix, positive_index: int, tau: float = DEFAULT_TAU):
    """-log softmax over the batch of sentence matches for one clip."""
    tensor_mode = _any_tensor(score_matrix)
    s = ad.as_tensor(score_matrix)
    if s.data.size == 0:
        raise ValueError("empty batch")
    logits = s * (1.0 / tau)
    return _out(ad.logsumexp(logits, axis=-1) - logits[..., positive_index], tensor_mode)


def mlm_loss(logits, targets):
    """Mean cross-entropy over masked positions."""
    tensor_mode = _any_tensor(logits)
    z = ad.as_tensor(logits)
    if z.ndim == 1:
        z = ad.reshape(z, (1, -1))
    t = np.asarray(targets, dtype=np.int64).ravel()
    if t.size != z.shape[0] or t.size == 0:
        raise ValueError(f"{t.size} targets for {z.shape[0]} masked positions")
    if np.any((t < 0) | (t >= z.shape[1])):
        raise ValueError(f"target id outside vocabulary of {z.shape[1]}")
    picked = z[np.arange(t.size), t]
    return _out(ad.mean(ad.logsumexp(z, axis=-1) - picked), tensor_mode)


def saliency_loss(inter, intra, trace, weights: GroundingWeights = GroundingWeights()):
    return weights.lambda_inter * inter + weights.lambda_intra * (intra + trace)


def grounding_loss(per_clip_terms, weights: GroundingWeights = GroundingWeights()):
    """Mean over clips of L_f + L_b + L_s.

    ``per_clip_terms`` rows are ``(focal, boundary, saliency)``, or
    ``(focal, boundary, inter, intra, trace)`` in which case the saliency
    term is assembled with the weights.
    """
    rows = np.asarray(per_clip_terms, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[0] == 0:
        raise ValueError("no clips")
    if rows.shape[1] == 3:
        sal = rows[:, 2]
    elif rows.shape[1] == 5:
        sal = saliency_loss(rows[:, 2], rows[:, 3], rows[:, 4], weights)
    else:
        raise ValueError("rows must have 3 or 5 columns")
    return float(np.mean(rows[:, 0] + rows[:, 1] + sal))


# NMS --------------------------------------------------------------------------

def nms_1d(spans: Sequence[tuple[Span, float]], iou_threshold: float = DEFAULT_NMS_THRESHOLD):
    """Greedy suppression: drop spans whose IoU with a kept span exceeds the threshold.

    Kept spans come back ordered by confidence (descending), then start.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if not spans:
        return []
    starts = np.ascontiguousarray([s.start for s, _ in spans], dtype=np.float64)
    ends = np.ascontiguousarray([s.end for s, _ in spans], dtype=np.float64)
    scores = np.ascontiguousarray([c for _, c in spans], dtype=np.float64)
    keep = kernels.nms_keep(starts, ends, scores, float(iou_threshold))
    return [spans[i] for i in keep]
