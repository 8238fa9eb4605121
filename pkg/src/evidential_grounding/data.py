"""Synthetic datasets: the cubic regression benchmark and a toy grounding task."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grounding import Span

TIME_DIMS = 4


@dataclass(frozen=True)
class CubicDatasetSpec:
    n_train: int = 1000
    n_test: int = 600
    train_range: tuple = (-4.0, 4.0)
    test_range: tuple = (-6.0, 6.0)
    noise_sigma: float = 3.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.train_range
        tlo, thi = self.test_range
        if not (tlo < lo < hi < thi):
            raise ValueError("test range must strictly contain the train range")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class CubicDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: CubicDatasetSpec


def cubic_target(x, noise_sigma: float, rng: np.random.Generator | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x ** 3
    if noise_sigma > 0:
        y = y + rng.normal(0.0, noise_sigma, size=x.shape)
    return y


def gen_cubic(spec: CubicDatasetSpec) -> CubicDataset:
    """``y = x^3 + N(0, sigma^2)``; train on a uniform draw, test on an even grid."""
    rng = np.random.default_rng(spec.seed)
    x_train = np.sort(rng.uniform(*spec.train_range, size=spec.n_train))
    y_train = cubic_target(x_train, spec.noise_sigma, rng)
    x_test = np.linspace(*spec.test_range, spec.n_test)
    y_test = cubic_target(x_test, spec.noise_sigma, rng)
    return CubicDataset(x_train, y_train, x_test, y_test, spec)


# toy grounding ----------------------------------------------------------------

@dataclass(frozen=True)
class ToyGroundingSpec:
    n_videos: int = 512
    clips: int = 32
    dim: int = 16
    query_tokens: int = 8
    vocab: int = 64
    n_concepts: int = 16
    signal: float = 1.5
    signal_spread: float = 0.0
    feature_noise: float = 0.3
    short_fraction: float = 0.7
    excluded_start: float = 0.6
    excluded_end: float = 0.8
    min_length: float = 0.08
    distractor: bool = True
    mask_ratio: float = 0.125
    seed: int = 0

    def __post_init__(self):
        if self.n_concepts >= self.vocab:
            raise ValueError("vocab must leave room for filler tokens")
        if self.dim <= TIME_DIMS:
            raise ValueError(f"dim must exceed the {TIME_DIMS} time channels")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must be in [0, 1]")
        if not 0.0 <= self.signal_spread < 1.0:
            raise ValueError("signal_spread must be in [0, 1)")

    def in_excluded(self, start, end):
        return (np.asarray(start) > self.excluded_start) & (np.asarray(end) > self.excluded_end)


@dataclass
class GroundingBatch:
    """Stacked samples. Arrays carry a leading sample axis."""

    video: np.ndarray          # (N, L_v, D)
    tokens: np.ndarray         # (N, L_q) int
    entity_pos: np.ndarray     # (N,) index of the masked-able entity token
    foreground: np.ndarray     # (N, L_v) {0,1}
    saliency: np.ndarray       # (N, L_v) in [0,1]
    offsets: np.ndarray        # (N, L_v, 2), zero on background
    spans: np.ndarray          # (N, 2)
    concept: np.ndarray        # (N,)
    clip_times: np.ndarray     # (L_v,)

    def __len__(self) -> int:
        return self.video.shape[0]

    def subset(self, idx) -> "GroundingBatch":
        return GroundingBatch(self.video[idx], self.tokens[idx], self.entity_pos[idx],
                              self.foreground[idx], self.saliency[idx], self.offsets[idx],
                              self.spans[idx], self.concept[idx], self.clip_times)

    def span(self, i: int) -> Span:
        return Span(float(self.spans[i, 0]), float(self.spans[i, 1]))


def concept_signatures(spec: ToyGroundingSpec) -> np.ndarray:
    """Fixed unit-norm content vectors, one per concept."""
    rng = np.random.default_rng([spec.seed, 7919])
    sig = rng.normal(size=(spec.n_concepts, spec.dim - TIME_DIMS))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def clip_times(n_clips: int) -> np.ndarray:
    return (np.arange(n_clips) + 0.5) / n_clips


def time_features(times: np.ndarray) -> np.ndarray:
    k = np.arange(1, TIME_DIMS + 1)
    return np.cos(np.pi * np.outer(times, k))


def sample_span(spec: ToyGroundingSpec, rng: np.random.Generator) -> tuple[float, float]:
    """Draw from the biased joint: mostly short early spans, never the excluded corner."""
    while True:
        if rng.uniform() < spec.short_fraction:
            start = rng.uniform(0.0, 0.5)
            end = start + rng.uniform(spec.min_length, 0.25)
        else:
            start = rng.uniform(0.0, 1.0 - spec.min_length)
            end = rng.uniform(start + spec.min_length, 1.0)
        if end <= 1.0 and not spec.in_excluded(start, end):
            return float(start), float(end)


def _distractor(spec, rng, start, end):
    for _ in range(20):
        length = rng.uniform(spec.min_length, 0.2)
        d0 = rng.uniform(0.0, 1.0 - length)
        if d0 + length < start or d0 > end:
            return d0, d0 + length
    return None


def render_sample(spec: ToyGroundingSpec, span: tuple[float, float], concept: int,
                  rng: np.random.Generator, signatures: np.ndarray):
    """Features, tokens and labels for one video whose target moment is ``span``."""
    L, D = spec.clips, spec.dim
    times = clip_times(L)
    start, end = span
    video = np.empty((L, D))
    video[:, :TIME_DIMS] = time_features(times)
    video[:, TIME_DIMS:] = rng.normal(0.0, spec.feature_noise, size=(L, D - TIME_DIMS))
    fg = ((times >= start) & (times <= end)).astype(np.float64)
    # per-video signal strength; weak videos are harder to localise
    signal = spec.signal
    if spec.signal_spread > 0:
        signal *= rng.uniform(1.0 - spec.signal_spread, 1.0 + spec.signal_spread)
    video[fg == 1, TIME_DIMS:] += signal * signatures[concept]
    if spec.distractor:
        other = (concept + 1 + rng.integers(spec.n_concepts - 1)) % spec.n_concepts
        seg = _distractor(spec, rng, start, end)
        if seg is not None:
            inside = (times >= seg[0]) & (times <= seg[1])
            video[inside, TIME_DIMS:] += signal * signatures[other]

    tokens = rng.integers(spec.n_concepts, spec.vocab, size=spec.query_tokens)
    entity_pos = int(rng.integers(spec.query_tokens))
    tokens[entity_pos] = concept

    center, half = 0.5 * (start + end), max(0.5 * (end - start), 1e-6)
    saliency = np.exp(-0.5 * ((times - center) / half) ** 2)
    offsets = np.stack([times - start, end - times], axis=1) * fg[:, None]
    return video, tokens, entity_pos, fg, saliency, offsets


def gen_grounding(spec: ToyGroundingSpec, spans=None, concepts=None,
                  seed_offset: int = 0) -> GroundingBatch:
    """Generate ``spec.n_videos`` samples (or one per given span)."""
    rng = np.random.default_rng([spec.seed, seed_offset])
    signatures = concept_signatures(spec)
    n = spec.n_videos if spans is None else len(spans)
    rows = []
    all_spans = []
    all_concepts = []
    for i in range(n):
        span = sample_span(spec, rng) if spans is None else tuple(map(float, spans[i]))
        concept = int(rng.integers(spec.n_concepts)) if concepts is None else int(concepts[i])
        rows.append(render_sample(spec, span, concept, rng, signatures))
        all_spans.append(span)
        all_concepts.append(concept)
    video, tokens, entity, fg, sal, off = (np.stack(c) for c in zip(*rows))
    return GroundingBatch(video=video, tokens=tokens.astype(np.int64),
                          entity_pos=entity.astype(np.int64), foreground=fg, saliency=sal,
                          offsets=off, spans=np.asarray(all_spans), concept=np.asarray(all_concepts),
                          clip_times=clip_times(spec.clips))


# adversarial perturbations ------------------------------------------------------

def add_video_noise(batch: GroundingBatch, sigma: float, rng: np.random.Generator) -> GroundingBatch:
    if sigma == 0:
        return batch
    noisy = batch.subset(slice(None))
    noisy.video = batch.video + rng.normal(0.0, sigma, size=batch.video.shape)
    return noisy


def replace_tokens(tokens: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Swap a fraction of each query's tokens for same-position tokens of other queries.

    Within one query, the replaced positions draw from distinct donor queries.
    """
    tokens = np.asarray(tokens)
    n, length = tokens.shape
    k = int(round(ratio * length))
    out = tokens.copy()
    if k == 0 or n < 2:
        return out
    for i in range(n):
        positions = rng.choice(length, size=k, replace=False)
        others = np.delete(np.arange(n), i)
        donors = rng.choice(others, size=k, replace=k > others.size)
        out[i, positions] = tokens[donors, positions]
    return out
