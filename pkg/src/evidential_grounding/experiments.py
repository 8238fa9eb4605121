"""Training runs, adversarial noise sweeps, the span-bias probe, and run output.

Every run is a pure function of its config (which includes the seed).
Output files are written with fixed float formatting so reruns are
byte-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from . import calibration as cal
from . import grounding as gl
from .attention import rff_block_tensors
from .data import (CubicDatasetSpec, GroundingBatch, ToyGroundingSpec, add_video_noise,
                   gen_cubic, gen_grounding, replace_tokens)
from .losses import NormMode, Regularizer, geom_tensor, normalize_tensor
from .models import CubicModel, GroundingModel, GroundingModelConfig
from .nig import uncertainty_arrays


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} in {stage} at epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step = stage, epoch, step


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class NoiseTarget(str, enum.Enum):
    VIDEO = "video"
    TEXT = "text"
    BOTH = "both"


# configs ----------------------------------------------------------------------

@dataclass(frozen=True)
class CubicConfig:
    seed: int = 0
    n_train: int = 1000
    n_test: int = 600
    noise_sigma: float = 3.0
    hidden: tuple = (64, 64)
    activation: str = "relu"
    epochs: int = 300
    batch_size: int = 128
    lr: float = 5e-3
    reg: str = "geom1"
    lambda_nll: float = 1.0
    lambda_geom: float = 1.0
    norm_mode: str = "standard-minmax"
    log_epochs: tuple = (0, 5, 20, 100)
    bins: int = 64


@dataclass(frozen=True)
class GroundingConfig:
    seed: int = 0
    n_train_videos: int = 384
    n_eval_videos: int = 192
    clips: int = 32
    dim: int = 16
    query_tokens: int = 8
    vocab: int = 64
    n_concepts: int = 16
    n_blocks: int = 4
    signal_spread: float = 0.6
    mask_ratio: float = 0.125
    sma_epochs: int = 6
    sma_lr: float = 3e-3
    epochs: int = 40
    lr: float = 3e-3
    batch_size: int = 16
    reg: str = "geom1"
    lambda_nll: float = 1.0
    lambda_geom: float = 1.0
    lambda_der: float = 1e-3
    norm_mode: str = "standard-minmax"
    evidential_clips: str = "foreground"
    evidential_hidden: bool = False
    lambda_l1: float = 1.0
    lambda_iou: float = 1.0
    lambda_f: float = 1.0
    lambda_inter: float = 1.0
    lambda_intra: float = 1.0
    lambda_trace: float = 0.0
    tau: float = 0.07
    top_k: int = 4
    noise_sigmas: tuple = (0.0, 0.5, 1.0, 2.0)
    token_ratios: tuple = (0.0, 0.25, 0.5, 0.75)
    probe_resolution: int = 10
    probe_videos: int = 8
    log_epochs: tuple = (0, 5, 20)
    bins: int = 64


# which clips carry the evidential term: every clip, or ground-truth foreground only
EVIDENTIAL_CLIPS = ("all", "foreground")

CONFIG_TYPES = {"cubic": CubicConfig, "grounding": GroundingConfig}


def config_from_mapping(kind: str, mapping: dict, overrides: dict | None = None):
    """Build a config from a complete key-value mapping.

    Every field must be present and no unknown key is accepted; all problems
    are reported together.
    """
    cls = CONFIG_TYPES[kind]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    problems = [f"unknown key: {k}" for k in sorted(set(mapping) - set(fields))]
    problems += [f"missing key: {k}" for k in sorted(set(fields) - set(mapping))]
    if problems:
        raise ConfigError(problems)
    values = dict(mapping)
    values.update(overrides or {})
    for name, f in fields.items():
        default = f.default
        v = values[name]
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                problems.append(f"invalid value for {name}: expected a list")
                continue
            values[name] = tuple(v)
        elif isinstance(default, bool) or isinstance(default, str):
            if not isinstance(v, type(default)):
                problems.append(f"invalid value for {name}: expected {type(default).__name__}")
        elif isinstance(default, int):
            if not isinstance(v, int) or isinstance(v, bool):
                problems.append(f"invalid value for {name}: expected an integer")
        elif isinstance(default, float):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                problems.append(f"invalid value for {name}: expected a number")
            else:
                values[name] = float(v)
    if "reg" in values and values["reg"] not in {r.value for r in Regularizer}:
        problems.append(f"invalid value for reg: {values['reg']!r}")
    if "norm_mode" in values and values["norm_mode"] not in {m.value for m in NormMode}:
        problems.append(f"invalid value for norm_mode: {values['norm_mode']!r}")
    if "evidential_clips" in values and values["evidential_clips"] not in EVIDENTIAL_CLIPS:
        problems.append(f"invalid value for evidential_clips: {values['evidential_clips']!r}")
    if problems:
        raise ConfigError(problems)
    return cls(**values)


def config_to_mapping(config) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(config).items()}


def config_hash(config) -> str:
    blob = json.dumps(config_to_mapping(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# logging ----------------------------------------------------------------------

@dataclass
class ExperimentLog:
    metadata: dict
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    scatter: dict = field(default_factory=dict)

    def record(self, **entry) -> None:
        stage = entry.get("stage")
        prev = [e["epoch"] for e in self.epochs if e.get("stage") == stage]
        if prev and entry["epoch"] <= prev[-1]:
            raise ValueError("epochs must be recorded in increasing order")
        self.epochs.append(entry)


def _fmt(x) -> str:
    return repr(float(x))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header: list[str], rows, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if (isinstance(v, float) and not math.isfinite(v)) else
                        (_fmt(v) if isinstance(v, (float, np.floating)) else v) for v in row])


def write_log(log: ExperimentLog, out_dir: str) -> None:
    with open(os.path.join(out_dir, "log.jsonl"), "w") as fh:
        fh.write(json.dumps(_clean({"type": "metadata", **log.metadata}), sort_keys=True) + "\n")
        for entry in log.epochs:
            fh.write(json.dumps(_clean({"type": "epoch", **entry}), sort_keys=True) + "\n")
        for entry in log.steps:
            fh.write(json.dumps(_clean({"type": "step", **entry}), sort_keys=True) + "\n")
    seed = log.metadata.get("seed")
    for epoch, pairs in sorted(log.scatter.items()):
        write_csv(os.path.join(out_dir, f"scatter_epoch_{epoch}.csv"),
                  ["delta_norm", "phi_norm"], pairs, comment=f"seed={seed}")


# evidential terms -----------------------------------------------------------------

def evidential_terms(b, gamma, upsilon, alpha, beta, reg: Regularizer, lambda_nll: float,
                     lambda_geom: float, norm_mode: NormMode) -> tuple[ad.Tensor, dict]:
    """Per-prediction evidential loss; the error is detached from the regularizer."""
    nll = ad.nig_nll(b, gamma, upsilon, alpha, beta)
    terms = lambda_nll * nll
    delta = ad.tabs(ad.detach(gamma) - b)
    phi = 2.0 * upsilon + alpha
    info = {"nll": nll}
    if reg is Regularizer.VANILLA:
        terms = terms + lambda_geom * (delta * phi)
    elif reg in (Regularizer.TYPE1, Regularizer.TYPE2):
        dn = normalize_tensor(delta, norm_mode)
        pn = normalize_tensor(phi, norm_mode)
        terms = terms + lambda_geom * geom_tensor(dn, pn, reg)
        info.update(delta_norm=dn.data, phi_norm=pn.data)
    return terms, info


def scatter_pairs(delta, phi) -> np.ndarray:
    """Min-max normalised (error, evidence) pairs, one row per prediction."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    phi = np.asarray(phi, dtype=np.float64).ravel()

    def mm(x):
        span = np.ptp(x)
        return np.tanh(x) if span == 0 else (x - x.min()) / span

    return np.stack([mm(delta), mm(phi)], axis=1)


# cubic --------------------------------------------------------------------------

@dataclass
class CubicResult:
    model: CubicModel
    log: ExperimentLog
    dataset: Any
    y_scale: float
    report: dict


def cubic_predict(model: CubicModel, x, y_scale: float) -> dict:
    g, u, a, b = (t.data for t in model.nig(x))
    aleatoric, epistemic = uncertainty_arrays(u, a, b)
    return {"x": np.asarray(x, dtype=np.float64), "prediction": g * y_scale,
            "aleatoric": aleatoric * y_scale ** 2, "epistemic": epistemic * y_scale ** 2,
            "evidence": 2.0 * u + a}


def ood_ratio(x, epistemic, inner: float = 4.0) -> float:
    x, e = np.abs(np.asarray(x)), np.asarray(epistemic)
    return float(e[x > inner].mean() / e[x <= inner].mean())


def train_cubic(config: CubicConfig) -> CubicResult:
    reg = Regularizer(config.reg)
    mode = NormMode(config.norm_mode)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    data = gen_cubic(CubicDatasetSpec(n_train=config.n_train, n_test=config.n_test,
                                      noise_sigma=config.noise_sigma,
                                      seed=int(seeds[0].generate_state(1)[0])))
    y_scale = float(np.std(data.y_train))
    y = data.y_train / y_scale
    model = CubicModel(tuple(config.hidden), config.activation, seed=int(seeds[1].generate_state(1)[0]))
    opt = ad.Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(seeds[2])
    log = ExperimentLog(metadata={"experiment": "cubic", "seed": config.seed,
                                  "config_hash": config_hash(config), "reg": reg.value,
                                  "backend": _backend()})
    n = len(y)
    for epoch in range(config.epochs + 1):
        losses = []
        if epoch > 0:
            order = rng.permutation(n)
            for step, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                g, u, a, b = model.nig(data.x_train[idx])
                terms, _ = evidential_terms(y[idx], g, u, a, b, reg, config.lambda_nll,
                                            config.lambda_geom, mode)
                loss = ad.mean(terms)
                if not math.isfinite(loss.item()):
                    raise DivergenceError("cubic", epoch, step, loss.item())
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
        if epoch in config.log_epochs or epoch == config.epochs:
            train = cubic_predict(model, data.x_train, y_scale)
            test = cubic_predict(model, data.x_test, y_scale)
            g, u, a, _ = (t.data for t in model.nig(data.x_train))
            log.scatter[epoch] = scatter_pairs(np.abs(y - g), 2.0 * u + a)
            log.record(epoch=epoch, loss=float(np.mean(losses)) if losses else None,
                       train_rmse=float(np.sqrt(np.mean((train["prediction"] - data.y_train) ** 2))),
                       mean_epistemic_train=float(train["epistemic"].mean()),
                       mean_aleatoric_train=float(train["aleatoric"].mean()),
                       ood_ratio=ood_ratio(test["x"], test["epistemic"]))
    report = cubic_report(model, data, y_scale, config)
    return CubicResult(model, log, data, y_scale, report)


def cubic_report(model, data, y_scale, config) -> dict:
    train = cubic_predict(model, data.x_train, y_scale)
    test = cubic_predict(model, data.x_test, y_scale)
    delta = np.abs(train["prediction"] - data.y_train)
    x = np.abs(test["x"])
    out = {
        "experiment": "cubic",
        "seed": config.seed,
        "reg": config.reg,
        "train_rmse": float(np.sqrt(np.mean(delta ** 2))),
        "epistemic_in_range": float(test["epistemic"][x <= 4.0].mean()),
        "epistemic_out_of_range": float(test["epistemic"][x > 4.0].mean()),
        "ood_ratio": ood_ratio(test["x"], test["epistemic"]),
        "calibration": {},
    }
    for kind in ("epistemic", "aleatoric"):
        reports = cal.calibration_summary(delta, train[kind], bins=config.bins)
        out["calibration"][kind] = {k: r.to_dict() for k, r in reports.items()}
    return out


# grounding ------------------------------------------------------------------------

def _backend() -> str:
    from .kernels import BACKEND
    return BACKEND


def _spec(config: GroundingConfig, seed: int, n: int) -> ToyGroundingSpec:
    return ToyGroundingSpec(n_videos=n, clips=config.clips, dim=config.dim,
                            query_tokens=config.query_tokens, vocab=config.vocab,
                            n_concepts=config.n_concepts, signal_spread=config.signal_spread,
                            mask_ratio=config.mask_ratio, seed=seed)


def _weights(config: GroundingConfig) -> gl.GroundingWeights:
    return gl.GroundingWeights(lambda_l1=config.lambda_l1, lambda_iou=config.lambda_iou,
                               lambda_f=config.lambda_f, lambda_inter=config.lambda_inter,
                               lambda_intra=config.lambda_intra, tau=config.tau,
                               top_k=config.top_k)


def sma_mask_positions(batch: GroundingBatch, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Masked positions per query: the entity token first, then random extras."""
    n, length = batch.tokens.shape
    k = max(1, int(round(ratio * length)))
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        rest = np.delete(np.arange(length), batch.entity_pos[i])
        out[i, 0] = batch.entity_pos[i]
        if k > 1:
            out[i, 1:] = rng.choice(rest, size=k - 1, replace=False)
    return out


def sma_step(model: GroundingModel, batch: GroundingBatch, positions: np.ndarray) -> ad.Tensor:
    flat_rows = np.repeat(np.arange(len(batch)), positions.shape[1])
    flat_pos = positions.ravel()
    p = model.params
    text = p["tok_emb"][batch.tokens]
    keep = np.ones(batch.tokens.shape + (1,))
    keep[flat_rows, flat_pos] = 0.0
    text = text * keep
    v = ad.linear(p, "video_in", ad.Tensor(batch.video))
    for block in model.blocks:
        v, text = rff_block_tensors(v, text, block, model.opts)
    logits = ad.linear(p, "mlm.head", text[flat_rows, flat_pos])
    return gl.mlm_loss(logits, batch.tokens[flat_rows, flat_pos])


@dataclass
class StepTerms:
    grounding: ad.Tensor
    evidential: ad.Tensor | None
    n_terms: int
    total: ad.Tensor
    components: dict


def grounding_step(model: GroundingModel, batch: GroundingBatch, config: GroundingConfig,
                   rng: np.random.Generator) -> StepTerms:
    weights = _weights(config)
    v, text = model.encode(batch.video, batch.tokens)
    h = model.heads(v, text)
    fg = batch.foreground
    n_videos, n_clips = fg.shape
    times = batch.clip_times[None, :]

    focal = weights.lambda_f * gl.focal_loss(h["fg_prob"], fg)
    off = h["offsets"]
    pred_span = ad.concat([ad.reshape(times - off[..., 0], (n_videos, n_clips, 1)),
                           ad.reshape(times + off[..., 1], (n_videos, n_clips, 1))], axis=-1)
    true_span = np.broadcast_to(batch.spans[:, None, :], (n_videos, n_clips, 2))
    boundary = gl.boundary_loss(off, batch.offsets, pred_span, true_span, fg, weights)
    clip_loss = ad.mean(focal + boundary)

    # saliency terms, one sampled positive clip per video
    sal = h["saliency"]
    p_idx = np.empty(n_videos, dtype=np.int64)
    for i in range(n_videos):
        p_idx[i] = rng.choice(np.flatnonzero(fg[i] == 1))
    clips = v[np.arange(n_videos), p_idx]                           # (B, D)
    clip_n = clips / ad.sqrt(ad.tsum(ad.square(clips), axis=-1, keepdims=True) + 1e-12)
    sent = h["sentence"]
    sent_n = sent / ad.sqrt(ad.tsum(ad.square(sent), axis=-1, keepdims=True) + 1e-12)
    cross = ad.matmul(clip_n, ad.transpose(sent_n))                  # clip i vs sentence k
    inter_terms, intra_terms, trace_terms = [], [], []
    for i in range(n_videos):
        neg = gl.intra_negative_set(batch.saliency[i], int(p_idx[i]))
        intra_terms.append(gl.intra_video_contrastive(sal[i], int(p_idx[i]), neg, weights.tau))
        inter_terms.append(gl.inter_video_contrastive(cross[i], i, weights.tau))
        pos_i, neg_i = gl.select_trace_pairs(batch.saliency[i], fg[i], weights.top_k)
        if pos_i.size:
            trace_terms.append(gl.clip_trace_contrastive(v[i][pos_i], v[i][neg_i]))
    mean_of = lambda ts: ad.mean(ad.concat([ad.reshape(t, (1,)) for t in ts], axis=0))
    inter = mean_of(inter_terms)
    intra = mean_of(intra_terms)
    trace = mean_of(trace_terms) if trace_terms else ad.Tensor(0.0)
    saliency = weights.lambda_inter * inter + weights.lambda_intra * (intra + config.lambda_trace * trace)
    grounding = clip_loss + saliency

    components = {"focal": ad.mean(focal).item(), "boundary": ad.mean(boundary).item(),
                  "inter": inter.item(), "intra": intra.item(), "trace": trace.item()}
    reg = Regularizer(config.reg)
    if config.lambda_der == 0:
        return StepTerms(grounding, None, 0, grounding, components)

    rows, cols = np.nonzero(fg if config.evidential_clips == "foreground" else np.ones_like(fg))
    targets = batch.spans[rows]                       # (N, 2)
    pick = lambda t: t[rows, cols]                    # (N, 2)
    g, u, a, b = (pick(h[k]) for k in ("gamma", "upsilon", "alpha", "beta"))
    terms, info = evidential_terms(targets, g, u, a, b, reg, config.lambda_nll,
                                   config.lambda_geom, NormMode(config.norm_mode))
    per_clip = ad.mean(terms, axis=-1)                # average of start and end
    n_terms = per_clip.shape[0]
    evid_sum = ad.tsum(per_clip)
    total = grounding + (config.lambda_der * 2.0 / n_terms) * evid_sum
    components["nll"] = float(info["nll"].data.mean())
    return StepTerms(grounding, evid_sum, n_terms, total, components)


@dataclass
class GroundingEval:
    epistemic_video: np.ndarray
    aleatoric_video: np.ndarray
    delta: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    scatter: np.ndarray
    r1_at_05: float
    miou: float


def evaluate_grounding(model: GroundingModel, batch: GroundingBatch, chunk: int = 64,
                       video=None, tokens=None) -> GroundingEval:
    """Uncertainty and localisation quality on ground-truth foreground clips."""
    video = batch.video if video is None else video
    tokens = batch.tokens if tokens is None else tokens
    epi_v, ale_v, deltas, epis, ales, phis, ious = [], [], [], [], [], [], []
    for s in range(0, len(batch), chunk):
        sl = slice(s, s + chunk)
        v, text = model.encode(video[sl], tokens[sl])
        h = model.heads(v, text)
        g, u, a, b = (h[k].data for k in ("gamma", "upsilon", "alpha", "beta"))
        ale, epi = uncertainty_arrays(u, a, b)
        fg = batch.foreground[sl]
        spans = batch.spans[sl]
        for i in range(fg.shape[0]):
            m = fg[i] == 1
            epi_v.append(epi[i][m].mean())
            ale_v.append(ale[i][m].mean())
            deltas.append(np.abs(g[i][m] - spans[i][None, :]).ravel())
            epis.append(epi[i][m].ravel())
            ales.append(ale[i][m].ravel())
            phis.append((2.0 * u[i][m] + a[i][m]).ravel())
            off = h["offsets"].data[i]
            t = batch.clip_times
            cands = [(gl.Span(float(t[j] - off[j, 0]), float(t[j] + off[j, 1])),
                      float(h["fg_prob"].data[i, j])) for j in range(len(t))]
            top = gl.nms_1d(cands, gl.DEFAULT_NMS_THRESHOLD)[0][0]
            ious.append(float(gl.temporal_iou(top.start, top.end, spans[i][0], spans[i][1])))
    delta = np.concatenate(deltas)
    phi = np.concatenate(phis)
    ious = np.asarray(ious)
    return GroundingEval(
        epistemic_video=np.asarray(epi_v), aleatoric_video=np.asarray(ale_v),
        delta=delta, epistemic=np.concatenate(epis), aleatoric=np.concatenate(ales),
        scatter=scatter_pairs(delta, phi),
        r1_at_05=float((ious >= 0.5).mean()), miou=float(ious.mean()))


@dataclass
class GroundingResult:
    model: GroundingModel
    log: ExperimentLog
    train: GroundingBatch
    eval: GroundingBatch
    config: GroundingConfig
    mlm_snapshot: dict


def train_grounding(config: GroundingConfig, on_epoch=None) -> GroundingResult:
    """Two stages: masked-token reconstruction, then grounding + evidential losses."""
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    data_seed = int(seeds[0].generate_state(1)[0])
    train = gen_grounding(_spec(config, data_seed, config.n_train_videos), seed_offset=0)
    evalset = gen_grounding(_spec(config, data_seed, config.n_eval_videos), seed_offset=1)
    model = GroundingModel(GroundingModelConfig(dim=config.dim, vocab=config.vocab,
                                                n_blocks=config.n_blocks,
                                                evidential_hidden=config.evidential_hidden,
                                                seed=int(seeds[1].generate_state(1)[0])))
    shuffle = np.random.default_rng(seeds[2])
    sample_rng = np.random.default_rng(seeds[3])
    log = ExperimentLog(metadata={"experiment": "grounding", "seed": config.seed,
                                  "config_hash": config_hash(config), "reg": config.reg,
                                  "backend": _backend()})
    n = len(train)

    sma_names = [k for k in model.params]
    sma_opt = ad.Adam({k: model.params[k] for k in sma_names}, lr=config.sma_lr)
    for epoch in range(1, config.sma_epochs + 1):
        losses = []
        order = shuffle.permutation(n)
        for step, s in enumerate(range(0, n, config.batch_size)):
            batch = train.subset(order[s:s + config.batch_size])
            positions = sma_mask_positions(batch, config.mask_ratio, sample_rng)
            loss = sma_step(model, batch, positions)
            if not math.isfinite(loss.item()):
                raise DivergenceError("sma", epoch, step, loss.item())
            sma_opt.zero_grad()
            loss.backward()
            sma_opt.step()
            losses.append(loss.item())
        log.record(epoch=epoch, stage="sma", mlm_loss=float(np.mean(losses)))

    mlm_snapshot = {k: model.params[k].data.copy() for k in model.mlm_names()}
    names = model.grounding_names()
    opt = ad.Adam({k: model.params[k] for k in names}, lr=config.lr)
    for epoch in range(0, config.epochs + 1):
        comps: dict[str, list] = {}
        if epoch > 0:
            order = shuffle.permutation(n)
            for step, s in enumerate(range(0, n, config.batch_size)):
                batch = train.subset(order[s:s + config.batch_size])
                terms = grounding_step(model, batch, config, sample_rng)
                total = terms.total.item()
                if not math.isfinite(total):
                    raise DivergenceError("grounding", epoch, step, total)
                for p in model.params.values():
                    p.grad = None
                terms.total.backward()
                opt.step()
                log.steps.append({
                    "epoch": epoch, "step": step, "grounding": terms.grounding.item(),
                    "evidential_sum": None if terms.evidential is None else terms.evidential.item(),
                    "n_terms": terms.n_terms, "lambda_der": config.lambda_der, "total": total})
                for k, val in terms.components.items():
                    comps.setdefault(k, []).append(val)
        if epoch in config.log_epochs or epoch == config.epochs:
            ev = evaluate_grounding(model, evalset)
            log.scatter[epoch] = ev.scatter
            log.record(epoch=epoch, stage="grounding",
                       **{k: float(np.mean(v)) for k, v in sorted(comps.items())},
                       mean_epistemic=float(ev.epistemic_video.mean()),
                       mean_aleatoric=float(ev.aleatoric_video.mean()),
                       r1_at_05=ev.r1_at_05, miou=ev.miou)
        if on_epoch is not None:
            on_epoch(epoch, log)
    return GroundingResult(model, log, train, evalset, config, mlm_snapshot)


# adversarial sweep and bias probe ---------------------------------------------

@dataclass
class SweepResult:
    target: NoiseTarget
    levels: list
    epistemic: list          # per level: per-video mean epistemic
    aleatoric: list

    def means(self) -> np.ndarray:
        return np.array([e.mean() for e in self.epistemic])


def noise_sweep(model: GroundingModel, batch: GroundingBatch, noise_sigmas, token_ratios,
                target: NoiseTarget | str, seed: int = 0) -> SweepResult:
    """Epistemic/aleatoric per video under increasing perturbation.

    Level k uses ``noise_sigmas[k]`` for clip features and ``token_ratios[k]``
    for query tokens; ``both`` applies the identical perturbations of the two
    single-modality sweeps together.
    """
    target = NoiseTarget(target)
    if len(noise_sigmas) == 0 or len(noise_sigmas) != len(token_ratios):
        raise ValueError("need matching, non-empty noise schedules")
    levels, epis, ales = [], [], []
    for k, (sigma, ratio) in enumerate(zip(noise_sigmas, token_ratios)):
        video, tokens = batch.video, batch.tokens
        if target in (NoiseTarget.VIDEO, NoiseTarget.BOTH) and sigma > 0:
            video = add_video_noise(batch, sigma, np.random.default_rng([seed, k, 0])).video
        if target in (NoiseTarget.TEXT, NoiseTarget.BOTH) and ratio > 0:
            tokens = replace_tokens(batch.tokens, ratio, np.random.default_rng([seed, k, 1]))
        ev = evaluate_grounding(model, batch, video=video, tokens=tokens)
        levels.append({"level": k, "sigma": float(sigma), "ratio": float(ratio)})
        epis.append(ev.epistemic_video)
        ales.append(ev.aleatoric_video)
    return SweepResult(target, levels, epis, ales)


def probe_spans(resolution: int) -> tuple[np.ndarray, list]:
    """Cell centres of a resolution x resolution (start, end) grid, valid cells only."""
    centres = (np.arange(resolution) + 0.5) / resolution
    cells = [(i, j) for i in range(resolution) for j in range(resolution) if j > i]
    return centres, cells


@dataclass
class BiasGrid:
    centres: np.ndarray
    epistemic: np.ndarray        # (R, R), NaN where start > end
    aleatoric: np.ndarray
    excluded: np.ndarray         # bool (R, R)

    def ratio(self) -> float:
        valid = np.isfinite(self.epistemic)
        ex = self.epistemic[valid & self.excluded]
        tr = self.epistemic[valid & ~self.excluded]
        return float(ex.mean() / tr.mean())


def bias_probe(model: GroundingModel, config: GroundingConfig, seed: int = 0) -> BiasGrid:
    """Mean epistemic uncertainty over synthetic queries tiling the (start, end) grid."""
    res = config.probe_resolution
    centres, cells = probe_spans(res)
    half = 0.5 / res
    spans, keys = [], []
    for (i, j) in cells:
        for _ in range(config.probe_videos):
            spans.append((centres[i] - half, centres[j] + half))
            keys.append((i, j))
    spec = _spec(config, int(np.random.SeedSequence(config.seed).spawn(5)[0].generate_state(1)[0]),
                 len(spans))
    batch = gen_grounding(spec, spans=spans, seed_offset=1000 + seed)
    ev = evaluate_grounding(model, batch)
    epi = np.full((res, res), np.nan)
    ale = np.full((res, res), np.nan)
    keys = np.asarray(keys)
    for (i, j) in cells:
        m = (keys[:, 0] == i) & (keys[:, 1] == j)
        epi[i, j] = ev.epistemic_video[m].mean()
        ale[i, j] = ev.aleatoric_video[m].mean()
    start = centres[:, None] - half
    end = centres[None, :] + half
    excluded = np.asarray(spec.in_excluded(np.broadcast_to(start, (res, res)),
                                           np.broadcast_to(end, (res, res))))
    return BiasGrid(centres, epi, ale, excluded)


def grounding_report(result: GroundingResult) -> dict:
    ev = evaluate_grounding(result.model, result.eval)
    out = {"experiment": "grounding", "seed": result.config.seed, "reg": result.config.reg,
           "r1_at_05": ev.r1_at_05, "miou": ev.miou, "calibration": {}}
    for kind in ("epistemic", "aleatoric"):
        reports = cal.calibration_summary(ev.delta, getattr(ev, kind), bins=result.config.bins)
        out["calibration"][kind] = {k: r.to_dict() for k, r in reports.items()}
    return out


# orchestration ------------------------------------------------------------------

def run_experiment(kind: str, config, out_dir: str) -> dict:
    """Train and write every artifact for one run into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    from . import svg

    if kind == "cubic":
        result = train_cubic(config)
        report = result.report
        write_log(result.log, out_dir)
        ad.save_checkpoint(os.path.join(out_dir, "checkpoint.json"), result.model.params,
                           {"experiment": "cubic", "y_scale": result.y_scale})
        test = cubic_predict(result.model, result.dataset.x_test, result.y_scale)
        write_csv(os.path.join(out_dir, "predictions.csv"),
                  ["x", "prediction", "aleatoric", "epistemic"],
                  zip(test["x"], test["prediction"], test["aleatoric"], test["epistemic"]),
                  comment=f"seed={config.seed}")
    else:
        result = train_grounding(config)
        report = grounding_report(result)
        write_log(result.log, out_dir)
        ad.save_checkpoint(os.path.join(out_dir, "checkpoint.json"), result.model.params,
                           {"experiment": "grounding"})
        sweeps = {}
        for target in NoiseTarget:
            sweep = noise_sweep(result.model, result.eval, config.noise_sigmas,
                                config.token_ratios, target, seed=config.seed)
            sweeps[target.value] = sweep
            _write_kde(sweep, out_dir, config.seed)
        report["noise_sweep"] = {t: s.means().tolist() for t, s in sweeps.items()}
        grid = bias_probe(result.model, config)
        report["bias_ratio"] = grid.ratio()
        rows = [(float(grid.centres[i]), float(grid.centres[j]), grid.epistemic[i, j],
                 grid.aleatoric[i, j], int(grid.excluded[i, j]))
                for i in range(len(grid.centres)) for j in range(len(grid.centres))]
        write_csv(os.path.join(out_dir, "bias_grid.csv"),
                  ["start", "end", "epistemic", "aleatoric", "excluded"], rows,
                  comment=f"seed={config.seed}")
        svg.write_heatmap(os.path.join(out_dir, "bias_grid.svg"), grid.epistemic)
    for epoch, pairs in result.log.scatter.items():
        svg.write_scatter(os.path.join(out_dir, f"scatter_epoch_{epoch}.svg"), pairs)
    report["config_hash"] = config_hash(config)
    report["backend"] = _backend()
    dump_json(os.path.join(out_dir, "report.json"), report)
    dump_json(os.path.join(out_dir, "config.json"), config_to_mapping(config))
    return report


def _write_kde(sweep: SweepResult, out_dir: str, seed: int) -> None:
    pooled = np.concatenate(sweep.epistemic)
    lo, hi = float(np.log10(pooled.min())), float(np.log10(pooled.max()))
    grid = np.linspace(lo - 0.5, hi + 0.5, 128)
    for lvl, values in zip(sweep.levels, sweep.epistemic):
        logs = np.log10(values)
        dens = cal.gaussian_kde(logs, grid) if np.std(logs) > 0 else np.zeros_like(grid)
        write_csv(os.path.join(out_dir, f"kde_{sweep.target.value}_{lvl['level']}.csv"),
                  ["x", "density"], zip(grid, dens),
                  comment=f"seed={seed} target={sweep.target.value} sigma={lvl['sigma']} "
                          f"ratio={lvl['ratio']} x=log10(epistemic)")
