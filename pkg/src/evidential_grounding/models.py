"""The two desk-scale models: an evidential MLP and a toy grounding network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, BlockOptions, rff_block_tensors
from .grounding import cosine_scores


class CubicModel:
    """MLP from x to the four raw evidential outputs."""

    def __init__(self, hidden: tuple = (64, 64), activation: str = "relu", seed: int = 0):
        self.config = ad.MLPConfig((1, *hidden, 4), activation, seed)
        self.params = ad.mlp_init(self.config, prefix="mlp")

    def raw(self, x) -> ad.Tensor:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return ad.mlp_forward(self.config, self.params, x, prefix="mlp")

    def nig(self, x):
        return ad.evidential_activation(self.raw(x))


@dataclass(frozen=True)
class GroundingModelConfig:
    dim: int = 16
    vocab: int = 64
    n_blocks: int = 4
    residual: bool = True
    layer_norm: bool = True
    evidential_hidden: bool = False
    seed: int = 0


class GroundingModel:
    """Token embedding + fusion stack + grounding heads + evidential head.

    Heads read the video branch. The evidential head is linear and predicts
    a NIG over the moment start and end for every clip.
    """

    MLM_PREFIX = "mlm."

    def __init__(self, config: GroundingModelConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 31])
        d = config.dim
        p: dict[str, ad.Tensor] = {}
        p["tok_emb"] = ad.Tensor(rng.normal(0.0, 1.0, (config.vocab, d)), requires_grad=True)
        ad.init_linear(p, "video_in", d, d, rng)
        self.blocks = []
        for i in range(config.n_blocks):
            block = AttentionParams.random(d, rng, requires_grad=True)
            p.update(block.tensors(prefix=f"rff.{i}."))
            self.blocks.append(block)
        ad.init_linear(p, "fg.0", d, d, rng)
        ad.init_linear(p, "fg.1", d, 1, rng)
        ad.init_linear(p, "off.0", d, d, rng)
        ad.init_linear(p, "off.1", d, 2, rng)
        if config.evidential_hidden:
            ad.init_linear(p, "evid.0", d, d, rng)
        ad.init_linear(p, "evid", d, 8, rng)
        ad.init_linear(p, "mlm.head", d, config.vocab, rng)
        self.params = p
        self.opts = BlockOptions(residual=config.residual, layer_norm=config.layer_norm)

    def load(self, params: dict) -> None:
        for name, t in params.items():
            self.params[name].data = t.data.copy()

    def mlm_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(self.MLM_PREFIX)]

    def grounding_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith(self.MLM_PREFIX)]

    def encode(self, video: np.ndarray, tokens: np.ndarray, mask_pos: np.ndarray | None = None):
        """Fused (video, text) features, shapes (B, L_v, D) and (B, L_q, D)."""
        p = self.params
        text = p["tok_emb"][tokens]
        if mask_pos is not None:
            keep = np.ones(tokens.shape + (1,))
            keep[np.arange(tokens.shape[0]), mask_pos] = 0.0
            text = text * keep
        v = ad.linear(p, "video_in", ad.Tensor(video))
        for block in self.blocks:
            v, text = rff_block_tensors(v, text, block, self.opts)
        return v, text

    def mlm_logits(self, text: ad.Tensor, positions: np.ndarray) -> ad.Tensor:
        picked = text[np.arange(text.shape[0]), positions]
        return ad.linear(self.params, "mlm.head", picked)

    def heads(self, v: ad.Tensor, text: ad.Tensor) -> dict:
        p = self.params
        fg_logit = ad.linear(p, "fg.1", ad.relu(ad.linear(p, "fg.0", v)))
        offsets = ad.softplus(ad.linear(p, "off.1", ad.relu(ad.linear(p, "off.0", v))))
        evid_in = ad.relu(ad.linear(p, "evid.0", v)) if self.config.evidential_hidden else v
        raw = ad.linear(p, "evid", evid_in)
        b, l = raw.shape[:2]
        gamma, upsilon, alpha, beta = ad.evidential_activation(ad.reshape(raw, (b, l, 2, 4)))
        sentence = ad.mean(text, axis=1)
        return {
            "fg_prob": ad.sigmoid(ad.reshape(fg_logit, (b, l))),
            "offsets": offsets,
            "gamma": gamma, "upsilon": upsilon, "alpha": alpha, "beta": beta,
            "sentence": sentence,
            "saliency": cosine_scores(v, sentence, eps=1e-12),
        }
