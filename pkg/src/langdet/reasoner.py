"""Visual semantic reasoner: image-to-prompt cross-attention plus scene guidance.

Image tokens query the embedded scene-context prompt; the attended output is added
back onto the encoder features. During training the same output feeds a scene
guidance head (strided 5x5 conv, pooling, one classifier per scene attribute) that
predicts the slot values of the scene description. The head is never run at inference.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Embedding, Linear, Module, MultiheadAttention, sinusoid_1d, sinusoid_2d
from .synth import STYLE_ATTRIBUTES
from .tensor import Tensor

PROMPT_POOLS = {
    "uavdt": (
        "Describe the given drone-view image with respect to weather, view, and altitude conditions.",
        "What are the weather, view, and altitude conditions in the given drone-view image?",
        "Illustrate the weather, view, and altitude conditions in the given drone-view image.",
        "Describe the weather, view, and altitude conditions in which the given drone-view image is captured.",
    ),
    "visdrone": (
        "Describe the given drone-view image with respect to time that the image is captured.",
        "What is time condition for the given drone-view image?",
        "Illustrate the time which the given drone-view image is taken.",
        "Describe which time the given drone-view image is captured.",
    ),
}

DESCRIPTION_TEMPLATES = {
    "uavdt": "The drone-view image is taken from a {altitude} altitude with a {view} view during the {weather} scene.",
    "visdrone": "The drone-view image is taken at {time} time.",
}

UNK = "<unk>"


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9\-]+", text.lower())


def build_vocabulary(texts=None) -> dict[str, int]:
    texts = texts if texts is not None else [p for pool in PROMPT_POOLS.values() for p in pool]
    words = sorted({w for t in texts for w in tokenize(t)})
    return {w: k for k, w in enumerate([UNK] + words)}


VOCAB = build_vocabulary()


def describe(attributes: dict, style: str) -> str:
    """The scene description whose slot values the guidance head predicts."""
    return DESCRIPTION_TEMPLATES[style].format(**attributes)


@dataclass(frozen=True)
class SceneContextPrompt:
    text: str
    token_ids: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str, vocab: dict[str, int] = VOCAB) -> SceneContextPrompt:
        ids = tuple(vocab.get(w, vocab[UNK]) for w in tokenize(text))
        if not ids:
            raise ValueError("scene context prompt has no tokens")
        return cls(text, ids)


class PromptSampler:
    """Uniform draw from the prompt pool, one per training iteration."""

    def __init__(self, pool, seed: int):
        self.prompts = [SceneContextPrompt.from_text(p) for p in pool]
        self.rng = np.random.default_rng([seed, 7])

    def __call__(self) -> SceneContextPrompt:
        return self.prompts[int(self.rng.integers(len(self.prompts)))]


class VisualSemanticReasoner(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, grid: tuple[int, int],
                 style: str = "uavdt", guidance_dim: int = 32, vocab_size: int = len(VOCAB)):
        self.token_embed = Embedding(rng, vocab_size, dim)
        self.text_proj = Linear(rng, dim, dim)
        self.image_proj = Linear(rng, dim, dim)
        self.attn = MultiheadAttention(rng, dim, heads, zero_out=True)
        self.guide_conv = Conv2d(rng, dim, guidance_dim, 5, stride=2, padding=2)
        self.attributes = STYLE_ATTRIBUTES[style]
        self.guide_heads = {a: Linear(rng, guidance_dim, len(v)) for a, v in self.attributes.items()}
        self.dim = dim
        self.grid = grid
        self._image_pe = Tensor(sinusoid_2d(grid[0], grid[1], dim))
        self.guidance_invocations = 0
        self.last_attention: Tensor | None = None

    def encode_prompt(self, prompt: SceneContextPrompt) -> Tensor:
        """(tokens, dim): embedding -> projection -> 1-d sinusoidal encoding."""
        if not prompt.token_ids:
            raise ValueError("scene context prompt has no tokens")
        n = len(prompt.token_ids)
        x = self.text_proj(self.token_embed(prompt.token_ids))
        return T.add(x, Tensor(sinusoid_1d(n, self.dim)))

    def cross_attention(self, image_features: Tensor, prompt_features: Tensor) -> tuple[Tensor, Tensor]:
        """Image tokens (B, HW, dim) attend over prompt tokens (B, T, dim)."""
        return self.attn(image_features, prompt_features, prompt_features)

    def __call__(self, features: Tensor, prompt: SceneContextPrompt) -> Tensor:
        b, hw, dim = features.shape
        if hw != self.grid[0] * self.grid[1] or dim != self.dim:
            raise T.ShapeError(f"reasoner expects (B, {self.grid[0] * self.grid[1]}, {self.dim}), got {features.shape}")
        query = T.add_broadcast(self.image_proj(features), self._image_pe)
        text = self.encode_prompt(prompt)
        keys = T.take(text.reshape(1, *text.shape), np.zeros(b, dtype=np.int64), axis=0)
        out, weights = self.cross_attention(query, keys)
        self.last_attention = weights
        return out

    def scene_guidance_loss(self, output: Tensor, attributes: list[dict], mode: str = "train") -> Tensor:
        """Sum over scene attributes of the batch-mean cross-entropy of the slot classifiers."""
        if mode != "train":
            raise RuntimeError("scene guidance runs during training only")
        self.guidance_invocations += 1
        return guidance_cross_entropy(self.guidance_logits(output), attributes, self.attributes)

    def guidance_logits(self, output: Tensor) -> dict[str, Tensor]:
        b = output.shape[0]
        h, w = self.grid
        fmap = output.transpose(0, 2, 1).reshape(b, self.dim, h, w)
        conv = T.gelu(self.guide_conv(fmap))
        pooled = T.mean(conv.reshape(b, conv.shape[1], -1), axis=2)
        return {attr: head(pooled) for attr, head in self.guide_heads.items()}


def guidance_cross_entropy(logits: dict[str, Tensor], attributes: list[dict], grid: dict) -> Tensor:
    """Sum over attributes of the batch-mean cross-entropy; ``grid`` maps attribute -> values."""
    total = []
    for attr, values in grid.items():
        target = [values.index(a[attr]) for a in attributes]
        total.append(T.cross_entropy(logits[attr], target))
    return T.elementwise_sum(total)


def merge(encoder_features: Tensor, reasoner_output: Tensor) -> Tensor:
    """Contextualized features: plain elementwise sum."""
    return T.add(encoder_features, reasoner_output)
