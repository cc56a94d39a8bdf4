"""Mask decoders and the expert bank.

A decoder maps (image tokens, prompt vector) to full-resolution logits:
the prompt cross-attends over the image tokens, the attended prompt is
injected back into every token, a per-token MLP refines the tokens, and a
linear head plus nearest-neighbour upsampling produces one logit per voxel.

The bank holds the general decoder plus an ordered registry of expert
decoders; experts are created by deep-copying the general decoder, and the
registry order is the canonical index order the gating network is bound to.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .encoders import EncoderConfig, ImageEmbedding, PromptEmbedding
from .errors import ConfigError, RegistryError
from .nn import Attention, LayerNorm, Linear, Mlp, prefixed


@dataclass
class MaskLogits:
    """Volume-shaped logits; probabilities are the elementwise sigmoid."""

    logits: Tensor

    def probabilities(self) -> Tensor:
        return self.logits.sigmoid()

    @property
    def logits_np(self) -> np.ndarray:
        return self.logits.data

    def probabilities_np(self) -> np.ndarray:
        return self.probabilities().data


class MaskDecoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        width = config.channels
        self.cross = Attention(rng, width)
        self.norm_prompt = LayerNorm(width)
        self.norm_inject = LayerNorm(width)
        self.mlp = Mlp(rng, width, 4 * width)
        self.norm_mlp = LayerNorm(width)
        self.head = Linear(rng, width, 1)

    def decode(self, image: ImageEmbedding, prompt: PromptEmbedding) -> MaskLogits:
        cfg = self.config
        if image.grid_side != cfg.grid_side or image.tokens.shape[1] != cfg.channels:
            raise ConfigError(
                f"image embedding {image.tokens.shape} does not match decoder config "
                f"(grid {cfg.grid_side}, channels {cfg.channels})"
            )
        if prompt.vector.shape != (cfg.channels,):
            raise ConfigError(
                f"prompt embedding shape {prompt.vector.shape} does not match channels {cfg.channels}"
            )
        tokens = image.tokens
        query = prompt.vector.reshape(1, cfg.channels)
        attended = self.norm_prompt(query + self.cross(query, tokens))
        tokens = self.norm_inject(tokens + attended)
        tokens = self.norm_mlp(tokens + self.mlp(tokens))
        per_token = self.head(tokens)  # head commutes with nearest-neighbour upsampling
        grid = per_token.reshape(cfg.grid_side, cfg.grid_side, cfg.grid_side)
        return MaskLogits(logits=grid.upsample_nearest3(cfg.patch_size))

    def clone(self) -> "MaskDecoder":
        return copy.deepcopy(self)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefixed("cross", self.cross.named_params()))
        out.update(prefixed("norm_prompt", self.norm_prompt.named_params()))
        out.update(prefixed("norm_inject", self.norm_inject.named_params()))
        out.update(prefixed("mlp", self.mlp.named_params()))
        out.update(prefixed("norm_mlp", self.norm_mlp.named_params()))
        out.update(prefixed("head", self.head.named_params()))
        return out


class ExpertBank:
    """General decoder plus an ordered registry of category-bound experts."""

    def __init__(self, general: MaskDecoder):
        self.general = general
        self._experts: list[tuple[str, MaskDecoder]] = []

    @property
    def m(self) -> int:
        return len(self._experts)

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self._experts]

    def clone_expert(self, label: str) -> MaskDecoder:
        """Register a new expert initialised as a deep copy of the general decoder."""
        if label in self.labels:
            raise RegistryError(f"expert label '{label}' is already registered")
        expert = self.general.clone()
        self._experts.append((label, expert))
        return expert

    def expert_by_index(self, k: int) -> tuple[str, MaskDecoder]:
        if not 0 <= k < self.m:
            raise RegistryError(f"expert index {k} out of range for bank of size {self.m}")
        return self._experts[k]

    def expert_by_label(self, label: str) -> MaskDecoder:
        for name, expert in self._experts:
            if name == label:
                return expert
        raise RegistryError(f"no expert registered under label '{label}'")

    def index_of(self, label: str) -> int:
        for k, (name, _) in enumerate(self._experts):
            if name == label:
                return k
        raise RegistryError(f"no expert registered under label '{label}'")

    def named_params(self) -> dict[str, Tensor]:
        out = dict(prefixed("general", self.general.named_params()))
        for label, expert in self._experts:
            out.update(prefixed(f"expert.{label}", expert.named_params()))
        return out
