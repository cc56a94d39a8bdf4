"""Mask selector: the threshold switch and the fusion rules.

The gate's top confidence drives a hard switch: at or below the threshold
``tau`` the general decoder's mask passes through untouched (bit-identical,
and the expert decoder is never evaluated). Strictly above it, the general
and Top-1 expert probability masks are fused voxelwise:

- ``weighted``: (1 - s_top) * general + s_top * expert
- ``avg``: plain arithmetic mean
- ``aft_weight``: weights from a softmax over the two decoders' globally
  average-pooled raw logits

Fusion operates on probabilities, so weighted and aft_weight outputs stay
inside [min, max] of the two inputs at every voxel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import stable_softmax
from .encoders import PromptSpec
from .errors import ConfigError, ContractError

FUSION_RULES = ("weighted", "avg", "aft_weight")


@dataclass(frozen=True)
class SelectorConfig:
    tau: float = 0.5
    fusion: str = "weighted"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.fusion not in FUSION_RULES:
            raise ConfigError(f"fusion must be one of {FUSION_RULES}, got '{self.fusion}'")


@dataclass(frozen=True)
class RoutingReport:
    """What the router did for one input; written per sample into routing CSVs."""

    top_index: Optional[int]
    top_label: Optional[str]
    s_top: Optional[float]
    fired: bool


def select_mask(
    general_probs: np.ndarray,
    expert_probs: np.ndarray,
    s_top: float,
    config: SelectorConfig,
    general_logits: Optional[np.ndarray] = None,
    expert_logits: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Apply the switch and fusion rule; returns the output probability mask.

    When ``s_top <= tau`` the general mask is returned as-is (the same
    array, bit-identical). The strict inequality is deliberate.
    """
    if general_probs.shape != expert_probs.shape:
        raise ContractError(
            f"mask shapes disagree: {general_probs.shape} vs {expert_probs.shape}"
        )
    if not 0.0 <= s_top <= 1.0:
        raise ContractError(f"s_top must lie in [0, 1], got {s_top}")
    if s_top <= config.tau:
        return general_probs
    if config.fusion == "weighted":
        return (1.0 - s_top) * general_probs + s_top * expert_probs
    if config.fusion == "avg":
        return 0.5 * (general_probs + expert_probs)
    if general_logits is None or expert_logits is None:
        raise ContractError("aft_weight fusion needs the raw logits of both decoders")
    pooled = np.array([general_logits.mean(), expert_logits.mean()])
    w_general, w_expert = stable_softmax(pooled)
    return w_general * general_probs + w_expert * expert_probs


def moe_infer(
    model,
    volume: np.ndarray,
    prompt: PromptSpec,
    config: SelectorConfig,
) -> tuple[np.ndarray, RoutingReport]:
    """Full routed inference for one volume and prompt.

    Encodes once, always decodes the general expert, consults the gate, and
    decodes the Top-1 expert only when the switch fires.
    """
    image = model.image_encoder(volume)
    prompt_emb = model.prompt_encoder(prompt)
    return moe_infer_from_embeddings(model, image, prompt_emb, config)


def moe_infer_from_embeddings(model, image, prompt_emb, config: SelectorConfig):
    """Routed inference on precomputed embeddings (encoders are frozen at MoE time)."""
    general = model.bank.general.decode(image, prompt_emb)
    general_probs = general.probabilities_np()
    if model.bank.m == 0 or model.gate is None:
        return general_probs, RoutingReport(top_index=None, top_label=None, s_top=None, fired=False)
    gate_scores = model.gate.scores(image, prompt_emb)
    label, _ = model.bank.expert_by_index(gate_scores.top_index)
    report = RoutingReport(
        top_index=gate_scores.top_index,
        top_label=label,
        s_top=gate_scores.s_top,
        fired=gate_scores.s_top > config.tau,
    )
    if not report.fired:
        return general_probs, report
    expert = model.bank.expert_by_index(gate_scores.top_index)[1].decode(image, prompt_emb)
    fused = select_mask(
        general_probs,
        expert.probabilities_np(),
        gate_scores.s_top,
        config,
        general_logits=general.logits_np,
        expert_logits=expert.logits_np,
    )
    return fused, report
