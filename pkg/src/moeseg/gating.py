"""Attention gating network: one confidence score per expert decoder.

Pipeline: the prompt vector self-attends, cross-attends over the image
tokens, is refined by an MLP (residual connection and layernorm after each
stage), is injected back into the image tokens by a second cross-attention,
and the resulting tokens are mean-pooled and pushed through two fully
connected layers and a softmax.

The final layer starts at exactly zero, so an untrained gate scores every
expert uniformly, and its output logits are multiplied by a fixed
``logit_scale``. The scale is an architectural constant, not a trained
parameter: gate training runs at a very small learning rate, and AdamW
moves each weight by at most (learning rate) per step, so the scale decides
how much score separation a fixed training budget can buy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, stable_softmax
from .encoders import EncoderConfig, ImageEmbedding, PromptEmbedding
from .errors import ContractError
from .nn import Attention, LayerNorm, Linear, Mlp, prefixed

DEFAULT_LOGIT_SCALE = 300.0
DEFAULT_INJECTION_GAIN = 6.0


@dataclass(frozen=True)
class GateScores:
    """Softmax-normalised confidences with the Top-1 pick (ties: lowest index)."""

    scores: np.ndarray
    top_index: int
    s_top: float


class GatingNetwork:
    def __init__(
        self,
        config: EncoderConfig,
        labels: list[str],
        rng: np.random.Generator,
        logit_scale: float = DEFAULT_LOGIT_SCALE,
        injection_gain: float = DEFAULT_INJECTION_GAIN,
    ):
        if not labels:
            raise ContractError("a gating network needs at least one expert label")
        width = config.channels
        self.config = config
        self.labels = list(labels)
        self.logit_scale = float(logit_scale)
        self.injection_gain = float(injection_gain)
        self.self_attn = Attention(rng, width)
        self.norm_self = LayerNorm(width)
        self.cross_prompt = Attention(rng, width)
        self.norm_cross_prompt = LayerNorm(width)
        self.mlp = Mlp(rng, width, 4 * width)
        self.norm_mlp = LayerNorm(width)
        self.cross_image = Attention(rng, width)
        self.norm_cross_image = LayerNorm(width)
        # boost the prompt-injection output projection so the pooled feature
        # is dominated by where the prompt sits, not by raw image content;
        # keeps routing neutral on inputs far from every expert category
        self.cross_image.wo.w.data *= self.injection_gain
        self.fc1 = Linear(rng, width, width)
        self.fc2 = Linear(rng, width, len(labels), zero_init=True)

    @property
    def m(self) -> int:
        return len(self.labels)

    def logits(self, image: ImageEmbedding, prompt: PromptEmbedding) -> Tensor:
        """Pre-softmax scores as a length-m tensor (graph-recorded)."""
        width = self.config.channels
        if image.tokens.shape[1] != width or prompt.vector.shape != (width,):
            raise ContractError(
                f"gate inputs disagree with width {width}: image {image.tokens.shape}, "
                f"prompt {prompt.vector.shape}"
            )
        tokens = image.tokens
        p = prompt.vector.reshape(1, width)
        p = self.norm_self(p + self.self_attn(p, p))
        p = self.norm_cross_prompt(p + self.cross_prompt(p, tokens))
        p = self.norm_mlp(p + self.mlp(p))
        tokens = self.norm_cross_image(tokens + self.cross_image(tokens, p))
        pooled = tokens.mean(axis=0).reshape(1, width)
        hidden = self.fc1(pooled).gelu()
        return (self.fc2(hidden) * self.logit_scale).reshape(self.m)

    def scores(self, image: ImageEmbedding, prompt: PromptEmbedding) -> GateScores:
        logits = self.logits(image, prompt).data
        probs = stable_softmax(logits)
        top = int(np.argmax(probs))  # argmax returns the first maximum: lowest index on ties
        return GateScores(scores=probs, top_index=top, s_top=float(probs[top]))

    def grow_to_labels(self, labels: list[str]) -> None:
        """Re-dimension the final layer for an extended expert registry.

        Rows for existing labels are copied; rows for new labels start at
        zero so the new expert begins with a neutral score. Shrinking or
        reordering the registry is not supported.
        """
        if labels[: self.m] != self.labels:
            raise ContractError(
                f"expert registry {labels} is not an extension of gate labels {self.labels}"
            )
        if len(labels) == self.m:
            return
        width = self.config.channels
        new_w = np.zeros((width, len(labels)))
        new_b = np.zeros((len(labels),))
        new_w[:, : self.m] = self.fc2.w.data
        new_b[: self.m] = self.fc2.b.data
        self.fc2.w = Tensor(new_w, requires_grad=True)
        self.fc2.b = Tensor(new_b, requires_grad=True)
        self.labels = list(labels)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefixed("self_attn", self.self_attn.named_params()))
        out.update(prefixed("norm_self", self.norm_self.named_params()))
        out.update(prefixed("cross_prompt", self.cross_prompt.named_params()))
        out.update(prefixed("norm_cross_prompt", self.norm_cross_prompt.named_params()))
        out.update(prefixed("mlp", self.mlp.named_params()))
        out.update(prefixed("norm_mlp", self.norm_mlp.named_params()))
        out.update(prefixed("cross_image", self.cross_image.named_params()))
        out.update(prefixed("norm_cross_image", self.norm_cross_image.named_params()))
        out.update(prefixed("fc1", self.fc1.named_params()))
        out.update(prefixed("fc2", self.fc2.named_params()))
        return out


def gate_ce_loss(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of the target expert under softmax(logits), via log-sum-exp."""
    m = logits.shape[0]
    if logits.data.ndim != 1:
        raise ContractError(f"gate logits must be a vector, got shape {logits.shape}")
    if not 0 <= target < m:
        raise ContractError(f"target expert {target} out of range for {m} experts")
    one_hot = np.zeros(m)
    one_hot[target] = 1.0
    return logits.logsumexp() - (logits * Tensor(one_hot)).sum()
