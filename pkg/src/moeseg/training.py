"""Losses, freeze policies, and the training procedures.

Three procedures share the machinery here:

- ``pretrain``: encoders plus general decoder, jointly, on the general
  categories (builds the foundation checkpoint everything else starts from),
- ``finetune_expert``: one expert decoder alone, on its category,
- ``train_gating``: the gate (and optionally the per-sample Top-1 expert).

Every procedure freezes all other parameter groups and verifies, by
checksum, that frozen groups are bit-identical after the run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .autograd import Tensor, bce_with_logits, stable_softmax
from .encoders import PromptSpec
from .errors import ContractError, RegistryError, ValidationError
from .gating import gate_ce_loss
from .model import MoeModel
from .optim import AdamW
from .synthdata import Corpus, Sample, bbox_prompt, sample_point_prompts


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "expert_finetune"  # expert_finetune | gate_only | gate_plus_top1 | pretrain
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    lr_expert: float = 1e-4
    lr_gate: float = 1e-6
    lr_pretrain: float = 1e-3
    dice_smooth: float = 1e-5

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError(f"steps must be non-negative, got {self.steps}")
        if min(self.lr_expert, self.lr_gate, self.lr_pretrain) <= 0:
            raise ValidationError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be at least 1, got {self.batch_size}")


@dataclass(frozen=True)
class FreezePolicy:
    """Named parameter groups whose values must not change during a run."""

    frozen_groups: tuple[str, ...]

    def apply(self, model: MoeModel) -> dict[str, str]:
        """Freeze the listed groups and return their checksums."""
        trainable = set(model.group_names()) - set(self.frozen_groups)
        model.set_trainable(trainable)
        return {g: model.group_checksum(g) for g in self.frozen_groups}

    def verify(self, model: MoeModel, before: dict[str, str]) -> None:
        for group, checksum in before.items():
            after = model.group_checksum(group)
            if after != checksum:
                raise ContractError(f"frozen parameter group '{group}' changed during training")


@dataclass
class TrainResult:
    history: list[tuple]  # (step, loss) or (step, loss, gate_ce)
    frozen_before: dict[str, str]
    frozen_after_ok: bool = True


# -- losses ---------------------------------------------------------------------


def dice_loss(pred_probs: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss: 1 - (2 * overlap + eps) / (|pred| + |target| + eps)."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred_probs.shape:
        raise ContractError(f"dice shapes disagree: pred {pred_probs.shape} vs target {t.shape}")
    target_const = Tensor(t)
    overlap = (pred_probs * target_const).sum()
    denom = pred_probs.sum() + float(t.sum())
    return 1.0 - (overlap * 2.0 + smooth) / (denom + smooth)


def bce_loss(pred_logits: Tensor, target: np.ndarray) -> Tensor:
    return bce_with_logits(pred_logits, target)


def dicece_loss(pred_logits: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Equal-weight sum of Dice loss on probabilities and voxel BCE on logits."""
    return dice_loss(pred_logits.sigmoid(), target, smooth) + bce_loss(pred_logits, target)


# -- shared plumbing --------------------------------------------------------------


def _prompt_for(sample: Sample, kind: str, seed: int) -> "PromptSpec":
    if kind == "points6":
        return sample_point_prompts(sample.mask, n=6, seed=seed)
    if kind == "bbox":
        return bbox_prompt(sample.mask)
    raise ValidationError(f"unknown prompt kind '{kind}'")


def _draw_prompt(sample: Sample, rng: np.random.Generator) -> "PromptSpec":
    # alternate prompt styles during training so both work at eval time
    if rng.random() < 0.5:
        return sample_point_prompts(sample.mask, n=6, seed=int(rng.integers(2 ** 31)))
    return bbox_prompt(sample.mask)


def write_history_csv(path: str, history: Iterable[tuple], header: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in history:
            writer.writerow(row)


# -- procedures --------------------------------------------------------------------


def pretrain(model: MoeModel, corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Train encoders and the general decoder on the general categories."""
    if not corpus.general_train:
        raise ValidationError("corpus has no general training samples")
    policy = FreezePolicy(
        tuple(g for g in model.group_names() if g.startswith("decoder.expert.") or g == "gate")
    )
    frozen = policy.apply(model)
    opt = AdamW(model.trainable_params(), lr=config.lr_pretrain)
    rng = np.random.default_rng(np.random.SeedSequence([0xBA5E, config.seed]))
    ids = list(corpus.general_train)
    history = []
    for step in range(config.steps):
        batch = rng.choice(len(ids), size=min(config.batch_size, len(ids)), replace=False)
        opt.zero_grad()
        total = 0.0
        for i in batch:
            sample = corpus.sample(ids[i])
            prompt = _draw_prompt(sample, rng)
            image = model.embed_image(sample.volume.astype(np.float64))
            prompt_emb = model.embed_prompt(prompt)
            logits = model.bank.general.decode(image, prompt_emb).logits
            loss = dicece_loss(logits, sample.mask, config.dice_smooth) * (1.0 / len(batch))
            loss.backward()
            total += loss.item() * len(batch)
        opt.step()
        history.append((step, total / len(batch)))
    policy.verify(model, frozen)
    return TrainResult(history=history, frozen_before=frozen)


def finetune_expert(model: MoeModel, label: str, corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Adapt one expert decoder to its category; everything else stays frozen."""
    if label not in model.bank.labels:
        raise RegistryError(f"no expert registered under label '{label}'")
    ids = corpus.expert_train.get(label)
    if not ids:
        raise ValidationError(f"corpus has no training split for expert category '{label}'")
    for sid in ids:
        if corpus.sample(sid).category != label:
            raise ValidationError(
                f"sample '{sid}' has category '{corpus.sample(sid).category}', expected '{label}'"
            )
    group = f"decoder.expert.{label}"
    policy = FreezePolicy(tuple(g for g in model.group_names() if g != group))
    frozen = policy.apply(model)
    expert = model.bank.expert_by_label(label)
    opt = AdamW(model.trainable_params(), lr=config.lr_expert)
    rng = np.random.default_rng(np.random.SeedSequence([0xF17E, config.seed]))

    # encoders are frozen, so image embeddings can be computed once per sample
    embeddings = {}

    history = []
    for step in range(config.steps):
        batch = rng.choice(len(ids), size=min(config.batch_size, len(ids)), replace=False)
        opt.zero_grad()
        total = 0.0
        for i in batch:
            sample = corpus.sample(ids[i])
            if ids[i] not in embeddings:
                emb = model.embed_image(sample.volume.astype(np.float64))
                emb.tokens = emb.tokens.detach()
                embeddings[ids[i]] = emb
            prompt_emb = model.embed_prompt(_draw_prompt(sample, rng))
            logits = expert.decode(embeddings[ids[i]], prompt_emb).logits
            loss = dicece_loss(logits, sample.mask, config.dice_smooth) * (1.0 / len(batch))
            loss.backward()
            total += loss.item() * len(batch)
        opt.step()
        history.append((step, total / len(batch)))
    policy.verify(model, frozen)
    return TrainResult(history=history, frozen_before=frozen)


def train_gating(model: MoeModel, corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Train the gate with cross-entropy against the prompted sample's category.

    In ``gate_plus_top1`` mode the expert currently ranked first for a sample
    additionally receives segmentation-loss gradients through the fused mask;
    encoders and the general decoder stay frozen in both modes.
    """
    if model.gate is None:
        raise ContractError("model has no gating network; build or load one first")
    if config.mode not in ("gate_only", "gate_plus_top1"):
        raise ValidationError(f"unknown gating training mode '{config.mode}'")
    pairs = []  # (sample_id, expert_index)
    for label, ids in corpus.expert_train.items():
        if label not in model.bank.labels:
            raise ValidationError(f"training category '{label}' maps to no expert in the bank")
        target = model.bank.index_of(label)
        pairs.extend((sid, target) for sid in ids)
    if not pairs:
        raise ValidationError("no gate training data: every expert split is empty")

    if config.mode == "gate_only":
        policy = FreezePolicy(tuple(g for g in model.group_names() if g != "gate"))
    else:
        expert_groups = {f"decoder.expert.{label}" for label in model.bank.labels}
        policy = FreezePolicy(
            tuple(g for g in model.group_names() if g != "gate" and g not in expert_groups)
        )
    frozen = policy.apply(model)
    gate_opt = AdamW(
        {n: p for n, p in model.trainable_params().items() if n.startswith("gate.")},
        lr=config.lr_gate,
    )
    expert_opt = None
    if config.mode == "gate_plus_top1":
        expert_opt = AdamW(
            {n: p for n, p in model.trainable_params().items() if n.startswith("decoder.expert.")},
            lr=config.lr_expert,
        )

    rng = np.random.default_rng(np.random.SeedSequence([0x6A7E + 1, config.seed]))
    embeddings = {}
    history = []
    for step in range(config.steps):
        batch = rng.choice(len(pairs), size=min(config.batch_size, len(pairs)), replace=False)
        model.zero_grads()
        ce_total = 0.0
        seg_total = 0.0
        for i in batch:
            sid, target = pairs[i]
            sample = corpus.sample(sid)
            if sid not in embeddings:
                emb = model.embed_image(sample.volume.astype(np.float64))
                emb.tokens = emb.tokens.detach()
                embeddings[sid] = emb
            prompt_emb = model.embed_prompt(_draw_prompt(sample, rng))
            logits = model.gate.logits(embeddings[sid], prompt_emb)
            ce = gate_ce_loss(logits, target) * (1.0 / len(batch))
            ce.backward()
            ce_total += ce.item() * len(batch)
            if config.mode == "gate_plus_top1":
                # fuse without the inference-time switch so the ranked expert
                # always sees a gradient, even while gate confidence is low
                probs = stable_softmax(logits.data)
                top = int(np.argmax(probs))
                s_top = float(probs[top])
                expert = model.bank.expert_by_index(top)[1]
                general_probs = model.bank.general.decode(embeddings[sid], prompt_emb).probabilities_np()
                expert_logits = expert.decode(embeddings[sid], prompt_emb).logits
                fused = Tensor(general_probs * (1.0 - s_top)) + expert_logits.sigmoid() * s_top
                seg = (
                    dice_loss(fused, sample.mask, config.dice_smooth)
                    + bce_loss(expert_logits, sample.mask)
                ) * (1.0 / len(batch))
                seg.backward()
                seg_total += seg.item() * len(batch)
        gate_opt.step()
        if expert_opt is not None:
            expert_opt.step()
            history.append((step, ce_total / len(batch) + seg_total / len(batch), ce_total / len(batch)))
        else:
            history.append((step, ce_total / len(batch)))
    policy.verify(model, frozen)
    return TrainResult(history=history, frozen_before=frozen)
