"""The composed model: encoders, expert bank, and optional gate.

Parameter addressing uses dot-separated names under fixed group prefixes:

    encoder.*            image encoder
    prompt_encoder.*     prompt encoder
    decoder.general.*    general mask decoder
    decoder.expert.<label>.*   one group per registered expert
    gate.*               gating network (present once experts exist)

Groups are the unit of freezing and of checksum comparison, and the same
names appear verbatim in checkpoint headers.
"""

from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import ExpertBank, MaskDecoder
from .encoders import EncoderConfig, ImageEncoder, PromptEncoder, ImageEmbedding, PromptEmbedding, PromptSpec
from .errors import CheckpointError, ContractError
from .gating import DEFAULT_LOGIT_SCALE, GatingNetwork
from .nn import prefixed


class MoeModel:
    def __init__(self, config: EncoderConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        # construction order is fixed; changing it would invalidate golden fixtures
        self.image_encoder = ImageEncoder(config, rng)
        self.prompt_encoder = PromptEncoder(config, rng)
        self.bank = ExpertBank(MaskDecoder(config, rng))
        self.gate: Optional[GatingNetwork] = None

    # -- parameters -----------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefixed("encoder", self.image_encoder.named_params()))
        out.update(prefixed("prompt_encoder", self.prompt_encoder.named_params()))
        out.update(prefixed("decoder", self.bank.named_params()))
        if self.gate is not None:
            out.update(prefixed("gate", self.gate.named_params()))
        return out

    def group_names(self) -> list[str]:
        groups = ["encoder", "prompt_encoder", "decoder.general"]
        groups += [f"decoder.expert.{label}" for label in self.bank.labels]
        if self.gate is not None:
            groups.append("gate")
        return groups

    def group_checksum(self, group: str) -> str:
        digest = hashlib.sha256()
        params = self.named_params()
        names = sorted(n for n in params if n == group or n.startswith(group + "."))
        if not names:
            raise ContractError(f"unknown parameter group '{group}'")
        for name in names:
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(params[name].data).tobytes())
        return digest.hexdigest()

    def group_checksums(self) -> dict[str, str]:
        return {group: self.group_checksum(group) for group in self.group_names()}

    def set_trainable(self, trainable_groups: set[str]) -> None:
        """Mark exactly the given groups trainable; everything else is frozen."""
        for name, p in self.named_params().items():
            p.requires_grad = any(
                name == g or name.startswith(g + ".") for g in trainable_groups
            )
            if not p.requires_grad:
                p.grad = None

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_params().items() if p.requires_grad}

    def zero_grads(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    # -- structure ------------------------------------------------------------

    def add_expert(self, label: str) -> None:
        self.bank.clone_expert(label)
        if self.gate is not None:
            self.gate.grow_to_labels(self.bank.labels)

    def build_gate(self, seed: int, logit_scale: float = DEFAULT_LOGIT_SCALE) -> GatingNetwork:
        if self.bank.m == 0:
            raise ContractError("cannot build a gate over an empty expert bank")
        rng = np.random.default_rng(np.random.SeedSequence([0x6A7E, seed]))
        self.gate = GatingNetwork(self.config, self.bank.labels, rng, logit_scale=logit_scale)
        return self.gate

    # -- embeddings -----------------------------------------------------------

    def embed_image(self, volume: np.ndarray) -> ImageEmbedding:
        return self.image_encoder(volume)

    def embed_prompt(self, prompt: PromptSpec) -> PromptEmbedding:
        return self.prompt_encoder(prompt)

    # -- persistence ----------------------------------------------------------

    def save(self, path: str) -> None:
        meta = {
            "encoder_config": {
                "volume_side": self.config.volume_side,
                "patch_size": self.config.patch_size,
                "channels": self.config.channels,
                "depth": self.config.depth,
                "heads": self.config.heads,
            },
            "expert_labels": self.bank.labels,
            "seed": self.seed,
            "gate": None
            if self.gate is None
            else {"labels": self.gate.labels, "logit_scale": self.gate.logit_scale},
        }
        tensors = {name: p.data for name, p in self.named_params().items()}
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path: str) -> "MoeModel":
        tensors, meta = load_checkpoint(path)
        try:
            cfg = EncoderConfig(**meta["encoder_config"])
            labels = list(meta["expert_labels"])
            gate_meta = meta.get("gate")
            seed = int(meta.get("seed", 0))
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint '{path}' metadata is incomplete: {exc}") from exc

        model = cls(cfg, seed)
        for label in labels:
            model.add_expert(label)
        if gate_meta is not None:
            if list(gate_meta["labels"]) != labels:
                raise CheckpointError(
                    f"gate was trained against experts {gate_meta['labels']} "
                    f"but the bank manifest lists {labels}"
                )
            model.build_gate(seed, logit_scale=float(gate_meta["logit_scale"]))

        params = model.named_params()
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        if missing or extra:
            raise CheckpointError(
                f"checkpoint '{path}' tensor names disagree with its manifest "
                f"(missing {missing[:3]}..., extra {extra[:3]}...)"
                if len(missing) + len(extra) > 6
                else f"checkpoint '{path}' tensor names disagree with its manifest "
                f"(missing {missing}, extra {extra})"
            )
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"tensor '{name}' has shape {arr.shape}, expected {p.data.shape}"
                )
        for name, p in params.items():
            p.data = np.ascontiguousarray(tensors[name])
        return model
