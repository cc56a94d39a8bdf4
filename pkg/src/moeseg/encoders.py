"""Image and prompt encoders: the shared front end of the pipeline.

The image encoder is a small 3D patch transformer: non-overlapping patches
are flattened, linearly projected to width C, tagged with frozen sinusoidal
positional encodings of the patch centres, and run through a stack of
residual attention blocks. The prompt encoder turns labelled points or a
box into per-token vectors (frozen positional encoding plus a learned
embedding per prompt type) and mean-pools them into a single vector.

Both encoders are pure functions of (input, parameters); they draw no
randomness at call time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, ValidationError
from .nn import Linear, TransformerBlock, prefixed

FOREGROUND = 1
BACKGROUND = 0

Coord = tuple[int, int, int]


@dataclass(frozen=True)
class EncoderConfig:
    volume_side: int = 32
    patch_size: int = 8
    channels: int = 48
    depth: int = 2
    heads: int = 1

    def __post_init__(self):
        if self.volume_side <= 0 or self.patch_size <= 0:
            raise ConfigError("volume_side and patch_size must be positive")
        if self.volume_side % self.patch_size != 0:
            raise ConfigError(
                f"volume_side {self.volume_side} is not divisible by patch_size {self.patch_size}"
            )
        if self.channels % 6 != 0:
            raise ConfigError(f"channels must be divisible by 6, got {self.channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be at least 1, got {self.depth}")
        if self.heads != 1:
            raise ConfigError("only single-head attention is supported")

    @property
    def grid_side(self) -> int:
        return self.volume_side // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_side ** 3

    def volume_shape(self) -> tuple[int, int, int]:
        return (self.volume_side,) * 3


@dataclass(frozen=True)
class PromptSpec:
    """A user prompt: labelled 3D points, or one axis-aligned box."""

    kind: str
    points: tuple[tuple[Coord, int], ...] = ()
    box: Optional[tuple[Coord, Coord]] = None

    def __post_init__(self):
        if self.kind == "points":
            if not self.points:
                raise ValidationError("a point prompt needs at least one point")
            for coord, label in self.points:
                if len(coord) != 3:
                    raise ValidationError(f"point coordinate must be 3D, got {coord}")
                if label not in (FOREGROUND, BACKGROUND):
                    raise ValidationError(f"point label must be 0 or 1, got {label}")
        elif self.kind == "box":
            if self.box is None:
                raise ValidationError("a box prompt needs two corners")
            lo, hi = self.box
            if len(lo) != 3 or len(hi) != 3:
                raise ValidationError("box corners must be 3D coordinates")
            if any(a > b for a, b in zip(lo, hi)):
                raise ValidationError(f"box min corner {lo} exceeds max corner {hi}")
        else:
            raise ValidationError(f"unknown prompt kind '{self.kind}'")

    @staticmethod
    def from_points(points) -> "PromptSpec":
        return PromptSpec(kind="points", points=tuple((tuple(c), int(l)) for c, l in points))

    @staticmethod
    def from_box(lo: Coord, hi: Coord) -> "PromptSpec":
        return PromptSpec(kind="box", box=(tuple(lo), tuple(hi)))

    def coords(self) -> list[Coord]:
        if self.kind == "points":
            return [coord for coord, _ in self.points]
        return [self.box[0], self.box[1]]


@dataclass
class ImageEmbedding:
    """Token matrix (one row per patch) plus the token-grid geometry."""

    tokens: Tensor
    grid_side: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid_side ** 3:
            raise ConfigError(
                f"token count {self.tokens.shape[0]} does not match grid side {self.grid_side}"
            )


@dataclass
class PromptEmbedding:
    vector: Tensor


def positional_encoding(coord, channels: int) -> np.ndarray:
    """Frozen sinusoidal encoding of a 3D coordinate.

    Per axis: channels/6 sin/cos pairs at geometric frequencies with base
    10000, laid out as [sin block, cos block], axes concatenated. Purely
    deterministic and parameter-free.
    """
    if channels % 6 != 0:
        raise ConfigError(f"positional encoding needs channels divisible by 6, got {channels}")
    pairs = channels // 6
    freqs = np.power(10000.0, -np.arange(pairs, dtype=np.float64) / pairs)
    parts = []
    for axis_value in coord:
        angles = float(axis_value) * freqs
        parts.append(np.sin(angles))
        parts.append(np.cos(angles))
    return np.concatenate(parts)


class ImageEncoder:
    """Toy 3D patch transformer producing one token per patch."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        p3 = config.patch_size ** 3
        self.patch_proj = Linear(rng, p3, config.channels)
        self.blocks = [TransformerBlock(rng, config.channels) for _ in range(config.depth)]
        self.positional_tokens = self._patch_centre_encodings()

    def _patch_centre_encodings(self) -> np.ndarray:
        cfg = self.config
        half = (cfg.patch_size - 1) / 2.0
        rows = []
        for i in range(cfg.grid_side):
            for j in range(cfg.grid_side):
                for k in range(cfg.grid_side):
                    centre = (i * cfg.patch_size + half, j * cfg.patch_size + half, k * cfg.patch_size + half)
                    rows.append(positional_encoding(centre, cfg.channels))
        return np.stack(rows)

    def project_patches(self, volume: np.ndarray) -> Tensor:
        """Linear projection of flattened patches, before positional encoding."""
        cfg = self.config
        if volume.shape != cfg.volume_shape():
            raise ConfigError(
                f"volume shape {volume.shape} does not match configured {cfg.volume_shape()}"
            )
        g, p = cfg.grid_side, cfg.patch_size
        patches = (
            np.asarray(volume, dtype=np.float64)
            .reshape(g, p, g, p, g, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(cfg.token_count, p ** 3)
        )
        return self.patch_proj(Tensor(patches))

    def __call__(self, volume: np.ndarray, *, skip_blocks: bool = False) -> ImageEmbedding:
        tokens = self.project_patches(volume) + Tensor(self.positional_tokens)
        if not skip_blocks:
            for block in self.blocks:
                tokens = block(tokens)
        return ImageEmbedding(tokens=tokens, grid_side=self.config.grid_side)

    def named_params(self) -> dict[str, Tensor]:
        out = dict(prefixed("patch_proj", self.patch_proj.named_params()))
        for i, block in enumerate(self.blocks):
            out.update(prefixed(f"block{i}", block.named_params()))
        return out


class PromptEncoder:
    """Maps point/box prompts to a single pooled embedding vector.

    Each prompt token is the frozen positional encoding of its coordinate
    plus a learned type embedding (foreground point, background point, box
    min corner, box max corner). Tokens are mean-pooled, which makes the
    embedding invariant to point order.
    """

    TYPES = ("point_fg", "point_bg", "box_min", "box_max")

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        scale = 1.0 / np.sqrt(config.channels)
        self.type_embeddings = {
            name: Tensor(rng.normal(0.0, scale, size=(config.channels,)), requires_grad=True)
            for name in self.TYPES
        }

    def _check_bounds(self, coord) -> None:
        side = self.config.volume_side
        if any(c < 0 or c > side - 1 for c in coord):
            raise ValidationError(f"prompt coordinate {tuple(coord)} is outside the {side}^3 volume")

    def __call__(self, prompt: PromptSpec) -> PromptEmbedding:
        cfg = self.config
        for coord in prompt.coords():
            self._check_bounds(coord)
        if prompt.kind == "points":
            tokens = [
                (coord, "point_fg" if label == FOREGROUND else "point_bg")
                for coord, label in prompt.points
            ]
        else:
            lo, hi = prompt.box
            tokens = [(lo, "box_min"), (hi, "box_max")]
        count = len(tokens)
        pooled_positional = np.mean(
            [positional_encoding(coord, cfg.channels) for coord, _ in tokens], axis=0
        )
        vector = Tensor(pooled_positional)
        for _, type_name in tokens:
            vector = vector + self.type_embeddings[type_name] * (1.0 / count)
        return PromptEmbedding(vector=vector)

    def named_params(self) -> dict[str, Tensor]:
        return {f"type_{name}": emb for name, emb in self.type_embeddings.items()}
