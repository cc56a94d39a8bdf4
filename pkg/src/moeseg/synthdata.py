"""Deterministic synthetic 3D corpora: shapes, intensities, prompts, splits.

Volumes are cubes of gaussian-noise intensities with one embedded shape
(ball, box, ellipsoid, or tube); the binary mask is the exact shape
support. Categories fix a shape family, a size range, an intensity profile,
and a placement window for the shape centre. "General" categories are
bright, large, and centrally placed; "expert" categories are dimmer,
smaller, and live in distinct corner regions, which keeps them both harder
for a generally-trained model and separable for the router.

Everything is a pure function of (spec, seed): regenerating a corpus from
its manifest seed reproduces it bit for bit.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, asdict, field
from typing import Iterable

import numpy as np

from .encoders import FOREGROUND, PromptSpec
from .errors import GenerationError, ValidationError

SHAPE_FAMILIES = ("ball", "box", "ellipsoid", "tube")

AxisWindow = tuple[float, float]


@dataclass(frozen=True)
class CategorySpec:
    name: str
    family: str
    size_range: tuple[float, float]
    fg_mean: float
    fg_std: float
    bg_mean: float
    bg_std: float
    region: tuple[AxisWindow, AxisWindow, AxisWindow]
    role: str = "general"
    aspect: float = 1.0

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise ValidationError(f"unknown shape family '{self.family}'")
        if self.role not in ("general", "expert"):
            raise ValidationError(f"category role must be general or expert, got '{self.role}'")
        lo, hi = self.size_range
        if lo <= 0 or hi < lo:
            raise ValidationError(f"bad size range {self.size_range}")
        for window in self.region:
            if not (0.0 <= window[0] <= window[1] <= 1.0):
                raise ValidationError(f"region window {window} must satisfy 0 <= lo <= hi <= 1")


@dataclass
class Sample:
    volume: np.ndarray  # float32, side^3
    mask: np.ndarray  # uint8, same shape
    category: str
    sample_id: str
    seed: int


def _voxel_grid(side: int):
    axes = np.arange(side, dtype=np.float64)
    return np.meshgrid(axes, axes, axes, indexing="ij")


def _shape_extents(spec: CategorySpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.size_range
    if spec.family == "ball":
        r = rng.uniform(lo, hi)
        return np.array([r, r, r])
    if spec.family == "box":
        return rng.uniform(lo, hi, size=3)
    if spec.family == "ellipsoid":
        return rng.uniform(lo, hi, size=3)
    # tube: radius in range, elongated along one axis
    r = rng.uniform(lo, hi)
    half_length = r * spec.aspect
    axis = rng.integers(0, 3)
    extents = np.array([r, r, r])
    extents[axis] = half_length
    return extents


def _support(spec: CategorySpec, centre: np.ndarray, extents: np.ndarray, side: int) -> np.ndarray:
    xg, yg, zg = _voxel_grid(side)
    dx, dy, dz = xg - centre[0], yg - centre[1], zg - centre[2]
    if spec.family == "ball":
        return dx * dx + dy * dy + dz * dz <= extents[0] ** 2
    if spec.family == "box":
        return (np.abs(dx) <= extents[0]) & (np.abs(dy) <= extents[1]) & (np.abs(dz) <= extents[2])
    # ellipsoid and tube are both axis-aligned ellipsoids of different extents
    return (dx / extents[0]) ** 2 + (dy / extents[1]) ** 2 + (dz / extents[2]) ** 2 <= 1.0


def generate(spec: CategorySpec, seed: int, side: int = 32, sample_id: str = "") -> Sample:
    """Generate one sample, deterministic in (spec, seed, side)."""
    rng = np.random.default_rng(seed)
    extents = _shape_extents(spec, rng)
    centre = np.empty(3)
    for axis in range(3):
        win_lo = spec.region[axis][0] * (side - 1)
        win_hi = spec.region[axis][1] * (side - 1)
        fit_lo = extents[axis]
        fit_hi = side - 1 - extents[axis]
        lo, hi = max(win_lo, fit_lo), min(win_hi, fit_hi)
        if lo > hi:
            raise GenerationError(
                f"category '{spec.name}': a shape of extent {extents[axis]:.2f} cannot fit "
                f"inside placement window {spec.region[axis]} on axis {axis}"
            )
        centre[axis] = rng.uniform(lo, hi)
    mask = _support(spec, centre, extents, side)
    if mask.sum() < 8:
        raise GenerationError(
            f"category '{spec.name}': generated mask has fewer than 8 foreground voxels"
        )
    noise = rng.standard_normal((side, side, side))
    volume = np.where(
        mask,
        spec.fg_mean + spec.fg_std * noise,
        spec.bg_mean + spec.bg_std * noise,
    )
    return Sample(
        volume=volume.astype(np.float32),
        mask=mask.astype(np.uint8),
        category=spec.name,
        sample_id=sample_id,
        seed=int(seed),
    )


def sample_point_prompts(mask: np.ndarray, n: int = 6, seed: int = 0) -> PromptSpec:
    """Simulated click prompt: centroid-nearest voxel first, then uniform picks.

    All points are labelled foreground. With fewer than n foreground voxels
    the remaining picks fall back to sampling with replacement.
    """
    if n < 1:
        raise ValidationError(f"need at least one point, got n={n}")
    coords = np.argwhere(mask)
    if len(coords) == 0:
        raise ValidationError("cannot sample point prompts from an empty mask")
    centroid = coords.mean(axis=0)
    first = coords[np.argmin(((coords - centroid) ** 2).sum(axis=1))]
    picked = [tuple(int(c) for c in first)]
    if n > 1:
        rng = np.random.default_rng(seed)
        pool = [tuple(int(c) for c in row) for row in coords]
        pool.remove(picked[0])
        if len(pool) >= n - 1:
            idx = rng.choice(len(pool), size=n - 1, replace=False)
        else:
            idx = rng.choice(len(coords), size=n - 1, replace=True)
            pool = [tuple(int(c) for c in row) for row in coords]
        picked.extend(pool[i] for i in idx)
    return PromptSpec.from_points([(coord, FOREGROUND) for coord in picked])


def bbox_prompt(mask: np.ndarray, jitter: int = 0) -> PromptSpec:
    """Tight axis-aligned bounding box, optionally expanded and clamped."""
    coords = np.argwhere(mask)
    if len(coords) == 0:
        raise ValidationError("cannot build a box prompt from an empty mask")
    lo = np.maximum(coords.min(axis=0) - jitter, 0)
    hi = np.minimum(coords.max(axis=0) + jitter, np.array(mask.shape) - 1)
    return PromptSpec.from_box(tuple(int(c) for c in lo), tuple(int(c) for c in hi))


# -- corpora -------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    volume_side: int = 32
    train_per_category: int = 100
    heldout_per_category: int = 50
    categories: tuple[CategorySpec, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ValidationError("category names must be unique")
        if sum(1 for c in self.categories if c.role == "general") < 2:
            raise ValidationError("need at least 2 general categories")
        if sum(1 for c in self.categories if c.role == "expert") < 2:
            raise ValidationError("need at least 2 expert categories")

    def general(self) -> list[CategorySpec]:
        return [c for c in self.categories if c.role == "general"]

    def expert(self) -> list[CategorySpec]:
        return [c for c in self.categories if c.role == "expert"]


def default_corpus_config() -> CorpusConfig:
    # General shapes are big, bright-on-dark, central, and drawn from families
    # the experts never use. Expert shapes are smaller and dim-on-bright
    # (inverted contrast, so adapting to them genuinely conflicts with the
    # general task); expert pairs share a family and differ only by corner
    # region, which makes prompt position the signal that separates them.
    centre = ((0.38, 0.62),) * 3
    lo, hi = (0.13, 0.30), (0.70, 0.87)
    bright = dict(fg_mean=0.9, fg_std=0.25, bg_mean=0.1, bg_std=0.25)
    dim = dict(fg_mean=0.35, fg_std=0.25, bg_mean=0.55, bg_std=0.25)
    return CorpusConfig(
        categories=(
            CategorySpec("ball", "ball", (10.5, 13.5), region=centre, **bright),
            CategorySpec("box", "box", (8.0, 11.0), region=centre, **bright),
            CategorySpec("ellipsoid", "ellipsoid", (7.5, 12.5), region=centre, **bright),
            CategorySpec("tube", "tube", (7.0, 8.5), aspect=1.7, region=centre, **bright),
            CategorySpec("dim_tube_a", "tube", (4.0, 5.0), aspect=1.8, role="expert", region=(lo, lo, lo), **dim),
            CategorySpec("dim_tube_b", "tube", (4.0, 5.0), aspect=1.8, role="expert", region=(hi, hi, lo), **dim),
            CategorySpec("dim_ellipsoid_a", "ellipsoid", (4.0, 7.5), role="expert", region=(hi, lo, hi), **dim),
            CategorySpec("dim_ellipsoid_b", "ellipsoid", (4.0, 7.5), role="expert", region=(lo, hi, hi), **dim),
        )
    )


@dataclass
class Corpus:
    config: CorpusConfig
    master_seed: int
    samples: dict[str, Sample]
    general_train: list[str]
    expert_train: dict[str, list[str]]
    held_out: dict[str, list[str]]

    def sample(self, sample_id: str) -> Sample:
        return self.samples[sample_id]

    def category_spec(self, name: str) -> CategorySpec:
        for spec in self.config.categories:
            if spec.name == name:
                return spec
        raise ValidationError(f"unknown category '{name}'")


_SPLIT_CODES = {"train": 1, "heldout": 2}


def _sample_seed(master: int, cat_index: int, split: str, index: int) -> int:
    words = np.random.SeedSequence(
        [master, cat_index, _SPLIT_CODES[split], index]
    ).generate_state(2)
    return (int(words[0]) << 32) | int(words[1])


def build_corpora(config: CorpusConfig, seed: int) -> Corpus:
    """Generate all splits: shared general training pool, per-expert training
    pools, and per-category held-out sets. Sample ids are disjoint across
    splits by construction."""
    samples: dict[str, Sample] = {}
    general_train: list[str] = []
    expert_train: dict[str, list[str]] = {}
    held_out: dict[str, list[str]] = {}

    for cat_index, spec in enumerate(config.categories):
        train_ids = []
        for i in range(config.train_per_category):
            sid = f"{spec.name}-train-{i:04d}"
            samples[sid] = generate(
                spec, _sample_seed(seed, cat_index, "train", i), config.volume_side, sid
            )
            train_ids.append(sid)
        if spec.role == "general":
            general_train.extend(train_ids)
        else:
            expert_train[spec.name] = train_ids
        held_ids = []
        for i in range(config.heldout_per_category):
            sid = f"{spec.name}-heldout-{i:04d}"
            samples[sid] = generate(
                spec, _sample_seed(seed, cat_index, "heldout", i), config.volume_side, sid
            )
            held_ids.append(sid)
        held_out[spec.name] = held_ids

    return Corpus(
        config=config,
        master_seed=int(seed),
        samples=samples,
        general_train=general_train,
        expert_train=expert_train,
        held_out=held_out,
    )


# -- disk format ----------------------------------------------------------------


def _sample_blob(sample: Sample) -> bytes:
    return sample.volume.astype("<f4").tobytes() + sample.mask.astype(np.uint8).tobytes()


def save_corpus(corpus: Corpus, out_dir: str) -> str:
    """Write one .bin + .json per sample plus a manifest; returns manifest path."""
    sample_dir = os.path.join(out_dir, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    checksums = {}
    for sid, sample in corpus.samples.items():
        blob = _sample_blob(sample)
        checksums[sid] = zlib.crc32(blob) & 0xFFFFFFFF
        with open(os.path.join(sample_dir, sid + ".bin"), "wb") as fh:
            fh.write(blob)
        sidecar = {
            "sample_id": sid,
            "category": sample.category,
            "seed": sample.seed,
            "shape": list(sample.volume.shape),
        }
        with open(os.path.join(sample_dir, sid + ".json"), "w") as fh:
            json.dump(sidecar, fh, sort_keys=True)
    corpus_crc = zlib.crc32(
        "".join(f"{sid}:{checksums[sid]}" for sid in sorted(checksums)).encode()
    )
    manifest = {
        "volume_side": corpus.config.volume_side,
        "train_per_category": corpus.config.train_per_category,
        "heldout_per_category": corpus.config.heldout_per_category,
        "categories": [asdict(c) for c in corpus.config.categories],
        "master_seed": corpus.master_seed,
        "splits": {
            "general_train": corpus.general_train,
            "expert_train": corpus.expert_train,
            "held_out": corpus.held_out,
        },
        "sample_checksums": checksums,
        "corpus_checksum": corpus_crc & 0xFFFFFFFF,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, manifest_path)
    return manifest_path


def config_from_manifest(manifest: dict) -> CorpusConfig:
    categories = []
    for entry in manifest["categories"]:
        entry = dict(entry)
        entry["size_range"] = tuple(entry["size_range"])
        entry["region"] = tuple(tuple(w) for w in entry["region"])
        categories.append(CategorySpec(**entry))
    return CorpusConfig(
        volume_side=manifest["volume_side"],
        train_per_category=manifest["train_per_category"],
        heldout_per_category=manifest["heldout_per_category"],
        categories=tuple(categories),
    )


def load_corpus(dir_path: str) -> Corpus:
    manifest_path = os.path.join(dir_path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read corpus manifest '{manifest_path}': {exc}") from exc
    config = config_from_manifest(manifest)
    side = config.volume_side
    samples: dict[str, Sample] = {}
    for sid, expected_crc in manifest["sample_checksums"].items():
        bin_path = os.path.join(dir_path, "samples", sid + ".bin")
        with open(bin_path, "rb") as fh:
            blob = fh.read()
        if zlib.crc32(blob) & 0xFFFFFFFF != expected_crc:
            raise ValidationError(f"sample '{sid}' failed its checksum; corpus is corrupt")
        with open(os.path.join(dir_path, "samples", sid + ".json")) as fh:
            sidecar = json.load(fh)
        voxels = side ** 3
        volume = np.frombuffer(blob[: 4 * voxels], dtype="<f4").reshape((side,) * 3)
        mask = np.frombuffer(blob[4 * voxels:], dtype=np.uint8).reshape((side,) * 3)
        samples[sid] = Sample(
            volume=volume.copy(),
            mask=mask.copy(),
            category=sidecar["category"],
            sample_id=sid,
            seed=sidecar["seed"],
        )
    splits = manifest["splits"]
    return Corpus(
        config=config,
        master_seed=manifest["master_seed"],
        samples=samples,
        general_train=list(splits["general_train"]),
        expert_train={k: list(v) for k, v in splits["expert_train"].items()},
        held_out={k: list(v) for k, v in splits["held_out"].items()},
    )
