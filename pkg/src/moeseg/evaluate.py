"""Dice scoring and the evaluation reports.

One pass over the held-out sets computes everything all reports need: per
(variant, category, prompt kind) mean Dice for the forgetting matrix, the
per-sample routing report, and the selector ablation grid over (tau,
fusion) cells. Variants:

- ``baseline``: the general decoder alone,
- ``ft_<label>``: that finetuned expert decoder used for every input,
- ``moe``: the full routed pipeline.

Accumulation order is fixed by the corpus manifest, so reports are
bit-reproducible given fixed checkpoints and corpora. The ablation grid
accumulates a pooled expert-group baseline mean in the same order, which
the tau=1.0 cells must match exactly.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError
from .model import MoeModel
from .selector import FUSION_RULES, SelectorConfig, select_mask
from .synthdata import Corpus, bbox_prompt, sample_point_prompts

PROMPT_KINDS = ("points6", "bbox")
DEFAULT_TAUS = (0.3, 0.5, 0.7, 1.0)


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """Overlap score 2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    if pred.shape != target.shape:
        raise ContractError(f"dice shapes disagree: {pred.shape} vs {target.shape}")
    a = pred.astype(bool)
    b = target.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def binarize(probs: np.ndarray) -> np.ndarray:
    return probs > 0.5


def prompt_seed(sample_id: str, prompt_kind: str, eval_seed: int) -> int:
    return zlib.crc32(f"{sample_id}:{prompt_kind}:{eval_seed}".encode()) & 0xFFFFFFFF


def make_prompt(sample, prompt_kind: str, eval_seed: int):
    if prompt_kind == "points6":
        return sample_point_prompts(sample.mask, n=6, seed=prompt_seed(sample.sample_id, prompt_kind, eval_seed))
    if prompt_kind == "bbox":
        return bbox_prompt(sample.mask)
    raise ContractError(f"unknown prompt kind '{prompt_kind}'")


@dataclass(frozen=True)
class RoutingRow:
    sample_id: str
    category: str
    prompt_kind: str
    top_label: Optional[str]
    s_top: Optional[float]
    fired: bool
    dice: float


@dataclass
class EvalReport:
    matrix_rows: list[tuple[str, str, str, float, int]] = field(default_factory=list)
    routing_rows: list[RoutingRow] = field(default_factory=list)
    ablation_rows: list[tuple[float, str, str, float]] = field(default_factory=list)
    baseline_expert_group_mean: Optional[float] = None


class _MeanAcc:
    __slots__ = ("total", "count")

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def add(self, value: float) -> None:
        self.total += value
        self.count += 1

    def mean(self) -> float:
        return self.total / self.count if self.count else float("nan")


def run_full_evaluation(
    model: MoeModel,
    corpus: Corpus,
    selector_config: SelectorConfig = SelectorConfig(),
    taus: Sequence[float] = DEFAULT_TAUS,
    fusions: Sequence[str] = FUSION_RULES,
    eval_seed: int = 0,
    prompt_kinds: Sequence[str] = PROMPT_KINDS,
) -> EvalReport:
    model.set_trainable(set())  # pure inference: record no graphs
    categories = [spec.name for spec in corpus.config.categories]
    roles = {spec.name: spec.role for spec in corpus.config.categories}
    labels = model.bank.labels

    matrix: dict[tuple[str, str, str], _MeanAcc] = {}
    ablation: dict[tuple[float, str], _MeanAcc] = {(t, f): _MeanAcc() for t in taus for f in fusions}
    baseline_expert = _MeanAcc()
    routing_rows: list[RoutingRow] = []

    def add(variant: str, category: str, kind: str, value: float) -> None:
        group = "all_general" if roles[category] == "general" else "all_expert"
        for cat_key in (category, group):
            matrix.setdefault((variant, cat_key, kind), _MeanAcc()).add(value)

    for category in categories:
        for sid in corpus.held_out[category]:
            sample = corpus.sample(sid)
            image = model.embed_image(sample.volume.astype(np.float64))
            for kind in prompt_kinds:
                prompt_emb = model.embed_prompt(make_prompt(sample, kind, eval_seed))
                general = model.bank.general.decode(image, prompt_emb)
                general_probs = general.probabilities_np()
                dice_general = dice_score(binarize(general_probs), sample.mask)
                add("baseline", category, kind, dice_general)

                expert_masks = {}
                for label in labels:
                    decoded = model.bank.expert_by_label(label).decode(image, prompt_emb)
                    expert_masks[label] = decoded
                    add(
                        f"ft_{label}",
                        category,
                        kind,
                        dice_score(binarize(decoded.probabilities_np()), sample.mask),
                    )

                if model.gate is None or model.bank.m == 0:
                    add("moe", category, kind, dice_general)
                    routing_rows.append(
                        RoutingRow(sid, category, kind, None, None, False, dice_general)
                    )
                    if roles[category] == "expert":
                        baseline_expert.add(dice_general)
                        for cell in ablation.values():
                            cell.add(dice_general)
                    continue

                gate_scores = model.gate.scores(image, prompt_emb)
                top_label = labels[gate_scores.top_index]
                top = expert_masks[top_label]
                top_probs = top.probabilities_np()

                def fuse(cfg: SelectorConfig) -> np.ndarray:
                    return select_mask(
                        general_probs,
                        top_probs,
                        gate_scores.s_top,
                        cfg,
                        general_logits=general.logits_np,
                        expert_logits=top.logits_np,
                    )

                fused = fuse(selector_config)
                dice_moe = dice_score(binarize(fused), sample.mask)
                add("moe", category, kind, dice_moe)
                routing_rows.append(
                    RoutingRow(
                        sid,
                        category,
                        kind,
                        top_label,
                        gate_scores.s_top,
                        gate_scores.s_top > selector_config.tau,
                        dice_moe,
                    )
                )

                if roles[category] == "expert":
                    baseline_expert.add(dice_general)
                    for (tau, fusion), cell in ablation.items():
                        cell_mask = fuse(SelectorConfig(tau=tau, fusion=fusion))
                        cell.add(dice_score(binarize(cell_mask), sample.mask))

    report = EvalReport()
    for (variant, category, kind), acc in matrix.items():
        report.matrix_rows.append((variant, category, kind, acc.mean(), acc.count))
    report.routing_rows = routing_rows
    for (tau, fusion), acc in ablation.items():
        report.ablation_rows.append((tau, fusion, "expert", acc.mean()))
    report.baseline_expert_group_mean = baseline_expert.mean()
    return report


def run_matrix(
    model: MoeModel,
    corpus: Corpus,
    selector_config: SelectorConfig = SelectorConfig(),
    eval_seed: int = 0,
) -> EvalReport:
    """Forgetting/recovery matrix: baseline, every ft_<label>, and moe."""
    return run_full_evaluation(
        model,
        corpus,
        selector_config,
        taus=(selector_config.tau,),
        fusions=(selector_config.fusion,),
        eval_seed=eval_seed,
    )


def run_ablation(
    model: MoeModel,
    corpus: Corpus,
    taus: Sequence[float] = DEFAULT_TAUS,
    fusions: Sequence[str] = FUSION_RULES,
    eval_seed: int = 0,
) -> EvalReport:
    """Selector grid: one expert-group mean Dice per (tau, fusion) cell."""
    return run_full_evaluation(model, corpus, taus=taus, fusions=fusions, eval_seed=eval_seed)


# -- report helpers ----------------------------------------------------------------


def matrix_value(report: EvalReport, variant: str, category: str, kind: str) -> float:
    for row in report.matrix_rows:
        if row[:3] == (variant, category, kind):
            return row[3]
    raise KeyError(f"no matrix row for {(variant, category, kind)}")


def ablation_value(report: EvalReport, tau: float, fusion: str) -> float:
    for row in report.ablation_rows:
        if row[0] == tau and row[1] == fusion:
            return row[3]
    raise KeyError(f"no ablation row for tau={tau}, fusion={fusion}")


def routing_confusion(report: EvalReport, kind: str) -> dict[str, dict[str, int]]:
    confusion: dict[str, dict[str, int]] = {}
    for row in report.routing_rows:
        if row.prompt_kind != kind:
            continue
        dest = row.top_label if row.top_label is not None else "<none>"
        confusion.setdefault(row.category, {}).setdefault(dest, 0)
        confusion[row.category][dest] += 1
    return confusion


def fired_rate(report: EvalReport, categories: Iterable[str]) -> float:
    rows = [r for r in report.routing_rows if r.category in set(categories)]
    if not rows:
        return 0.0
    return sum(1 for r in rows if r.fired) / len(rows)


# -- CSV output ---------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_matrix_csv(path: str, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "category", "prompt_kind", "mean_dice", "n"])
        for variant, category, kind, mean, n in report.matrix_rows:
            writer.writerow([variant, category, kind, _fmt(mean), n])


def write_routing_csv(path: str, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "category", "top_label", "s_top", "fired", "dice"])
        for row in report.routing_rows:
            writer.writerow(
                [row.sample_id, row.category, _fmt(row.top_label), _fmt(row.s_top), _fmt(row.fired), _fmt(row.dice)]
            )


def write_ablation_csv(path: str, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "fusion", "category_group", "mean_dice"])
        for tau, fusion, group, mean in report.ablation_rows:
            writer.writerow([_fmt(float(tau)), fusion, group, _fmt(mean)])
