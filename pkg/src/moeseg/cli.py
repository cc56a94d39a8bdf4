"""Command-line entry point: one executable, one subcommand per pipeline stage.

    moeseg gen-data         write a synthetic corpus
    moeseg pretrain         train encoders + general decoder on general categories
    moeseg finetune-expert  clone and adapt one expert decoder
    moeseg train-gate       train the gating network (and optionally Top-1 experts)
    moeseg infer            routed inference for one sample
    moeseg eval             forgetting/recovery matrix + routing report
    moeseg ablate           selector ablation grid

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command ends by atomically writing a run manifest sufficient to
reproduce it. The pretrain stage exists because this package has no
pretrained weights to inherit; it builds the foundation checkpoint the
other stages extend.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .encoders import EncoderConfig
from .errors import CheckpointError, ConfigError, MoesegError, ValidationError
from .evaluate import (
    dice_score,
    binarize,
    make_prompt,
    run_ablation,
    run_matrix,
    write_ablation_csv,
    write_matrix_csv,
    write_routing_csv,
)
from .gating import DEFAULT_LOGIT_SCALE
from .model import MoeModel
from .selector import SelectorConfig, moe_infer
from .synthdata import (
    CorpusConfig,
    Sample,
    build_corpora,
    config_from_manifest,
    default_corpus_config,
    load_corpus,
    save_corpus,
)
from .training import TrainConfig, finetune_expert, pretrain, train_gating, write_history_csv


def _write_run_manifest(path: str, command: str, args: argparse.Namespace, started: float, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "outputs": outputs,
        "version": f"moeseg-{__version__}",
        "duration_seconds": round(time.time() - started, 3),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def _load_corpus_config(path: str | None) -> CorpusConfig:
    if path is None:
        return default_corpus_config()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    return config_from_manifest(raw)


def _encoder_config(args: argparse.Namespace, volume_side: int) -> EncoderConfig:
    return EncoderConfig(
        volume_side=volume_side,
        patch_size=args.patch_size,
        channels=args.channels,
        depth=args.depth,
    )


def _load_sample(path: str) -> Sample:
    sidecar_path = os.path.splitext(path)[0] + ".json"
    if not os.path.exists(path) or not os.path.exists(sidecar_path):
        raise ValidationError(f"sample needs both '{path}' and its .json sidecar")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    side = sidecar["shape"][0]
    voxels = side ** 3
    with open(path, "rb") as fh:
        blob = fh.read()
    volume = np.frombuffer(blob[: 4 * voxels], dtype="<f4").reshape((side,) * 3).copy()
    mask = np.frombuffer(blob[4 * voxels:], dtype=np.uint8).reshape((side,) * 3).copy()
    return Sample(volume=volume, mask=mask, category=sidecar["category"],
                  sample_id=sidecar["sample_id"], seed=sidecar["seed"])


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    started = time.time()
    config = _load_corpus_config(args.config)
    corpus = build_corpora(config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.samples)} samples across {len(config.categories)} categories")
    print(f"manifest: {manifest_path}")
    _write_run_manifest(os.path.join(args.out, "run_manifest.json"), "gen-data", args, started, [manifest_path])
    return 0


def _general_heldout_dice(model: MoeModel, corpus) -> float:
    model.set_trainable(set())
    total, count = 0.0, 0
    for spec in corpus.config.general():
        for sid in corpus.held_out[spec.name]:
            sample = corpus.sample(sid)
            image = model.embed_image(sample.volume.astype(np.float64))
            prompt = make_prompt(sample, "points6", eval_seed=0)
            probs = model.bank.general.decode(image, model.embed_prompt(prompt)).probabilities_np()
            total += dice_score(binarize(probs), sample.mask)
            count += 1
    return total / count if count else float("nan")


def cmd_pretrain(args: argparse.Namespace) -> int:
    started = time.time()
    corpus = load_corpus(args.data)
    config = _encoder_config(args, corpus.config.volume_side)
    model = MoeModel(config, seed=args.seed)
    train_cfg = TrainConfig(mode="pretrain", steps=args.steps, batch_size=args.batch,
                            seed=args.seed, lr_pretrain=args.lr)
    result = pretrain(model, corpus, train_cfg)
    model.save(args.out)
    write_history_csv(args.out + ".losses.csv", result.history, ["step", "loss"])
    dice = _general_heldout_dice(model, corpus)
    print(f"checkpoint: {args.out}")
    print(f"held-out general-category dice (points6): {dice:.4f}")
    _write_run_manifest(args.out + ".manifest.json", "pretrain", args, started, [args.out])
    return 0


def cmd_finetune_expert(args: argparse.Namespace) -> int:
    started = time.time()
    corpus = load_corpus(args.data)
    model = MoeModel.load(args.ckpt)
    if args.category not in model.bank.labels:
        model.add_expert(args.category)
    train_cfg = TrainConfig(mode="expert_finetune", steps=args.steps, batch_size=args.batch,
                            seed=args.seed, lr_expert=args.lr)
    result = finetune_expert(model, args.category, corpus, train_cfg)
    model.save(args.out)
    write_history_csv(args.out + ".losses.csv", result.history, ["step", "loss"])
    print(f"checkpoint: {args.out}")
    _write_run_manifest(args.out + ".manifest.json", "finetune-expert", args, started, [args.out])
    return 0


def cmd_train_gate(args: argparse.Namespace) -> int:
    started = time.time()
    corpus = load_corpus(args.data)
    model = MoeModel.load(args.ckpt)
    if model.gate is None:
        model.build_gate(seed=args.seed, logit_scale=args.logit_scale)
    train_cfg = TrainConfig(mode=args.mode, steps=args.steps, batch_size=args.batch, seed=args.seed)
    result = train_gating(model, corpus, train_cfg)
    model.save(args.out)
    header = ["step", "loss", "gate_ce"] if args.mode == "gate_plus_top1" else ["step", "loss"]
    write_history_csv(args.out + ".losses.csv", result.history, header)
    print(f"checkpoint: {args.out}")
    _write_run_manifest(args.out + ".manifest.json", "train-gate", args, started, [args.out])
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    started = time.time()
    model = MoeModel.load(args.ckpt)
    model.set_trainable(set())
    sample = _load_sample(args.sample)
    prompt = make_prompt(sample, args.prompt, eval_seed=args.seed)
    config = SelectorConfig(tau=args.tau, fusion=args.fusion)
    probs, report = moe_infer(model, sample.volume.astype(np.float64), prompt, config)
    mask = binarize(probs).astype(np.uint8)
    mask_path = args.out + ".mask.bin"
    with open(mask_path, "wb") as fh:
        fh.write(mask.tobytes())
    report_path = args.out + ".report.json"
    payload = {
        "sample_id": sample.sample_id,
        "category": sample.category,
        "prompt_kind": args.prompt,
        "tau": args.tau,
        "fusion": args.fusion,
        "top_label": report.top_label,
        "s_top": report.s_top,
        "fired": report.fired,
        "dice_vs_ground_truth": dice_score(mask, sample.mask),
    }
    with open(report_path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    print(json.dumps(payload, indent=1, sort_keys=True))
    _write_run_manifest(args.out + ".manifest.json", "infer", args, started, [mask_path, report_path])
    return 0


def _verify_freeze(current: MoeModel, base_path: str, changed: list[str]) -> int:
    base = MoeModel.load(base_path)
    failures = []
    for group in base.group_names():
        if group not in current.group_names():
            continue
        expect_changed = any(group == c or group.startswith(c) for c in changed)
        same = base.group_checksum(group) == current.group_checksum(group)
        status = "changed" if not same else "frozen"
        print(f"verify-freeze: {group}: {status}")
        if not same and not expect_changed:
            failures.append(group)
    if failures:
        print(f"verify-freeze FAILED: unexpected changes in {failures}", file=sys.stderr)
        return 1
    print("verify-freeze OK")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    model = MoeModel.load(args.ckpt)
    if args.verify_freeze is not None:
        changed = [c for c in (args.changed or "").split(",") if c]
        code = _verify_freeze(model, args.verify_freeze, changed)
        if code != 0:
            return code
    corpus = load_corpus(args.data)
    os.makedirs(args.out, exist_ok=True)
    report = run_matrix(model, corpus, SelectorConfig(tau=args.tau, fusion=args.fusion),
                        eval_seed=args.eval_seed)
    matrix_path = os.path.join(args.out, "matrix.csv")
    routing_path = os.path.join(args.out, "routing.csv")
    write_matrix_csv(matrix_path, report)
    write_routing_csv(routing_path, report)
    print(f"wrote {matrix_path} and {routing_path}")
    _write_run_manifest(os.path.join(args.out, "run_manifest.json"), "eval", args, started,
                        [matrix_path, routing_path])
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.time()
    model = MoeModel.load(args.ckpt)
    corpus = load_corpus(args.data)
    os.makedirs(args.out, exist_ok=True)
    taus = tuple(float(t) for t in args.taus.split(","))
    fusions = tuple(args.fusions.split(","))
    report = run_ablation(model, corpus, taus=taus, fusions=fusions, eval_seed=args.eval_seed)
    ablation_path = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(ablation_path, report)
    print(f"wrote {ablation_path} ({len(report.ablation_rows)} cells)")
    _write_run_manifest(os.path.join(args.out, "run_manifest.json"), "ablate", args, started,
                        [ablation_path])
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moeseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"moeseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", default=None, help="corpus config JSON (defaults to the built-in corpus)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train encoders + general decoder (foundation checkpoint)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--channels", type=int, default=48)
    p.add_argument("--depth", type=int, default=2)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-expert", help="clone the general decoder and adapt it to one category")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune_expert)

    p = sub.add_parser("train-gate", help="train the gating network over the registered experts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["gate_only", "gate_plus_top1"], default="gate_only")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--logit-scale", type=float, default=DEFAULT_LOGIT_SCALE)
    p.set_defaults(func=cmd_train_gate)

    p = sub.add_parser("infer", help="routed inference for one stored sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="path to a <sample>.bin with .json sidecar")
    p.add_argument("--prompt", choices=["points6", "bbox"], default="points6")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--fusion", choices=["weighted", "avg", "aft_weight"], default="weighted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix for .mask.bin and .report.json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluation matrix and routing report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--fusion", choices=["weighted", "avg", "aft_weight"], default="weighted")
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--verify-freeze", default=None, metavar="BASE_CKPT",
                   help="compare parameter groups against a base checkpoint before evaluating")
    p.add_argument("--changed", default=None,
                   help="comma-separated groups allowed to differ under --verify-freeze")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="selector ablation grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taus", default="0.3,0.5,0.7,1.0")
    p.add_argument("--fusions", default="weighted,avg,aft_weight")
    p.add_argument("--eval-seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MoesegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
