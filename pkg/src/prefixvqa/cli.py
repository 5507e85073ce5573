"""Command-line entry point: synth, pretrain, train, eval, generate, ablate, params.

Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
Every subcommand accepts ``--seed`` and ``--config FILE`` (a JSON object of
option values; explicit flags win over the file).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .data import OPEN_CANDIDATES, SyntheticWorldConfig, load_features, load_manifest, save_synthetic
from .errors import CheckpointError, InputError
from .evaluate import ABLATION_TEMPLATES, AblationResult, evaluate_split, generate_answer
from .experiment import FINETUNE, MODEL_SHAPE, PRETRAIN, build_tokenizer, finetune, length_budget, model_config, \
    pretrain_base
from .lm import ModelConfig, count_parameters, init_model, load_model, save_model
from .mapper import load_mapper, save_mapper
from .peft import PeftConfig, load_adapter, parameter_budget, save_adapter
from .plotting import plot_ablation, plot_eval, plot_losses
from .prompt import LengthBudget, PromptTemplate, Tokenizer
from .train import TrainConfig

log = logging.getLogger("prefixvqa")

VARIANTS = ("frozen", "prompt", "prefix", "lora")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", metavar="FILE", help="JSON file of option values")


def _add_shape(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=MODEL_SHAPE["n_layers"])
    p.add_argument("--heads", type=int, default=MODEL_SHAPE["n_heads"])
    p.add_argument("--embed", type=int, default=MODEL_SHAPE["embed_dim"])
    p.add_argument("--max-pos", type=int, default=MODEL_SHAPE["max_positions"])


def _add_peft(p: argparse.ArgumentParser, *, rank: int, alpha: float, prefix_tokens: int, virtual: int) -> None:
    p.add_argument("--peft", choices=VARIANTS, default="lora")
    p.add_argument("--rank", type=int, default=rank, help="LoRA rank r")
    p.add_argument("--alpha", type=float, default=alpha, help="LoRA scale alpha")
    p.add_argument("--targets", default="q,v", help="LoRA target projections, comma separated")
    p.add_argument("--prefix-tokens", type=int, default=prefix_tokens, help="prefix-tuning length p")
    p.add_argument("--virtual-tokens", type=int, default=virtual, help="prompt-tuning length m")


def _add_finetune(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory (manifest.jsonl, features.vqaf)")
    p.add_argument("--base", help="pretrained base.plmc (vocab.txt beside it); pretrains inline if absent")
    p.add_argument("--pretrain-epochs", type=int, default=PRETRAIN.max_epochs)
    p.add_argument("--prefix-len", type=int, default=8, help="visual prefix length")
    p.add_argument("--epochs", type=int, default=FINETUNE.max_epochs)
    p.add_argument("--lr", type=float, default=FINETUNE.learning_rate)
    p.add_argument("--warmup", type=int, default=FINETUNE.warmup_steps)
    p.add_argument("--batch-size", type=int, default=FINETUNE.batch_size)
    p.add_argument("--tolerance", type=int, default=FINETUNE.early_stop_tolerance)
    p.add_argument("--max-steps", type=int, default=None)
    _add_shape(p)
    _add_peft(p, rank=4, alpha=8.0, prefix_tokens=8, virtual=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefixvqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"prefixvqa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    p.add_argument("--scenes", type=int, default=500)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix-len", type=int, default=8, help="width of the scene text in the corpus")
    _add_common(p)

    p = sub.add_parser("pretrain", help="pretrain a base model on the dataset's text corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=PRETRAIN.max_epochs)
    p.add_argument("--lr", type=float, default=PRETRAIN.learning_rate)
    p.add_argument("--batch-size", type=int, default=PRETRAIN.batch_size)
    _add_shape(p)
    _add_common(p)

    p = sub.add_parser("train", help="fine-tune an adapter and the visual mapper")
    p.add_argument("--out", required=True)
    p.add_argument("--template", choices=[t.value for t in PromptTemplate], default="regular")
    _add_finetune(p)
    _add_common(p)

    p = sub.add_parser("eval", help="score a trained run on one split")
    p.add_argument("--run", required=True, help="directory written by train")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="report directory (default: the run directory)")
    _add_common(p)

    p = sub.add_parser("generate", help="answer one question about one image")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--image-id", required=True)
    _add_common(p)

    p = sub.add_parser("ablate", help="train and score all four prompt templates")
    p.add_argument("--out", required=True)
    _add_finetune(p)
    _add_common(p)

    p = sub.add_parser("params", help="trainable-parameter accounting, no training")
    p.add_argument("--layers", type=int, default=48)
    p.add_argument("--heads", type=int, default=25)
    p.add_argument("--embed", type=int, default=1600)
    p.add_argument("--vocab", type=int, default=50257)
    p.add_argument("--max-pos", type=int, default=1024)
    _add_peft(p, rank=8, alpha=16.0, prefix_tokens=50, virtual=30)
    _add_common(p)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        if not isinstance(values, dict):
            parser.error("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # the active subparser
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
        args = parser.parse_args(argv)
    return args


def header(args: argparse.Namespace) -> dict:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return {"prefixvqa_version": __version__, "command": args.command, "seed": args.seed, "config_hash": digest}


# ---------------------------------------------------------------------------
# helpers


def _dataset(data_dir):
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / "manifest.jsonl")
    features_path = manifest.features_path or data_dir / "features.vqaf"
    return manifest, load_features(features_path)


def _corpus(data_dir) -> list[str]:
    path = Path(data_dir) / "corpus.txt"
    return path.read_text(encoding="utf-8").splitlines() if path.exists() else []


def _peft_config(args) -> PeftConfig:
    targets = tuple(t.strip() for t in args.targets.split(",") if t.strip())
    return PeftConfig(variant=args.peft, n_virtual=args.virtual_tokens, prefix_len=args.prefix_tokens,
                      rank=args.rank, alpha=args.alpha, targets=targets, seed=args.seed)


def _finetune_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, warmup_steps=args.warmup, batch_size=args.batch_size,
                       max_epochs=args.epochs, early_stop_tolerance=args.tolerance, max_steps=args.max_steps,
                       seed=args.seed)


def _shape(args) -> dict:
    return {"n_layers": args.layers, "n_heads": args.heads, "embed_dim": args.embed, "max_positions": args.max_pos}


def _write_text(path: Path, hdr: dict, body: str) -> None:
    lines = [f"{k}={v}" for k, v in hdr.items()]
    path.write_text("\n".join(lines) + "\n" + body, encoding="utf-8")


def _base_and_tokenizer(args, manifest, out: Path):
    """Load ``--base`` or pretrain one; either way base.plmc and vocab.txt land in ``out``."""
    if args.base:
        base_path = Path(args.base)
        tok = Tokenizer.load(base_path.parent / "vocab.txt")
        base = load_model(base_path)
        if base.config.vocab_size != len(tok):
            raise CheckpointError(f"{base_path}: vocabulary size does not match vocab.txt")
        if base_path.resolve() != (out / "base.plmc").resolve():
            shutil.copyfile(base_path, out / "base.plmc")
    else:
        corpus = _corpus(args.data)
        tok = build_tokenizer(manifest, corpus)
        cfg = model_config(tok, args.seed, **_shape(args))
        if corpus and args.pretrain_epochs > 0:
            pre_cfg = TrainConfig(**{**PRETRAIN.to_dict(), "max_epochs": args.pretrain_epochs, "seed": args.seed})
            base, report = pretrain_base(tok, corpus, cfg, pre_cfg, log=log.info)
            plot_losses(report, out / "pretrain_loss.png", "base-model pretraining")
        else:
            log.info("no pretraining corpus or zero pretraining epochs; base model left at initialization")
            base = init_model(cfg)
            base.freeze()
        save_model(base, out / "base.plmc")
    tok.save(out / "vocab.txt")
    return base, tok


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{run_dir}: not a training run directory ({exc})") from exc
    tok = Tokenizer.load(run_dir / "vocab.txt")
    base = load_model(run_dir / "base.plmc")
    model = load_adapter(base, run_dir / "adapter.plmc")
    mapper = load_mapper(run_dir / "mapper.plmc")
    budget = LengthBudget(**meta["budget"])
    return model, mapper, tok, budget, PromptTemplate(meta["template"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = SyntheticWorldConfig(n_scenes=args.scenes, seed=args.seed)
    out = Path(args.out)
    save_synthetic(out, cfg, width=args.prefix_len)
    manifest = load_manifest(out / "manifest.jsonl")
    counts = manifest.counts()
    body = "".join(f"{k}={v}\n" for k, v in counts.items()) + f"world_digest={cfg.digest()}\n"
    _write_text(out / "synth_report.txt", header(args), body)
    print(f"wrote {sum(counts.values())} samples to {out}")


def cmd_pretrain(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, _ = _dataset(args.data)
    corpus = _corpus(args.data)
    if not corpus:
        raise InputError(f"{args.data}: corpus.txt is missing or empty")
    tok = build_tokenizer(manifest, corpus)
    cfg = model_config(tok, args.seed, **_shape(args))
    pre_cfg = TrainConfig(**{**PRETRAIN.to_dict(), "learning_rate": args.lr, "batch_size": args.batch_size,
                             "max_epochs": args.epochs, "seed": args.seed})
    base, report = pretrain_base(tok, corpus, cfg, pre_cfg, log=log.info)
    save_model(base, out / "base.plmc")
    tok.save(out / "vocab.txt")
    (out / "pretrain_report.txt").write_text(report.to_text(header(args)), encoding="utf-8")
    plot_losses(report, out / "pretrain_loss.png", "base-model pretraining")
    print(f"base model written to {out / 'base.plmc'}")


def cmd_train(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, features = _dataset(args.data)
    base, tok = _base_and_tokenizer(args, manifest, out)
    budget = length_budget(tok, manifest)
    peft = _peft_config(args)
    run = finetune(base, tok, budget, manifest, features, peft, args.template, _finetune_config(args),
                   args.prefix_len, log=log.info)
    save_adapter(run.model, out / "adapter.plmc")
    save_mapper(run.mapper, out / "mapper.plmc")
    meta = {"template": run.template.value, "budget": {"question": budget.question, "answer": budget.answer},
            "peft": peft.to_dict(), "model": base.config.to_dict(), "prefix_len": args.prefix_len}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "train_report.txt").write_text(run.report.to_text(header(args)), encoding="utf-8")
    plot_losses(run.report, out / "train_loss.png", f"{peft.variant} fine-tuning ({run.template.value})")
    print(f"trained {peft.variant}: best validation loss {run.report.best_val_loss:.4f} "
          f"at epoch {run.report.best_epoch}; outputs in {out}")


def cmd_eval(args) -> None:
    model, mapper, tok, budget, template = _load_run(args.run)
    manifest, features = _dataset(args.data)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_split(model, mapper, tok, manifest.splits[args.split], features, budget, template)
    hdr = {**header(args), "split": args.split, "template": template.value}
    report.write(out / "eval_report.txt", out / "transcript.tsv", header=hdr)
    plot_eval(report, out / "eval.png", f"{args.split} split ({template.value})")
    sys.stdout.write(report.to_text())


def cmd_generate(args) -> None:
    model, mapper, tok, budget, template = _load_run(args.run)
    _, features = _dataset(args.data)
    if args.image_id not in features:
        raise InputError(f"image id {args.image_id!r} not in the feature file")
    print(generate_answer(model, mapper, tok, args.question, features[args.image_id], budget, template))


def cmd_ablate(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, features = _dataset(args.data)
    base, tok = _base_and_tokenizer(args, manifest, out)
    budget = length_budget(tok, manifest)
    peft = _peft_config(args)
    reports, train_reports = {}, {}
    hdr = header(args)
    for template in ABLATION_TEMPLATES:
        log.info("template %s", template.value)
        run = finetune(base, tok, budget, manifest, features, peft, template, _finetune_config(args),
                       args.prefix_len, log=log.info)
        rep = evaluate_split(run.model, run.mapper, tok, manifest.splits["test"], features, budget, template)
        rep.write(out / f"eval_{template.value}.txt", out / f"transcript_{template.value}.tsv",
                  header={**hdr, "template": template.value})
        reports[template], train_reports[template] = rep, run.report
    result = AblationResult(reports, train_reports)
    (out / "ablation.tsv").write_text(result.to_text(hdr), encoding="utf-8")
    chance = 1.0 / len(next(iter(OPEN_CANDIDATES.values())))
    plot_ablation(result, out / "ablation.png", chance=chance)
    sys.stdout.write(result.to_text())


def cmd_params(args) -> None:
    model_cfg = ModelConfig(n_layers=args.layers, n_heads=args.heads, embed_dim=args.embed,
                            vocab_size=args.vocab, max_positions=args.max_pos)
    model_cfg.validate()
    count, percent = parameter_budget(model_cfg, _peft_config(args))
    for k, v in header(args).items():
        print(f"{k}={v}")
    print(f"variant={args.peft}")
    print(f"trainable={count}")
    print(f"total={count_parameters(model_cfg)}")
    print(f"percent={percent:.4f}%")


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "generate": cmd_generate, "ablate": cmd_ablate, "params": cmd_params}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"prefixvqa {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
