"""Command-line entry point: ``multigrain <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric failure.
Log verbosity comes from ``MULTIGRAIN_LOG_LEVEL`` (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import checks
from .checkpoint import load_checkpoint, save_checkpoint
from .config import from_mapping, load_kv
from .errors import ConfigError, DataError, MultigrainError, UsageError
from .flops import ARCHITECTURES, HEADS, count_flops
from .masking import plan_mlm, plan_single_grained, plan_wwm_single_grained
from .model import ModelConfig, tiny_config
from .tokenizer import FINE_MODES, coarse_tokens_of, encode, format_presegmented, tokenize_fine
from .train import (
    TrainConfig, Trainer, finetune_classifier, finetune_span, format_ablation, load_vocabs,
    pretrain, read_cls_data, read_lines, read_span_data, run_ablation, smoothed,
)
from .vocab import build_vocab, ensure_containment, load_vocab, save_vocab

log = logging.getLogger("multigrain")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# shared flag groups --------------------------------------------------------------

def _vocab_flags(p, required=True):
    p.add_argument("--fine-vocab", required=required, help="fine vocabulary file")
    p.add_argument("--coarse-vocab", required=required, help="coarse vocabulary file")


def _model_flags(p):
    p.add_argument("--config", help="key = value file with model and training settings")
    p.add_argument("--fusion", help="sg, sg-wwm, cat:DF:DC, mean or max")
    p.add_argument("--objective", choices=("mlm", "ar"))
    p.add_argument("--max-len", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-ff", type=int)


def _train_flags(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--optimizer", choices=("adam", "lamb"))


def _text_flags(p):
    p.add_argument("--text", help="a single input text")
    p.add_argument("--corpus", help="UTF-8 file, one example per line")
    p.add_argument("--mode", choices=FINE_MODES, default="whitespace", help="fine tokenization")
    p.add_argument("--objective", choices=("mlm", "ar"), default="mlm")
    p.add_argument("--max-len", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multigrain", description="Multi-grained embedding pretraining toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", help="count tokens and write a vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--granularity", choices=("fine", "coarse"), default="fine")
    p.add_argument("--mode", choices=FINE_MODES, default="whitespace")
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--fine-vocab", help="for coarse: fine vocabulary to merge in (containment)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("tokenize", help="print fine tokens grouped into coarse spans")
    _text_flags(p)
    _vocab_flags(p)
    p.add_argument("--ids", action="store_true", help="print ids instead of surfaces")

    p = sub.add_parser("plan-mask", help="print an MLM corruption plan")
    _text_flags(p)
    _vocab_flags(p)
    p.add_argument("--fusion", default="max")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=0.15)

    p = sub.add_parser("pretrain", help="pretrain from scratch (or resume)")
    p.add_argument("--corpus", required=True)
    _vocab_flags(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", required=True, help="checkpoint directory")

    for name, help_ in (("finetune-cls", "fine-tune a classifier head"),
                        ("finetune-span", "fine-tune a span extraction head")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        _vocab_flags(p)
        p.add_argument("--config")
        _train_flags(p)
        p.add_argument("--freeze-encoder", action="store_true")
        p.add_argument("--out")

    p = sub.add_parser("ablate", help="pretrain and fine-tune all seven fusion modes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--data", required=True, help="classification data, label<TAB>text")
    _vocab_flags(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--ft-steps", type=int, default=200)
    p.add_argument("--out", help="write the comparison table here too")

    p = sub.add_parser("flops", help="analytic forward cost")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--d-model", type=int, default=768)
    p.add_argument("--d-ff", type=int, default=3072)
    p.add_argument("--heads", type=int)
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--max-len", type=int)
    p.add_argument("--vocab", type=int, default=30522)
    p.add_argument("--arch", default="single_grained", help=", ".join(ARCHITECTURES))
    p.add_argument("--head", choices=HEADS, default="cls")
    p.add_argument("--format", choices=("text", "tsv", "both"), default="both")

    p = sub.add_parser("gradcheck", help="compare analytic and numerical gradients")
    p.add_argument("--fusion", action="append", help="repeatable; default all seven modes")
    p.add_argument("--objective", choices=("mlm", "ar"), action="append")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("--full", action="store_true", help="acceptance-size runs (slower)")
    p.add_argument("--seed", type=int, default=0)
    return parser


# helpers -------------------------------------------------------------------------

def _texts(args) -> list[str]:
    if (args.text is None) == (args.corpus is None):
        raise UsageError("give exactly one of --text or --corpus")
    return [args.text] if args.text is not None else read_lines(args.corpus)


def _layout(objective: str) -> str:
    return "autoencoding" if objective == "mlm" else "autoregressive"


def _split_settings(path) -> tuple[dict, dict]:
    """Split a config file into model and training keys (``model.``/``train.`` prefixes optional)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model, train = {}, {}
    for key, value in (load_kv(path) if path else {}).items():
        bare = key.split(".", 1)[1] if key.startswith(("model.", "train.")) else key
        if key.startswith("model.") or (not key.startswith("train.") and bare in model_keys):
            if bare not in model_keys:
                raise ConfigError(f"{path}: unknown model key {key!r}")
            model[bare] = value
        elif bare in train_keys:
            train[bare] = value
        else:
            raise ConfigError(f"{path}: unknown key {key!r}")
    return model, train


def _train_config(args, values: dict, **defaults) -> TrainConfig:
    base = replace(TrainConfig(), **defaults) if defaults else TrainConfig()
    tcfg = from_mapping(TrainConfig, values, base)
    flags = {"seed": args.seed, "steps": args.steps, "batch_size": args.batch, "lr": args.lr,
             "seq_len": args.seq_len, "optimizer": args.optimizer}
    flags = {k: v for k, v in flags.items() if v is not None}
    if "steps" in flags and "warmup" not in values:
        flags["warmup"] = min(tcfg.warmup, flags["steps"])
    try:
        return replace(tcfg, **flags)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _model_config(args, values: dict, fine_size: int, coarse_size: int) -> ModelConfig:
    cfg = from_mapping(ModelConfig, values, tiny_config(fine_size, coarse_size))
    flags = {"fusion": args.fusion, "objective": args.objective, "max_len": args.max_len,
             "d_model": args.d_model, "n_layers": args.layers, "n_heads": args.heads, "d_ff": args.d_ff}
    return replace(cfg, fine_size=fine_size, coarse_size=coarse_size,
                   **{k: v for k, v in flags.items() if v is not None})


def _out(text: str) -> None:
    sys.stdout.write(text)


# commands ------------------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    if args.min_freq < 1:
        raise UsageError("--min-freq must be >= 1")
    if args.granularity == "fine":
        vocab = build_vocab(args.corpus, lambda s: tokenize_fine(s, args.mode), args.min_freq, "fine")
    else:
        vocab = build_vocab(args.corpus, coarse_tokens_of, args.min_freq, "coarse")
        if args.fine_vocab:
            vocab = ensure_containment(load_vocab(args.fine_vocab, "fine"), vocab)
    save_vocab(vocab, args.out)
    _out(f"wrote {len(vocab)} entries to {args.out}\n")
    return 0


def cmd_tokenize(args) -> int:
    fine, coarse = load_vocabs(args.fine_vocab, args.coarse_vocab)
    for text in _texts(args):
        if not text.strip():
            continue
        seq = encode(text, fine, coarse, args.mode, _layout(args.objective), args.max_len)
        if args.ids:
            spans = " ".join(f"{s}:{e}:{c}" for s, e, c in seq.spans)
            _out(" ".join(map(str, seq.fine_ids)) + "\t" + spans + "\n")
        else:
            _out(format_presegmented([seq.fine_tokens[s:e] for s, e, _ in seq.spans]) + "\n")
    return 0


def cmd_plan_mask(args) -> int:
    fine, coarse = load_vocabs(args.fine_vocab, args.coarse_vocab)
    selector = args.fusion
    planner = {"sg": plan_single_grained, "sg-wwm": plan_wwm_single_grained}.get(selector, plan_mlm)
    tiny_config(len(fine), len(coarse), fusion=selector)  # validates the selector
    rng = np.random.default_rng(args.seed)
    for text in _texts(args):
        if not text.strip():
            continue
        seq = encode(text, fine, coarse, args.mode, "autoencoding", args.max_len)
        ex = planner(seq, rng, fine_size=len(fine), coarse_size=len(coarse), rate=args.rate)
        inp = " ".join(fine.token_of(i) for i in ex.input_fine)
        labels = " ".join("_" if y < 0 else fine.token_of(y) for y in ex.labels)
        branches = " ".join(f"{k}:{b}" for k, b in ex.selected)
        _out(f"{inp}\t{labels}\t{branches}\n")
    return 0


def cmd_pretrain(args) -> int:
    model_values, train_values = _split_settings(args.config)
    out = Path(args.out)
    losses_path = out / "losses.tsv"
    out.mkdir(parents=True, exist_ok=True)

    def record(step, loss):
        log.info("step %d loss %.6f", step, loss)
        fh.write(f"{step}\t{loss!r}\n")

    if args.resume:
        fine, coarse = load_vocabs(args.fine_vocab, args.coarse_vocab)
        ckpt = load_checkpoint(args.resume)
        base = from_mapping(TrainConfig, ckpt.train)
        tcfg = _train_config(args, train_values, **{f.name: getattr(base, f.name) for f in fields(TrainConfig)})
        trainer = Trainer.resume(ckpt, read_lines(args.corpus), fine, coarse, tcfg)
        with open(losses_path, "a", encoding="utf-8") as fh:
            trainer.run(on_step=record)
        ckpt = trainer.checkpoint()
        ckpt.extra["final_loss"] = repr(trainer.losses[-1]) if trainer.losses else ""
        save_checkpoint(ckpt, out)
    else:
        fine = load_vocab(args.fine_vocab, "fine")
        coarse = load_vocab(args.coarse_vocab, "coarse")
        cfg = _model_config(args, model_values, len(fine), len(coarse))
        tcfg = _train_config(args, train_values)
        with open(losses_path, "w", encoding="utf-8") as fh:
            ckpt = pretrain(cfg, tcfg, args.corpus, args.fine_vocab, args.coarse_vocab, out, on_step=record)
    losses = [float(line.split("\t")[1]) for line in read_lines(losses_path) if line]
    _out(f"steps\t{ckpt.step}\n")
    if losses:
        _out(f"final_loss\t{losses[-1]!r}\nsmoothed_loss\t{smoothed(losses)!r}\n")
    _out(f"checkpoint\t{out}\n")
    return 0


def _finetune(args, task: str) -> int:
    fine, coarse = load_vocabs(args.fine_vocab, args.coarse_vocab)
    ckpt = load_checkpoint(args.ckpt)
    _, train_values = _split_settings(args.config)
    tcfg = _train_config(args, train_values, steps=200, warmup=20, lr=1e-3)
    tcfg = replace(tcfg, freeze_encoder=args.freeze_encoder)
    if task == "cls":
        out, score = finetune_classifier(ckpt, read_cls_data(args.data), tcfg, fine, coarse)
        _out(f"accuracy\t{score!r}\n")
    else:
        out, score = finetune_span(ckpt, read_span_data(args.data), tcfg, fine, coarse)
        _out(f"exact_match\t{score!r}\n")
    if args.out:
        save_checkpoint(out, args.out)
        _out(f"checkpoint\t{args.out}\n")
    return 0


def cmd_ablate(args) -> int:
    model_values, train_values = _split_settings(args.config)
    fine, coarse = load_vocabs(args.fine_vocab, args.coarse_vocab)
    cfg = _model_config(args, model_values, len(fine), len(coarse))
    pre = _train_config(args, train_values)
    ft = replace(pre, steps=args.ft_steps, warmup=min(args.ft_steps, max(1, args.ft_steps // 10)), lr=1e-3)

    def progress(row):
        log.info("%s: loss %.4f accuracy %.4f", row.name, row.pretrain_loss, row.accuracy)

    rows = run_ablation(cfg, pre, ft, args.corpus, args.fine_vocab, args.coarse_vocab, args.data, progress)
    table = format_ablation(rows)
    _out(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return 0


def _default_heads(d: int) -> int:
    return next(h for h in (12, 16, 8, 4, 2, 1) if d % h == 0)


def cmd_flops(args) -> int:
    heads = args.heads or _default_heads(args.d_model)
    cfg = ModelConfig(fine_size=args.vocab, coarse_size=args.vocab, d_model=args.d_model, n_layers=args.layers,
                      n_heads=heads, d_ff=args.d_ff, max_len=args.max_len or args.seq_len)
    report = count_flops(cfg, args.seq_len, args.arch, args.head)
    baseline = count_flops(cfg, args.seq_len, "single_grained", args.head) if args.arch != "single_grained" else None
    if args.format in ("text", "both"):
        _out(report.format_text(baseline))
    if args.format in ("tsv", "both"):
        _out(report.format_tsv(baseline))
    return 0


def cmd_gradcheck(args) -> int:
    modes = tuple(args.fusion) if args.fusion else checks.FUSION_MODES
    objectives = tuple(args.objective) if args.objective else ("mlm", "ar")
    result = checks.gradcheck_suite(args.seed, args.eps, args.tol, modes, objectives)
    _out(result.line() + "\n")
    return 0 if result.ok else 3


def cmd_selftest(args) -> int:
    if args.full:
        sizes = dict(containment=100_000, masking=100_000, leakage=100)
    else:
        sizes = dict(containment=2_000, masking=2_000, leakage=10)
    results = [
        checks.containment_partition_suite(sizes["containment"], args.seed),
        checks.masking_suite(sizes["masking"], args.seed),
        checks.ar_leakage_suite(sizes["leakage"], args.seed),
        checks.gradcheck_suite(args.seed, modes=checks.FUSION_MODES if args.full else ("sg", "cat:3:5", "max")),
    ]
    for r in results:
        _out(r.line() + "\n")
    return 0 if all(r.ok for r in results) else 3


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "tokenize": cmd_tokenize,
    "plan-mask": cmd_plan_mask,
    "pretrain": cmd_pretrain,
    "finetune-cls": lambda a: _finetune(a, "cls"),
    "finetune-span": lambda a: _finetune(a, "span"),
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    level = os.environ.get("MULTIGRAIN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except MultigrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return DataError.exit_code
    except UnicodeDecodeError as exc:
        print(f"error: input is not valid UTF-8: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    sys.exit(run())
