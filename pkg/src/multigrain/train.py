"""Pretraining and fine-tuning loops.

Every random decision in a run (batch sampling, masking plans, dropout,
head initialization) is drawn from one ``numpy`` PCG64 generator seeded by
``TrainConfig.seed``; its state is stored in checkpoints, so a resumed run
continues the exact trajectory of an uninterrupted one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, cross_entropy, no_grad
from .checkpoint import Checkpoint, rng_from_words, rng_state_words
from .config import from_mapping, to_mapping
from .errors import ConfigError, DataError, NumericError, ParseError
from .masking import plan_mlm, plan_single_grained, plan_wwm_single_grained
from .model import (
    Batch, Model, ModelConfig, best_span, collate, masked_position_logits, span_candidates,
)
from .optim import AdamHyper, OptimState, adam_step, clip_grad_norm, lamb_step, linear_schedule
from .tokenizer import TokenizedSequence, encode
from .vocab import NUM_SPECIALS, Vocabulary, load_vocab

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "lamb")
MASKING = ("whole_span", "token")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 300
    lr: float = 3e-3
    warmup: int = 30
    optimizer: str = "adam"
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    mask_rate: float = 0.15
    masking: str = "whole_span"
    seq_len: int | None = None
    stage2_step: int | None = None
    stage2_seq_len: int | None = None
    eval_every: int = 0
    freeze_encoder: bool = False
    holdout: float = 0.2

    def __post_init__(self):
        if self.batch_size <= 0 or self.steps <= 0:
            raise ConfigError("batch_size and steps must be positive")
        if not 0 <= self.warmup <= self.steps:
            raise ConfigError("warmup must be within [0, steps]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.masking not in MASKING:
            raise ConfigError(f"unknown masking scheme {self.masking!r}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if (self.stage2_step is None) != (self.stage2_seq_len is None):
            raise ConfigError("stage2_step and stage2_seq_len go together")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("holdout must be in [0, 1)")


def load_vocabs(fine_path, coarse_path) -> tuple[Vocabulary, Vocabulary]:
    fine = load_vocab(fine_path, "fine")
    coarse = load_vocab(coarse_path, "coarse")
    missing = [t for t in fine.tokens if t not in coarse]
    if missing:
        raise DataError(f"{coarse_path}: coarse vocabulary is missing fine tokens, e.g. {missing[0]!r}")
    return fine, coarse


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def encode_corpus(lines: Sequence[str], fine: Vocabulary, coarse: Vocabulary, cfg: ModelConfig,
                  max_len: int) -> list[TokenizedSequence]:
    seqs = []
    for line in lines:
        if not line.strip():
            continue
        seq = encode(line, fine, coarse, cfg.fine_mode, cfg.layout, max_len, cfg.max_span)
        if len(seq) > 2:
            seqs.append(seq)
    return seqs


class Trainer:
    """Pretraining state machine: one call to ``step()`` is one optimizer update."""

    def __init__(self, model: Model, tcfg: TrainConfig, lines: Sequence[str], fine: Vocabulary,
                 coarse: Vocabulary, rng: np.random.Generator | None = None,
                 opt: OptimState | None = None, step: int = 0):
        self.model = model
        self.tcfg = tcfg
        self.fine = fine
        self.coarse = coarse
        self.rng = rng if rng is not None else np.random.default_rng(tcfg.seed)
        self.opt = opt if opt is not None else OptimState()
        self.step_count = step
        cfg = model.cfg
        seq_len = tcfg.seq_len or cfg.max_len
        self._data = {seq_len: encode_corpus(lines, fine, coarse, cfg, seq_len)}
        if not self._data[seq_len]:
            raise DataError("corpus contains no usable lines")
        if tcfg.stage2_seq_len is not None:
            if tcfg.stage2_seq_len > cfg.max_len:
                raise ConfigError(f"stage2_seq_len {tcfg.stage2_seq_len} exceeds model max_len {cfg.max_len}")
            self._data[tcfg.stage2_seq_len] = encode_corpus(lines, fine, coarse, cfg, tcfg.stage2_seq_len)
        self._seq_len = seq_len
        self.losses: list[float] = []

    @property
    def current_seq_len(self) -> int:
        t = self.tcfg
        if t.stage2_step is not None and self.step_count >= t.stage2_step:
            return t.stage2_seq_len
        return self._seq_len

    def _planner(self):
        if self.model.cfg.objective != "mlm":
            return None
        if self.tcfg.masking == "token":
            return plan_single_grained
        if self.model.cfg.fusion_config.uses_coarse:
            return plan_mlm
        return plan_wwm_single_grained

    def next_batch(self) -> Batch:
        data = self._data[self.current_seq_len]
        idx = self.rng.integers(0, len(data), size=self.tcfg.batch_size)
        seqs = [data[i] for i in idx]
        planner = self._planner()
        masked = None
        if planner is not None:
            masked = [planner(s, self.rng, fine_size=len(self.fine), coarse_size=len(self.coarse),
                              rate=self.tcfg.mask_rate) for s in seqs]
        return collate(seqs, masked, self.model.cfg.objective)

    def step(self) -> float:
        t = self.tcfg
        params = self.model.params
        for p in params.values():
            p.grad = None
        batch = self.next_batch()
        loss = self.model.batch_loss(batch, self.rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {self.step_count}")
        loss.backward()
        clip_grad_norm(params, t.clip_norm)
        hyper = AdamHyper(lr=linear_schedule(self.step_count, t.lr, t.warmup, t.steps),
                          weight_decay=t.weight_decay)
        (lamb_step if t.optimizer == "lamb" else adam_step)(params, self.opt, hyper)
        self.step_count += 1
        self.losses.append(value)
        return value

    def run(self, until: int | None = None, on_step: Callable[[int, float], None] | None = None) -> list[float]:
        until = self.tcfg.steps if until is None else until
        out = []
        while self.step_count < until:
            loss = self.step()
            out.append(loss)
            if on_step is not None:
                on_step(self.step_count, loss)
        return out

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_cfg=self.model.cfg,
            params=self.model.params,
            opt=self.opt,
            step=self.step_count,
            rng_state=rng_state_words(self.rng),
            train=to_mapping(self.tcfg),
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, lines, fine, coarse, tcfg: TrainConfig | None = None) -> "Trainer":
        if tcfg is None:
            tcfg = from_mapping(TrainConfig, ckpt.train)
        rng = rng_from_words(ckpt.rng_state) if ckpt.rng_state else None
        model = Model(ckpt.model_cfg, ckpt.params)
        return cls(model, tcfg, lines, fine, coarse, rng=rng, opt=ckpt.opt, step=ckpt.step)


def smoothed(losses: Sequence[float], window: int = 20) -> float:
    """Mean of the trailing ``window`` losses."""
    if not losses:
        raise ValueError("no losses")
    tail = losses[-window:]
    return float(sum(tail) / len(tail))


def pretrain(model_cfg: ModelConfig, tcfg: TrainConfig, corpus_path, fine_vocab_path, coarse_vocab_path,
             out=None, on_step=None) -> Checkpoint:
    """Pretrain from scratch and return the final checkpoint (also saved to ``out`` if given).

    With ``eval_every > 0`` and ``out`` set, intermediate checkpoints are
    written to ``out/step-N``.
    """
    from .checkpoint import save_checkpoint
    from pathlib import Path

    fine, coarse = load_vocabs(fine_vocab_path, coarse_vocab_path)
    if (model_cfg.fine_size, model_cfg.coarse_size) != (len(fine), len(coarse)):
        model_cfg = replace(model_cfg, fine_size=len(fine), coarse_size=len(coarse))
    lines = read_lines(corpus_path)
    if not any(line.strip() for line in lines):
        raise DataError(f"{corpus_path}: corpus is empty")
    rng = np.random.default_rng(tcfg.seed)
    model = Model.init(model_cfg, rng)
    trainer = Trainer(model, tcfg, lines, fine, coarse, rng=rng)

    def hook(step, loss):
        log.info("step %d loss %.6f", step, loss)
        if on_step is not None:
            on_step(step, loss)
        if out is not None and tcfg.eval_every and step % tcfg.eval_every == 0 and step < tcfg.steps:
            save_checkpoint(trainer.checkpoint(), Path(out) / f"step-{step}")

    trainer.run(on_step=hook)
    ckpt = trainer.checkpoint()
    ckpt.extra["final_loss"] = repr(trainer.losses[-1])
    ckpt.extra["smoothed_loss"] = repr(smoothed(trainer.losses))
    if out is not None:
        save_checkpoint(ckpt, out)
    return ckpt


# fine-tuning -----------------------------------------------------------------

def read_cls_data(path) -> list[tuple[int, str]]:
    out = []
    for lineno, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if not sep or not label.strip().lstrip("-").isdigit():
            raise ParseError("expected 'label<TAB>text'", path, lineno)
        out.append((int(label), text))
    if not out:
        raise DataError(f"{path}: no examples")
    return out


def read_span_data(path) -> list[tuple[int, int, str]]:
    out = []
    for lineno, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise ParseError("expected 'start<TAB>end<TAB>text'", path, lineno)
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError("non-integer span boundary", path, lineno) from None
        out.append((start, end, parts[2]))
    if not out:
        raise DataError(f"{path}: no examples")
    return out


def _split(n: int, holdout: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = int(round(n * holdout))
    if n - n_test < 1:
        raise DataError("not enough examples for a train split")
    return order[n_test:], order[:n_test]


def _trainable(model: Model, head_prefix: str, freeze: bool) -> dict[str, Tensor]:
    if not freeze:
        return model.params
    return {n: p for n, p in model.params.items() if n.startswith(head_prefix)}


def _update(model, trainable, opt, tcfg, step):
    clip_grad_norm(trainable, tcfg.clip_norm)
    hyper = AdamHyper(lr=linear_schedule(step, tcfg.lr, tcfg.warmup, tcfg.steps),
                      weight_decay=tcfg.weight_decay)
    (lamb_step if tcfg.optimizer == "lamb" else adam_step)(trainable, opt, hyper)


def _set_frozen(model: Model, trainable: dict[str, Tensor]) -> None:
    for n, p in model.params.items():
        p.requires_grad = n in trainable
        p.grad = None


def finetune_classifier(ckpt: Checkpoint, data: Sequence[tuple[int, str]], tcfg: TrainConfig,
                        fine: Vocabulary, coarse: Vocabulary, n_classes: int | None = None,
                        on_step=None) -> tuple[Checkpoint, float]:
    """Train a [CLS] classification head (optionally the whole stack) and report held-out accuracy.

    Without a hold-out split (``holdout == 0``) accuracy is measured on the
    training examples.
    """
    cfg = ckpt.model_cfg
    labels = [y for y, _ in data]
    if n_classes is None:
        n_classes = max(2, max(labels) + 1)
    bad = [y for y in labels if not 0 <= y < n_classes]
    if bad:
        raise DataError(f"label {bad[0]} outside [0, {n_classes})")
    rng = np.random.default_rng(tcfg.seed)
    model = Model(cfg, {n: Tensor(p.data.copy(), True, n) for n, p in ckpt.params.items()
                        if not n.startswith(("cls.", "span."))})
    model.add_cls_head(n_classes, rng)
    seqs = [encode(t, fine, coarse, cfg.fine_mode, cfg.layout, tcfg.seq_len or cfg.max_len, cfg.max_span)
            for _, t in data]
    y = np.asarray(labels)
    train_idx, test_idx = _split(len(seqs), tcfg.holdout, rng)
    if len(test_idx) == 0:
        test_idx = train_idx
    trainable = _trainable(model, "cls.", tcfg.freeze_encoder)
    _set_frozen(model, trainable)
    opt = OptimState()
    for step in range(tcfg.steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=tcfg.batch_size)]
        batch = collate([seqs[i] for i in idx], objective=cfg.objective)
        for p in trainable.values():
            p.grad = None
        h = model.forward(batch, rng)
        loss = cross_entropy(model.cls_logits(h, batch.cls_index), y[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite fine-tuning loss at step {step}")
        loss.backward()
        _update(model, trainable, opt, tcfg, step)
        if on_step is not None:
            on_step(step + 1, value)
    _set_frozen(model, model.params)
    acc = classifier_accuracy(model, [seqs[i] for i in test_idx], y[test_idx], tcfg.batch_size)
    out = Checkpoint(cfg, model.params, opt, tcfg.steps, rng_state_words(rng), to_mapping(tcfg),
                     {"task": "cls", "accuracy": repr(acc)})
    return out, acc


def classifier_accuracy(model: Model, seqs, labels, batch_size: int = 64) -> float:
    correct = 0
    with no_grad():
        for lo in range(0, len(seqs), batch_size):
            batch = collate(seqs[lo:lo + batch_size], objective=model.cfg.objective)
            logits = model.cls_logits(model.forward(batch), batch.cls_index).data
            correct += int(np.sum(np.argmax(logits, axis=-1) == labels[lo:lo + batch_size]))
    return correct / len(seqs)


def _span_targets(data, seqs):
    out = []
    for (start, end, text), seq in zip(data, seqs):
        content = len(seq) - 2
        if not (0 <= start < end):
            raise DataError(f"gold span ({start},{end}) is empty or negative for {text!r}")
        if end > content:
            raise DataError(f"gold span ({start},{end}) out of bounds for {content} tokens: {text!r}")
        out.append((start + 1, end))  # +1 for the leading special; inclusive end
    return np.asarray(out, dtype=np.int64)


def finetune_span(ckpt: Checkpoint, data: Sequence[tuple[int, int, str]], tcfg: TrainConfig,
                  fine: Vocabulary, coarse: Vocabulary, on_step=None) -> tuple[Checkpoint, float]:
    """Train start/end heads; report exact match of the constrained joint argmax."""
    cfg = ckpt.model_cfg
    rng = np.random.default_rng(tcfg.seed)
    model = Model(cfg, {n: Tensor(p.data.copy(), True, n) for n, p in ckpt.params.items()
                        if not n.startswith(("cls.", "span."))})
    model.add_span_head(rng)
    seqs = [encode(t, fine, coarse, cfg.fine_mode, cfg.layout, tcfg.seq_len or cfg.max_len, cfg.max_span)
            for *_, t in data]
    gold = _span_targets(data, seqs)
    train_idx, test_idx = _split(len(seqs), tcfg.holdout, rng)
    if len(test_idx) == 0:
        test_idx = train_idx
    trainable = _trainable(model, "span.", tcfg.freeze_encoder)
    _set_frozen(model, trainable)
    opt = OptimState()
    for step in range(tcfg.steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=tcfg.batch_size)]
        batch = collate([seqs[i] for i in idx], objective=cfg.objective)
        for p in trainable.values():
            p.grad = None
        h = model.forward(batch, rng)
        start, end = model.span_logits(h)
        allowed = span_candidates(batch)
        start = masked_position_logits(start, allowed)
        end = masked_position_logits(end, allowed)
        loss = (cross_entropy(start, gold[idx, 0]) + cross_entropy(end, gold[idx, 1])) * 0.5
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite fine-tuning loss at step {step}")
        loss.backward()
        _update(model, trainable, opt, tcfg, step)
        if on_step is not None:
            on_step(step + 1, value)
    _set_frozen(model, model.params)
    em = span_exact_match(model, [seqs[i] for i in test_idx], gold[test_idx], tcfg.batch_size)
    out = Checkpoint(cfg, model.params, opt, tcfg.steps, rng_state_words(rng), to_mapping(tcfg),
                     {"task": "span", "exact_match": repr(em)})
    return out, em


def predict_spans(model: Model, seqs, batch_size: int = 64) -> list[tuple[int, int]]:
    """Predicted (start, inclusive end) positions in sequence coordinates."""
    preds = []
    with no_grad():
        for lo in range(0, len(seqs), batch_size):
            batch = collate(seqs[lo:lo + batch_size], objective=model.cfg.objective)
            start, end = model.span_logits(model.forward(batch))
            allowed = span_candidates(batch)
            for b in range(batch.shape[0]):
                preds.append(best_span(start.data[b], end.data[b], allowed[b]))
    return preds


def span_exact_match(model: Model, seqs, gold, batch_size: int = 64) -> float:
    preds = predict_spans(model, seqs, batch_size)
    hits = sum(int(p == (int(g[0]), int(g[1]))) for p, g in zip(preds, gold))
    return hits / len(seqs)


# ablation ----------------------------------------------------------------------

def ablation_modes(d_model: int) -> list[tuple[str, str, str]]:
    """The seven (name, fusion selector, masking) rows of the fusion ablation.

    Concat splits keep the 1:1, 1:2 and 2:1 fine:coarse ratios of the
    768-wide setting (384+384, 256+512, 512+256), rounded for other widths.
    """
    third = round(d_model / 3)
    return [
        ("SG", "sg", "token"),
        ("SG (WWM)", "sg-wwm", "whole_span"),
        (f"MG (CAT {d_model // 2}+{d_model - d_model // 2})", f"cat:{d_model // 2}:{d_model - d_model // 2}", "whole_span"),
        (f"MG (CAT {third}+{d_model - third})", f"cat:{third}:{d_model - third}", "whole_span"),
        (f"MG (CAT {d_model - third}+{third})", f"cat:{d_model - third}:{third}", "whole_span"),
        ("MG (MEAN)", "mean", "whole_span"),
        ("MG (MAX)", "max", "whole_span"),
    ]


@dataclass
class AblationRow:
    name: str
    fusion: str
    pretrain_loss: float
    accuracy: float

    @property
    def multi_grained(self) -> bool:
        return not self.fusion.startswith("sg")


def run_ablation(model_cfg: ModelConfig, pre_cfg: TrainConfig, ft_cfg: TrainConfig, corpus_path,
                 fine_vocab_path, coarse_vocab_path, cls_data_path, on_row=None) -> list[AblationRow]:
    fine, coarse = load_vocabs(fine_vocab_path, coarse_vocab_path)
    data = read_cls_data(cls_data_path)
    rows = []
    for name, fusion, masking in ablation_modes(model_cfg.d_model):
        cfg = replace(model_cfg, fusion=fusion, objective="mlm")
        ckpt = pretrain(cfg, replace(pre_cfg, masking=masking), corpus_path, fine_vocab_path, coarse_vocab_path)
        _, acc = finetune_classifier(ckpt, data, ft_cfg, fine, coarse)
        row = AblationRow(name, fusion, float(ckpt.extra["smoothed_loss"]), acc)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'mode':<{width}}  {'fusion':<10}  {'pretrain_loss':>13}  {'accuracy':>8}"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.fusion:<10}  {r.pretrain_loss:>13.4f}  {r.accuracy:>8.4f}")
    sg = max(r.accuracy for r in rows if not r.multi_grained)
    mg = max(r.accuracy for r in rows if r.multi_grained)
    verdict = "holds" if mg >= sg else "does not hold"
    lines.append(f"best multi-grained {mg:.4f} vs best single-grained {sg:.4f}: "
                 f"multi >= single {verdict} on this run")
    return "\n".join(lines) + "\n"
