"""Invariant suites: run by ``selftest`` at small sizes and by the acceptance tests at full size.

Each suite returns a small result object with an ``ok`` flag and the
numbers behind it, so callers decide how to report.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, getitem, gradcheck
from .masking import MASK_PROB, RANDOM_PROB, plan_mlm
from .model import Model, ModelConfig, clone_params, collate
from .tokenizer import TokenizedSequence, check_partition, encode, tokenize_fine
from .vocab import CLS, MASK, NUM_SPECIALS, SEP, build_vocab, ensure_containment, vocab_from_counts

ALPHABET = "abcdefgh"
FUSION_MODES = ("sg", "sg-wwm", "cat:4:4", "cat:3:5", "cat:5:3", "mean", "max")


@dataclass
class SuiteResult:
    name: str
    ok: bool
    cases: int
    stats: dict = field(default_factory=dict)

    def line(self) -> str:
        detail = " ".join(f"{k}={v}" for k, v in self.stats.items())
        return f"{'PASS' if self.ok else 'FAIL'} {self.name} cases={self.cases} {detail}".rstrip()


# containment and partition -----------------------------------------------------

def _random_text(rng, lo=0, hi=12) -> str:
    n = int(rng.integers(lo, hi))
    return "".join(ALPHABET[i] for i in rng.integers(0, len(ALPHABET), size=n))


def containment_partition_suite(n: int = 1000, seed: int = 0) -> SuiteResult:
    """Fuzz tiny corpora and vocabularies; check fine ⊆ coarse and span partitions."""
    rng = np.random.default_rng(seed)
    bad_contain = bad_partition = 0
    char = lambda s: tokenize_fine(s, "character")  # noqa: E731
    for _ in range(n):
        corpus = [_random_text(rng) for _ in range(int(rng.integers(1, 4)))]
        fine = build_vocab(corpus, char, int(rng.integers(1, 3)), "fine")
        words = Counter()
        for line in corpus:
            j = 0
            while j < len(line):
                k = j + int(rng.integers(1, 5))
                words[line[j:k]] += 1
                j = k
        coarse = ensure_containment(fine, vocab_from_counts(words, int(rng.integers(1, 3)), "coarse"))
        if not all(t in coarse for t in fine.tokens):
            bad_contain += 1
        text = _random_text(rng, 0, 20) if rng.random() < 0.5 else corpus[0]
        seq = encode(text, fine, coarse, "character", "autoencoding" if rng.random() < 0.5 else "autoregressive",
                     int(rng.integers(2, 24)), int(rng.integers(1, 9)))
        try:
            check_partition(seq, len(coarse))
        except AssertionError:
            bad_partition += 1
    return SuiteResult("containment_partition", bad_contain == 0 and bad_partition == 0, n,
                       {"containment_violations": bad_contain, "partition_violations": bad_partition})


# masking -----------------------------------------------------------------------

def random_sequence(rng: np.random.Generator, fine_size: int, coarse_size: int, max_span: int = 8,
                    lo: int = 1, hi: int = 40) -> TokenizedSequence:
    """A [CLS] ... [SEP] sequence with random content ids and a random span partition."""
    n = int(rng.integers(lo, hi))
    ids = [CLS] + [int(x) for x in rng.integers(NUM_SPECIALS, fine_size, size=n)] + [SEP]
    spans = [(0, 1, CLS)]
    j = 1
    while j <= n:
        k = min(n + 1, j + int(rng.integers(1, max_span + 1)))
        spans.append((j, k, int(rng.integers(NUM_SPECIALS, coarse_size))))
        j = k
    spans.append((n + 1, n + 2, SEP))
    return TokenizedSequence(tuple(ids), tuple(spans))


def masking_suite(n: int = 1000, seed: int = 0, rate: float = 0.15, max_span: int = 8,
                  branch_tolerance: float = 0.02) -> SuiteResult:
    """All-or-nothing spans, rate within ``[rate, rate + max_span/len]`` and 80/10/10 branch mix."""
    rng = np.random.default_rng(seed)
    fine_size, coarse_size = 40, 60
    partial = rate_bad = 0
    branches = Counter()
    for _ in range(n):
        seq = random_sequence(rng, fine_size, coarse_size, max_span)
        ex = plan_mlm(seq, rng, fine_size=fine_size, coarse_size=coarse_size, rate=rate)
        content = len(seq) - 2
        for s, e, _ in seq.spans:
            if len(set(ex.masked_flags[s:e])) > 1:
                partial += 1
        for k, branch in ex.selected:
            s, e, _ = seq.spans[k]
            branches[branch] += 1
            if branch == "mask" and (ex.input_spans[k][2] != MASK or any(x != MASK for x in ex.input_fine[s:e])):
                partial += 1
            if branch == "keep" and ex.input_fine[s:e] != seq.fine_ids[s:e]:
                partial += 1
        r = sum(ex.masked_flags) / content
        if not (rate - 1e-12 <= r <= rate + max_span / content + 1e-12):
            rate_bad += 1
    total = sum(branches.values())
    freq = {b: branches[b] / total for b in ("mask", "random", "keep")}
    expect = {"mask": MASK_PROB, "random": RANDOM_PROB, "keep": 1 - MASK_PROB - RANDOM_PROB}
    branch_ok = all(abs(freq[b] - expect[b]) <= branch_tolerance for b in expect)
    stats = {"span_violations": partial, "rate_violations": rate_bad, "selected_spans": total}
    stats.update({f"p_{b}": f"{freq[b]:.4f}" for b in freq})
    return SuiteResult("masking", partial == 0 and rate_bad == 0 and branch_ok, n, stats)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# AR leakage --------------------------------------------------------------------

def tiny_model(rng: np.random.Generator, fusion: str, objective: str, fine_size: int = 12,
               coarse_size: int = 16, d: int = 8, n_layers: int = 2, max_len: int = 16,
               init_std: float = 0.5) -> Model:
    cfg = ModelConfig(fine_size=fine_size, coarse_size=coarse_size, d_model=d, n_layers=n_layers, n_heads=2,
                      d_ff=2 * d, max_len=max_len, dropout=0.0, fusion=fusion, objective=objective,
                      init_std=init_std)
    return Model.init(cfg, rng)


def ar_sequence(rng, fine_size, coarse_size, length: int, singletons: bool = False) -> TokenizedSequence:
    """An AR-layout sequence ``[SEP] ... [CLS]`` of total ``length`` with random spans."""
    base = random_sequence(rng, fine_size, coarse_size, 1 if singletons else 4, length - 2, length - 1)
    ids = (SEP,) + base.fine_ids[1:-1] + (CLS,)
    spans = ((0, 1, SEP),) + base.spans[1:-1] + ((length - 1, length, CLS),)
    return TokenizedSequence(ids, spans, objective="autoregressive")


def ar_leakage_suite(n: int = 100, seed: int = 0) -> SuiteResult:
    """Per-term gradients w.r.t. embeddings at positions >= bound[i] must be exactly zero.

    Also checks that with singleton spans the AR loss equals a plain
    next-token loss computed independently with numpy.
    """
    rng = np.random.default_rng(seed)
    leaks = 0
    checked = 0
    worst_ref = 0.0
    for t in range(n):
        fusion = FUSION_MODES[t % len(FUSION_MODES)]
        model = tiny_model(rng, fusion, "ar", n_layers=int(rng.integers(1, 3)))
        L = int(rng.integers(4, 12))
        seq = ar_sequence(rng, 12, 16, L)
        batch = collate([seq], objective="ar")
        x = Tensor(model.embed(batch).data.copy(), requires_grad=True, name="x")
        h = model.encode(x, model.visibility(batch))
        targets = np.where(batch.valid, batch.fine_ids, -1)
        terms, (_, pos) = model.ar_loss_terms(h, targets, batch.bounds)
        for j, i in enumerate(pos):
            x.grad = None
            getitem(terms, j).backward()
            b = batch.bounds[0, i]
            checked += 1
            if x.grad is not None and np.any(x.grad[0, b:] != 0.0):
                leaks += 1

        single = ar_sequence(rng, 12, 16, L, singletons=True)
        sb = collate([single], objective="ar")
        model64 = model.with_params(clone_params(model.params, np.float64))
        h = model64.forward(sb)
        got = float(model64.ar_loss(h, np.where(sb.valid, sb.fine_ids, -1), sb.bounds).data)
        logits = model64.lm_logits(h).data[0]
        logp = _log_softmax(logits[:-1])
        nxt = np.asarray(single.fine_ids[1:])
        ref = float(-np.mean(logp[np.arange(L - 1), nxt]))
        worst_ref = max(worst_ref, abs(got - ref))
    ok = leaks == 0 and worst_ref <= 1e-6
    return SuiteResult("ar_leakage", ok, n, {"terms_checked": checked, "leaking_terms": leaks,
                                             "max_ref_diff": f"{worst_ref:.2e}"})


# gradient check ----------------------------------------------------------------

def _mlm_batch(rng, model: Model):
    cfg = model.cfg
    seqs = [random_sequence(rng, cfg.fine_size, cfg.coarse_size, 3, 4, 8) for _ in range(2)]
    masked = [plan_mlm(s, rng, fine_size=cfg.fine_size, coarse_size=cfg.coarse_size, rate=0.3) for s in seqs]
    return collate(seqs, masked, "mlm")


def _ar_batch(rng, model: Model):
    cfg = model.cfg
    seqs = [ar_sequence(rng, cfg.fine_size, cfg.coarse_size, L) for L in (7, 5)]
    return collate(seqs, objective="ar")


def _max_gap(model: Model, batch) -> float:
    """Smallest |fine - coarse| over the pooled elements (inf unless max fusion)."""
    if model.cfg.fusion_config.mode != "max_pool":
        return np.inf
    f = model.params["emb.fine"].data[batch.fine_ids]
    c = model.params["emb.coarse"].data[batch.coarse_ids]
    return float(np.min(np.abs(f - c)))


def gradcheck_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-3,
                    modes=FUSION_MODES, objectives=("mlm", "ar")) -> SuiteResult:
    """Reverse-mode vs float64 central differences for every parameter of a 2-layer d=8 model.

    For max pooling the instance is redrawn until no pooled pair is within
    ``100 * eps`` of a tie, where the loss is not differentiable.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for objective in objectives:
        for fusion in modes:
            while True:
                model = tiny_model(rng, fusion, objective)
                batch = (_mlm_batch if objective == "mlm" else _ar_batch)(rng, model)
                if _max_gap(model, batch) > 100 * eps:
                    break

            def loss(params, model=model, batch=batch):
                return model.with_params(dict(params)).batch_loss(batch)

            err, per = gradcheck(loss, model.params, eps=eps)
            worst[f"{objective}/{fusion}"] = err
    top = max(worst.values())
    stats = {"max_rel_err": f"{top:.2e}", "worst": max(worst, key=worst.get)}
    return SuiteResult("gradcheck", top < tol, len(worst), stats)
