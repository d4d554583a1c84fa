"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import math
import time

import numpy as np
import pytest

from multigrain import checks
from multigrain.autograd import Tensor, cross_entropy, getitem
from multigrain.checkpoint import load_checkpoint, save_checkpoint
from multigrain.cli import run
from multigrain.flops import base_config, count_flops
from multigrain.model import Model, params_equal, tiny_config
from multigrain.optim import AdamHyper, OptimState, adam_step, clip_grad_norm, linear_schedule
from multigrain.train import TrainConfig, Trainer, encode_corpus, load_vocabs, pretrain, read_lines, smoothed

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"
    return emit


def test_1_containment_and_partition(report):
    t0 = time.perf_counter()
    result = checks.containment_partition_suite(100_000, seed=1)
    elapsed = time.perf_counter() - t0
    report(1, "containment & partition", result.ok and elapsed < 60,
           f"{result.cases} fuzz cases, {result.stats}, {elapsed:.1f}s (limit 60s)")


def test_2_masking(report):
    result = checks.masking_suite(100_000, seed=2, branch_tolerance=0.02)
    enough = result.stats["selected_spans"] >= 10_000
    report(2, "whole-span masking", result.ok and enough, f"{result.cases} plans, {result.stats}")


def test_3_ar_leakage(report):
    result = checks.ar_leakage_suite(100, seed=3)
    report(3, "AR leakage", result.ok, f"{result.cases} instances, {result.stats}")


def test_4_gradcheck(report):
    t0 = time.perf_counter()
    result = checks.gradcheck_suite(seed=4, eps=1e-5, tol=1e-3)
    elapsed = time.perf_counter() - t0
    report(4, "gradient check", result.ok and elapsed < 300,
           f"{result.cases} mode/objective pairs, {result.stats}, {elapsed:.1f}s (limit 300s)")


# criterion 5: a plain token-level MLM step written independently --------------

def _vanilla_mask(ids, rng, vocab_size, rate=0.15):
    """BERT-style masking: one permutation over content tokens, one 80/10/10 draw per pick."""
    ids = list(ids)
    labels = [-1] * len(ids)
    cands = [i for i, t in enumerate(ids) if t not in (0, 2, 3, 4)]
    order = rng.permutation(len(cands))
    picked = []
    for o in order:
        if len(picked) >= rate * len(cands):
            break
        picked.append(cands[o])
    for i in picked:
        labels[i] = ids[i]
        u = rng.random()
        if u < 0.8:
            ids[i] = 4
        elif u < 0.9:
            ids[i] = int(rng.integers(5, vocab_size, size=1)[0])
    return ids, labels


def _vanilla_step(model, seqs, rng, tcfg, opt, step, vocab_size):
    idx = rng.integers(0, len(seqs), size=tcfg.batch_size)
    rows = [_vanilla_mask(seqs[i].fine_ids, rng, vocab_size, tcfg.mask_rate) for i in idx]
    L = max(len(r[0]) for r in rows)
    ids = np.zeros((len(rows), L), np.int64)
    labels = np.full((len(rows), L), -1, np.int64)
    valid = np.zeros((len(rows), L), bool)
    for b, (x, y) in enumerate(rows):
        ids[b, :len(x)], labels[b, :len(y)], valid[b, :len(x)] = x, y, True
    P = model.params
    for p in P.values():
        p.grad = None
    x = Tensor(P["emb.fine"].data[ids] + P["emb.pos"].data[:L], requires_grad=True)
    h = model.encode(x, np.broadcast_to(valid[:, None, None, :], (len(rows), 1, L, L)), rng)
    where = np.nonzero(labels >= 0)
    loss = cross_entropy(model.lm_logits(getitem(h, where)), labels[where])
    loss.backward()
    d = x.shape[-1]
    P["emb.fine"].grad = np.zeros_like(P["emb.fine"].data)
    np.add.at(P["emb.fine"].grad, ids.reshape(-1), x.grad.reshape(-1, d))
    P["emb.pos"].grad = np.zeros_like(P["emb.pos"].data)
    P["emb.pos"].grad[:L] = x.grad.sum(axis=0)
    clip_grad_norm(P, tcfg.clip_norm)
    adam_step(P, opt, AdamHyper(lr=linear_schedule(step, tcfg.lr, tcfg.warmup, tcfg.steps)))
    return float(loss.data)


def test_5_single_grained_matches_vanilla_mlm(report, synth):
    fine, coarse = load_vocabs(synth["fine"], synth["coarse"])
    lines = read_lines(synth["corpus"])
    cfg = tiny_config(len(fine), len(coarse), fusion="sg", dropout=0.1)
    tcfg = TrainConfig(steps=3, warmup=1, seed=5, masking="token")

    rng = np.random.default_rng(5)
    trainer = Trainer(Model.init(cfg, rng), tcfg, lines, fine, coarse, rng=rng)
    ours = trainer.run()

    ref_rng = np.random.default_rng(5)
    ref_model = Model.init(cfg, ref_rng)
    seqs = encode_corpus(lines, fine, coarse, cfg, cfg.max_len)
    opt = OptimState()
    ref = [_vanilla_step(ref_model, seqs, ref_rng, tcfg, opt, s, len(fine)) for s in range(3)]

    same = (ours == ref and params_equal(trainer.model.params, ref_model.params)
            and trainer.rng.bit_generator.state == ref_rng.bit_generator.state)
    report(5, "single-grained = vanilla MLM", same, f"losses ours={ours} reference={ref}, params bit-equal={same}")


def test_6_flops_ratios(report):
    cfg = base_config()
    single = count_flops(cfg, 512, "single_grained")
    fused = count_flops(cfg, 512, "fused")
    dual = count_flops(cfg, 512, "dual_encoder")
    enc_ratio = dual.encoder_flops / single.encoder_flops
    total_ratio = fused.flops / single.flops
    rel = abs(single.macs - 43.5e9) / 43.5e9
    ok = dual.encoder_flops == 2 * single.encoder_flops and total_ratio <= 1.005 and rel <= 0.25
    report(6, "FLOPs ratios", ok, f"dual/single encoder {enc_ratio:.3f}, fused/single total {total_ratio:.6f}, "
                                  f"single {single.macs / 1e9:.1f}B MACs vs 43.5B ({rel:+.1%} off)")


def test_7_training_smoke(report, synth):
    fine, coarse = load_vocabs(synth["fine"], synth["coarse"])
    cfg = tiny_config(len(fine), len(coarse))
    tcfg = TrainConfig(steps=300, batch_size=16, seed=0)
    runs = []
    t0 = time.perf_counter()
    for _ in range(2):
        losses = []
        pretrain(cfg, tcfg, synth["corpus"], synth["fine"], synth["coarse"], on_step=lambda s, l: losses.append(l))
        runs.append(losses)
    elapsed = (time.perf_counter() - t0) / 2
    start = math.log(len(fine))
    final = smoothed(runs[0])
    reduction = 1 - final / start
    ok = reduction >= 0.8 and runs[0] == runs[1] and elapsed < 300
    report(7, "training smoke", ok, f"ln|V|={start:.3f} -> smoothed {final:.3f} ({reduction:.1%} reduction), "
                                    f"re-run identical={runs[0] == runs[1]}, {elapsed:.1f}s per run")


def test_8_ablation_harness(report, synth, tmp_path, capsys):
    out = tmp_path / "table.txt"
    code = run(["ablate", "--corpus", str(synth["corpus"]), "--data", str(synth["cls"]),
                "--fine-vocab", str(synth["fine"]), "--coarse-vocab", str(synth["coarse"]), "--out", str(out)])
    capsys.readouterr()
    table = out.read_text() if out.exists() else ""
    rows = table.splitlines()[1:-1]
    ok = code == 0 and len(rows) == 7
    with capsys.disabled():
        print("\n" + table)
    report(8, "ablation harness", ok, f"exit {code}, {len(rows)} rows; {table.splitlines()[-1] if table else ''}")


def test_9_resume_equivalence(report, synth, tmp_path):
    fine, coarse = load_vocabs(synth["fine"], synth["coarse"])
    lines = read_lines(synth["corpus"])
    cfg = tiny_config(len(fine), len(coarse), dropout=0.1)
    tcfg = TrainConfig(steps=150, seed=9)

    def fresh():
        rng = np.random.default_rng(tcfg.seed)
        return Trainer(Model.init(cfg, rng), tcfg, lines, fine, coarse, rng=rng)

    full = fresh()
    full.run()
    part = fresh()
    part.run(until=100)
    save_checkpoint(part.checkpoint(), tmp_path / "ckpt")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "ckpt"), lines, fine, coarse)
    tail = resumed.run()
    ok = len(tail) == 50 and tail == full.losses[100:] and params_equal(resumed.model.params, full.model.params)
    report(9, "resume equivalence", ok, f"{len(tail)} steps after resume at step 100, bit-identical={ok}")
