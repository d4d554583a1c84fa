import numpy as np
import pytest

from multigrain.autograd import Tensor
from multigrain.checks import random_sequence, tiny_model
from multigrain.errors import ConfigError, DataError, NumericError, UsageError
from multigrain.masking import plan_mlm
from multigrain.model import (
    Model, ModelConfig, best_span, clone_params, collate, param_count, params_equal, span_candidates,
    tiny_config,
)
from multigrain.vocab import CLS, PAD, SEP


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(10, 10, d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(10, 10, objective="clm")
    with pytest.raises(ConfigError):
        ModelConfig(10, 10, fusion="cat:10:10", d_model=16)
    assert ModelConfig(10, 10).layout == "autoencoding"
    assert ModelConfig(10, 10, objective="ar").layout == "autoregressive"


def test_parameter_names_and_count():
    cfg = ModelConfig(fine_size=10, coarse_size=12, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=5)
    m = Model.init(cfg, np.random.default_rng(0))
    d, f = 8, 16
    per_layer = 4 * (d * d + d) + 2 * 2 * d + d * f + f + f * d + d
    expected = 10 * d + 12 * d + 5 * d + per_layer + 2 * d + d * 10 + 10
    assert param_count(m.params) == expected
    assert "layer0.attn.wq" in m.params and "emb.coarse" in m.params


def test_zero_layers_is_identity():
    cfg = ModelConfig(fine_size=10, coarse_size=10, d_model=8, n_layers=0, n_heads=2, d_ff=8, max_len=6)
    m = Model.init(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 8)).astype(np.float32))
    assert np.array_equal(m.encode(x).data, x.data)


def test_collate_pads_and_sets_bounds():
    a = random_sequence(np.random.default_rng(0), 20, 20, lo=3, hi=4)
    b = random_sequence(np.random.default_rng(1), 20, 20, lo=1, hi=2)
    batch = collate([a, b], objective="ar")
    assert batch.shape == (2, 5)
    assert batch.fine_ids[1, 3:].tolist() == [PAD, PAD]
    assert batch.valid[1].tolist() == [True, True, True, False, False]
    assert batch.bounds[1, 3:].tolist() == [3, 4]
    with pytest.raises(DataError):
        collate([])


def test_padding_does_not_change_outputs():
    rng = np.random.default_rng(0)
    for objective in ("mlm", "ar"):
        model = tiny_model(rng, "max", objective, init_std=0.3)
        short = random_sequence(rng, 12, 16, lo=3, hi=4)
        long = random_sequence(rng, 12, 16, lo=8, hi=9)
        alone = model.forward(collate([short], objective=objective)).data[0]
        padded = model.forward(collate([short, long], objective=objective)).data[0, :len(short)]
        np.testing.assert_allclose(alone, padded, rtol=1e-5, atol=1e-6)


def test_attention_rows_are_distributions():
    model = tiny_model(np.random.default_rng(0), "mean", "ar")
    model.record_attention = True
    seq = random_sequence(np.random.default_rng(1), 12, 16, lo=5, hi=6)
    model.forward(collate([seq], objective="ar"))
    att = model.attention[0][0, 0]
    np.testing.assert_allclose(att.sum(-1), 1.0, rtol=1e-6)
    assert np.all(np.triu(att, 1) == 0.0)


def test_mlm_loss_requires_labels():
    model = tiny_model(np.random.default_rng(0), "max", "mlm")
    seq = random_sequence(np.random.default_rng(1), 12, 16, lo=3, hi=4)
    h = model.forward(collate([seq]))
    with pytest.raises(DataError):
        model.mlm_loss(h, np.full(h.shape[:2], -1))
    with pytest.raises(UsageError):
        model.mlm_loss(h, np.zeros((1, 2)))


def test_initial_mlm_loss_near_log_vocab():
    cfg = tiny_config(80, 100)
    model = Model.init(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    seqs = [random_sequence(rng, 80, 100, hi=30) for _ in range(16)]
    masked = [plan_mlm(s, rng, fine_size=80, coarse_size=100) for s in seqs]
    loss = float(model.batch_loss(collate(seqs, masked)).data)
    assert abs(loss - np.log(80)) < 0.05


def test_heads():
    rng = np.random.default_rng(0)
    model = tiny_model(rng, "max", "mlm")
    with pytest.raises(UsageError):
        model.cls_logits(Tensor(np.zeros((1, 3, 8))), [0])
    with pytest.raises(ConfigError):
        model.add_cls_head(1, rng)
    model.add_cls_head(3, rng)
    model.add_span_head(rng)
    h = model.forward(collate([random_sequence(rng, 12, 16, lo=4, hi=5)]))
    assert model.cls_logits(h, [0]).shape == (1, 3)
    start, end = model.span_logits(h)
    assert start.shape == end.shape == (1, 6)


def test_best_span_constrained_argmax():
    start = np.array([0.0, 5.0, 1.0, 0.0])
    end = np.array([3.0, 0.0, 2.0, 1.0])
    # unconstrained argmaxes give start 1 > end 0; (1, 2) scores 7, (0, 0) only 3
    assert best_span(start, end) == (1, 2)
    allowed = np.array([False, True, True, False])
    assert best_span(start, end, allowed) == (1, 2)
    assert best_span(np.zeros(3), np.zeros(3), np.array([False, False, True])) == (2, 2)


def test_span_candidates_exclude_specials_and_padding():
    seq = random_sequence(np.random.default_rng(0), 12, 16, lo=2, hi=3)
    batch = collate([seq, random_sequence(np.random.default_rng(0), 12, 16, lo=4, hi=5)])
    ok = span_candidates(batch)
    assert ok[0].tolist() == [False, True, True, False, False, False]
    assert batch.fine_ids[0, 0] == CLS and batch.fine_ids[0, 3] == SEP


def test_clone_and_compare():
    model = tiny_model(np.random.default_rng(0), "max", "mlm")
    c = clone_params(model.params, np.float64)
    assert c["emb.fine"].dtype == np.float64
    assert params_equal(model.params, clone_params(model.params))
    c2 = clone_params(model.params)
    c2["lm.b"].data[0] += 1
    assert not params_equal(model.params, c2)


def test_non_finite_input_rejected():
    model = tiny_model(np.random.default_rng(0), "max", "mlm")
    with pytest.raises(NumericError):
        model.encode(Tensor(np.full((1, 3, 8), np.nan, np.float32)))
