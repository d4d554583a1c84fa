import numpy as np
import pytest

from multigrain.autograd import Tensor, numerical_grad, relative_error
from multigrain.errors import ConfigError, UsageError
from multigrain.fusion import (
    FusionCache, FusionConfig, embed_ids, fuse, fuse_forward, fusion_backward, init_tables,
)


def test_max_pool_forward_and_routing():
    cfg = FusionConfig(2, "max_pool")
    fine, coarse = np.array([[1.0, -2.0]]), np.array([[0.5, 3.0]])
    out, cache = fuse_forward(fine, coarse, cfg)
    assert out.tolist() == [[1.0, 3.0]]
    gf, gc = fusion_backward(np.array([[10.0, 20.0]]), cache, cfg)
    assert gf.tolist() == [[10.0, 0.0]] and gc.tolist() == [[0.0, 20.0]]


def test_max_pool_tie_goes_to_fine():
    cfg = FusionConfig(1, "max_pool")
    _, cache = fuse_forward(np.array([[2.0]]), np.array([[2.0]]), cfg)
    gf, gc = fusion_backward(np.array([[1.0]]), cache, cfg)
    assert gf.tolist() == [[1.0]] and gc.tolist() == [[0.0]]


def test_mean_pool_halves():
    cfg = FusionConfig(2, "mean_pool")
    out, cache = fuse_forward(np.array([[1.0, 2.0]]), np.array([[3.0, 6.0]]), cfg)
    assert out.tolist() == [[2.0, 4.0]]
    gf, gc = fusion_backward(np.array([[1.0, 1.0]]), cache, cfg)
    assert gf.tolist() == gc.tolist() == [[0.5, 0.5]]


def test_concat_slices():
    cfg = FusionConfig(3, "concat", 1, 2)
    out, cache = fuse_forward(np.array([[1.0]]), np.array([[2.0, 3.0]]), cfg)
    assert out.tolist() == [[1.0, 2.0, 3.0]]
    gf, gc = fusion_backward(np.array([[4.0, 5.0, 6.0]]), cache, cfg)
    assert gf.tolist() == [[4.0]] and gc.tolist() == [[5.0, 6.0]]


def test_backward_needs_matching_cache():
    cfg = FusionConfig(2, "max_pool")
    with pytest.raises(UsageError):
        fusion_backward(np.zeros((1, 2)), None, cfg)
    with pytest.raises(UsageError):
        fusion_backward(np.zeros((1, 2)), FusionCache("mean_pool"), cfg)


@pytest.mark.parametrize("selector,mode,df,dc", [
    ("sg", "single_grained", None, None), ("sg-wwm", "single_grained", None, None),
    ("mean", "mean_pool", None, None), ("max", "max_pool", None, None),
    ("cat:3:5", "concat", 3, 5), ("cat", "concat", 4, 4),
])
def test_selector_parse(selector, mode, df, dc):
    cfg = FusionConfig.parse(selector, 8)
    assert (cfg.mode, cfg.d_fine, cfg.d_coarse) == (mode, df, dc)


@pytest.mark.parametrize("selector", ["cat:3:4", "cat:x:y", "cat:0:8", "sum", "cat:3"])
def test_bad_selectors(selector):
    with pytest.raises(ConfigError):
        FusionConfig.parse(selector, 8)


def test_single_grained_has_no_coarse_table():
    rng = np.random.default_rng(0)
    assert set(init_tables(FusionConfig(4, "single_grained"), 10, 12, 6, rng)) == {"emb.fine", "emb.pos"}
    t = init_tables(FusionConfig(4, "concat", 1, 3), 10, 12, 6, rng)
    assert t["emb.fine"].shape == (10, 1) and t["emb.coarse"].shape == (12, 3)


def test_position_added_after_fusion():
    cfg = FusionConfig(2, "max_pool")
    tables = {
        "emb.fine": Tensor(np.array([[0, 0], [1.0, -1.0]], np.float32), True),
        "emb.coarse": Tensor(np.array([[0, 0], [-1.0, 2.0]], np.float32), True),
        "emb.pos": Tensor(np.array([[10.0, 20.0], [30.0, 40.0]], np.float32), True),
    }
    out = embed_ids(np.array([1, 1]), np.array([1, 0]), tables, cfg)
    # pos 0: max([1,-1],[-1,2]) = [1,2]; pos 1: max([1,-1],[0,0]) = [1,0]
    assert out.data.tolist() == [[11.0, 22.0], [31.0, 40.0]]


@pytest.mark.parametrize("mode", ["max_pool", "mean_pool", "concat"])
def test_finite_difference_quadratic_loss(mode):
    """With a quadratic loss central differences at step 1e-3 are exact up to rounding."""
    rng = np.random.default_rng(5)
    cfg = FusionConfig(4, mode, 2, 2) if mode == "concat" else FusionConfig(4, mode)
    fine = Tensor(rng.normal(size=(3, cfg.fine_width)), True)
    coarse = Tensor(rng.normal(size=(3, cfg.coarse_width)), True)
    if mode == "max_pool":
        assert np.min(np.abs(fine.data - coarse.data)) > 1e-2  # no kink within the FD step
    w = rng.normal(size=(3, 4))

    def loss():
        y = fuse(fine, coarse, cfg)
        return (y * y * w).sum()

    loss().backward()
    for t in (fine, coarse):
        num = numerical_grad(loss, t.data, 1e-3)
        assert relative_error(t.grad, num) < 1e-6


def test_width_mismatch_rejected():
    with pytest.raises(ConfigError):
        fuse_forward(np.zeros((2, 3)), np.zeros((2, 4)), FusionConfig(3, "max_pool"))
    with pytest.raises(ConfigError):
        FusionConfig(3, "concat", 1, 1)
