import numpy as np
import pytest

from multigrain.checkpoint import Checkpoint, load_checkpoint, rng_from_words, rng_state_words, save_checkpoint
from multigrain.errors import IntegrityError
from multigrain.model import Model, params_equal, tiny_config
from multigrain.optim import OptimState


def make_ckpt(seed=0):
    rng = np.random.default_rng(seed)
    model = Model.init(tiny_config(20, 30, d_model=8, n_heads=2, d_ff=16, max_len=8), rng)
    opt = OptimState(step=3)
    opt.ensure(model.params)
    opt.m["lm.b"] += 0.25
    rng.random(7)
    return Checkpoint(model.cfg, model.params, opt, step=3, rng_state=rng_state_words(rng),
                      train={"lr": "0.003"}, extra={"note": "x"})


def test_round_trip_is_bit_exact(tmp_path):
    ckpt = make_ckpt()
    save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.model_cfg == ckpt.model_cfg
    assert params_equal(back.params, ckpt.params)
    assert all(np.array_equal(back.opt.m[n], ckpt.opt.m[n]) for n in ckpt.opt.m)
    assert back.opt.step == 3 and back.step == 3
    assert back.train == {"lr": "0.003"} and back.extra == {"note": "x"}
    a, b = rng_from_words(ckpt.rng_state), rng_from_words(back.rng_state)
    assert a.random() == b.random()


def test_rng_words_round_trip():
    g = np.random.default_rng(99)
    g.random(3)
    h = rng_from_words(rng_state_words(g))
    assert np.array_equal(g.integers(0, 1000, 10), h.integers(0, 1000, 10))


def test_manifest_format(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "c")
    first = (tmp_path / "c" / "manifest.txt").read_text().splitlines()[0].split("\t")
    assert first[0] == "emb.fine" and first[1] == "20,8" and first[2] == "0" and first[3] == str(20 * 8 * 4)
    blob = (tmp_path / "c" / "tensors.bin").read_bytes()
    assert np.frombuffer(blob[:4], "<f4")[0] == make_ckpt().params["emb.fine"].data[0, 0]


def test_truncated_blob(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "c")
    p = tmp_path / "c" / "tensors.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "c")


def test_corrupted_blob(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "c")
    p = tmp_path / "c" / "tensors.bin"
    raw = bytearray(p.read_bytes())
    raw[10] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="checksum"):
        load_checkpoint(tmp_path / "c")


def test_manifest_mismatch(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "c")
    m = tmp_path / "c" / "manifest.txt"
    lines = m.read_text().splitlines()
    name, shape, off, n = lines[0].split("\t")
    lines[0] = "\t".join([name, "20,9", off, n])
    m.write_text("\n".join(lines) + "\n")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "c")


def test_missing_file(tmp_path):
    save_checkpoint(make_ckpt(), tmp_path / "c")
    (tmp_path / "c" / "meta.txt").unlink()
    with pytest.raises(IntegrityError, match="meta.txt"):
        load_checkpoint(tmp_path / "c")
