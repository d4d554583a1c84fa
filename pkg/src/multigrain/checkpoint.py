"""Checkpoint directories.

Layout::

    manifest.txt   name<TAB>shape-comma-list<TAB>byte_offset<TAB>byte_len
    tensors.bin    little-endian float32 blobs, concatenated in manifest order
    meta.txt       key = value lines: configs, step, RNG state, blob sha256

Optimizer moments are stored as tensors named ``opt.m/<param>`` and
``opt.v/<param>``.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .config import dump_kv, from_mapping, parse_kv, to_mapping
from .errors import IntegrityError, ParseError
from .model import ModelConfig
from .optim import OptimState

_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict[str, Tensor]
    opt: OptimState = field(default_factory=OptimState)
    step: int = 0
    rng_state: dict | None = None
    train: dict[str, str] = field(default_factory=dict)
    extra: dict[str, str] = field(default_factory=dict)


def rng_state_words(gen: np.random.Generator) -> dict[str, str]:
    st = gen.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    return {
        "rng.state": str(st["state"]["state"]),
        "rng.inc": str(st["state"]["inc"]),
        "rng.has_uint32": str(st["has_uint32"]),
        "rng.uinteger": str(st["uinteger"]),
    }


def rng_from_words(words: dict[str, str]) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(words["rng.state"]), "inc": int(words["rng.inc"])},
        "has_uint32": int(words["rng.has_uint32"]),
        "uinteger": int(words["rng.uinteger"]),
    }
    return gen


def _tensors(ckpt: Checkpoint):
    for n, p in ckpt.params.items():
        yield n, p.data
    for n in ckpt.params:
        if n in ckpt.opt.m:
            yield f"opt.m/{n}", ckpt.opt.m[n]
            yield f"opt.v/{n}", ckpt.opt.v[n]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    offset = 0
    for name, arr in _tensors(ckpt):
        if "\t" in name or "\n" in name:
            raise ValueError(f"tensor name {name!r} cannot be serialized")
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        manifest.append(f"{name}\t{shape}\t{offset}\t{len(raw)}\n")
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    meta = {"step": ckpt.step, "opt.step": ckpt.opt.step, "blob.sha256": hashlib.sha256(blob).hexdigest(),
            "blob.bytes": len(blob)}
    meta.update({f"model.{k}": v for k, v in to_mapping(ckpt.model_cfg).items()})
    meta.update({f"train.{k}": v for k, v in ckpt.train.items()})
    meta.update({f"extra.{k}": v for k, v in ckpt.extra.items()})
    if ckpt.rng_state is not None:
        meta.update(ckpt.rng_state)
    # write to temp names first so a crash never leaves a mixed checkpoint
    for fname, data in (("tensors.bin", blob), ("manifest.txt", "".join(manifest).encode()),
                        ("meta.txt", dump_kv(meta).encode())):
        tmp = out / (fname + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, out / fname)


def _parse_manifest(text: str, path):
    entries = []
    expected_offset = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError("expected name<TAB>shape<TAB>offset<TAB>length", path, lineno)
        name, shape_s, off_s, len_s = parts
        try:
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            off, nbytes = int(off_s), int(len_s)
        except ValueError:
            raise ParseError("non-integer shape/offset/length", path, lineno) from None
        if off != expected_offset:
            raise IntegrityError(f"{path}:{lineno}: tensor {name} starts at {off}, expected {expected_offset}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise IntegrityError(f"{path}:{lineno}: tensor {name} byte length {nbytes} does not match shape {shape}")
        entries.append((name, shape, off, nbytes))
        expected_offset += nbytes
    return entries, expected_offset


def load_checkpoint(path) -> Checkpoint:
    """Load and verify a checkpoint; nothing is returned unless every check passes."""
    root = Path(path)
    try:
        manifest_text = (root / "manifest.txt").read_text(encoding="utf-8")
        meta = parse_kv((root / "meta.txt").read_text(encoding="utf-8"), root / "meta.txt")
        blob = (root / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"incomplete checkpoint {root}: missing {Path(exc.filename).name}") from None
    entries, total = _parse_manifest(manifest_text, root / "manifest.txt")
    if len(blob) != total:
        raise IntegrityError(f"{root / 'tensors.bin'}: {len(blob)} bytes, manifest describes {total}")
    if "blob.sha256" in meta and hashlib.sha256(blob).hexdigest() != meta["blob.sha256"]:
        raise IntegrityError(f"{root / 'tensors.bin'}: checksum mismatch")

    arrays = {}
    for name, shape, off, nbytes in entries:
        arrays[name] = np.frombuffer(blob, dtype=_LE_F32, count=nbytes // 4, offset=off) \
            .reshape(shape).astype(np.float32)

    model_cfg = from_mapping(ModelConfig, {k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    params = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items() if not n.startswith("opt.")}
    opt = OptimState(step=int(meta.get("opt.step", 0)))
    for n, a in arrays.items():
        if n.startswith("opt.m/"):
            opt.m[n[6:]] = a
        elif n.startswith("opt.v/"):
            opt.v[n[6:]] = a
    for n in opt.m:
        if n not in params or f"opt.v/{n}" not in arrays:
            raise IntegrityError(f"optimizer moments for {n} have no matching parameter")
    rng_state = {k: v for k, v in meta.items() if k.startswith("rng.")} or None
    return Checkpoint(
        model_cfg=model_cfg,
        params=params,
        opt=opt,
        step=int(meta.get("step", 0)),
        rng_state=rng_state,
        train={k[6:]: v for k, v in meta.items() if k.startswith("train.")},
        extra={k[6:]: v for k, v in meta.items() if k.startswith("extra.")},
    )
