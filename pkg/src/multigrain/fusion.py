"""Fine/coarse embedding tables and their per-position fusion.

For a fine position ``i`` inside coarse span ``(j, k, c)`` the fine row
``fine_table[fine_ids[i]]`` is combined with ``coarse_table[c]`` (the coarse
vector is broadcast over every position of its span), then the position
embedding for ``i`` is added.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, _make, add, take_rows
from .errors import ConfigError, UsageError

FUSION_MODES = ("max_pool", "mean_pool", "concat", "single_grained")


@dataclass(frozen=True)
class FusionConfig:
    d_model: int
    mode: str = "max_pool"
    d_fine: int | None = None
    d_coarse: int | None = None

    def __post_init__(self):
        if self.d_model <= 0:
            raise ConfigError("d_model must be positive")
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.mode == "concat":
            if self.d_fine is None or self.d_coarse is None:
                raise ConfigError("concat fusion needs d_fine and d_coarse")
            if self.d_fine <= 0 or self.d_coarse <= 0:
                raise ConfigError("concat dimensions must be positive")
            if self.d_fine + self.d_coarse != self.d_model:
                raise ConfigError(
                    f"concat dimensions {self.d_fine}+{self.d_coarse} != d_model {self.d_model}")

    @property
    def fine_width(self) -> int:
        return self.d_fine if self.mode == "concat" else self.d_model

    @property
    def coarse_width(self) -> int:
        return self.d_coarse if self.mode == "concat" else self.d_model

    @property
    def uses_coarse(self) -> bool:
        return self.mode != "single_grained"

    @classmethod
    def parse(cls, selector: str, d_model: int) -> "FusionConfig":
        """Parse a CLI-style selector: ``sg``, ``sg-wwm``, ``mean``, ``max`` or ``cat:DF:DC``."""
        if selector in ("sg", "sg-wwm", "single_grained"):
            return cls(d_model, "single_grained")
        if selector in ("mean", "mean_pool"):
            return cls(d_model, "mean_pool")
        if selector in ("max", "max_pool"):
            return cls(d_model, "max_pool")
        if selector.startswith("cat"):
            parts = selector.split(":")
            if len(parts) == 1:
                return cls(d_model, "concat", d_model // 2, d_model - d_model // 2)
            try:
                df, dc = int(parts[1]), int(parts[2])
            except (IndexError, ValueError):
                raise ConfigError(f"bad concat selector {selector!r}, expected cat:DF:DC") from None
            return cls(d_model, "concat", df, dc)
        raise ConfigError(f"unknown fusion selector {selector!r}")

    def selector(self) -> str:
        if self.mode == "concat":
            return f"cat:{self.d_fine}:{self.d_coarse}"
        return {"single_grained": "sg", "mean_pool": "mean", "max_pool": "max"}[self.mode]


def init_tables(cfg: FusionConfig, fine_size: int, coarse_size: int, max_len: int,
                rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    """Normal(0, std) embedding tables; the coarse table is omitted in single-grained mode."""
    tables = {
        "emb.fine": Tensor(rng.normal(0.0, std, (fine_size, cfg.fine_width)).astype(np.float32),
                           requires_grad=True, name="emb.fine"),
    }
    if cfg.uses_coarse:
        tables["emb.coarse"] = Tensor(
            rng.normal(0.0, std, (coarse_size, cfg.coarse_width)).astype(np.float32),
            requires_grad=True, name="emb.coarse")
    tables["emb.pos"] = Tensor(rng.normal(0.0, std, (max_len, cfg.d_model)).astype(np.float32),
                               requires_grad=True, name="emb.pos")
    return tables


class FusionCache:
    """What ``fusion_backward`` needs from the forward pass."""

    __slots__ = ("mode", "take_fine", "d_fine")

    def __init__(self, mode, take_fine=None, d_fine=None):
        self.mode = mode
        self.take_fine = take_fine
        self.d_fine = d_fine


def fuse_forward(fine_rows: np.ndarray, coarse_rows: np.ndarray | None, cfg: FusionConfig):
    """Combine per-position fine and coarse vectors. Returns ``(fused, cache)``."""
    if cfg.mode == "single_grained":
        return fine_rows, FusionCache(cfg.mode)
    if fine_rows.shape[:-1] != coarse_rows.shape[:-1]:
        raise ConfigError("fine and coarse rows disagree on positions")
    if cfg.mode == "concat":
        if fine_rows.shape[-1] != cfg.d_fine or coarse_rows.shape[-1] != cfg.d_coarse:
            raise ConfigError("concat widths do not match the fusion config")
        return np.concatenate([fine_rows, coarse_rows], axis=-1), FusionCache(cfg.mode, d_fine=cfg.d_fine)
    if fine_rows.shape[-1] != cfg.d_model or coarse_rows.shape[-1] != cfg.d_model:
        raise ConfigError("pooling fusion needs both widths equal to d_model")
    if cfg.mode == "mean_pool":
        return (fine_rows + coarse_rows) * 0.5, FusionCache(cfg.mode)
    take_fine = fine_rows >= coarse_rows
    return np.where(take_fine, fine_rows, coarse_rows), FusionCache(cfg.mode, take_fine=take_fine)


def fusion_backward(grad_out: np.ndarray, cache: FusionCache | None, cfg: FusionConfig):
    """Split the gradient of the fused rows into ``(grad_fine_rows, grad_coarse_rows)``.

    Max-pool routes each component to the input that won, ties to the fine
    input; mean-pool halves; concat slices. Gradients are per position, the
    table-level accumulation over a span happens in the row gather.
    """
    if cache is None:
        raise UsageError("fusion_backward called without a forward cache")
    if cache.mode != cfg.mode:
        raise UsageError(f"cache was produced by {cache.mode!r}, not {cfg.mode!r}")
    if cfg.mode == "single_grained":
        return grad_out, None
    if cfg.mode == "concat":
        return grad_out[..., :cache.d_fine], grad_out[..., cache.d_fine:]
    if cfg.mode == "mean_pool":
        half = grad_out * 0.5
        return half, half
    zero = np.zeros((), dtype=grad_out.dtype)
    return np.where(cache.take_fine, grad_out, zero), np.where(cache.take_fine, zero, grad_out)


def fuse(fine_rows: Tensor, coarse_rows: Tensor | None, cfg: FusionConfig) -> Tensor:
    if cfg.mode == "single_grained":
        return fine_rows
    out, cache = fuse_forward(fine_rows.data, coarse_rows.data, cfg)
    return _make(out, (fine_rows, coarse_rows), lambda g: fusion_backward(g, cache, cfg))


def embed_ids(fine_ids: np.ndarray, coarse_ids: np.ndarray | None, tables: dict[str, Tensor],
              cfg: FusionConfig) -> Tensor:
    """Fused embeddings for id arrays of shape ``[..., L]``; ``coarse_ids`` is per position."""
    fine_ids = np.asarray(fine_ids)
    length = fine_ids.shape[-1]
    pos = tables["emb.pos"]
    if length > pos.shape[0]:
        raise ConfigError(f"sequence length {length} exceeds max_len {pos.shape[0]}")
    fine_rows = take_rows(tables["emb.fine"], fine_ids)
    coarse_rows = None
    if cfg.uses_coarse:
        coarse_ids = np.asarray(coarse_ids)
        if coarse_ids.shape != fine_ids.shape:
            raise ConfigError("coarse ids must be given per fine position")
        coarse_rows = take_rows(tables["emb.coarse"], coarse_ids)
    fused = fuse(fine_rows, coarse_rows, cfg)
    if fused.shape[-1] != cfg.d_model:
        raise ConfigError(f"fused width {fused.shape[-1]} != d_model {cfg.d_model}")
    return add(fused, take_rows(pos, np.arange(length)))


def embed_sequence(seq, tables: dict[str, Tensor], cfg: FusionConfig) -> Tensor:
    """``[len, d_model]`` embeddings of one TokenizedSequence."""
    coarse = np.asarray(seq.coarse_ids_per_position()) if cfg.uses_coarse else None
    return embed_ids(np.asarray(seq.fine_ids), coarse, tables, cfg)
