"""Pre-norm transformer encoder over fused embeddings, with MLM/AR/task heads."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import (
    Tensor, add, cross_entropy, dropout, gelu, getitem, layer_norm, linear,
    masked_softmax, matmul, nll_terms,
)
from .errors import ConfigError, DataError, NumericError, UsageError
from .fusion import FusionConfig, embed_ids, init_tables
from .masking import SPECIAL_IDS, ar_visibility, causal_mask, check_bounds
from .vocab import PAD

OBJECTIVES = ("mlm", "ar")
NEG_LARGE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    fine_size: int
    coarse_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    dropout: float = 0.1
    fusion: str = "max"
    objective: str = "mlm"
    init_std: float = 0.02
    max_span: int = 8
    fine_mode: str = "whitespace"

    def __post_init__(self):
        for name in ("fine_size", "coarse_size", "d_model", "n_heads", "d_ff", "max_len", "max_span"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        self.fusion_config  # validates the selector

    @property
    def fusion_config(self) -> FusionConfig:
        return FusionConfig.parse(self.fusion, self.d_model)

    @property
    def layout(self) -> str:
        return "autoencoding" if self.objective == "mlm" else "autoregressive"


def tiny_config(fine_size: int, coarse_size: int, **overrides) -> ModelConfig:
    """Desk-scale preset: 2 layers, d=64, 4 heads, d_ff=256, 64 positions, no dropout."""
    base = dict(d_model=64, n_layers=2, n_heads=4, d_ff=256, max_len=64, dropout=0.0)
    base.update(overrides)
    return ModelConfig(fine_size=fine_size, coarse_size=coarse_size, **base)


@dataclass
class Batch:
    """Padded id arrays for a list of sequences (or masked examples)."""

    fine_ids: np.ndarray      # [B, L]
    coarse_ids: np.ndarray    # [B, L] coarse id of each position's span
    valid: np.ndarray         # [B, L] False on padding
    cls_index: np.ndarray     # [B]
    labels: np.ndarray | None = None   # [B, L], -1 where not predicted
    bounds: np.ndarray | None = None   # [B, L] AR visibility bounds

    @property
    def shape(self):
        return self.fine_ids.shape


def collate(seqs, masked=None, objective: str = "mlm") -> Batch:
    """Pad a list of TokenizedSequence to a batch, optionally with MaskedExample inputs."""
    n = len(seqs)
    if n == 0:
        raise DataError("empty batch")
    length = max(len(s) for s in seqs)
    fine = np.full((n, length), PAD, dtype=np.int64)
    coarse = np.full((n, length), PAD, dtype=np.int64)
    valid = np.zeros((n, length), dtype=bool)
    cls_index = np.zeros(n, dtype=np.int64)
    labels = np.full((n, length), -1, dtype=np.int64) if masked is not None else None
    bounds = np.zeros((n, length), dtype=np.int64) if objective == "ar" else None
    for b, seq in enumerate(seqs):
        m = len(seq)
        valid[b, :m] = True
        cls_index[b] = seq.cls_index
        if masked is not None:
            ex = masked[b]
            fine[b, :m] = ex.input_fine
            coarse[b, :m] = ex.input_coarse_per_position()
            labels[b, :m] = ex.labels
        else:
            fine[b, :m] = seq.fine_ids
            coarse[b, :m] = seq.coarse_ids_per_position()
        if bounds is not None:
            bounds[b, :m] = ar_visibility(seq)
            bounds[b, m:] = np.arange(m, length)
    return Batch(fine, coarse, valid, cls_index, labels, bounds)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, shape).astype(np.float32)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    fcfg = cfg.fusion_config
    params = init_tables(fcfg, cfg.fine_size, cfg.coarse_size, cfg.max_len, rng, cfg.init_std)
    d, f = cfg.d_model, cfg.d_ff

    def put(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    for l in range(cfg.n_layers):
        pre = f"layer{l}"
        put(f"{pre}.ln1.g", np.ones(d, np.float32))
        put(f"{pre}.ln1.b", np.zeros(d, np.float32))
        for w in ("q", "k", "v", "o"):
            put(f"{pre}.attn.w{w}", _normal(rng, (d, d), cfg.init_std))
            put(f"{pre}.attn.b{w}", np.zeros(d, np.float32))
        put(f"{pre}.ln2.g", np.ones(d, np.float32))
        put(f"{pre}.ln2.b", np.zeros(d, np.float32))
        put(f"{pre}.ffn.w1", _normal(rng, (d, f), cfg.init_std))
        put(f"{pre}.ffn.b1", np.zeros(f, np.float32))
        put(f"{pre}.ffn.w2", _normal(rng, (f, d), cfg.init_std))
        put(f"{pre}.ffn.b2", np.zeros(d, np.float32))
    put("lm.ln.g", np.ones(d, np.float32))
    put("lm.ln.b", np.zeros(d, np.float32))
    put("lm.w", _normal(rng, (d, cfg.fine_size), cfg.init_std))
    put("lm.b", np.zeros(cfg.fine_size, np.float32))
    return params


class Model:
    """Stateless wrapper pairing a config with a name->Tensor parameter dict."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.record_attention = False
        self.attention: list[np.ndarray] = []

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "Model":
        return cls(cfg, init_params(cfg, rng))

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return Model(self.cfg, params)

    # heads -----------------------------------------------------------------

    def add_cls_head(self, n_classes: int, rng: np.random.Generator) -> None:
        if n_classes < 2:
            raise ConfigError(f"classification head needs n_classes >= 2, got {n_classes}")
        d = self.cfg.d_model
        self.params["cls.w"] = Tensor(_normal(rng, (d, n_classes), self.cfg.init_std), True, "cls.w")
        self.params["cls.b"] = Tensor(np.zeros(n_classes, np.float32), True, "cls.b")

    def add_span_head(self, rng: np.random.Generator) -> None:
        d = self.cfg.d_model
        self.params["span.w"] = Tensor(_normal(rng, (d, 2), self.cfg.init_std), True, "span.w")
        self.params["span.b"] = Tensor(np.zeros(2, np.float32), True, "span.b")

    @property
    def n_classes(self) -> int | None:
        w = self.params.get("cls.w")
        return None if w is None else w.shape[1]

    # forward ---------------------------------------------------------------

    def embed(self, batch: Batch) -> Tensor:
        return embed_ids(batch.fine_ids, batch.coarse_ids, self.params, self.cfg.fusion_config)

    def visibility(self, batch: Batch) -> np.ndarray:
        """``[B, 1, L, L]`` key visibility for the batch under the configured objective."""
        keys = batch.valid[:, None, None, :]
        if self.cfg.objective == "ar":
            return keys & causal_mask(batch.shape[1])[None, None]
        return np.broadcast_to(keys, (batch.shape[0], 1, batch.shape[1], batch.shape[1]))

    def encode(self, x: Tensor, visible: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        """Run the encoder stack. ``x`` is ``[B, L, d]`` or ``[L, d]``.

        ``visible`` is a boolean mask broadcastable to ``[B, H, L, L]`` (or
        ``[L, L]`` for unbatched input); False pairs get -inf attention logits.
        Dropout is applied only when ``rng`` is given.
        """
        cfg = self.cfg
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
            if visible is not None:
                visible = np.asarray(visible)[None, None]
        if x.shape[-1] != cfg.d_model:
            raise ConfigError(f"embedding width {x.shape[-1]} != d_model {cfg.d_model}")
        if visible is not None and np.shape(visible)[-2:] != (x.shape[1], x.shape[1]):
            raise ConfigError(f"attention mask shape {np.shape(visible)} does not match length {x.shape[1]}")
        if not np.all(np.isfinite(x.data)):
            raise NumericError("non-finite values in encoder input")
        self.attention = []
        p = cfg.dropout if rng is not None else 0.0
        x = dropout(x, p, rng)
        for l in range(cfg.n_layers):
            x = self._layer(x, l, visible, p, rng)
        return x.reshape(x.shape[1:]) if single else x

    def _layer(self, x, l, visible, p, rng):
        P = self.params
        pre = f"layer{l}"
        B, L, d = x.shape
        H = self.cfg.n_heads
        dh = d // H

        a = layer_norm(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])

        def heads(w):
            t = linear(a, P[f"{pre}.attn.w{w}"], P[f"{pre}.attn.b{w}"])
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = masked_softmax(scores, visible)
        if self.record_attention:
            self.attention.append(att.data.copy())
        ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        out = linear(ctx, P[f"{pre}.attn.wo"], P[f"{pre}.attn.bo"])
        x = add(x, dropout(out, p, rng))

        f = layer_norm(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
        f = linear(gelu(linear(f, P[f"{pre}.ffn.w1"], P[f"{pre}.ffn.b1"])),
                   P[f"{pre}.ffn.w2"], P[f"{pre}.ffn.b2"])
        return add(x, dropout(f, p, rng))

    def forward(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        return self.encode(self.embed(batch), self.visibility(batch), rng)

    # losses ----------------------------------------------------------------

    def lm_logits(self, h: Tensor) -> Tensor:
        P = self.params
        return linear(layer_norm(h, P["lm.ln.g"], P["lm.ln.b"]), P["lm.w"], P["lm.b"])

    def mlm_loss(self, h: Tensor, labels) -> Tensor:
        """Mean NLL of the original fine ids at labeled positions (label >= 0)."""
        labels = np.asarray(labels)
        if labels.shape != h.shape[:-1]:
            raise UsageError(f"labels shape {labels.shape} does not match hidden states {h.shape[:-1]}")
        where = np.nonzero(labels >= 0)
        if len(where[0]) == 0:
            raise DataError("mlm_loss: no labeled positions")
        return cross_entropy(self.lm_logits(getitem(h, where)), labels[where])

    def ar_loss_terms(self, h: Tensor, targets, bounds) -> tuple[Tensor, tuple]:
        """Per-token NLL of ``targets[i]`` read from the state at ``bounds[i] - 1``.

        Positions with ``bounds[i] == 0`` or a negative target are skipped.
        Returns the terms and the ``(batch, position)`` index arrays they cover.
        """
        targets = np.asarray(targets)
        bounds = np.asarray(bounds)
        if h.ndim == 2:
            h = h.reshape(1, *h.shape)
            targets, bounds = targets[None], bounds[None]
        if targets.shape != h.shape[:2] or bounds.shape != targets.shape:
            raise UsageError("targets/bounds shape does not match hidden states")
        for row in bounds:
            check_bounds(row)
        bi, pi = np.nonzero((bounds > 0) & (targets >= 0))
        if len(bi) == 0:
            raise DataError("ar_loss: no predictable positions")
        states = getitem(h, (bi, bounds[bi, pi] - 1))
        return nll_terms(self.lm_logits(states), targets[bi, pi]), (bi, pi)

    def ar_loss(self, h: Tensor, targets, bounds) -> Tensor:
        return self.ar_loss_terms(h, targets, bounds)[0].mean()

    def batch_loss(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        """Pretraining loss of a collated batch under the configured objective."""
        h = self.forward(batch, rng)
        if self.cfg.objective == "mlm":
            return self.mlm_loss(h, batch.labels)
        targets = np.where(batch.valid, batch.fine_ids, -1)
        return self.ar_loss(h, targets, batch.bounds)

    # fine-tuning heads -----------------------------------------------------

    def cls_logits(self, h: Tensor, cls_index) -> Tensor:
        """Affine map of the [CLS] state (first or last position, per layout)."""
        if "cls.w" not in self.params:
            raise UsageError("model has no classification head")
        cls_index = np.asarray(cls_index)
        if h.ndim == 2:
            pooled = getitem(h, int(cls_index))
        else:
            pooled = getitem(h, (np.arange(h.shape[0]), cls_index))
        return linear(pooled, self.params["cls.w"], self.params["cls.b"])

    def span_logits(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Start and end scores for every position."""
        if "span.w" not in self.params:
            raise UsageError("model has no span head")
        both = linear(h, self.params["span.w"], self.params["span.b"])
        return getitem(both, (..., 0)), getitem(both, (..., 1))


def span_candidates(batch: Batch) -> np.ndarray:
    """Positions a span prediction may start/end at: real, non-special tokens."""
    ok = batch.valid.copy()
    for sid in SPECIAL_IDS:
        ok &= batch.fine_ids != sid
    return ok


def masked_position_logits(logits: Tensor, allowed: np.ndarray) -> Tensor:
    return add(logits, np.where(allowed, 0.0, NEG_LARGE).astype(logits.dtype))


def best_span(start: np.ndarray, end: np.ndarray, allowed: np.ndarray | None = None) -> tuple[int, int]:
    """Joint argmax of ``start[s] + end[e]`` over ``s <= e`` (inclusive end)."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    if allowed is not None:
        start = np.where(allowed, start, -np.inf)
        end = np.where(allowed, end, -np.inf)
    score = start[:, None] + end[None, :]
    score = np.where(np.triu(np.ones_like(score, dtype=bool)), score, -np.inf)
    s, e = np.unravel_index(int(np.argmax(score)), score.shape)
    return int(s), int(e)


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def clone_params(params: dict[str, Tensor], dtype=None) -> dict[str, Tensor]:
    return {n: Tensor(p.data.astype(dtype or p.dtype, copy=True), True, n) for n, p in params.items()}


def params_equal(a: dict[str, Tensor], b: dict[str, Tensor], names: Sequence[str] | None = None) -> bool:
    names = list(a) if names is None else names
    return all(n in b and np.array_equal(a[n].data, b[n].data) for n in names) and (
        names is not None or set(a) == set(b))
