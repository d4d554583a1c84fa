"""Analytic per-forward cost model.

Convention (pinned in every report header):

* 1 multiply-accumulate (MAC) = 2 FLOPs.
* Embedding lookups cost nothing.
* Max/mean pooling of the fine and coarse embeddings costs ``d`` FLOPs per
  position and 0 MACs.
* Softmax, layer norm and GELU are excluded from MACs and FLOPs and are
  reported separately as element ops.

Per layer and token the encoder performs ``4 d^2`` MACs for the Q/K/V/O
projections, ``2 L d`` for attention scores and context, and ``2 d d_ff``
for the feed-forward block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig

ARCHITECTURES = ("single_grained", "fused", "dual_encoder")
HEADS = ("none", "cls", "lm")
CONVENTION = "1 MAC = 2 FLOPs; lookups free; pooling = d FLOPs/position; softmax/LN/GELU excluded"

ENCODER_PARTS = ("attn_proj", "attn_scores", "ffn")


@dataclass
class CostReport:
    architecture: str
    seq_len: int
    breakdown: dict[str, int]          # FLOPs per component
    macs: int
    element_ops: dict[str, int] = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return sum(self.breakdown.values())

    @property
    def encoder_flops(self) -> int:
        return sum(self.breakdown[k] for k in ENCODER_PARTS)

    def speedup_vs(self, baseline: "CostReport") -> float:
        """Baseline FLOPs over these FLOPs (1.0x = same cost, 0.5x = twice as slow)."""
        return baseline.flops / self.flops

    def check(self) -> None:
        if any(v < 0 for v in self.breakdown.values()) or self.macs < 0:
            raise AssertionError("negative cost")
        if self.flops != 2 * self.macs + self.breakdown.get("fusion", 0):
            raise AssertionError("breakdown does not sum to 2*MACs + fusion ops")

    def lines(self, baseline: "CostReport | None" = None) -> list[tuple[str, str]]:
        rows = [("architecture", self.architecture), ("seq_len", str(self.seq_len)),
                ("macs", str(self.macs)), ("flops", str(self.flops))]
        rows += [(f"flops.{k}", str(v)) for k, v in self.breakdown.items()]
        rows += [(f"element_ops.{k}", str(v)) for k, v in self.element_ops.items()]
        if baseline is not None:
            rows += [("baseline", baseline.architecture),
                     ("speedup", f"{self.speedup_vs(baseline):.3f}"),
                     ("encoder_ratio", f"{self.encoder_flops / baseline.encoder_flops:.3f}"),
                     ("total_ratio", f"{self.flops / baseline.flops:.6f}")]
        return rows

    def format_text(self, baseline: "CostReport | None" = None) -> str:
        rows = self.lines(baseline)
        width = max(len(k) for k, _ in rows)
        out = [f"# convention: {CONVENTION}"]
        out += [f"{k:<{width}}  {v:>20}" for k, v in rows]
        return "\n".join(out) + "\n"

    def format_tsv(self, baseline: "CostReport | None" = None) -> str:
        return "".join(f"{k}\t{v}\n" for k, v in self.lines(baseline))


def count_flops(cfg: ModelConfig, seq_len: int, architecture: str = "single_grained",
                head: str = "cls", n_classes: int = 2) -> CostReport:
    """Cost of one forward pass over a single sequence of ``seq_len`` tokens.

    ``head`` selects the output layer counted: ``cls`` (one ``d x n_classes``
    projection), ``lm`` (LM transform over every position into the fine
    vocabulary) or ``none``.
    """
    if architecture not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {architecture!r}; expected one of {', '.join(ARCHITECTURES)}")
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}; expected one of {', '.join(HEADS)}")
    if not 0 < seq_len <= cfg.max_len:
        raise ConfigError(f"seq_len {seq_len} must be in [1, max_len={cfg.max_len}]")
    d, f, L, n = cfg.d_model, cfg.d_ff, seq_len, cfg.n_layers
    copies = 2 if architecture == "dual_encoder" else 1

    mac = {
        "attn_proj": copies * n * L * 4 * d * d,
        "attn_scores": copies * n * L * 2 * L * d,
        "ffn": copies * n * L * 2 * d * f,
        "head": {"none": 0, "cls": d * n_classes, "lm": L * d * cfg.fine_size}[head],
    }
    breakdown = {k: 2 * v for k, v in mac.items()}
    breakdown["fusion"] = L * d if architecture == "fused" else 0

    element_ops = {
        "softmax": copies * n * cfg.n_heads * L * L * 3,
        "layer_norm": copies * n * 2 * L * 5 * d + (L * 5 * d if head == "lm" else 0),
        "gelu": copies * n * L * f * 8,
    }
    report = CostReport(architecture, seq_len, breakdown, sum(mac.values()), element_ops)
    report.check()
    return report


def base_config(vocab: int = 30522) -> ModelConfig:
    """12 layers, d=768, d_ff=3072, 12 heads, 512 positions."""
    return ModelConfig(fine_size=vocab, coarse_size=vocab, d_model=768, n_layers=12, n_heads=12,
                       d_ff=3072, max_len=512)
