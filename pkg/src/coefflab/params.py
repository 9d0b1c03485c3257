"""Closed-form parameter counts for coefficient tuning against full attention and LoRA."""

from dataclasses import dataclass

from .coeff import count_coeff_params, format_millions
from .errors import DimensionError, UsageError


@dataclass(frozen=True)
class LayerDims:
    c_in: int
    c_out: int
    heads: int
    lora_rank: int = None

    def __post_init__(self):
        for name in ("c_in", "c_out", "heads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise DimensionError(f"{name} must be a positive integer, got {v!r}")
        if self.c_out % self.heads:
            raise DimensionError(f"C_out={self.c_out} is not divisible by H={self.heads}")
        if self.lora_rank is not None and (not isinstance(self.lora_rank, int) or self.lora_rank < 1):
            raise DimensionError(f"lora rank must be a positive integer, got {self.lora_rank!r}")


def _dims(d, c_out=None, heads=None, r=None):
    if isinstance(d, LayerDims):
        return d
    return LayerDims(d, c_out, heads, r)


def attention_params(d):
    """Weights in one attention layer: Q, K, V (C_in x C_out each) plus W_o."""
    d = _dims(d)
    return 3 * d.c_in * d.c_out + d.c_out * d.c_out


def ratio_vs_attention(d, c_out=None, heads=None):
    """H^2 / (3 C_in C_out + C_out^2).  Accepts a LayerDims or ``(c_in, c_out, heads)``."""
    d = _dims(d, c_out, heads)
    return d.heads ** 2 / attention_params(d)


def ratio_vs_lora(d, c_out=None, heads=None, r=None):
    """H^2 / (3 r C_in + 5 r C_out)."""
    d = _dims(d, c_out, heads, r)
    if d.lora_rank is None:
        raise UsageError("ratio_vs_lora needs a LoRA rank r")
    r = d.lora_rank
    return d.heads ** 2 / (3 * r * d.c_in + 5 * r * d.c_out)


def vit_coeff_budget():
    """Coefficients added to a 12-layer, 12-head ViT."""
    return count_coeff_params(12, 12)


def percent(ratio, digits=4):
    """Fraction as a percent string with ``digits`` significant figures."""
    return f"{ratio * 100:.{digits}g}%"


def params_table(d):
    """Rows of (quantity, value, percent) for one set of dimensions."""
    rows = [
        ("coeff_params_per_layer", d.heads ** 2, ""),
        ("attention_params_per_layer", attention_params(d), ""),
        ("ratio_vs_attention", ratio_vs_attention(d), percent(ratio_vs_attention(d))),
    ]
    if d.lora_rank is not None:
        r = ratio_vs_lora(d)
        rows.append(("ratio_vs_lora", r, percent(r)))
    b = vit_coeff_budget()
    rows.append(("vit_coeff_budget", b, format_millions(b)))
    return rows
