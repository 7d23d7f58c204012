"""Analytic FLOPs model for mixture layers with and without zero experts.

Counts follow the 2mnp matmul convention and keep only dominant matmul
terms: attention projections and score/value products, expert FFN
matmuls, and the router projection. Arithmetic runs on exact rationals;
a component is reported as int whenever the inputs make it integral,
and ratios are emitted as floats at the end.

Default parameters describe a contemporary 30B-class mixture model
(grouped-query attention with a 1/8 KV ratio, 128 experts, 8 active),
which is the configuration the reference speedup table refers to; the
desk-scale models built elsewhere in this package can be analyzed via
from_model_config.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from fractions import Fraction

from .errors import ConfigError, InputError

STAGES = ("prefill", "decode")
VARIANTS = ("orig", "dynamic")


def _exact(x):
    """Fraction view of an int/float/Fraction input (floats are exact)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(float(x))


def _emit(x: Fraction):
    """Int when integral, else float."""
    return int(x) if x.denominator == 1 else float(x)


@dataclass
class FlopsConfig:
    H: int = 2048  # residual width
    H_attn: int = 4096  # attention inner width (heads * head_dim)
    g_kv: object = Fraction(1, 8)  # KV heads / query heads
    H_e: int = 768  # expert FFN inner width
    N: int = 128  # normal experts
    N_Z: int = 64  # zero candidates
    K: int = 8  # active experts per token
    r_ze: object = 0.5  # fraction of selections landing on zeros

    def __post_init__(self):
        for name in ("H", "H_attn", "H_e", "N", "K"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.N_Z < 0:
            raise ConfigError("N_Z must be >= 0")
        if self.K > self.N:
            raise ConfigError(f"K={self.K} cannot exceed N={self.N}")
        if _exact(self.g_kv) <= 0:
            raise ConfigError("g_kv must be positive")
        if not 0 <= _exact(self.r_ze) <= 1:
            raise ConfigError(f"r_ze must lie in [0, 1], got {self.r_ze}")

    @staticmethod
    def from_model_config(config, r_ze):
        """Map a ModelConfig onto the analytic symbol set."""
        return FlopsConfig(
            H=config.hidden,
            H_attn=config.attn_inner,
            g_kv=_exact(config.kv_ratio),
            H_e=config.expert_inner,
            N=config.num_experts,
            N_Z=config.num_zero_experts,
            K=config.top_k,
            r_ze=r_ze,
        )


@dataclass
class FlopsBreakdown:
    attention: object
    ffn: object
    router: object

    @property
    def total(self):
        return self.attention + self.ffn + self.router


def moe_flops(cfg: FlopsConfig, n_tokens, variant="orig"):
    """(ffn, router) matmul cost of one mixture layer over n_tokens.

    orig: 6*K*n*H*H_e expert FFN plus 2*N*n*H router.
    dynamic: the FFN shrinks by (1 - r_ze) while the router grows to
    N + N_Z candidates; selected zeros cost nothing.
    """
    if n_tokens < 1:
        raise InputError(f"n_tokens must be >= 1, got {n_tokens}")
    if variant not in VARIANTS:
        raise InputError(f"variant must be one of {VARIANTS}, got {variant!r}")
    n = Fraction(int(n_tokens))
    if variant == "orig":
        ffn = 6 * cfg.K * n * cfg.H * cfg.H_e
        router = 2 * cfg.N * n * cfg.H
    else:
        ffn = 6 * (1 - _exact(cfg.r_ze)) * cfg.K * n * cfg.H * cfg.H_e
        router = 2 * (cfg.N + cfg.N_Z) * n * cfg.H
    return _emit(ffn), _emit(router)


def _attention_flops(cfg: FlopsConfig, l, stage):
    l = Fraction(int(l))
    proj = 4 * (1 + _exact(cfg.g_kv)) * l * cfg.H * cfg.H_attn
    if stage == "prefill":
        scores = 4 * l * l * cfg.H_attn
    else:
        # KV-cached generation of l tokens: step t attends to t-1 cached
        # positions, summing to l(l-1)/2 pairs at 4*H_attn each
        scores = 2 * l * (l - 1) * cfg.H_attn
    return scores + proj


def flops_stage(cfg: FlopsConfig, l, stage="prefill", variant="orig"):
    """Per-layer FLOPs of processing (prefill) or generating (decode) l
    tokens. Components are full per-layer totals; divide by 2*l for the
    per-token matmul-pair unit some summaries quote.
    """
    if l < 1:
        raise InputError(f"l must be >= 1, got {l}")
    if stage not in STAGES:
        raise InputError(f"stage must be one of {STAGES}, got {stage!r}")
    ffn, router = moe_flops(cfg, l, variant)
    attention = _attention_flops(cfg, l, stage)
    return FlopsBreakdown(attention=_emit(attention), ffn=ffn, router=router)


def speedup(cfg: FlopsConfig, l, stage="prefill"):
    """F_orig / F_dynamic for one stage; layer count cancels."""
    orig = flops_stage(cfg, l, stage, "orig")
    dynamic = flops_stage(cfg, l, stage, "dynamic")
    return float(Fraction(orig.total) / Fraction(dynamic.total))


def speedup_table(cfg: FlopsConfig, lengths, r_ze_values):
    """Rows of (length, r_ze, prefill_speedup, decode_speedup)."""
    if not lengths or not r_ze_values:
        raise InputError("lengths and r_ze_values must be nonempty")
    rows = []
    for r in r_ze_values:
        at_r = replace(cfg, r_ze=r)
        for l in lengths:
            rows.append((
                int(l),
                float(r),
                speedup(at_r, l, "prefill"),
                speedup(at_r, l, "decode"),
            ))
    return rows


def write_speedup_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("length", "r_ze", "prefill_speedup", "decode_speedup"))
        for length, r, pre, dec in rows:
            writer.writerow((length, repr(r), repr(pre), repr(dec)))
