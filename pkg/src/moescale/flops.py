"""Theoretical training FLOPs for MoE transformers.

All per-token counts cover one forward and one backward pass. Values are
computed in exact rational arithmetic and returned as ``int`` when integral,
otherwise as ``float``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from moescale.model import MoeConfig, count_params

LINEAR_C = 6  # add-multiply ops per parameter per token through a linear layer
ROUTER_R = 14  # add-multiply-route ops per router parameter


def _num(x: Fraction | int):
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)


@dataclass(frozen=True)
class FlopBreakdown:
    qkv_proj: int | float
    attn_logits: int | float
    attn_values: int | float
    router: int | float
    experts: int | float
    unembedding: int | float
    total: int | float
    linear_c: int = LINEAR_C
    router_r: int = ROUTER_R

    def to_dict(self) -> dict:
        return asdict(self)


def flops_breakdown(config: MoeConfig, linear_c: int = LINEAR_C, router_r: int = ROUTER_R) -> FlopBreakdown:
    """Per-module FLOPs per token, summed over layers."""
    c, d, L = linear_c, config.d_model, config.n_layers
    qkv = L * 4 * c * d * d
    logits = L * c * config.n_ctx * d
    values = L * c * config.n_ctx * d
    router = L * router_r * d * config.e_total
    experts = L * Fraction(12 * c, config.granularity) * config.e_active * d * d
    unembed = c * config.n_vocab * d
    total = qkv + logits + values + router + experts + unembed
    return FlopBreakdown(
        qkv_proj=_num(qkv),
        attn_logits=_num(logits),
        attn_values=_num(values),
        router=_num(router),
        experts=_num(experts),
        unembedding=_num(unembed),
        total=_num(total),
        linear_c=linear_c,
        router_r=router_r,
    )


def _flops_per_token_exact(config: MoeConfig, linear_c: int = LINEAR_C) -> Fraction:
    d, L = config.d_model, config.n_layers
    bracket = (
        4
        + Fraction(2 * config.n_ctx, d)
        + Fraction(12 * config.e_active, config.granularity)
        + Fraction(config.n_vocab, d * L)
    )
    return linear_c * L * d * d * bracket


def flops_per_token(config: MoeConfig, linear_c: int = LINEAR_C):
    """Closed-form FLOPs per token with the routing term dropped."""
    return _num(_flops_per_token_exact(config, linear_c))


def flops_6nad(n_active: float, d: float):
    """The ``6 * N_a * D`` proxy."""
    if n_active <= 0 or d <= 0:
        raise ValueError("n_active and d must be positive")
    return 6 * n_active * d


def estimator_ratio(config: MoeConfig) -> float:
    """Closed-form FLOPs per token divided by ``6 * N_a``.

    N_a excludes the input embedding, so the parameter-tied FLOPs of both
    estimators coincide apart from the router parameters.
    """
    n_active = count_params(config, include_input_embedding=False).n_active
    return float(_flops_per_token_exact(config) / (6 * Fraction(n_active)))


def training_flops(config: MoeConfig | None = None, d: float = 1, *, proxy: bool = False, n_active: float | None = None):
    """Total training FLOPs for ``d`` tokens.

    With ``proxy=True`` this is ``6 * N_a * d``, taking ``n_active`` directly
    or counting it from ``config``.
    """
    if d <= 0:
        raise ValueError("token count must be positive")
    if proxy:
        if n_active is None:
            if config is None:
                raise ValueError("proxy mode needs n_active or a config")
            n_active = count_params(config).n_active
        return flops_6nad(n_active, d)
    if config is None:
        raise ValueError("exact mode needs a config")
    per_token = _flops_per_token_exact(config)
    if isinstance(d, int):
        return _num(per_token * d)
    return float(per_token) * d
