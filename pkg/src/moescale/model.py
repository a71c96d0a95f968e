"""MoE architecture configs, sparsity and parameter counting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Literal

from moescale.errors import ConfigError, NoFeasibleConfigError

# Guard against silently returning counts past what a float can hold exactly.
_MAX_EXACT = 2**53


@dataclass(frozen=True)
class MoeConfig:
    """Architecture of a decoder-only MoE transformer.

    ``e_total`` and ``e_active`` count granular experts, so the expansion
    factor is ``e_total // granularity``. Every layer is an MoE layer with GLU
    experts of hidden width ``d_ffn = 4 * d_model``.
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    e_total: int
    e_active: int
    granularity: int = 1
    n_ctx: int = 2048
    n_vocab: int = 50432
    d_ffn: int | None = None

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "d_ffn" and value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
        counts = ("n_layers", "d_model", "n_heads", "d_head", "e_total", "e_active", "granularity")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_ctx < 0 or self.n_vocab < 0:
            raise ConfigError("n_ctx and n_vocab must be >= 0")
        if self.e_active > self.e_total:
            raise ConfigError(f"e_active={self.e_active} exceeds e_total={self.e_total}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        elif self.d_ffn != 4 * self.d_model:
            raise ConfigError(f"d_ffn must be 4 * d_model = {4 * self.d_model}, got {self.d_ffn}")

    @property
    def sparsity(self) -> float:
        return sparsity_of(self.e_total, self.e_active)

    @property
    def expansion(self) -> float:
        return self.e_total / self.granularity

    def replace(self, **changes) -> "MoeConfig":
        values = asdict(self)
        values.update(changes)
        if "d_model" in changes and "d_ffn" not in changes:
            values["d_ffn"] = None
        return MoeConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MoeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> MoeConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return MoeConfig.from_dict(data)


def sparsity_of(e_total: int, e_active: int) -> float:
    """Fraction of experts that are not active for a given token."""
    if e_total < 1:
        raise ConfigError(f"e_total must be >= 1, got {e_total}")
    if e_active < 1 or e_active > e_total:
        raise ConfigError(f"need 1 <= e_active <= e_total, got e_active={e_active}, e_total={e_total}")
    return (e_total - e_active) / e_total


@dataclass(frozen=True)
class ParamCount:
    n_total: int
    n_active: int
    breakdown: dict[str, int] = field(default_factory=dict)


def count_params(config: MoeConfig, include_input_embedding: bool = False) -> ParamCount:
    """Total and active parameter counts.

    Biases, norms and positional parameters are left out. The input
    embedding is a table lookup and is only included on request.
    """
    d = config.d_model
    per_expert = Fraction(3 * config.d_ffn * d, config.granularity)
    attention = config.n_layers * 4 * d * d
    router = config.n_layers * d * config.e_total
    experts_total = config.n_layers * config.e_total * per_expert
    experts_active = config.n_layers * config.e_active * per_expert
    unembedding = config.n_vocab * d
    embedding = config.n_vocab * d if include_input_embedding else 0

    shared = attention + router + unembedding + embedding
    n_total = shared + experts_total
    n_active = shared + experts_active
    if n_total > _MAX_EXACT:
        raise OverflowError(f"parameter count {float(n_total):.3e} exceeds exact integer range")
    breakdown = {
        "attention": attention,
        "experts_total": _as_number(experts_total),
        "experts_active": _as_number(experts_active),
        "router": router,
        "embedding": embedding,
        "unembedding": unembedding,
    }
    return ParamCount(n_total=_as_number(n_total), n_active=_as_number(n_active), breakdown=breakdown)


def _as_number(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


@dataclass(frozen=True)
class ShapeRule:
    """How ``derive_config`` lays out a model of a requested size.

    ``aspect_ratio`` is d_model / n_layers. ``expert_counts`` restricts
    e_total to any integer or to powers of two; ``min_experts`` is the
    smallest e_total used for sparse models.
    """

    aspect_ratio: float = 128.0
    d_head: int = 64
    min_experts: int = 8
    expert_counts: Literal["any", "power_of_two"] = "any"
    n_ctx: int = 2048
    n_vocab: int = 50432
    rel_tol: float = 0.05


def _expert_counts(sparsity: float, granularity: int, rule: ShapeRule) -> tuple[int, int]:
    if not 0.0 <= sparsity < 1.0:
        raise NoFeasibleConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
    active_frac = Fraction(1) - Fraction(sparsity).limit_denominator(10**6)
    p, q = active_frac.numerator, active_frac.denominator
    if p == q:
        return granularity, granularity
    # e_total = k*q must be a multiple of the granularity
    step = q * granularity // math.gcd(q, granularity)
    e_total = step
    if rule.expert_counts == "power_of_two":
        # some multiple of `step` is a power of two only if step itself is one
        if step & (step - 1):
            raise NoFeasibleConfigError(
                f"sparsity {sparsity} needs e_total a multiple of {step}, never a power of two"
            )
        while e_total < rule.min_experts:
            e_total *= 2
    else:
        while e_total < rule.min_experts:
            e_total += step
    e_active = e_total // q * p
    return e_total, e_active


def derive_config(
    n_target: float,
    sparsity: float,
    granularity: int = 1,
    shape_rule: ShapeRule | None = None,
) -> MoeConfig:
    """Pick a config whose total parameter count is close to ``n_target``.

    Expert counts are fixed first so that the sparsity is hit exactly; the
    width is then solved for and rounded to a multiple of the head size.
    """
    rule = shape_rule or ShapeRule()
    e_total, e_active = _expert_counts(sparsity, granularity, rule)

    def total(d_model: int, n_layers: int) -> int:
        cfg = MoeConfig(
            n_layers=n_layers,
            d_model=d_model,
            n_heads=d_model // rule.d_head,
            d_head=rule.d_head,
            e_total=e_total,
            e_active=e_active,
            granularity=granularity,
            n_ctx=rule.n_ctx,
            n_vocab=rule.n_vocab,
        )
        return count_params(cfg).n_total

    # n_total = L*(k*d^2 + e*d) + V*d; for each depth L solve the quadratic in d,
    # round to whole heads, and keep the in-tolerance shape nearest the aspect ratio
    k = 4.0 + 12.0 * e_total / granularity
    candidates = []
    max_layers = max(4, int(3 * (n_target / (k * rule.aspect_ratio**2)) ** (1 / 3)) + 4)
    for n_layers in range(1, max_layers + 1):
        qa, qb = n_layers * k, n_layers * e_total + rule.n_vocab
        d_cont = (-qb + math.sqrt(qb * qb + 4.0 * qa * n_target)) / (2.0 * qa)
        for heads in {max(1, math.floor(d_cont / rule.d_head)), max(1, math.ceil(d_cont / rule.d_head))}:
            d_model = heads * rule.d_head
            n = n_layers * (k * d_model * d_model + e_total * d_model) + rule.n_vocab * d_model
            err = abs(n - n_target) / n_target
            shape = abs(math.log(d_model / n_layers / rule.aspect_ratio))
            candidates.append((err > rule.rel_tol, shape if err <= rule.rel_tol else err, d_model, n_layers))
    _, _, d_model, n_layers = min(candidates)
    err = abs(total(d_model, n_layers) - n_target) / n_target
    if err > rule.rel_tol:
        raise NoFeasibleConfigError(
            f"closest config misses n_target={n_target:.4g} by {err:.1%} (tolerance {rule.rel_tol:.0%})"
        )
    return MoeConfig(
        n_layers=n_layers,
        d_model=d_model,
        n_heads=d_model // rule.d_head,
        d_head=rule.d_head,
        e_total=e_total,
        e_active=e_active,
        granularity=granularity,
        n_ctx=rule.n_ctx,
        n_vocab=rule.n_vocab,
    )
