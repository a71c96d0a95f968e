"""Seeded synthetic run tables with a known ground-truth loss law."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from moescale.errors import ConfigError
from moescale.model import count_params, derive_config
from moescale.paramlaw import ScalingLawCoeffs, predict_loss_moe
from moescale.runs import DEFAULT_BUDGETS, RunRecord, RunTable
from moescale.surface import SurfaceFit, transform_features

REFERENCE_SPARSITIES = (0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.98)
EXPERT_FRACTION = 0.8


def structural_na(n, sparsity, expert_fraction: float = EXPERT_FRACTION):
    """N_a = N*(1-S)*f + N*(1-f), with f the share of parameters in experts."""
    n = np.asarray(n, dtype=float)
    # same value written as N*(1 - f*S): exact at S=0 and never above N
    return n * (1.0 - expert_fraction * np.asarray(sparsity, dtype=float))


def config_na(n, sparsity, granularity: int = 1):
    """N_a from a concrete architecture derived for (N, S)."""
    out = []
    for value in np.atleast_1d(np.asarray(n, dtype=float)):
        cfg = derive_config(float(value), float(sparsity), granularity)
        pc = count_params(cfg)
        # rescale so that N_a/N matches the derived config exactly at the requested N
        out.append(float(value) * pc.n_active / pc.n_total)
    arr = np.array(out)
    return arr if np.ndim(n) else float(arr[0])


NA_RULES: dict[str, Callable] = {"structural": structural_na, "config": config_na}


@dataclass(frozen=True)
class SynthDesign:
    truth: ScalingLawCoeffs | SurfaceFit
    budgets: tuple[float, ...] = DEFAULT_BUDGETS
    sparsities: tuple[float, ...] = REFERENCE_SPARSITIES
    sizes_per_cell: int = 12
    size_span: tuple[float, float] = (1e8, 3e10)
    noise_sigma: float = 0.0
    seed: int = 0
    na_rule: str = "structural"
    expert_fraction: float = EXPERT_FRACTION
    # "log" multiplies the loss by exp(eps); "additive" adds eps to it
    noise_kind: str = "log"
    size_grid: str = "log_even"

    def __post_init__(self) -> None:
        if any(not 0.0 <= s < 1.0 for s in self.sparsities):
            raise ConfigError("design sparsities must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        lo, hi = self.size_span
        if not 0 < lo < hi:
            raise ConfigError("size_span must be positive and increasing")
        if self.sizes_per_cell < 1:
            raise ConfigError("sizes_per_cell must be >= 1")
        if self.na_rule not in NA_RULES:
            raise ConfigError(f"unknown na_rule {self.na_rule!r}; choose from {sorted(NA_RULES)}")
        if self.noise_kind not in ("log", "additive"):
            raise ConfigError("noise_kind must be 'log' or 'additive'")
        if self.size_grid not in ("log_even", "log_uniform"):
            raise ConfigError("size_grid must be 'log_even' or 'log_uniform'")

    def n_active(self, n, sparsity):
        if self.na_rule == "structural":
            return structural_na(n, sparsity, self.expert_fraction)
        return NA_RULES[self.na_rule](n, sparsity)

    def to_dict(self) -> dict:
        return {
            "budgets": list(self.budgets),
            "sparsities": list(self.sparsities),
            "sizes_per_cell": self.sizes_per_cell,
            "size_span": list(self.size_span),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "na_rule": self.na_rule,
            "expert_fraction": self.expert_fraction,
            "noise_kind": self.noise_kind,
            "size_grid": self.size_grid,
        }

    @classmethod
    def from_dict(cls, data: dict, truth) -> "SynthDesign":
        known = set(cls.__dataclass_fields__) - {"truth"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown design keys: {', '.join(unknown)}")
        kwargs = dict(data)
        for key in ("budgets", "sparsities", "size_span"):
            if key in kwargs:
                kwargs[key] = tuple(float(v) for v in kwargs[key])
        return cls(truth=truth, **kwargs)


def load_truth(path: str | Path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("kind") == "isoflop_surface":
        return SurfaceFit.from_dict(data)
    if data.get("kind") == "scaling_law_fit":
        data = data["coefficients"]
    return ScalingLawCoeffs.from_dict(data)


@dataclass(frozen=True)
class SynthResult:
    table: RunTable
    skipped: tuple[str, ...] = field(default_factory=tuple)


def _sizes(design: SynthDesign, rng: np.random.Generator) -> np.ndarray:
    lo, hi = (math.log(v) for v in design.size_span)
    if design.size_grid == "log_uniform":
        return np.exp(np.sort(rng.uniform(lo, hi, design.sizes_per_cell)))
    return np.exp(np.linspace(lo, hi, design.sizes_per_cell))


def true_loss(truth, n: float, n_active: float, tokens: float, sparsity: float, size_variable: str | None = None) -> float:
    if isinstance(truth, SurfaceFit):
        size = n if truth.size_variable == "total_params" else n_active
        x, y = transform_features(size, sparsity)
        return float(truth.evaluate(x, y))
    return float(predict_loss_moe(truth, n, tokens, sparsity))


def generate_runs_with_report(design: SynthDesign) -> SynthResult:
    # one stream for the size grid, a separate one for noise, so the grid does not shift with sigma
    grid_rng = np.random.default_rng([design.seed, 1])
    noise_rng = np.random.default_rng([design.seed, 2])
    sizes = _sizes(design, grid_rng)
    records, skipped = [], []
    for c in design.budgets:
        for s in design.sparsities:
            for n in sizes:
                n = float(n)
                na = float(design.n_active(n, s))
                tokens = c / (6.0 * na)
                eps = float(noise_rng.standard_normal()) * design.noise_sigma
                if tokens < 1.0:
                    skipped.append(f"C={c:.3g} S={s:g} N={n:.4g}: budget gives {tokens:.3g} tokens")
                    continue
                base = true_loss(design.truth, n, na, tokens, s)
                loss = base * math.exp(eps) if design.noise_kind == "log" else base + eps
                records.append(
                    RunRecord(
                        run_id=f"c{c:.3g}-s{s:g}-n{n:.6g}",
                        n_total=n,
                        n_active=na,
                        sparsity=float(s),
                        tokens=tokens,
                        compute=6.0 * na * tokens,
                        loss=loss,
                        extras={"budget": float(c)},
                    )
                )
    return SynthResult(RunTable(tuple(records), source="synthetic"), tuple(skipped))


def generate_runs(design: SynthDesign) -> RunTable:
    """One record per (budget, sparsity, size) cell, with D = C / (6 N_a)."""
    return generate_runs_with_report(design).table
