import json

import pytest
from hypothesis import given, strategies as st

from moescale.errors import ConfigError, NoFeasibleConfigError
from moescale.model import MoeConfig, ShapeRule, count_params, derive_config, load_config, sparsity_of

WORKED = MoeConfig(n_layers=4, d_model=512, n_heads=8, d_head=64, e_total=8, e_active=2)


@pytest.mark.parametrize("e_total,e_active,want", [(32, 4, 0.875), (8, 8, 0.0), (64, 1, 0.984375)])
def test_sparsity_examples(e_total, e_active, want):
    assert sparsity_of(e_total, e_active) == want


@pytest.mark.parametrize("e_total,e_active", [(8, 0), (4, 5), (0, 0)])
def test_sparsity_rejects_invalid(e_total, e_active):
    with pytest.raises(ConfigError):
        sparsity_of(e_total, e_active)


def test_worked_param_counts():
    pc = count_params(WORKED)
    assert pc.n_total == 130_695_168
    assert pc.n_active == 55_197_696
    assert pc.n_total - pc.n_active == 75_497_472


def test_hand_arithmetic_oracle():
    # independent recomputation from the counting formulas
    d, L, V = 512, 4, 50432
    expert = 12 * d * d
    total = L * (4 * d * d + d * 8 + 8 * expert) + V * d
    active = L * (4 * d * d + d * 8 + 2 * expert) + V * d
    pc = count_params(WORKED)
    assert (pc.n_total, pc.n_active) == (total, active)


def test_dense_case_equal_counts():
    pc = count_params(WORKED.replace(e_active=8))
    assert pc.n_total == pc.n_active


def test_input_embedding_flag_adds_vocab_table():
    a = count_params(WORKED)
    b = count_params(WORKED, include_input_embedding=True)
    assert b.n_total - a.n_total == 50432 * 512
    assert b.n_active - a.n_active == 50432 * 512


def test_breakdown_sums():
    pc = count_params(WORKED)
    bd = pc.breakdown
    assert bd["attention"] + bd["experts_total"] + bd["router"] + bd["unembedding"] + bd["embedding"] == pc.n_total


def test_overflow_rejected():
    huge = MoeConfig(n_layers=10**6, d_model=2**20, n_heads=2**14, d_head=64, e_total=1024, e_active=1)
    with pytest.raises(OverflowError):
        count_params(huge)


@pytest.mark.parametrize(
    "changes",
    [
        {"n_heads": 7},
        {"e_active": 9},
        {"e_active": 0},
        {"granularity": 0},
        {"d_ffn": 100},
        {"n_layers": 1.5},
    ],
)
def test_config_invariants(changes):
    with pytest.raises(ConfigError):
        MoeConfig(**{**WORKED.to_dict(), "d_ffn": None, **changes})


def test_config_roundtrip_and_unknown_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({k: v for k, v in WORKED.to_dict().items() if k != "d_ffn"}))
    assert load_config(p) == WORKED
    p.write_text(json.dumps({**WORKED.to_dict(), "moe_every": 2}))
    with pytest.raises(ConfigError, match="moe_every"):
        load_config(p)
    with pytest.raises(ConfigError, match="missing.json"):
        load_config(tmp_path / "missing.json")


configs = st.builds(
    lambda L, h, et, frac, g: MoeConfig(
        n_layers=L, d_model=64 * h, n_heads=h, d_head=64, e_total=et, e_active=max(1, round(et * frac)), granularity=g
    ),
    st.integers(1, 48),
    st.integers(1, 64),
    st.integers(1, 256),
    st.floats(0.0, 1.0),
    st.integers(1, 8),
)


@given(configs)
def test_sparsity_range_and_dense_iff(cfg):
    s = cfg.sparsity
    assert 0.0 <= s < 1.0
    assert (s == 0.0) == (cfg.e_active == cfg.e_total)


@given(configs)
def test_inactive_difference_identity(cfg):
    pc = count_params(cfg)
    per_expert = 12 * cfg.d_model**2 / cfg.granularity
    assert pc.n_total - pc.n_active == pytest.approx((cfg.e_total - cfg.e_active) * per_expert * cfg.n_layers, rel=1e-12)
    assert 0 < pc.n_active <= pc.n_total


@given(configs)
def test_count_monotone_in_experts(cfg):
    base = count_params(cfg)
    more_total = count_params(cfg.replace(e_total=cfg.e_total + 1))
    assert more_total.n_total > base.n_total
    # the expert share of N_a is untouched; only the always-active router widens
    assert more_total.breakdown["experts_active"] == base.breakdown["experts_active"]
    assert more_total.n_active - base.n_active == cfg.d_model * cfg.n_layers
    if cfg.e_active < cfg.e_total:
        more_active = count_params(cfg.replace(e_active=cfg.e_active + 1))
        assert more_active.n_active > base.n_active and more_active.n_total == base.n_total


def test_derive_roundtrip_from_known_config():
    cfg = MoeConfig(n_layers=12, d_model=1536, n_heads=24, d_head=64, e_total=8, e_active=2)
    got = derive_config(count_params(cfg).n_total, cfg.sparsity, 1)
    assert (got.e_total, got.e_active) == (8, 2)
    assert abs(count_params(got).n_total / count_params(cfg).n_total - 1) <= 0.05


def test_derive_098_uses_multiples_of_50():
    cfg = derive_config(2e9, 0.98, 1)
    assert cfg.e_total % 50 == 0 and cfg.e_active == cfg.e_total // 50
    assert cfg.sparsity == 0.98


def test_derive_power_of_two_infeasible():
    with pytest.raises(NoFeasibleConfigError):
        derive_config(1e9, 1 / 3, 1, ShapeRule(expert_counts="power_of_two"))


def test_derive_power_of_two_feasible():
    cfg = derive_config(1e9, 0.75, 1, ShapeRule(expert_counts="power_of_two"))
    assert cfg.e_total & (cfg.e_total - 1) == 0 and cfg.sparsity == 0.75


@given(
    st.floats(1e8, 5e10),
    st.sampled_from([0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.98]),
    st.sampled_from([1, 2, 4]),
)
def test_derive_property(n, s, g):
    cfg = derive_config(n, s, g)
    assert cfg.sparsity == s
    assert abs(count_params(cfg).n_total - n) / n <= 0.05
