import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cimfault.cost import (
    REFERENCE_AREA_ROWS,
    REFERENCE_MODEL,
    CostParams,
    calibrate_area,
    estimate_area,
    estimate_energy,
    extra_copies,
    load_cost_params,
    macs_per_token,
    reference_calibrated_params,
)
from cimfault.model import ModelConfig, RedundancySpec

ROWS = {label: (red, area) for label, red, area in REFERENCE_AREA_ROWS}
WHOLE_MODULE_ROWS = ["Vanilla", "Attention x2", "Attention x4", "FFN x2", "FFN x4"]
ENERGY = CostParams(e_cim_per_mac=1e-14, e_digital_per_token=1e-6, e_io_per_token=1e-7)


def _fit(labels):
    return calibrate_area([ROWS[l] for l in labels]).params


# -- area --------------------------------------------------------------------


def test_calibration_on_three_rows_is_exact():
    res = calibrate_area([ROWS["Vanilla"], ROWS["Attention x2"], ROWS["FFN x2"]])
    p = res.params
    assert (p.area_base, p.area_attn_copy, p.area_ffn_copy) == pytest.approx((75.0, 28.0, 39.0), abs=1e-9)
    assert res.rank == 3
    assert np.allclose(res.residuals, 0.0, atol=1e-9)


def test_area_examples():
    p = reference_calibrated_params()
    assert estimate_area(REFERENCE_MODEL, RedundancySpec.none(), p).total == pytest.approx(75.0)
    assert estimate_area(REFERENCE_MODEL, RedundancySpec.attention(4), p).total == pytest.approx(159.0)
    assert estimate_area(REFERENCE_MODEL, RedundancySpec.ffn(4), p).total == pytest.approx(192.0)
    layer = estimate_area(REFERENCE_MODEL, RedundancySpec.layers(0, 7, 2), p).total
    assert layer == pytest.approx(75 + 7 / 28 * (28 + 39))
    for label, red, area in REFERENCE_AREA_ROWS:
        assert abs(estimate_area(REFERENCE_MODEL, red, p).total - area) <= 2.0, label


def test_calibration_consistency_over_independent_triples():
    # every independent triple of whole-module rows predicts the rest within 2 mm^2;
    # the only triples that miss include a layer-range row (see the decisions ledger)
    n_whole, n_total = 0, 0
    for triple in itertools.combinations(ROWS, 3):
        try:
            p = _fit(triple)
        except ValueError:
            continue
        n_total += 1
        worst = max(abs(estimate_area(REFERENCE_MODEL, red, p).total - area)
                    for label, red, area in REFERENCE_AREA_ROWS if label not in triple)
        if all(l in WHOLE_MODULE_ROWS for l in triple):
            n_whole += 1
            assert worst <= 2.0 + 1e-9, triple
        elif worst > 2.0 + 1e-9:
            assert any(l.startswith("Layer") for l in triple)
    assert n_whole == 8 and n_total == 48


def test_rank_deficient_rejected():
    with pytest.raises(ValueError, match="rank"):
        calibrate_area([ROWS["Vanilla"], ROWS["Attention x2"], ROWS["Attention x4"]])
    with pytest.raises(ValueError):
        calibrate_area([ROWS["Layer 0-6 x2"], ROWS["Layer 7-13 x2"], ROWS["Vanilla"]])
    with pytest.raises(ValueError):
        calibrate_area([])


def test_overdetermined_fit_reports_residuals():
    res = calibrate_area([ROWS[l] for l in ROWS])
    assert len(res.residuals) == len(ROWS)
    assert max(abs(r) for r in res.residuals) < 4.0


def test_extra_copies_fractions():
    assert extra_copies(28, RedundancySpec.layers(7, 14, 2)) == (0.25, 0.25)
    assert extra_copies(28, RedundancySpec.attention(4)) == (3.0, 0.0)
    assert extra_copies(28, RedundancySpec.none()) == (0.0, 0.0)


@given(st.integers(1, 8), st.integers(1, 8),
       st.floats(0, 500), st.floats(0, 100), st.floats(0, 100))
def test_area_linear_in_copies(k_attn, k_ffn, base, a, f):
    p = CostParams(area_base=base, area_attn_copy=a, area_ffn_copy=f)
    ra = estimate_area(REFERENCE_MODEL, RedundancySpec.attention(k_attn + 1), p).total
    rb = estimate_area(REFERENCE_MODEL, RedundancySpec.attention(k_attn), p).total
    assert ra - rb == pytest.approx(a, abs=1e-9)
    fa = estimate_area(REFERENCE_MODEL, RedundancySpec.ffn(k_ffn + 1), p).total
    fb = estimate_area(REFERENCE_MODEL, RedundancySpec.ffn(k_ffn), p).total
    assert fa - fb == pytest.approx(f, abs=1e-9)


def test_area_breakdown_sums():
    rep = estimate_area(REFERENCE_MODEL, RedundancySpec.layers(0, 7, 4), reference_calibrated_params())
    assert sum(rep.breakdown.values()) == rep.total
    assert rep.unit == "mm2"


# -- energy ------------------------------------------------------------------


def test_zero_tokens_zero_energy():
    rep = estimate_energy(REFERENCE_MODEL, RedundancySpec.ffn(4), ENERGY, 0, 0)
    assert rep.total == 0.0 and rep.unit == "J"


def test_negative_tokens_rejected():
    with pytest.raises(ValueError):
        estimate_energy(REFERENCE_MODEL, RedundancySpec.none(), ENERGY, -1, 0)


def test_doubling_out_tokens_increases_energy():
    a = estimate_energy(REFERENCE_MODEL, RedundancySpec.none(), ENERGY, 10, 20).total
    b = estimate_energy(REFERENCE_MODEL, RedundancySpec.none(), ENERGY, 10, 40).total
    assert b > a


def test_ffn_x4_has_four_times_ffn_mac_term():
    one = estimate_energy(REFERENCE_MODEL, RedundancySpec.none(), ENERGY, 7, 9).breakdown
    four = estimate_energy(REFERENCE_MODEL, RedundancySpec.ffn(4), ENERGY, 7, 9).breakdown
    assert four["cim_ffn"] == 4 * one["cim_ffn"]
    assert four["cim_attention"] == one["cim_attention"]


def test_macs_per_token_counts():
    cfg = ModelConfig()
    m = macs_per_token(cfg, RedundancySpec.none())
    assert m["attention"] == cfg.n_layers * 4 * 128 * 128
    assert m["ffn"] == cfg.n_layers * 3 * 128 * 512
    assert m["lm_head"] == 128 * 256
    shallow = macs_per_token(cfg, RedundancySpec.layers(0, 1, 4))
    assert shallow["ffn"] == m["ffn"] + 3 * 3 * 128 * 512


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 6),
       st.sampled_from(["attention", "ffn", "layers"]))
def test_energy_monotone_and_complete(n_in, n_out, k, target):
    def spec(k):
        if target == "layers":
            return RedundancySpec.layers(0, 2, k)
        return getattr(RedundancySpec, target)(k)

    cfg = ModelConfig()
    base = estimate_energy(cfg, spec(k), ENERGY, n_in, n_out)
    assert sum(base.breakdown.values()) == pytest.approx(base.total, rel=1e-12)
    assert estimate_energy(cfg, spec(k), ENERGY, n_in + 1, n_out).total >= base.total
    assert estimate_energy(cfg, spec(k), ENERGY, n_in, n_out + 1).total >= base.total
    assert estimate_energy(cfg, spec(k + 1), ENERGY, n_in, n_out).total >= base.total


# -- params ------------------------------------------------------------------


def test_default_params_file():
    p = load_cost_params()
    assert (p.area_base, p.area_attn_copy, p.area_ffn_copy) == (75.0, 28.0, 39.0)
    assert p.e_cim_per_mac > 0


def test_params_validation(tmp_path):
    with pytest.raises(ValueError):
        CostParams(area_base=-1)
    path = tmp_path / "c.ini"
    path.write_text("[cost]\narea_base = 80\n")
    assert load_cost_params(path).area_base == 80.0
    path.write_text("[cost]\narea_bsae = 80\n")
    with pytest.raises(KeyError):
        load_cost_params(path)
