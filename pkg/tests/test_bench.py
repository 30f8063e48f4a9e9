import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqt.bench import fit_slope, flops_ratio, flops_temporal, jl_error_bound, scaling_study, write_csv
from vqt.mptn import PathwayPlan, plan_pathways


def test_flops_ratio_examples():
    assert flops_ratio(96, 196, 768) == Fraction(49, 96)
    assert flops_ratio(8, 16, 32) == Fraction(3, 8)
    assert flops_ratio(10, 4, 4, plan_pathways(10, budgets=(10,))) == 1


def test_dense_count_convention():
    # two width-d products over T keys for each of T queries at N locations, 2 FLOPs per MAC
    assert flops_temporal("dense", 96, 196, 768) == 4 * 96 * 96 * 196 * 768
    assert flops_temporal("sta", 96, 196, 768, plan_pathways(96)) == 4 * 7 * 96 * 196 * 768


def test_plan_required():
    with pytest.raises(ValueError):
        flops_temporal("mptn", 8, 1, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 512), st.integers(1, 64), st.integers(1, 64))
def test_mptn_cheaper_iff_budget_sum_below_T(T, N, d):
    plan = plan_pathways(T)
    cheaper = flops_temporal("mptn", T, N, d, plan) < flops_temporal("dense", T, N, d)
    assert cheaper == (plan.total < T)
    assert flops_ratio(T, N, d, plan) == Fraction(plan.total, T)


def test_jl_examples():
    assert jl_error_bound(96, 768) == pytest.approx(0.218, abs=5e-4)
    assert abs(jl_error_bound(96, 768) - 0.215) <= 0.005
    assert jl_error_bound(96, 4 * 8 * math.log(96)) == pytest.approx(0.5)
    assert jl_error_bound(math.e, 8) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10_000), st.integers(1, 4096), st.integers(1, 100))
def test_jl_monotone(T, d, step):
    assert jl_error_bound(T + step, d) > jl_error_bound(T, d)
    assert jl_error_bound(T, d + step) < jl_error_bound(T, d)


def test_fit_needs_three_points():
    with pytest.raises(ValueError, match="at least 3"):
        fit_slope([8], [1.0])
    with pytest.raises(ValueError, match="at least 3"):
        scaling_study([8])
    slope, se = fit_slope([1, 2, 4, 8], [3, 12, 48, 192])
    assert slope == pytest.approx(2.0) and se == pytest.approx(0.0, abs=1e-12)


def test_scaling_study_shape(tmp_path):
    res = scaling_study([8, 16, 32], repetitions=2, inner=1)
    assert [(r.T, r.variant) for r in res.reports] == [
        (8, "dense"), (8, "mptn"), (16, "dense"), (16, "mptn"), (32, "dense"), (32, "mptn")]
    assert set(res.slopes) == {"dense", "mptn"}
    write_csv(tmp_path / "s.csv", res.reports)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "T,variant,flops,nanos" and len(lines) == 7
