import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosam import profiler
from cosam.cosam import Cosam, CosamConfig

GEOM = (4, 2048, 16, 8)


def test_cosam_params_at_reference_geometry():
    c = profiler.count_cosam(GEOM, D_R=256, K=3, mlp_hidden=256)
    assert c.params == 1_576_321
    assert abs(c.params - 1.6e6) / 1.6e6 < 0.03


def test_cosam_params_equal_instantiated_module():
    for geom, d_r, k in ((GEOM, 256, 3), ((3, 64, 4, 2), 16, 2), ((5, 10, 3, 3), 4, 4)):
        n, d, h, w = geom
        m = Cosam(CosamConfig(D=d, D_R=d_r, K=k), h, w, np.random.default_rng(0))
        assert profiler.count_cosam(geom, d_r, k).params == m.num_parameters()


def test_cosam_flops_within_band():
    c = profiler.count_cosam(GEOM)
    assert 0.43e9 <= c.flops <= 0.71e9
    assert 0.43e9 <= c.total_flops <= 0.71e9


def test_ncc_term_linear_in_k():
    one = profiler.count_cosam(GEOM, K=1).breakdown["ncc_correlation"]
    two = profiler.count_cosam(GEOM, K=2).breakdown["ncc_correlation"]
    assert 2 * one == two
    with pytest.raises(ValueError):
        profiler.count_cosam(GEOM, K=0)


def test_nlm_reference_numbers():
    eg = profiler.count_nlm(GEOM, "embedded_gaussian")
    assert eg.params == 8_392_704
    assert abs(eg.params - 8.39e6) / 8.39e6 < 0.02
    assert abs(eg.flops - 8.59e9) / 8.59e9 < 0.02
    g = profiler.count_nlm(GEOM, "gaussian")
    assert abs(g.params - 4.2e6) / 4.2e6 < 0.02
    assert abs(g.flops - 4.3e9) / 4.3e9 < 0.02
    with pytest.raises(ValueError):
        profiler.count_nlm(GEOM, "mystery")


def test_ratios():
    comp = profiler.compare([GEOM])
    r = comp.ratios[0]
    assert r["param_ratio"] >= 4 and r["flop_ratio"] >= 10
    assert len(profiler.compare([GEOM, (8, 1024, 8, 4)]).ratios) == 2


def test_comparison_rows_and_formatting():
    comp = profiler.compare([GEOM, (2, 512, 8, 4)])
    assert len(comp.rows) == 2 * (len(profiler.NLM_VARIANTS) + 1)
    table = profiler.format_table(comp)
    assert "1.58M" in table and "8.39M" in table and profiler.CONVENTION in table
    kv = profiler.format_kv(comp)
    assert "COSAM@4x2048x16x8.params=1576321" in kv
    assert "NLM/embedded_gaussian@4x2048x16x8.params=8392704" in kv
    with pytest.raises(ValueError):
        profiler.compare([])


@settings(max_examples=60, deadline=None)
@given(
    st.tuples(st.integers(1, 8), st.integers(16, 512), st.integers(1, 16), st.integers(1, 16)),
    st.integers(0, 3),
    st.integers(1, 4),
)
def test_counts_monotone_in_geometry(geom, axis, bump):
    bigger = list(geom)
    bigger[axis] += bump
    for fn in (lambda g: profiler.count_cosam(g, D_R=8, K=1), lambda g: profiler.count_nlm(g)):
        a, b = fn(geom), fn(tuple(bigger))
        assert b.params >= a.params and b.flops >= a.flops and b.total_flops >= a.total_flops


def test_bad_geometry():
    with pytest.raises(ValueError):
        profiler.count_cosam((0, 8, 2, 2))
