import math

import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from paircfr.stats import DegenerateTestError, paired_ttest, regularized_incomplete_beta, t_two_sided_pvalue


def test_matches_scipy_example():
    a, b = [1, 2, 3, 4, 5], [0, 1, 2, 5, 4]
    res = paired_ttest(a, b)
    ref = scipy.stats.ttest_rel(a, b)
    assert res.t == pytest.approx(ref.statistic, abs=1e-6)
    assert res.p == pytest.approx(ref.pvalue, abs=1e-6)
    assert res.df == 4 and res.mean_difference == pytest.approx(0.6)


def test_exact_tie():
    res = paired_ttest([0.5, 0.7, 0.9], [0.5, 0.7, 0.9])
    assert (res.t, res.p, res.exact_tie) == (0.0, 1.0, True)


def test_two_pairs_cancelling():
    res = paired_ttest([1.0, -1.0], [0.0, 0.0])
    assert res.t == 0.0 and res.p == pytest.approx(1.0, abs=1e-12)


def test_constant_nonzero_difference_is_degenerate():
    with pytest.raises(DegenerateTestError):
        paired_ttest([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])


def test_input_validation():
    with pytest.raises(ValueError):
        paired_ttest([1.0], [0.0])
    with pytest.raises(ValueError):
        paired_ttest([1.0, 2.0], [0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=3, max_size=30))
def test_symmetry_and_scipy_agreement(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    d = np.subtract(a, b)
    if np.ptp(d) < 1e-6:
        return
    ab, ba = paired_ttest(a, b), paired_ttest(b, a)
    assert ab.t == pytest.approx(-ba.t, rel=1e-12, abs=1e-12)
    assert ab.p == pytest.approx(ba.p, rel=1e-12, abs=1e-14)
    ref = scipy.stats.ttest_rel(a, b)
    assert ab.t == pytest.approx(ref.statistic, rel=1e-8, abs=1e-9)
    assert ab.p == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-10)


@pytest.mark.parametrize("a,b", [(0.5, 0.5), (1.0, 3.0), (4.5, 0.5), (50.0, 0.5), (0.1, 10.0)])
@pytest.mark.parametrize("x", [0.0, 1e-8, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0])
def test_incomplete_beta_vs_scipy(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(scipy.special.betainc(a, b, x), rel=1e-10, abs=1e-14)


def test_pvalue_limits():
    assert t_two_sided_pvalue(0.0, 5) == pytest.approx(1.0)
    assert t_two_sided_pvalue(math.inf, 5) == 0.0
    # df = 1 is the Cauchy distribution: p = 1 - 2 atan(|t|) / pi.
    assert t_two_sided_pvalue(1.0, 1) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        t_two_sided_pvalue(1.0, 0)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.0, 1.0, 1.5)
