import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from srocmeta.data import StudyRecord, to_logits
from srocmeta.within import diagonalize, multinomial_cov, study_within_cov


def mc_logit_cov(rng, se, n, reps):
    """Empirical covariance of logit cumulative proportions and its entrywise MC SE."""
    se = np.asarray(se)
    cells = np.r_[1 - se[0], -np.diff(se), se[-1]]
    counts = rng.multinomial(n, cells, size=reps)
    # exceedance counts: subjects in the cells above each threshold
    exceed = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1][:, 1:]
    y = logit(exceed / n)
    c = y - y.mean(axis=0)
    prod = np.einsum("ri,rj->rij", c, c)
    return prod.mean(axis=0), prod.std(axis=0) / np.sqrt(reps)


def test_m1_reduces_to_plugin_variance():
    w = multinomial_cov([0.8], [0.7], 50, 40)
    assert w.omega1[0, 0] == pytest.approx(1 / (50 * 0.8 * 0.2))
    assert w.omega0[0, 0] == pytest.approx(1 / (40 * 0.7 * 0.3))


def test_closed_form_entries():
    se = np.array([0.9, 0.6, 0.3])
    w = multinomial_cov(se, [0.2, 0.5, 0.9], 100, 80)
    assert w.omega1[0, 2] == pytest.approx(1 / (100 * 0.9 * 0.7))
    assert w.omega1[1, 2] == pytest.approx(1 / (100 * 0.6 * 0.7))
    assert w.omega0[0, 2] == pytest.approx(1 / (80 * 0.9 * 0.8))
    np.testing.assert_allclose(w.omega1, w.omega1.T)
    np.testing.assert_allclose(np.diag(w.omega1), 1 / (100 * se * (1 - se)))


def test_cross_block_zero():
    w = multinomial_cov([0.9, 0.6], [0.3, 0.8], 30, 30)
    b = w.block()
    assert np.all(b[:2, 2:] == 0) and np.all(b[2:, :2] == 0)


def test_errors():
    with pytest.raises(ValueError, match="boundary"):
        multinomial_cov([1.0, 0.5], [0.2, 0.3], 10, 10)
    with pytest.raises(ValueError, match="non-increasing"):
        multinomial_cov([0.4, 0.5], [0.2, 0.3], 10, 10)
    with pytest.raises(ValueError, match="non-decreasing"):
        multinomial_cov([0.5, 0.4], [0.3, 0.2], 10, 10)


def test_empty_cell_keeps_diagonal_and_is_pd():
    rec = StudyRecord("s", [1, 2, 3, 4], [22, 22, 17, 10], [12, 13, 16, 16], 23, 16)
    s = to_logits(rec)
    w = study_within_cov(s, "full")
    np.testing.assert_allclose(np.diag(w.omega1), s.var1, rtol=1e-14)
    np.testing.assert_allclose(np.diag(w.omega0), s.var0, rtol=1e-14)
    for om in (w.omega1, w.omega0):
        np.testing.assert_allclose(om, om.T)
        assert np.linalg.eigvalsh(om).min() > 0
        assert np.all(om > 0)
    corr = w.omega1 / np.sqrt(np.outer(s.var1, s.var1))
    assert corr[0, 1] < 1


def test_no_empty_cell_matches_formula_exactly():
    se = np.array([0.9, 0.7, 0.4])
    w = multinomial_cov(se, [0.1, 0.5, 0.6], 40, 40)
    expected = 1 / (40 * np.maximum.outer(se, se) * (1 - np.minimum.outer(se, se)))
    assert np.array_equal(w.omega1, expected)


def test_diagonalize_and_structure(small_dataset):
    s = small_dataset.studies[0]
    d = study_within_cov(s, "diagonal")
    f = study_within_cov(s, "full")
    np.testing.assert_array_equal(diagonalize(f).omega1, d.omega1)
    with pytest.raises(ValueError):
        study_within_cov(s, "banded")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(5, 500), st.integers(0, 10_000))
def test_full_is_pd_with_nonnegative_entries(m, n, seed):
    rng = np.random.default_rng(seed)
    se = np.sort(rng.integers(0, n + 1, size=m))[::-1]
    sp = np.sort(rng.integers(0, n + 1, size=m))
    s = to_logits(StudyRecord("h", np.arange(m, dtype=float), se, sp, n, n))
    w = study_within_cov(s, "full")
    for om, var in ((w.omega1, s.var1), (w.omega0, s.var0)):
        assert np.linalg.eigvalsh(om).min() > 0
        assert np.all(om >= 0)
        np.testing.assert_allclose(np.diag(om), var, rtol=1e-14)


def test_matches_monte_carlo_large_n(rng):
    n = 50_000
    se = np.array([0.8, 0.55, 0.2])
    emp, mcse = mc_logit_cov(rng, se, n, 100_000)
    w = multinomial_cov(se, [0.5], n, 10)
    assert np.all(np.abs(w.omega1 - emp) <= 3 * mcse)


@pytest.mark.xfail(strict=True, reason="first-order delta method is biased at small n; "
                                        "the error is far above MC noise for n in [50, 500]")
def test_matches_monte_carlo_small_n(rng):
    n = 80
    se = np.array([0.8, 0.55, 0.2])
    emp, mcse = mc_logit_cov(rng, se, n, 200_000)
    w = multinomial_cov(se, [0.5], n, 10)
    assert np.all(np.abs(w.omega1 - emp) <= 3 * mcse)


def test_delta_error_shrinks_with_n(rng):
    se = np.array([0.8, 0.55, 0.2])
    errs = []
    for n in (100, 1000, 10_000):
        emp, _ = mc_logit_cov(rng, se, n, 100_000)
        w = multinomial_cov(se, [0.5], n, 10)
        errs.append(np.max(np.abs(w.omega1 / emp - 1)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02
