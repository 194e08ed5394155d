import numpy as np
import pytest

from oracles import dense_loglik, dense_reml_penalty
from conftest import random_dataset, random_theta
from srocmeta.likelihood import (
    LOWER,
    UPPER,
    NotPositiveDefiniteError,
    Theta,
    loglik,
    objective,
    objective_terms,
    per_study_score,
    prepare,
    reml_loglik,
    reml_penalty,
)


@pytest.mark.parametrize("mode", ["pseudo", "riley"])
def test_loglik_matches_dense_oracle(rng, mode):
    for _ in range(10):
        ds = random_dataset(rng)
        th = random_theta(rng)
        assert loglik(th, ds, mode) == pytest.approx(dense_loglik(th, ds, mode), abs=1e-10)
        assert reml_penalty(th, ds, mode) == pytest.approx(dense_reml_penalty(th, ds, mode), abs=1e-10)


def test_reml_is_ml_minus_penalty(rng, small_dataset):
    th = random_theta(rng)
    assert reml_loglik(th, small_dataset) == pytest.approx(
        loglik(th, small_dataset) - reml_penalty(th, small_dataset), abs=1e-12)
    terms = objective_terms(th, small_dataset, criterion="reml")
    assert terms.sum() == pytest.approx(reml_loglik(th, small_dataset), abs=1e-10)


def test_batched_equals_single(rng, small_dataset):
    p = prepare(small_dataset, "riley")
    thetas = np.array([random_theta(rng) for _ in range(6)])
    batch = objective(thetas, p, criterion="reml")
    single = [objective(t, p, criterion="reml")[0] for t in thetas]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-11)


def test_zero_heterogeneity_and_perfect_correlation(small_dataset):
    for th in ([1, 0.5, -1, 1, 0.0, 0.0, 0.0], [1, 0.5, -1, 1, 0.4, 0.3, 1 - 1e-8]):
        assert loglik(th, small_dataset) == pytest.approx(
            dense_loglik(np.array(th, float), small_dataset, "pseudo"), abs=1e-8)


def test_not_pd_rejected(small_dataset):
    th = [1, 0.5, -1, 1, -5.0, 0.3, 0.0]
    with pytest.raises(NotPositiveDefiniteError):
        loglik(th, small_dataset)
    assert objective(np.array(th), small_dataset)[0] == -np.inf


def test_reml_singular_design():
    from srocmeta.data import StudyRecord, make_dataset
    ds = make_dataset([StudyRecord("a", [0.5], [5], [5], 10, 10),
                       StudyRecord("b", [0.5], [6], [4], 10, 10)])
    with pytest.raises(np.linalg.LinAlgError):
        reml_penalty([0, 0, -1, 1, 0.1, 0.1, 0], ds)


def test_score_sums_to_gradient(rng, small_dataset):
    th = np.array([1.0, 0.4, -2.0, 2.0, 0.3, 0.4, 0.2])
    s = per_study_score(th, small_dataset, criterion="reml")
    assert s.shape == (small_dataset.n_studies, 7)
    h = 1e-6
    for i in range(7):
        e = np.zeros(7)
        e[i] = h
        fd = (reml_loglik(th + e, small_dataset) - reml_loglik(th - e, small_dataset)) / (2 * h)
        assert s[:, i].sum() == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_theta_helpers():
    th = Theta.from_array([1, 2, -1, 1, 0.5, 0.2, 0.5])
    np.testing.assert_allclose(th.between_cov(), [[0.5, 0.5 * np.sqrt(0.1)], [0.5 * np.sqrt(0.1), 0.2]])
    assert th.violations() == []
    assert len(Theta(1, 1, 1, -1, -1, 1, 2).violations()) == 4
    with pytest.raises(ValueError):
        Theta.from_array([1, 2, 3])
    assert np.all(LOWER <= UPPER)
