import numpy as np
import pytest

from paircfr.closed_form import (
    MomentPair,
    SingularSystemError,
    block_mass,
    empirical_moments,
    empirical_weights,
    population_cad_moments,
    population_cad_weights,
    solve_least_squares,
    weight_report,
)
from paircfr.datasets import ORIGINAL, BlockLayout, PairedDataset
from paircfr.feature_model import FeatureModelSpec, SpecError, canonical_spec, generate_paircad, label_sign


def test_moments_two_samples():
    ds = PairedDataset(BlockLayout(1, 0, 0), np.array([[1.0], [-1.0]]), [1, 0], [ORIGINAL, ORIGINAL], [0, 1])
    mom = empirical_moments(ds)
    assert mom.M.tolist() == [[1.0]] and mom.mu_vec.tolist() == [1.0]


def test_moments_single_pair_cancels_context():
    ds = generate_paircad(canonical_spec(), 1, seed=4)
    mom = empirical_moments(ds)
    assert np.all(mom.mu_vec[2:] == 0.0)


def test_moments_binary_only():
    ds = generate_paircad(canonical_spec(classes=3), 9, seed=0)
    with pytest.raises(SpecError, match="binary-only"):
        empirical_moments(ds)


def test_moments_monte_carlo_unit_spec():
    spec = FeatureModelSpec.isotropic((1, 1, 1), [1.0], [1.0], [1.0])
    ds = generate_paircad(spec, 50_000, seed=1)
    xy = ds.x * label_sign(ds.labels)[:, None]
    se = xy.std(axis=0, ddof=1) / np.sqrt(len(ds))
    mom = empirical_moments(ds)
    assert abs(mom.mu_vec[0] - 1.0) <= 4 * se[0]
    assert np.all(mom.mu_vec[1:] == 0.0)


@pytest.mark.parametrize(
    "M,mu,expected",
    [([[2.0, 0.0], [0.0, 2.0]], [1.0, 0.0], [0.5, 0.0]), (np.eye(3), [0.3, -1.0, 2.0], [0.3, -1.0, 2.0])],
)
def test_solve_examples(M, mu, expected):
    w = solve_least_squares(MomentPair(np.asarray(M), np.asarray(mu), 1))
    assert np.allclose(w, expected, rtol=0, atol=1e-15)


def test_solve_singular():
    with pytest.raises(SingularSystemError) as exc:
        solve_least_squares(MomentPair(np.zeros((1, 1)), np.zeros(1), 1))
    assert exc.value.condition == np.inf
    assert solve_least_squares(MomentPair(np.zeros((1, 1)), np.ones(1), 1), ridge=0.5) == pytest.approx([2.0], rel=1e-14)


def test_solve_matches_lstsq_oracle():
    ds = generate_paircad(canonical_spec(), 500, seed=9)
    y = label_sign(ds.labels)
    oracle = np.linalg.lstsq(ds.x, y, rcond=None)[0]
    assert np.allclose(empirical_weights(ds), oracle, rtol=1e-10, atol=1e-12)


def test_population_weights_unit():
    spec = FeatureModelSpec.isotropic((1, 1, 1), [1.0], [0.7], [0.2])
    rep = population_cad_weights(spec)
    assert rep.w.tolist() == [0.5, 0.0, 0.0]
    assert rep.reference.tolist() == [1.0, 0.0, 0.0]
    assert rep.direction_cosine_r1 == 1.0


def test_population_weights_zero_signal():
    spec = FeatureModelSpec.isotropic((1, 1, 1), [0.0], [0.7], [0.2])
    rep = population_cad_weights(spec)
    assert not np.any(rep.w) and not np.any(rep.reference)


def test_population_matches_moment_solve():
    spec = FeatureModelSpec(
        BlockLayout(2, 2, 1), [1.0, -0.5], [0.3, 0.9], [0.6], [[1.0, 0.2], [0.2, 2.0]], [[1.5, 0.1], [0.1, 0.7]], [[0.4]]
    )
    exact = population_cad_weights(spec).w
    solved = solve_least_squares(population_cad_moments(spec))
    assert np.allclose(solved, exact, rtol=1e-13, atol=1e-15)


def test_exact_form_monte_carlo():
    spec = FeatureModelSpec.isotropic((1, 1, 1), [1.0], [1.0], [1.0])
    ds = generate_paircad(spec, 500_000, seed=5)
    x1, y = ds.x[:, 0], label_sign(ds.labels)
    w1 = empirical_weights(ds)[0]
    # standard error of a one-variable OLS slope
    resid = y - w1 * x1
    se = np.sqrt(np.sum(resid**2) / (len(y) - 1) / np.sum(x1**2))
    assert abs(w1 - 0.5) <= 4 * se


@pytest.mark.parametrize(
    "w,dims,expected",
    [([3, 4, 0], (1, 1, 1), (3.0, 4.0, 0.0)), ([0, 0, 0], (1, 1, 1), (0.0, 0.0, 0.0)), ([1, 1, 1, 1], (2, 2, 0), (np.sqrt(2), np.sqrt(2), 0.0))],
)
def test_block_mass(w, dims, expected):
    assert block_mass(w, BlockLayout(*dims)) == pytest.approx(expected)


def test_block_mass_length_mismatch():
    with pytest.raises(ValueError):
        block_mass([1.0, 2.0], BlockLayout(1, 1, 1))


def test_empirical_concentration_and_convergence():
    spec = canonical_spec()
    ds = generate_paircad(spec, 100_000, seed=0)
    w = empirical_weights(ds)
    rep = weight_report(w, spec)
    n1, n2, ns = rep.block_norms
    assert n2 <= 0.02 * n1 and ns <= 0.02 * n1
    assert rep.direction_cosine_r1 >= 0.999
    assert np.max(np.abs(w - population_cad_weights(spec).w)) <= 0.02


def test_originals_only_relies_on_spurious_block():
    spec = canonical_spec()
    ds = generate_paircad(spec, 100_000, seed=0).originals_only()
    n1, n2, ns = weight_report(empirical_weights(ds), spec).block_norms
    assert ns > 0.1 and n2 > 0.1
