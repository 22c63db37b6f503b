import numpy as np
import pytest

from streamsel import Exponential, InvalidParameter, NormalMoment, Poisson, make_family
from streamsel.input_models import BOUNDARY_MARGIN

FAMILY_GRID = [
    (Exponential(), [0.5]),
    (Exponential(), [2.0]),
    (Poisson(), [0.7]),
    (Poisson(), [5.0]),
    (NormalMoment(), [0.0, 1.0]),
    (NormalMoment(), [1.5, 4.0]),
]


def test_exponential_sample_mean(rng):
    x = Exponential().sample(2.0, rng, size=100_000)
    assert np.all(x >= 0)
    assert abs(x.mean() - 2.0) < 0.05


def test_normal_moment_sample_moments(rng):
    x = NormalMoment().sample([0.0, 1.0], rng, size=100_000)
    assert abs(x.mean()) < 0.02
    assert abs((x**2).mean() - 1.0) < 0.02


@pytest.mark.parametrize(
    "family, theta",
    [(Poisson(), 0.0), (Exponential(), -1.0), (NormalMoment(), [1.0, 1.0]), (Exponential(), [1.0, 2.0])],
)
def test_invalid_parameters_rejected(family, theta, rng):
    with pytest.raises(InvalidParameter):
        family.sample(theta, rng)


def test_moment_maps():
    assert Exponential().moment_map(3.7).tolist() == [3.7]
    assert NormalMoment().moment_map(2.0).tolist() == [2.0, 4.0]
    assert Poisson().moment_map(0).tolist() == [0.0]
    assert NormalMoment().moment_map(np.array([1.0, 3.0])).shape == (2, 2)


def test_score_examples():
    assert Exponential().score(2.0, [2.0]).tolist() == [0.0]
    assert Poisson().score(3.0, [3.0, 3.0]).tolist() == [0.0]
    assert Exponential().score(1.0, [2.0, 0.0]).tolist() == [0.0]
    # batched: one scenario per row
    batched = Exponential().score(1.0, np.array([[2.0], [0.0]]))
    np.testing.assert_allclose(batched, [[1.0], [-1.0]])


@pytest.mark.parametrize("family, theta", FAMILY_GRID)
def test_moment_map_unbiased(family, theta):
    rng = np.random.default_rng(7)
    d = family.moment_map(family.sample(theta, rng, size=100_000))
    se = d.std(axis=0, ddof=1) / np.sqrt(d.shape[0])
    assert np.all(np.abs(d.mean(axis=0) - theta) <= 4 * se)


@pytest.mark.parametrize("family, theta", FAMILY_GRID)
def test_score_has_zero_mean(family, theta):
    rng = np.random.default_rng(8)
    draws = family.sample(theta, rng, size=(100_000, 1))
    sc = family.score(theta, draws)
    se = sc.std(axis=0, ddof=1) / np.sqrt(sc.shape[0])
    assert np.all(np.abs(sc.mean(axis=0)) <= 4 * se)


@pytest.mark.parametrize("family, theta", FAMILY_GRID)
def test_moment_cov_matches_sample(family, theta):
    rng = np.random.default_rng(9)
    d = family.moment_map(family.sample(theta, rng, size=400_000))
    np.testing.assert_allclose(np.cov(d.T).reshape(family.param_dim, -1), family.moment_cov(theta), rtol=0.05, atol=0.01)


def _fd_score(family, theta, draws, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    out = np.empty(theta.size)
    for k in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (family.logpdf(up, draws).sum() - family.logpdf(dn, draws).sum()) / (2 * h)
    return out


@pytest.mark.parametrize("family, theta", FAMILY_GRID)
def test_score_matches_finite_differences(family, theta):
    rng = np.random.default_rng(10)
    draws = family.sample(theta, rng, size=6)
    analytic = family.score(theta, draws)
    fd = _fd_score(family, theta, draws)
    assert np.all(np.abs(analytic - fd) <= 1e-4 * np.maximum(np.abs(analytic), 1e-2))


def test_projection_stays_inside():
    assert Exponential().project(-3.0)[0] == BOUNDARY_MARGIN
    projected = NormalMoment().project([1.0, 0.5])
    assert NormalMoment().is_valid(projected)
    assert projected[1] == pytest.approx(1.0 + BOUNDARY_MARGIN)
    np.testing.assert_array_equal(NormalMoment().project([1.0, 3.0]), [1.0, 3.0])


def test_support_checks():
    assert Poisson().in_support([0, 3])
    assert not Poisson().in_support([1.5])
    assert not Exponential().in_support([-0.1])


def test_make_family():
    assert isinstance(make_family("Poisson"), Poisson)
    with pytest.raises(ValueError, match="unknown input family"):
        make_family("gamma")
