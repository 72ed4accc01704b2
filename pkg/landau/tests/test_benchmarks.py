import math

import numpy as np
import pytest
from scipy import integrate, stats

from landau.errors import AnalyticUnavailable, DomainError, SamplingError
from landau.services import benchmarks
from landau.services.benchmarks import (
    analytic_solution,
    bkw_density,
    bkw_K,
    bkw_score,
    bkw_score_divergence,
    initial_density,
    make_case,
    sample_initial,
)


def _grid_mass(fn, d, lo=-6.0, hi=6.0, n=241):
    axis = np.linspace(lo, hi, n)
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1)
    return float(np.sum(fn(mesh)) * (axis[1] - axis[0]) ** d)


def test_bkw_k_values():
    assert bkw_K(0.0, 2) == pytest.approx(0.5)
    assert bkw_K(8.0, 2) == pytest.approx(1 - 0.5 / math.e)
    assert bkw_K(5.5, 3) == pytest.approx(1 - math.exp(-5.5 / 6))
    with pytest.raises(ValueError):
        bkw_K(1.0, 4)


@pytest.mark.parametrize("t", [0.0, 1.0, 5.0])
def test_bkw2d_density_has_unit_mass(t):
    assert _grid_mass(lambda v: bkw_density(v, t, 2), 2) == pytest.approx(1.0, abs=1e-6)


def test_bkw3d_density_has_unit_mass():
    mass = _grid_mass(lambda v: bkw_density(v, 5.5, 3), 3, lo=-7.0, hi=7.0, n=81)
    assert mass == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("d,t", [(2, 1.0), (2, 4.0), (3, 5.5), (3, 6.0)])
def test_bkw_score_matches_log_density_gradient(d, t, rng):
    v = rng.standard_normal((6, d))
    h = 1e-6
    fd = np.zeros_like(v)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fd[:, k] = (np.log(bkw_density(v + e, t, d)) - np.log(bkw_density(v - e, t, d))) / (2 * h)
    assert np.allclose(bkw_score(v, t, d), fd, atol=1e-6)


@pytest.mark.parametrize("d,t", [(2, 1.0), (3, 6.0)])
def test_bkw_divergence_matches_score_jacobian_trace(d, t, rng):
    v = rng.standard_normal((5, d))
    h = 1e-6
    fd = np.zeros(5)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fd += (bkw_score(v + e, t, d)[:, k] - bkw_score(v - e, t, d)[:, k]) / (2 * h)
    assert np.allclose(bkw_score_divergence(v, t, d), fd, atol=1e-6)


def test_bkw_domain_errors():
    with pytest.raises(DomainError):
        bkw_density(np.zeros((1, 2)), -1.0, 2)
    with pytest.raises(DomainError):
        bkw_score(np.ones((1, 3)), 0.0, 3)
    # P = 0 at t = 0 in 2D: the density vanishes at the origin
    with pytest.raises(DomainError):
        bkw_score(np.zeros((1, 2)), 0.0, 2)


def test_analytic_solution_only_for_bkw():
    sol = analytic_solution(make_case("BKW2D"))
    assert sol.available
    assert sol.score_field().provenance == "analytic"
    for tag in ("GaussianMixture3D", "Rosenbluth3D", "Anisotropic2D", "Truncated2D"):
        other = analytic_solution(make_case(tag))
        assert not other.available
        with pytest.raises(AnalyticUnavailable):
            other.score(np.zeros((1, make_case(tag).dim)), 1.0)


def test_case_defaults_and_tag_lookup():
    case = make_case("bkw3d")
    assert case.dim == 3
    assert case.c_gamma == pytest.approx(1 / 24)
    assert (case.t0, case.t1) == (5.5, 6.0)
    assert make_case("Rosenbluth3D").kernel.gamma == -3
    with pytest.raises(ValueError):
        make_case("BKW3D", t0=0.0)


@pytest.mark.parametrize("tag", ["Anisotropic2D", "Truncated2D"])
def test_initial_densities_2d_have_unit_mass(tag):
    case = make_case(tag)
    assert _grid_mass(lambda v: initial_density(case, v), 2, lo=-8.0, hi=8.0, n=641) == pytest.approx(1.0, abs=1e-2)


def test_gaussian_mixture_and_rosenbluth_mass():
    gm = make_case("GaussianMixture3D")
    assert _grid_mass(lambda v: initial_density(gm, v), 3, lo=-7.0, hi=9.0, n=121) == pytest.approx(1.0, abs=1e-3)
    rb = make_case("Rosenbluth3D")
    assert _grid_mass(lambda v: initial_density(rb, v), 3, lo=-3.5, hi=3.5, n=141) == pytest.approx(1.0, abs=5e-3)
    raw = initial_density(rb, np.array([2.0, 0.0, 0.0]), normalized=False)
    assert raw == pytest.approx(1 / 144)


@pytest.mark.parametrize("tag", ["BKW2D", "BKW3D", "GaussianMixture3D", "Rosenbluth3D", "Anisotropic2D", "Truncated2D"])
def test_samplers_are_seeded(tag):
    case = make_case(tag)
    a = sample_initial(case, 50, seed=11)
    b = sample_initial(case, 50, seed=11)
    assert a.positions.shape == (50, case.dim)
    assert a.time == case.t0
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, sample_initial(case, 50, seed=12).positions)


def test_truncated_samples_leave_the_core():
    cloud = sample_initial(make_case("Truncated2D", eta=1.0), 2000, seed=0)
    assert np.all(np.linalg.norm(cloud.positions, axis=1) > 1.0)


def test_rosenbluth_samples_sit_on_the_shell():
    cloud = sample_initial(make_case("Rosenbluth3D"), 4000, seed=0)
    r = np.linalg.norm(cloud.positions, axis=1)
    assert np.all(r <= 2.0 * (1 + 4 / math.sqrt(12.0)) + 1e-12)
    assert np.mean(r) == pytest.approx(2.16, abs=0.05)


@pytest.mark.parametrize("tag,d", [("BKW2D", 2), ("BKW3D", 3)])
def test_bkw_samples_have_energy_d(tag, d):
    cloud = sample_initial(make_case(tag), 20000, seed=3)
    assert np.mean(np.sum(cloud.positions ** 2, axis=1)) == pytest.approx(d, abs=0.1)
    assert np.all(np.abs(np.mean(cloud.positions, axis=0)) < 0.05)


def test_gaussian_mixture_axis_means():
    cloud = sample_initial(make_case("GaussianMixture3D"), 40000, seed=1)
    assert np.mean(cloud.positions[:, 0]) == pytest.approx(-0.2, abs=0.03)
    assert np.mean(cloud.positions[:, 1]) == pytest.approx(-0.1, abs=0.03)


def test_rejection_reports_a_broken_envelope():
    rng = np.random.default_rng(0)
    with pytest.raises(SamplingError):
        benchmarks._rejection(rng, 10, lambda size: np.zeros((size, 2)), lambda x: np.zeros(len(x)), "broken")


def test_sample_count_must_be_positive(bkw2d):
    with pytest.raises(ValueError):
        sample_initial(bkw2d, 0, seed=0)


def test_bkw2d_initial_radii_follow_a_gamma_law():
    # f(v) = |v|^2 exp(-|v|^2) / pi at t = 0, so |v|^2 ~ Gamma(2, 1)
    cloud = sample_initial(make_case("BKW2D"), 5000, seed=8)
    r2 = np.sum(cloud.positions ** 2, axis=1)
    assert stats.kstest(r2, "gamma", args=(2,)).pvalue > 1e-3


def test_truncated_radii_are_a_shifted_exponential():
    eta = 1.0
    cloud = sample_initial(make_case("Truncated2D", eta=eta), 5000, seed=9)
    r2 = np.sum(cloud.positions ** 2, axis=1)
    assert stats.kstest(r2 - eta ** 2, "expon", args=(0, 2)).pvalue > 1e-3


def _chi_square_pvalue(samples, grid, cdf_values, bins=16):
    """Pearson test over equal-probability bins read off a tabulated CDF."""
    levels = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    edges = np.interp(levels, cdf_values, grid)
    counts = np.bincount(np.searchsorted(edges, samples), minlength=bins)
    return stats.chisquare(counts, np.full(bins, len(samples) / bins)).pvalue


def test_gaussian_mixture_marginals_pass_chi_square():
    case = make_case("GaussianMixture3D")
    cloud = sample_initial(case, 6000, seed=21)
    grid = np.linspace(-8.0, 10.0, 20001)
    for axis, comps in enumerate(case.mixture):
        cdf = sum(w * stats.norm.cdf(grid, mean, std) for w, mean, std in comps)
        assert _chi_square_pvalue(cloud.positions[:, axis], grid, cdf) > 1e-3


def test_anisotropic_marginals_pass_chi_square():
    case = make_case("Anisotropic2D")
    cloud = sample_initial(case, 6000, seed=22)
    grid = np.linspace(-8.0, 8.0, 20001)
    for axis in range(2):
        cdf = 0.5 * stats.norm.cdf(grid, case.u1[axis]) + 0.5 * stats.norm.cdf(grid, case.u2[axis])
        assert _chi_square_pvalue(cloud.positions[:, axis], grid, cdf) > 1e-3


def test_rosenbluth_radii_pass_chi_square():
    case = make_case("Rosenbluth3D")
    cloud = sample_initial(case, 6000, seed=23)
    radii = np.linalg.norm(cloud.positions, axis=1)
    grid = np.linspace(0.0, 6.0, 20001)
    ray = np.stack([grid, np.zeros_like(grid), np.zeros_like(grid)], axis=-1)
    radial = 4 * math.pi * grid ** 2 * initial_density(case, ray)
    cdf = integrate.cumulative_trapezoid(radial, grid, initial=0.0)
    assert cdf[-1] == pytest.approx(1.0, abs=1e-3)
    assert _chi_square_pvalue(radii, grid, cdf / cdf[-1]) > 1e-3
