import numpy as np
import pytest
import torch

from landau.errors import NumericError
from landau.models import KernelConfig
from landau.services import kernel
from landau.services.benchmarks import analytic_solution
from landau.services.kernel import (
    ParticleCloud,
    ScoreField,
    collision_apply,
    collision_matrix,
    conservation_residuals,
    drift_mismatch,
    drift_from_scores,
    empirical_drift,
    kernel_norm_bound,
)

MAXWELL = KernelConfig()
COULOMB = KernelConfig(gamma=-3, reg_eps=0.1)


@pytest.mark.parametrize("cfg", [MAXWELL, COULOMB])
def test_collision_matrix_identities(cfg, rng):
    z = rng.standard_normal((10, 3))
    a = collision_matrix(z, cfg)
    assert np.allclose(a, np.swapaxes(a, -1, -2))
    assert np.allclose(a, collision_matrix(-z, cfg))
    assert np.allclose(np.einsum("nij,nj->ni", a, z), 0.0, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(a) >= -1e-12)


def test_collision_apply_matches_matrix(rng):
    z = rng.standard_normal((7, 2))
    w = rng.standard_normal((7, 2))
    for cfg in (MAXWELL, COULOMB):
        dense = np.einsum("nij,nj->ni", collision_matrix(z, cfg), w)
        applied = collision_apply(torch.tensor(z), torch.tensor(w), cfg).numpy()
        assert np.allclose(applied, dense, rtol=1e-12, atol=1e-14)


def test_two_particle_drift_by_hand():
    positions = np.array([[1.0, 0.0], [0.0, 0.0]])
    scores = np.array([[0.0, 1.0], [0.0, 0.0]])
    u = drift_from_scores(positions, scores, MAXWELL)
    assert np.allclose(u, [[0.0, -0.5], [0.0, 0.5]])


def test_chunked_drift_matches_single_chunk(monkeypatch, small_cloud, bkw2d):
    score = analytic_solution(bkw2d).score_field()
    whole = empirical_drift(small_cloud, score, small_cloud.positions, bkw2d.kernel)
    monkeypatch.setattr(kernel, "DRIFT_CHUNK", 50)
    chunked = empirical_drift(small_cloud, score, small_cloud.positions, bkw2d.kernel)
    assert np.allclose(chunked, whole, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("cfg", [MAXWELL, COULOMB])
def test_drift_conserves_momentum_and_energy(cfg, rng):
    cloud = ParticleCloud(positions=rng.standard_normal((40, 3)), time=0.0)
    score = ScoreField(lambda v, t: -v + 0.3 * np.sin(v), "analytic")
    momentum, energy = conservation_residuals(cloud, score, cfg)
    assert np.all(np.abs(momentum) <= 1e-10)
    assert abs(energy) <= 1e-10


def test_subsampled_drift_is_seeded(small_cloud, bkw2d):
    score = analytic_solution(bkw2d).score_field()
    cfg = bkw2d.kernel.model_copy(update={"subsample": 10})
    a = empirical_drift(small_cloud, score, [[0.1, 0.2]], cfg, rng=np.random.default_rng(5))
    b = empirical_drift(small_cloud, score, [[0.1, 0.2]], cfg, rng=np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert a.shape == (1, 2)


def test_kernel_norm_bound_maxwell():
    cloud = ParticleCloud(positions=np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 0.0]]), time=0.0)
    assert kernel_norm_bound(cloud, MAXWELL) == pytest.approx(25.0)


def test_non_finite_score_is_rejected(small_cloud):
    score = ScoreField(lambda v, t: np.full_like(v, np.nan), "neural")
    with pytest.raises(NumericError):
        empirical_drift(small_cloud, score, small_cloud.positions, MAXWELL)


def test_particle_cloud_validation():
    with pytest.raises(ValueError):
        ParticleCloud(positions=np.zeros((3, 4)), time=0.0)
    with pytest.raises(NumericError):
        ParticleCloud(positions=np.array([[np.inf, 0.0]]), time=0.0)
    cloud = ParticleCloud(positions=np.zeros((2, 2)), time=1)
    assert cloud.n == 2 and cloud.dim == 2 and cloud.time == 1.0
    with pytest.raises(ValueError):
        cloud.positions[0, 0] = 1.0


def test_coulomb_weight_is_soft_cored():
    near = kernel.kernel_weight(0.0, COULOMB)
    assert near == pytest.approx(0.1 ** -3)
    assert kernel.kernel_weight(1.0, MAXWELL) == 1.0


def _smooth_score(m):
    return ScoreField(lambda v, t: np.tanh(v @ m.T) - v, "analytic")


def test_drift_mismatch_examples(rng):
    cloud = ParticleCloud(positions=rng.standard_normal((30, 2)), time=0.0)
    queries = rng.standard_normal((12, 2))
    score = _smooth_score(rng.standard_normal((2, 2)))
    for cfg in (MAXWELL, COULOMB):
        assert np.array_equal(drift_mismatch(score, score, cloud, queries, cfg), np.zeros(12))
        shifted = drift_mismatch(score, score.shifted([0.7, -1.3]), cloud, queries, cfg)
        assert np.allclose(shifted, 0.0, atol=1e-12)
        doubled = drift_mismatch(score, score.scaled(2.0), cloud, queries, cfg)
        own = np.linalg.norm(empirical_drift(cloud, score, queries, cfg), axis=1)
        assert np.allclose(doubled, own, rtol=1e-12, atol=1e-15)


def test_drift_is_linear_in_the_score(rng):
    cloud = ParticleCloud(positions=rng.standard_normal((25, 3)), time=0.0)
    first = _smooth_score(rng.standard_normal((3, 3)))
    second = _smooth_score(rng.standard_normal((3, 3)))
    mixed = ScoreField(lambda v, t: 0.4 * first(v, t) - 1.5 * second(v, t), "analytic")
    for cfg in (MAXWELL, COULOMB):
        u = empirical_drift(cloud, mixed, cloud.positions, cfg)
        expected = 0.4 * empirical_drift(cloud, first, cloud.positions, cfg) \
            - 1.5 * empirical_drift(cloud, second, cloud.positions, cfg)
        assert np.allclose(u, expected, rtol=0, atol=1e-12 * (1 + np.abs(expected).max()))
