"""Self-checks behind `landau verify`.

Each check raises AssertionError with a short message when an identity fails.
Checks call into their modules by qualified name (`kernel.collision_matrix`)
so a patched implementation is what gets checked.
"""
import logging
import math
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from landau.errors import LandauError
from landau.models import CheckResult, KernelConfig, NetworkSpec, RateStudyConfig
from landau.services import benchmarks, kernel, metrics, trainer
from landau.services.autodiff import Tape, affine_network, grad, init_params, output_and_divergence

logger = logging.getLogger(__name__)

KERNELS = [KernelConfig(gamma=0, c_gamma=1.0), KernelConfig(gamma=-3, c_gamma=1.0, reg_eps=0.1)]


def check_kernel_identities(samples: int = 10_000) -> str:
    rng = np.random.default_rng(11)
    for d in (2, 3):
        z = rng.standard_normal((samples, d)) * rng.uniform(0.05, 4.0, size=(samples, 1))
        w = rng.standard_normal((samples, d))
        for cfg in KERNELS:
            a = kernel.collision_matrix(z, cfg)
            scale = 1.0 + np.linalg.norm(a, axis=(-2, -1))
            assert np.array_equal(a, np.swapaxes(a, -1, -2)), f"A not symmetric (d={d}, gamma={cfg.gamma})"
            assert np.array_equal(a, kernel.collision_matrix(-z, cfg)), f"A(-z) != A(z) (d={d}, gamma={cfg.gamma})"
            null = np.linalg.norm(np.einsum("nij,nj->ni", a, z), axis=1)
            assert np.all(null <= 1e-12 * scale * np.linalg.norm(z, axis=1)), f"A(z) z != 0 (d={d}, gamma={cfg.gamma})"
            quad = np.einsum("ni,nij,nj->n", w, a, w)
            assert np.all(quad >= -1e-12 * scale), f"A not PSD (d={d}, gamma={cfg.gamma})"
    return f"{samples} samples x 2 dims x {len(KERNELS)} kernels"


def _random_score(rng: np.random.Generator, d: int) -> kernel.ScoreField:
    m = rng.standard_normal((d, d))
    c = rng.standard_normal(d)
    return kernel.ScoreField(lambda v, t: np.tanh(v @ m.T) + c - v, "neural")


def check_conservation(clouds: int = 100) -> str:
    rng = np.random.default_rng(12)
    worst = 0.0
    for k in range(clouds):
        d = 2 + k % 2
        n = int(rng.integers(2, 513))
        cloud = kernel.ParticleCloud(rng.standard_normal((n, d)) * 1.5, 0.0)
        cfg = KERNELS[k % 2]
        momentum, energy = kernel.conservation_residuals(cloud, _random_score(rng, d), cfg)
        u = kernel.empirical_drift(cloud, _random_score(rng, d), cloud.positions, cfg)
        scale = 1.0 + float(np.sum(np.abs(cloud.positions * u)))
        worst = max(worst, float(np.linalg.norm(momentum)) / scale, abs(energy) / scale)
    assert worst <= 1e-10, f"conservation residual {worst:.3e} exceeds 1e-10"
    return f"{clouds} clouds, worst scaled residual {worst:.2e}"


def _pointwise_ism(score: "trainer.ScoreModel", v: np.ndarray) -> np.ndarray:
    s, div = output_and_divergence(score.spec, score.params, v, 0.0)
    return np.sum(s * s, axis=1) + 2.0 * div


def check_hyvarinen(n: int = 100_000) -> str:
    """ISM of s = -v and s = -v + b on a standard Gaussian, through trainer.ism_loss."""
    rng = np.random.default_rng(13)
    cloud = kernel.ParticleCloud(rng.standard_normal((n, 2)), 0.0)
    oracle = trainer.ScoreModel(*affine_network(-np.eye(2), np.zeros(2)))
    shifted = trainer.ScoreModel(*affine_network(-np.eye(2), [0.3, 0.4]))

    l_oracle = trainer.ism_loss(oracle, [cloud]).value
    l_shifted = trainer.ism_loss(shifted, [cloud]).value
    base = _pointwise_ism(oracle, cloud.positions)
    diff = _pointwise_ism(shifted, cloud.positions) - base
    se_diff = diff.std(ddof=1) / math.sqrt(n)
    se_base = base.std(ddof=1) / math.sqrt(n)
    gap = l_shifted - l_oracle
    assert abs(gap - 0.25) <= 3 * se_diff, f"L(g) - L(-v) = {gap:.4f}, expected 0.25"
    assert abs(l_oracle + 2.0) <= 3 * se_base, f"L(-v) = {l_oracle:.4f}, expected -2"
    return f"gap {gap:.4f} +- {se_diff:.4f}, L(-v) {l_oracle:.4f} +- {se_base:.4f}"


def check_bkw_score(h: float = 1e-5) -> str:
    rng = np.random.default_rng(14)
    worst = 0.0
    for d, t in ((2, 1.0), (3, 6.0)):
        v = rng.uniform(-2, 2, size=(50, d))
        s = benchmarks.bkw_score(v, t, d)
        fd = np.empty_like(v)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            fd[:, k] = (np.log(benchmarks.bkw_density(v + e, t, d)) - np.log(benchmarks.bkw_density(v - e, t, d))) / (2 * h)
        worst = max(worst, float(np.max(np.abs(s - fd))))
    assert worst <= 1e-6, f"BKW score differs from d log f by {worst:.2e}"
    return f"max deviation {worst:.2e}"


def check_gradients(h: float = 1e-5) -> str:
    """total_loss gradient against central differences on a small configuration."""
    case = benchmarks.make_case("BKW2D")
    spec = NetworkSpec(input_dim=3, output_dim=2, vel_embed=(4, 1), time_embed=(2, 1), trunk=(6, 1))
    flow = trainer.FlowModel(spec, init_params(spec, 3), t0=0.0, t1=1.0)
    score = trainer.ScoreModel(spec, init_params(spec, 4))
    initial = benchmarks.sample_initial(case, 12, 5)
    times = [0.2, 0.5, 0.9]
    cfg = case.kernel

    tape = Tape(flow.params, score.params)
    analytic = grad(trainer.loss_terms(flow, score, initial, times, cfg, 1.0, True, tape).total)
    theta = tape.values()
    n_flow = len(flow.params)

    def loss_at(values: np.ndarray) -> float:
        f = trainer.FlowModel(spec, flow.params.with_values(values[:n_flow]), t0=0.0, t1=1.0)
        s = trainer.ScoreModel(spec, score.params.with_values(values[n_flow:]))
        return trainer.total_loss(f, s, initial, times, cfg).value

    fd = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        fd[k] = (loss_at(theta + e) - loss_at(theta - e)) / (2 * h)
    rel = float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12))
    assert rel <= 1e-4, f"gradient relative error {rel:.2e} over {theta.size} parameters"
    return f"{theta.size} parameters, relative error {rel:.2e}"


def check_kde_rate() -> str:
    cfg = RateStudyConfig(dim=2, n_values=[500, 2000, 8000], replicates=3, grid_points=40)
    result = metrics.kde_rate_study(cfg, seed=15)
    assert -1.0 <= result.slope <= -0.2, f"KDE rate slope {result.slope:.3f} (expected near -0.5)"
    return f"slope {result.slope:.3f}"


CHECKS: Dict[str, Callable[[], str]] = {
    "kernel_identities": check_kernel_identities,
    "conservation": check_conservation,
    "hyvarinen_identity": check_hyvarinen,
    "bkw_score": check_bkw_score,
    "gradients": check_gradients,
    "kde_rate_smoke": check_kde_rate,
}


def run_checks(names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    results = []
    for name in names or list(CHECKS):
        started = time.perf_counter()
        try:
            detail = CHECKS[name]()
            passed = True
        except (AssertionError, LandauError, ValueError) as e:
            detail = str(e)
            passed = False
        seconds = time.perf_counter() - started
        results.append(CheckResult(name=name, passed=passed, seconds=seconds, detail=detail))
        logger.log(logging.INFO if passed else logging.ERROR, "%s: %s (%.2fs) %s",
                   name, "ok" if passed else "FAILED", seconds, detail)
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  seconds  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'ok    ' if r.passed else 'FAILED'}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
