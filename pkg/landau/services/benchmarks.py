"""Closed-form BKW solutions and the initial distributions of the benchmarks."""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy import integrate

from landau.errors import AnalyticUnavailable, DomainError, SamplingError
from landau.models import BenchmarkCase, BenchmarkTag
from landau.services.kernel import ParticleCloud, ScoreField

logger = logging.getLogger(__name__)

BKW_BOX = 5.0
MIN_ACCEPTANCE = 1e-4


def make_case(tag, **overrides) -> BenchmarkCase:
    return BenchmarkCase(tag=BenchmarkTag(tag), **overrides)


# --- BKW --------------------------------------------------------------------

def bkw_K(t: float, d: int) -> float:
    if d == 2:
        return 1.0 - 0.5 * math.exp(-t / 8.0)
    if d == 3:
        return 1.0 - math.exp(-t / 6.0)
    raise ValueError(f"BKW is defined for d in (2, 3), got {d}")


def _bkw_coefficients(t: float, d: int) -> Tuple[float, float, float]:
    K = bkw_K(t, d)
    if K <= 0:
        raise DomainError(f"BKW{d}D is degenerate at t={t} (K={K})")
    P = (2 * K - 1) / K if d == 2 else (5 * K - 3) / (2 * K)
    if P < 0:
        raise DomainError(f"BKW{d}D density is negative near the origin at t={t} (K={K:.6f})")
    Q = (1 - K) / (2 * K * K)
    return K, P, Q


def bkw_density(v, t: float, d: int):
    """(2 pi K)^(-d/2) exp(-|v|^2 / 2K) (P + Q |v|^2); v is (..., d)."""
    K, P, Q = _bkw_coefficients(t, d)
    v = np.asarray(v, dtype=np.float64)
    r2 = np.sum(v * v, axis=-1)
    return (2 * math.pi * K) ** (-d / 2) * np.exp(-r2 / (2 * K)) * (P + Q * r2)


def _bkw_phi(v, t: float, d: int):
    K, P, Q = _bkw_coefficients(t, d)
    v = np.asarray(v, dtype=np.float64)
    r2 = np.sum(v * v, axis=-1, keepdims=True)
    poly = P + Q * r2
    if np.any(poly <= 0):
        raise DomainError(f"BKW{d}D density vanishes at a requested point (t={t}); score undefined")
    return v, r2, poly, K, Q


def bkw_score(v, t: float, d: int):
    """grad log f = v (-1/K + 2Q / (P + Q |v|^2))."""
    v, r2, poly, K, Q = _bkw_phi(v, t, d)
    return v * (-1.0 / K + 2 * Q / poly)


def bkw_score_divergence(v, t: float, d: int):
    v, r2, poly, K, Q = _bkw_phi(v, t, d)
    phi = -1.0 / K + 2 * Q / poly
    dphi = -2 * Q * Q / (poly * poly)
    return (d * phi + 2 * r2 * dphi)[..., 0]


# --- analytic solution handle -------------------------------------------------

@dataclass(frozen=True)
class AnalyticSolution:
    case: BenchmarkCase

    @property
    def available(self) -> bool:
        return self.case.tag.has_analytic_solution

    def _require(self):
        if not self.available:
            raise AnalyticUnavailable(f"{self.case.tag.value} has no closed-form time-dependent solution")

    def density(self, v, t: float):
        self._require()
        return bkw_density(v, t, self.case.dim)

    def score(self, v, t: float):
        self._require()
        return bkw_score(v, t, self.case.dim)

    def score_divergence(self, v, t: float):
        self._require()
        return bkw_score_divergence(v, t, self.case.dim)

    def score_field(self) -> ScoreField:
        self._require()
        d = self.case.dim
        return ScoreField(lambda v, t: bkw_score(v, t, d), "analytic")


def analytic_solution(case: BenchmarkCase) -> AnalyticSolution:
    return AnalyticSolution(case)


# --- initial densities --------------------------------------------------------

def _gauss1d(x, mean, std):
    return np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi))


def _rosenbluth_raw_radial(r, sigma: float, S: float):
    return np.exp(-S * (r - sigma) ** 2 / sigma ** 2) / S ** 2


@lru_cache(maxsize=32)
def rosenbluth_normalizer(sigma: float, S: float) -> float:
    """Mass of the unnormalized shell profile 1/S^2 exp(-S (|v|-sigma)^2 / sigma^2) in R^3."""
    upper = sigma * (1 + 12 / math.sqrt(S))
    mass, _ = integrate.quad(lambda r: 4 * math.pi * r * r * _rosenbluth_raw_radial(r, sigma, S), 0.0, upper,
                             points=[sigma], limit=200)
    return mass


def initial_density(case: BenchmarkCase, v, normalized: bool = True):
    """Initial density of a benchmark at v (shape (..., d)).

    Rosenbluth uses the 1/S^2 prefactor as given; `normalized` divides by the
    numerically computed mass.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != case.dim:
        raise ValueError(f"{case.tag.value} lives in d={case.dim}")
    tag = case.tag
    if tag in (BenchmarkTag.BKW2D, BenchmarkTag.BKW3D):
        return bkw_density(v, case.t0, case.dim)
    if tag == BenchmarkTag.GAUSSIAN_MIXTURE_3D:
        out = np.ones(v.shape[:-1])
        for axis, comps in enumerate(case.mixture):
            out = out * sum(w * _gauss1d(v[..., axis], m, s) for w, m, s in comps)
        return out
    if tag == BenchmarkTag.ROSENBLUTH_3D:
        raw = _rosenbluth_raw_radial(np.linalg.norm(v, axis=-1), case.sigma, case.sharpness)
        return raw / rosenbluth_normalizer(case.sigma, case.sharpness) if normalized else raw
    if tag == BenchmarkTag.ANISOTROPIC_2D:
        u1, u2 = np.asarray(case.u1), np.asarray(case.u2)
        bumps = np.exp(-0.5 * np.sum((v - u1) ** 2, axis=-1)) + np.exp(-0.5 * np.sum((v - u2) ** 2, axis=-1))
        return bumps / (4 * math.pi)
    if tag == BenchmarkTag.TRUNCATED_2D:
        r2 = np.sum(v * v, axis=-1)
        gauss = np.exp(-0.5 * r2) / (2 * math.pi)
        return np.where(r2 > case.eta ** 2, gauss / math.exp(-0.5 * case.eta ** 2), 0.0)
    raise AnalyticUnavailable(f"no closed-form initial density for {tag.value}")


# --- samplers -----------------------------------------------------------------

def _rejection(
    rng: np.random.Generator,
    n: int,
    propose: Callable[[int], np.ndarray],
    accept_prob: Callable[[np.ndarray], np.ndarray],
    label: str,
) -> np.ndarray:
    """Batched rejection sampling; keeps accepted proposals in draw order."""
    kept = []
    have = 0
    drawn = 0
    accepted = 0
    batch = max(4096, 2 * n)
    while have < n:
        cand = propose(batch)
        u = rng.random(batch)
        ok = u < accept_prob(cand)
        drawn += batch
        accepted += int(ok.sum())
        if drawn >= 100_000 and accepted / drawn < MIN_ACCEPTANCE:
            raise SamplingError(f"{label}: acceptance rate {accepted / drawn:.2e} below {MIN_ACCEPTANCE:g}; envelope misconfigured")
        kept.append(cand[ok])
        have += int(ok.sum())
        if accepted:
            batch = int(min(5_000_000, max(4096, 1.2 * (n - have) * drawn / accepted)))
    return np.concatenate(kept)[:n]


def _unit_vectors(rng: np.random.Generator, size: int, d: int) -> np.ndarray:
    g = rng.standard_normal((size, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _bkw_envelope_max(t: float, d: int) -> float:
    # Radial profile scanned on a coarse grid, padded by 5%
    r = np.linspace(0.0, BKW_BOX * math.sqrt(d), 4001)
    radial = bkw_density(np.stack([r] + [np.zeros_like(r)] * (d - 1), axis=-1), t, d)
    return 1.05 * float(radial.max())


def sample_initial(case: BenchmarkCase, n: int, seed: int) -> ParticleCloud:
    """n i.i.d. draws from the benchmark's initial density at t0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    d = case.dim
    tag = case.tag

    if tag in (BenchmarkTag.BKW2D, BenchmarkTag.BKW3D):
        fmax = _bkw_envelope_max(case.t0, d)
        pos = _rejection(
            rng, n,
            lambda size: rng.uniform(-BKW_BOX, BKW_BOX, size=(size, d)),
            lambda x: bkw_density(x, case.t0, d) / fmax,
            tag.value,
        )
    elif tag == BenchmarkTag.GAUSSIAN_MIXTURE_3D:
        pos = np.empty((n, 3))
        for axis, comps in enumerate(case.mixture):
            weights = np.array([c[0] for c in comps])
            which = rng.choice(len(comps), size=n, p=weights / weights.sum())
            means = np.array([c[1] for c in comps])[which]
            stds = np.array([c[2] for c in comps])[which]
            pos[:, axis] = means + stds * rng.standard_normal(n)
    elif tag == BenchmarkTag.ROSENBLUTH_3D:
        sigma, S = case.sigma, case.sharpness
        r_lo = max(0.0, sigma * (1 - 4 / math.sqrt(S)))
        r_hi = sigma * (1 + 4 / math.sqrt(S))

        def propose(size):
            u = rng.random(size)
            r = (r_lo ** 3 + u * (r_hi ** 3 - r_lo ** 3)) ** (1.0 / 3.0)
            return r[:, None] * _unit_vectors(rng, size, 3)

        pos = _rejection(
            rng, n, propose,
            lambda x: np.exp(-S * (np.linalg.norm(x, axis=1) - sigma) ** 2 / sigma ** 2),
            tag.value,
        )
    elif tag == BenchmarkTag.ANISOTROPIC_2D:
        centers = np.array([case.u1, case.u2])
        pick = rng.integers(0, 2, size=n)
        pos = centers[pick] + rng.standard_normal((n, 2))
    elif tag == BenchmarkTag.TRUNCATED_2D:
        eta2 = case.eta ** 2
        pos = _rejection(
            rng, n,
            lambda size: rng.standard_normal((size, 2)),
            lambda x: (np.sum(x * x, axis=1) > eta2).astype(np.float64),
            tag.value,
        )
    else:
        raise AnalyticUnavailable(f"no sampler for {tag.value}")

    logger.debug("sampled %d initial particles for %s (seed=%d)", n, tag.value, seed)
    return ParticleCloud(positions=pos, time=case.t0)
