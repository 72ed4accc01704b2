"""Landau collision kernel, empirical mean-field drift and conservation checks."""
import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Tuple

import numpy as np
import torch

from landau.config import DRIFT_CHUNK
from landau.errors import NumericError
from landau.models import KernelConfig

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """N x d velocities at one time; the empirical measure."""

    positions: np.ndarray
    time: float

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.ndim != 2 or pos.shape[1] not in (2, 3) or pos.shape[0] < 1:
            raise ValueError(f"positions must be N x d with N >= 1 and d in (2, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise NumericError("particle positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def moved(self, positions: np.ndarray, time: float) -> "ParticleCloud":
        return ParticleCloud(positions=positions, time=time)


@dataclass(frozen=True, eq=False)
class ScoreField:
    evaluator: Callable[[np.ndarray, float], np.ndarray]
    provenance: Literal["analytic", "neural", "blob"]

    def __call__(self, v: np.ndarray, t: float) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        out = np.asarray(self.evaluator(v, float(t)), dtype=np.float64).reshape(v.shape)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{self.provenance} score returned non-finite values at t={t}")
        return out

    def shifted(self, c) -> "ScoreField":
        c = np.asarray(c, dtype=np.float64)
        return ScoreField(lambda v, t: self.evaluator(v, t) + c, self.provenance)

    def scaled(self, a: float) -> "ScoreField":
        return ScoreField(lambda v, t: a * self.evaluator(v, t), self.provenance)


def kernel_weight(r2, cfg: KernelConfig):
    """C_gamma * r^gamma as a function of |z|^2 (r soft-cored for Coulomb)."""
    if cfg.gamma == 0:
        return cfg.c_gamma
    return cfg.c_gamma * (r2 + cfg.reg_eps ** 2) ** (cfg.gamma / 2.0)


def collision_matrix(z, cfg: KernelConfig) -> np.ndarray:
    """A(z) = C_gamma r^gamma (|z|^2 I - z z^T); z may carry leading batch axes."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    r2 = np.sum(z * z, axis=-1)[..., None, None]
    proj = r2 * np.eye(d) - z[..., :, None] * z[..., None, :]
    return kernel_weight(r2, cfg) * proj


def collision_apply(z: torch.Tensor, w: torch.Tensor, cfg: KernelConfig) -> torch.Tensor:
    """A(z) w without forming the matrix: C r^gamma (|z|^2 w - (z.w) z)."""
    r2 = (z * z).sum(-1, keepdim=True)
    zw = (z * w).sum(-1, keepdim=True)
    return kernel_weight(r2, cfg) * (r2 * w - zw * z)


def pairwise_drift(
    queries: torch.Tensor,
    query_scores: torch.Tensor,
    particles: torch.Tensor,
    particle_scores: torch.Tensor,
    cfg: KernelConfig,
) -> torch.Tensor:
    """U(q) = -(1/N) sum_j A(q - v_j)(s(q) - s(v_j)), chunked over queries.

    Works on recorded tensors, so the trainer differentiates straight through it.
    """
    n = particles.shape[0]
    rows = max(1, DRIFT_CHUNK // max(n, 1))
    parts = []
    for start in range(0, queries.shape[0], rows):
        q = queries[start:start + rows]
        z = q[:, None, :] - particles[None, :, :]
        w = query_scores[start:start + rows][:, None, :] - particle_scores[None, :, :]
        parts.append(-collision_apply(z, w, cfg).sum(dim=1) / n)
    if not parts:
        return queries.new_zeros(queries.shape)
    return torch.cat(parts, dim=0)


def _subsample(cloud: ParticleCloud, cfg: KernelConfig, rng: Optional[np.random.Generator]) -> np.ndarray:
    if cfg.subsample is None or cfg.subsample >= cloud.n:
        return cloud.positions
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = np.sort(rng.choice(cloud.n, size=cfg.subsample, replace=False))
    return cloud.positions[idx]


def empirical_drift(
    cloud: ParticleCloud,
    score: ScoreField,
    queries,
    cfg: KernelConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if not np.all(np.isfinite(queries)):
        raise NumericError("drift queries must be finite")
    particles = _subsample(cloud, cfg, rng)
    t = cloud.time
    with torch.no_grad():
        u = pairwise_drift(
            torch.tensor(queries, dtype=DTYPE),
            torch.tensor(score(queries, t), dtype=DTYPE),
            torch.tensor(particles, dtype=DTYPE),
            torch.tensor(score(particles, t), dtype=DTYPE),
            cfg,
        )
    return u.numpy()


def drift_from_scores(positions: np.ndarray, scores: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Drift at the particles themselves given per-particle scores."""
    p = torch.tensor(positions, dtype=DTYPE)
    s = torch.tensor(scores, dtype=DTYPE)
    with torch.no_grad():
        return pairwise_drift(p, s, p, s, cfg).numpy()


def conservation_residuals(cloud: ParticleCloud, score: ScoreField, cfg: KernelConfig) -> Tuple[np.ndarray, float]:
    """(sum_i U(v_i), sum_i v_i . U(v_i)); both vanish up to rounding."""
    full = cfg.model_copy(update={"subsample": None})
    u = empirical_drift(cloud, score, cloud.positions, full)
    momentum = u.sum(axis=0)
    energy = float(np.sum(cloud.positions * u))
    return momentum, energy


def drift_mismatch(score_a: ScoreField, score_b: ScoreField, cloud: ParticleCloud, queries, cfg: KernelConfig) -> np.ndarray:
    ua = empirical_drift(cloud, score_a, queries, cfg)
    ub = empirical_drift(cloud, score_b, queries, cfg)
    return np.linalg.norm(ua - ub, axis=-1)


def kernel_norm_bound(cloud: ParticleCloud, cfg: KernelConfig) -> float:
    """max_ij ||A(v_i - v_j)||_2 over the cloud's pairs.

    The spectral norm of C r^gamma (|z|^2 I - z z^T) is C r^gamma |z|^2.
    """
    pos = cloud.positions
    rows = max(1, DRIFT_CHUNK // cloud.n)
    best = 0.0
    for start in range(0, cloud.n, rows):
        z = pos[start:start + rows, None, :] - pos[None, :, :]
        r2 = np.sum(z * z, axis=-1)
        best = max(best, float(np.max(kernel_weight(r2, cfg) * r2)))
    return best
