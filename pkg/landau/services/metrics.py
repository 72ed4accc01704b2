"""KDE reconstruction on grids and the per-snapshot diagnostics."""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Union

import numpy as np

from landau.config import DRIFT_CHUNK
from landau.errors import ArtifactError
from landau.models import METRICS_COLUMNS, GridSpec, KernelConfig, MetricsRecord, RateStudyConfig, RateStudyResult
from landau.services.baselines import Trajectory
from landau.services.kernel import ParticleCloud, kernel_weight

logger = logging.getLogger(__name__)

PointsLike = Union[ParticleCloud, np.ndarray]


def _positions(points: PointsLike) -> np.ndarray:
    if isinstance(points, ParticleCloud):
        return points.positions
    return np.atleast_2d(np.asarray(points, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class DensityField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} node values, got {values.size}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite and nonnegative")
        values = values.reshape(self.grid.shape)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def mass(self) -> float:
        """Riemann sum of the field over the grid."""
        return float(self.values.sum() * self.grid.cell_volume)


def sample_density(grid: GridSpec, density: Callable[[np.ndarray], np.ndarray]) -> DensityField:
    return DensityField(grid, np.asarray(density(grid.nodes()), dtype=np.float64))


def _axis_kernels(x: np.ndarray, nodes: np.ndarray, bandwidth: float) -> np.ndarray:
    u = (nodes[None, :] - x[:, None]) / bandwidth
    return np.exp(-0.5 * u * u) / (math.sqrt(2 * math.pi) * bandwidth)


def kde(points: PointsLike, bandwidth: float, grid: GridSpec) -> DensityField:
    """Gaussian KDE (1/N) sum_i eps^-d K((v - v_i) / eps) at every grid node.

    The isotropic Gaussian factorizes over axes, so the exact sum is a
    contraction of per-axis kernel tables.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    pos = _positions(points)
    if pos.shape[1] != grid.dim:
        raise ValueError(f"points are {pos.shape[1]}-dimensional but the grid is {grid.dim}-dimensional")
    n = pos.shape[0]
    axes = grid.axis_points()
    out = np.zeros(grid.shape)
    chunk = max(1, DRIFT_CHUNK // sum(grid.shape))
    for start in range(0, n, chunk):
        tables = [_axis_kernels(pos[start:start + chunk, k], axes[k], bandwidth) for k in range(grid.dim)]
        if grid.dim == 2:
            out += tables[0].T @ tables[1]
        else:
            out += np.einsum("ia,ib,ic->abc", *tables, optimize=True)
    return DensityField(grid, out / n)


def rel_l2_error(est: DensityField, reference) -> float:
    """||est - ref|| / ||ref|| over grid nodes; reference is a field, an array or a density function."""
    if isinstance(reference, DensityField):
        if reference.grid != est.grid:
            raise ValueError("estimate and reference live on different grids")
        ref = reference.values
    elif callable(reference):
        ref = np.asarray(reference(est.grid.nodes()), dtype=np.float64).reshape(est.grid.shape)
    else:
        ref = np.asarray(reference, dtype=np.float64).reshape(est.grid.shape)
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValueError("reference density has zero norm on the grid")
    return float(np.linalg.norm(est.values - ref)) / denom


def _cloud(x: Union[Trajectory, ParticleCloud], t) -> ParticleCloud:
    return x.at(t) if isinstance(x, Trajectory) else x


def trajectory_error(pred: Union[Trajectory, ParticleCloud], ref: Union[Trajectory, ParticleCloud], t=None) -> float:
    """sum_i |v_hat_i - v_i|^2 / sum_i |v_i|^2 with matched particle identities."""
    a = _cloud(pred, t).positions
    b = _cloud(ref, t).positions
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    denom = float(np.sum(b * b))
    if denom == 0.0:
        raise ValueError("reference trajectory has zero norm")
    diff = a - b
    return float(np.sum(diff * diff)) / denom


def kinetic_energy(points: PointsLike) -> float:
    pos = _positions(points)
    return float(np.sum(pos * pos)) / (2 * pos.shape[0])


def _scores_at(score, cloud: ParticleCloud) -> np.ndarray:
    if callable(score):
        return np.asarray(score(cloud.positions, cloud.time), dtype=np.float64)
    return np.asarray(score, dtype=np.float64)


def relative_fisher_divergence(score_hat, score_ana, cloud: ParticleCloud) -> float:
    """sum |s_hat - s_ana|^2 / sum |s_ana|^2 at the cloud; scores are fields or per-particle arrays."""
    s_hat = _scores_at(score_hat, cloud)
    s_ana = _scores_at(score_ana, cloud)
    denom = float(np.sum(s_ana * s_ana))
    if denom == 0.0:
        raise ValueError("analytic score vanishes on the cloud")
    diff = s_hat - s_ana
    return float(np.sum(diff * diff)) / denom


def entropy_decay_proxy(cloud: ParticleCloud, score, cfg: KernelConfig) -> float:
    """-(1/N^2) sum_ij s_i^T A(v_i - v_j)(s_i - s_j), in its symmetrized form.

    By the symmetry of A the double sum equals
    -(1/2N^2) sum_ij (s_i - s_j)^T A_ij (s_i - s_j), which is <= 0.
    """
    pos = cloud.positions
    s = _scores_at(score, cloud)
    n = cloud.n
    rows = max(1, DRIFT_CHUNK // n)
    total = 0.0
    for start in range(0, n, rows):
        z = pos[start:start + rows, None, :] - pos[None, :, :]
        w = s[start:start + rows, None, :] - s[None, :, :]
        r2 = np.sum(z * z, axis=-1)
        zw = np.sum(z * w, axis=-1)
        quad = kernel_weight(r2, cfg) * (r2 * np.sum(w * w, axis=-1) - zw * zw)
        total += float(quad.sum())
    return -total / (2.0 * n * n)


def kde_rate_study(cfg: RateStudyConfig, seed: int = 0) -> RateStudyResult:
    """Monte-Carlo MSE of the Gaussian-sample KDE against the exact density.

    bias^2 and variance are node averages over replicates (population
    variance), so mse = bias^2 + variance.
    """
    if len(cfg.n_values) < 3:
        raise ValueError("the rate study needs at least 3 values of N")
    d = cfg.dim
    grid = GridSpec.uniform(d, -cfg.half_width, cfg.half_width, cfg.grid_points)
    nodes = grid.nodes()
    exact = ((2 * math.pi) ** (-d / 2) * np.exp(-0.5 * np.sum(nodes * nodes, axis=1))).reshape(grid.shape)

    bandwidths: List[float] = []
    mse: List[float] = []
    bias_sq: List[float] = []
    variance: List[float] = []
    for k, n in enumerate(cfg.n_values):
        eps = cfg.fixed_bandwidth if cfg.fixed_bandwidth is not None else cfg.c * n ** (-1.0 / (d + 6))
        fields = np.stack([
            kde(np.random.default_rng([seed, k, r]).standard_normal((n, d)), eps, grid).values
            for r in range(cfg.replicates)
        ])
        mean = fields.mean(axis=0)
        b2 = float(np.mean((mean - exact) ** 2))
        var = float(np.mean(fields.var(axis=0)))
        bandwidths.append(float(eps))
        bias_sq.append(b2)
        variance.append(var)
        mse.append(b2 + var)
        logger.info("rate study d=%d N=%d eps=%.4f mse=%.3e (bias^2=%.3e var=%.3e)", d, n, eps, b2 + var, b2, var)

    slope, intercept = np.polyfit(np.log(np.asarray(cfg.n_values, dtype=np.float64)), np.log(mse), 1)
    return RateStudyResult(
        dim=d, n_values=list(cfg.n_values), bandwidths=bandwidths, mse=mse,
        bias_sq=bias_sq, variance=variance, slope=float(slope), intercept=float(intercept),
    )


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(float(value))


def write_metrics_csv(path: str, records: Sequence[MetricsRecord]) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_COLUMNS)
            for r in records:
                writer.writerow([format_cell(getattr(r, c)) for c in METRICS_COLUMNS])
    except OSError as e:
        raise ArtifactError(f"cannot write metrics {path}: {e}") from e


def read_metrics_csv(path: str) -> List[MetricsRecord]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise ArtifactError(f"cannot read metrics {path}: {e}") from e
    return [MetricsRecord(**{k: v for k, v in row.items() if v != ""}) for row in rows]
