"""Explicit-Euler particle solvers: analytic-score reference, SBP, blob and
the PINN-score rollout. All four share `euler_rollout`, so feeding them the
same score evaluator gives bitwise-identical trajectories."""
import csv
import logging
import math
import struct
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from landau.config import DRIFT_CHUNK
from landau.errors import ArtifactError, NumericError, SteppingDiverged
from landau.models import BenchmarkCase, KernelConfig, NetworkSpec, SteppingConfig
from landau.services.autodiff import AdamState, Tape, adam_step, forward, grad, init_params
from landau.services.benchmarks import analytic_solution
from landau.services.kernel import ParticleCloud, ScoreField, drift_from_scores
from landau.services.trainer import ScoreModel, ism_loss

logger = logging.getLogger(__name__)

TRAJECTORY_MAGIC = b"LNDTRAJ\x00"
TRAJECTORY_VERSION = 1

# (cloud at t_n, step index n) -> scores at the cloud's particles
ScoreProvider = Callable[[ParticleCloud, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: Tuple[float, ...]
    clouds: Tuple[ParticleCloud, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        clouds = tuple(self.clouds)
        if len(times) != len(clouds) or not times:
            raise ValueError("a trajectory needs one cloud per time and at least one snapshot")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be strictly increasing")
        shape = clouds[0].positions.shape
        if any(c.positions.shape != shape for c in clouds):
            raise ValueError("all snapshots must share N and d")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "clouds", clouds)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n(self) -> int:
        return self.clouds[0].n

    @property
    def dim(self) -> int:
        return self.clouds[0].dim

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        for i, s in enumerate(self.times):
            if abs(s - t) <= tol * max(1.0, abs(t)):
                return i
        raise KeyError(f"no snapshot at t={t} (have {list(self.times)})")

    def at(self, t: float) -> ParticleCloud:
        return self.clouds[self.index_of(t)]

    def select(self, times: Sequence[float]) -> "Trajectory":
        idx = [self.index_of(t) for t in times]
        return Trajectory(tuple(self.times[i] for i in idx), tuple(self.clouds[i] for i in idx))


def step_index(t: float, t0: float, dt: float) -> int:
    k = int(round((t - t0) / dt))
    if k < 0 or abs(t0 + k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"snapshot time {t} is not on the step grid t0={t0}, dt={dt}")
    return k


def resolve_steps(cfg: SteppingConfig, t0: float, snapshot_times: Optional[Sequence[float]]) -> int:
    if cfg.n_steps is not None:
        return cfg.n_steps
    if not snapshot_times:
        return 0
    return step_index(max(snapshot_times), t0, cfg.dt)


def euler_rollout(
    initial: ParticleCloud,
    provider: ScoreProvider,
    dt: float,
    n_steps: int,
    cfg: KernelConfig,
    snapshot_times: Optional[Sequence[float]] = None,
    solver: str = "euler",
) -> Trajectory:
    """v_{n+1} = v_n + dt U(v_n) with U built from the provider's scores.

    Records the initial cloud plus each requested snapshot time; every step
    when `snapshot_times` is None.
    """
    t0 = initial.time
    if snapshot_times is None:
        wanted = set(range(1, n_steps + 1))
    else:
        wanted = {step_index(t, t0, dt) for t in snapshot_times}
        if wanted and max(wanted) > n_steps:
            raise ValueError(f"snapshot beyond the last step ({n_steps} steps of dt={dt})")
    times = [t0]
    clouds = [initial]
    pos = initial.positions
    report = max(1, n_steps // 10)
    for n in range(n_steps):
        cloud = initial if n == 0 else ParticleCloud(positions=pos, time=t0 + n * dt)
        scores = provider(cloud, n)
        pos = pos + dt * drift_from_scores(pos, scores, cfg)
        if not np.all(np.isfinite(pos)):
            raise SteppingDiverged(n + 1, solver)
        if (n + 1) in wanted:
            t = t0 + (n + 1) * dt
            times.append(t)
            clouds.append(ParticleCloud(positions=pos, time=t))
        if (n + 1) % report == 0:
            logger.debug("%s: step %d/%d", solver, n + 1, n_steps)
    return Trajectory(tuple(times), tuple(clouds))


def frozen_provider(field: ScoreField) -> ScoreProvider:
    return lambda cloud, n: field(cloud.positions, cloud.time)


def reference_euler(
    case: BenchmarkCase,
    initial: ParticleCloud,
    dt: float,
    n_steps: int,
    cfg: Optional[KernelConfig] = None,
    snapshot_times: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Euler with the analytic score (BKW only)."""
    field = analytic_solution(case).score_field()
    return euler_rollout(initial, frozen_provider(field), dt, n_steps, cfg or case.kernel, snapshot_times, "reference")


def fit_score_ism(spec: NetworkSpec, params, cloud: ParticleCloud, iters: int, lr: float):
    """`iters` Adam steps of the ISM objective on one cloud."""
    state = AdamState.zeros(len(params), lr=lr)
    for _ in range(iters):
        tape = Tape(params)
        loss = ism_loss(ScoreModel(spec, params), [cloud], tape)
        if not math.isfinite(loss.value):
            raise NumericError(f"ISM loss became non-finite at t={cloud.time}")
        params, state = adam_step(params, grad(loss), state)
    return params


def sbp_run(
    case: BenchmarkCase,
    initial: ParticleCloud,
    cfg: SteppingConfig,
    snapshot_times: Optional[Sequence[float]] = None,
    frozen_score: Optional[ScoreField] = None,
    kernel: Optional[KernelConfig] = None,
) -> Trajectory:
    """Score-based particle method: refit the score net by ISM each step, then Euler."""
    n_steps = resolve_steps(cfg, initial.time, snapshot_times)
    kernel = kernel or case.kernel
    if frozen_score is not None:
        return euler_rollout(initial, frozen_provider(frozen_score), cfg.dt, n_steps, kernel, snapshot_times, "sbp")

    spec = NetworkSpec.from_arch(case.dim, cfg.score)
    fresh = init_params(spec, cfg.seed)
    logger.info("sbp: initial ISM fit (%d iterations) on %d particles", cfg.initial_fit_iters, initial.n)
    current = fit_score_ism(spec, fresh, initial, cfg.initial_fit_iters, cfg.initial_lr)

    def provider(cloud: ParticleCloud, n: int) -> np.ndarray:
        nonlocal current
        start = current if cfg.warm_start else fresh
        current = fit_score_ism(spec, start, cloud, cfg.fit_iters, cfg.lr)
        return forward(spec, current, cloud.positions, cloud.time)

    return euler_rollout(initial, provider, cfg.dt, n_steps, kernel, snapshot_times, "sbp")


def _blob_at(queries: np.ndarray, particles: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gradient of the regularized-entropy first variation at the queries."""
    n, d = particles.shape
    inv = 1.0 / (bandwidth * bandwidth)
    norm = (2 * math.pi * bandwidth * bandwidth) ** (-d / 2)
    sq_p = np.sum(particles * particles, axis=1)

    def mollifier(rows: np.ndarray) -> np.ndarray:
        r2 = np.sum(rows * rows, axis=1)[:, None] + sq_p[None, :] - 2.0 * rows @ particles.T
        return norm * np.exp(-0.5 * inv * np.maximum(r2, 0.0))

    chunk = max(1, DRIFT_CHUNK // n)
    # (psi * f)(v_j) for every particle; includes the self term psi(0)
    density = np.concatenate([mollifier(particles[s:s + chunk]).sum(axis=1) for s in range(0, n, chunk)])
    if np.any(density <= 0):
        raise NumericError(f"blob mollifier underflows at particle {int(np.argmin(density))}")

    out = np.empty_like(queries)
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        k = mollifier(q)
        ksum = k.sum(axis=1)
        if np.any(ksum <= 0):
            raise NumericError(f"blob mollifier underflows at query {s + int(np.argmin(ksum))} (isolated particle)")
        kw = k / density[None, :]
        first = -inv * (q * ksum[:, None] - k @ particles) / ksum[:, None]
        second = -inv * (q * kw.sum(axis=1)[:, None] - kw @ particles)
        out[s:s + chunk] = first + second
    return out


def blob_score(cloud: ParticleCloud, bandwidth: float) -> np.ndarray:
    if cloud.n < 2:
        raise ValueError("blob score needs at least two particles")
    if bandwidth <= 0:
        raise ValueError("blob bandwidth must be positive")
    return _blob_at(cloud.positions, cloud.positions, bandwidth)


def blob_score_field(cloud: ParticleCloud, bandwidth: float) -> ScoreField:
    particles = cloud.positions
    return ScoreField(lambda v, t: _blob_at(v, particles, bandwidth), "blob")


def blob_run(
    case: BenchmarkCase,
    initial: ParticleCloud,
    cfg: SteppingConfig,
    snapshot_times: Optional[Sequence[float]] = None,
    frozen_score: Optional[ScoreField] = None,
    kernel: Optional[KernelConfig] = None,
) -> Trajectory:
    n_steps = resolve_steps(cfg, initial.time, snapshot_times)
    kernel = kernel or case.kernel
    if frozen_score is not None:
        provider = frozen_provider(frozen_score)
    else:
        bandwidth = cfg.blob_bandwidth or case.kde_bandwidth
        provider = lambda cloud, n: blob_score(cloud, bandwidth)  # noqa: E731
    return euler_rollout(initial, provider, cfg.dt, n_steps, kernel, snapshot_times, "blob")


def pinn_score_rollout(
    score: Union[ScoreModel, ScoreField],
    initial: ParticleCloud,
    cfg: SteppingConfig,
    kernel: KernelConfig,
    snapshot_times: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Euler driven by a trained score network evaluated at the step times."""
    field = score.field() if isinstance(score, ScoreModel) else score
    n_steps = resolve_steps(cfg, initial.time, snapshot_times)
    return euler_rollout(initial, frozen_provider(field), cfg.dt, n_steps, kernel, snapshot_times, "pinn_score")


# --- trajectory files -----------------------------------------------------------
# CSV: header t,particle,v0..v{d-1}; one row per (snapshot, particle).
# Binary: magic(8) | version u16 | N u64 | d u16 | T u64 | times f64[T] |
#         positions f64[T*N*d], all little-endian, C order.

def write_trajectory(path: str, traj: Trajectory) -> None:
    try:
        if path.endswith(".csv"):
            with open(path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["t", "particle"] + [f"v{k}" for k in range(traj.dim)])
                for t, cloud in zip(traj.times, traj.clouds):
                    for i, row in enumerate(cloud.positions):
                        writer.writerow([repr(t), i] + [repr(float(x)) for x in row])
        else:
            with open(path, "wb") as f:
                f.write(TRAJECTORY_MAGIC)
                f.write(struct.pack("<HQHQ", TRAJECTORY_VERSION, traj.n, traj.dim, len(traj)))
                f.write(np.asarray(traj.times, dtype="<f8").tobytes())
                f.write(np.stack([c.positions for c in traj.clouds]).astype("<f8").tobytes())
    except OSError as e:
        raise ArtifactError(f"cannot write trajectory {path}: {e}") from e


def read_trajectory(path: str) -> Trajectory:
    try:
        if path.endswith(".csv"):
            groups: Dict[float, List[List[float]]] = {}
            with open(path, newline="") as f:
                reader = csv.reader(f)
                next(reader)
                for row in reader:
                    groups.setdefault(float(row[0]), []).append([float(x) for x in row[2:]])
            times = tuple(groups)
            return Trajectory(times, tuple(ParticleCloud(np.array(groups[t]), t) for t in times))
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ArtifactError(f"cannot read trajectory {path}: {e}") from e
    head = len(TRAJECTORY_MAGIC)
    if blob[:head] != TRAJECTORY_MAGIC:
        raise ArtifactError(f"{path}: not a trajectory file")
    version, n, d, count = struct.unpack("<HQHQ", blob[head:head + 20])
    if version != TRAJECTORY_VERSION:
        raise ArtifactError(f"{path}: unsupported trajectory version {version}")
    pos = head + 20
    expected = pos + 8 * count + 8 * count * n * d
    if len(blob) != expected:
        raise ArtifactError(f"{path}: truncated or oversized payload")
    times = np.frombuffer(blob[pos:pos + 8 * count], dtype="<f8").astype(np.float64)
    data = np.frombuffer(blob[pos + 8 * count:], dtype="<f8").astype(np.float64).reshape(count, n, d)
    return Trajectory(tuple(times), tuple(ParticleCloud(data[i], times[i]) for i in range(count)))
