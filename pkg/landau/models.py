from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, field_validator, model_validator

from landau.config import COULOMB_REG_EPS


# Flat config files carry compound values as strings ("32,2", "1,2.5,5",
# "-2.5:2.5:100,-2.5:2.5:100"); these annotated types parse them on the way
# in and write the same spelling back out in JSON mode.

def _split(value: Any, sep: str = ",") -> Any:
    if isinstance(value, str):
        text = value.strip()
        if not text:
            return []
        return [part.strip() for part in text.split(sep)]
    return value


def _join_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_axes(value: Any) -> Any:
    if isinstance(value, str):
        return [tuple(part.split(":")) for part in _split(value)]
    return value


def _format_axes(axes) -> str:
    return ",".join(f"{float(lo)!r}:{float(hi)!r}:{int(n)}" for lo, hi, n in axes)


def _parse_mixture(value: Any) -> Any:
    if isinstance(value, str):
        return [[tuple(c.split(":")) for c in _split(axis, ";")] for axis in _split(value, "|")]
    return value


def _format_mixture(table) -> str:
    return "|".join(";".join(":".join(repr(float(x)) for x in comp) for comp in axis) for axis in table)


IntPair = Annotated[
    Tuple[int, int],
    BeforeValidator(_split),
    PlainSerializer(lambda p: f"{p[0]},{p[1]}", return_type=str, when_used="json"),
]
FloatPair = Annotated[
    Tuple[float, float],
    BeforeValidator(_split),
    PlainSerializer(_join_floats, return_type=str, when_used="json"),
]
FloatList = Annotated[
    List[float],
    BeforeValidator(_split),
    PlainSerializer(_join_floats, return_type=str, when_used="json"),
]
IntList = Annotated[
    List[int],
    BeforeValidator(_split),
    PlainSerializer(lambda xs: ",".join(str(int(x)) for x in xs), return_type=str, when_used="json"),
]
AxisList = Annotated[
    List[Tuple[float, float, int]],
    BeforeValidator(_parse_axes),
    PlainSerializer(_format_axes, return_type=str, when_used="json"),
]
MixtureTable = Annotated[
    List[List[Tuple[float, float, float]]],
    BeforeValidator(_parse_mixture),
    PlainSerializer(_format_mixture, return_type=str, when_used="json"),
]


class Activation(str, Enum):
    SILU = "silu"
    # Linear-map oracles in tests only
    IDENTITY = "identity"


class ArchConfig(BaseModel):
    """Widths and depths of the three blocks of a network, dimension-free."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    vel_embed: IntPair = (32, 2)
    time_embed: IntPair = (16, 1)
    trunk: IntPair = (128, 4)


class NetworkSpec(BaseModel):
    """Velocity embedding and time embedding, concatenated, then a trunk and
    an affine output layer. `input_dim` counts the joint (v, t) input."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int
    output_dim: int
    vel_embed: IntPair
    time_embed: IntPair
    trunk: IntPair
    activation: Activation = Activation.SILU

    @field_validator("vel_embed", "time_embed", "trunk")
    @classmethod
    def _positive_blocks(cls, v):
        width, depth = v
        if width < 1 or depth < 1:
            raise ValueError("width and depth must be >= 1")
        return v

    @model_validator(mode="after")
    def _dims(self):
        if self.output_dim not in (2, 3):
            raise ValueError("output_dim must be the velocity dimension (2 or 3)")
        if self.input_dim != self.output_dim + 1:
            raise ValueError("input_dim must be output_dim + 1 (velocity plus time)")
        return self

    @classmethod
    def from_arch(cls, d: int, arch: ArchConfig, activation: Activation = Activation.SILU) -> "NetworkSpec":
        return cls(
            input_dim=d + 1,
            output_dim=d,
            vel_embed=arch.vel_embed,
            time_embed=arch.time_embed,
            trunk=arch.trunk,
            activation=activation,
        )

    @property
    def velocity_dim(self) -> int:
        return self.output_dim

    def layers(self) -> List[Tuple[str, int, int]]:
        """(block-prefix, fan_in, fan_out) for every affine layer, in storage order."""
        out = []
        width, depth = self.vel_embed
        fan_in = self.velocity_dim
        for i in range(depth):
            out.append((f"vel.{i}", fan_in, width))
            fan_in = width
        t_width, t_depth = self.time_embed
        t_in = 1
        for i in range(t_depth):
            out.append((f"time.{i}", t_in, t_width))
            t_in = t_width
        fan_in = width + t_width
        width, depth = self.trunk
        for i in range(depth):
            out.append((f"trunk.{i}", fan_in, width))
            fan_in = width
        out.append(("out", fan_in, self.output_dim))
        return out

    @property
    def param_count(self) -> int:
        return sum(fan_out * fan_in + fan_out for _, fan_in, fan_out in self.layers())


class KernelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: int = 0
    c_gamma: float = Field(1.0, gt=0)
    reg_eps: float = Field(COULOMB_REG_EPS, ge=0)
    # Random particle subset for the drift sum; None means the full sum
    subsample: Optional[int] = Field(None, ge=1)

    @field_validator("gamma")
    @classmethod
    def _known_gamma(cls, v):
        if v not in (0, -3):
            raise ValueError("gamma must be 0 (Maxwell) or -3 (Coulomb)")
        return v

    @model_validator(mode="after")
    def _coulomb_needs_eps(self):
        if self.gamma == -3 and self.reg_eps <= 0:
            raise ValueError("reg_eps must be > 0 for the Coulomb kernel")
        return self


class BenchmarkTag(str, Enum):
    BKW2D = "BKW2D"
    BKW3D = "BKW3D"
    GAUSSIAN_MIXTURE_3D = "GaussianMixture3D"
    ROSENBLUTH_3D = "Rosenbluth3D"
    ANISOTROPIC_2D = "Anisotropic2D"
    TRUNCATED_2D = "Truncated2D"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value.lower() == value.strip().lower():
                    return member
        return None

    @property
    def dim(self) -> int:
        return 2 if self.value.endswith("2D") else 3

    @property
    def has_analytic_solution(self) -> bool:
        return self in (BenchmarkTag.BKW2D, BenchmarkTag.BKW3D)


DEFAULT_MIXTURE = [
    [(0.4, -2.0, 0.3), (0.6, 1.0, 0.8)],
    [(0.7, -1.0, 0.5), (0.3, 2.0, 0.4)],
    [(0.5, 0.0, 0.2), (0.5, 3.0, 1.2)],
]

# Per-benchmark defaults. BKW cases use the kernel constant for which the
# closed forms are exact solutions (1/16 in 2D, 1/24 in 3D).
CASE_DEFAULTS: Dict[BenchmarkTag, Dict[str, Any]] = {
    BenchmarkTag.BKW2D: dict(
        gamma=0, c_gamma=1.0 / 16.0, t0=0.0, t1=5.0, kde_bandwidth=0.15,
        baseline_particles=22500, snapshot_times=[1.0, 2.5, 5.0],
        grid=[(-2.5, 2.5, 100)] * 2,
    ),
    BenchmarkTag.BKW3D: dict(
        gamma=0, c_gamma=1.0 / 24.0, t0=5.5, t1=6.0, kde_bandwidth=0.15,
        baseline_particles=64000, snapshot_times=[5.5, 5.75, 6.0],
        grid=[(-4.0, 4.0, 30)] * 3,
    ),
    BenchmarkTag.GAUSSIAN_MIXTURE_3D: dict(
        gamma=0, c_gamma=1.0, t0=0.0, t1=40.0, kde_bandwidth=0.15,
        baseline_particles=64000, snapshot_times=[2.5, 15.0, 40.0],
        grid=[(-5.0, 6.0, 30)] * 3,
    ),
    BenchmarkTag.ROSENBLUTH_3D: dict(
        gamma=-3, c_gamma=1.0, t0=0.0, t1=20.0, kde_bandwidth=0.3,
        baseline_particles=27000, snapshot_times=[5.0, 10.0, 20.0],
        grid=[(-4.0, 4.0, 30)] * 3,
    ),
    BenchmarkTag.ANISOTROPIC_2D: dict(
        gamma=0, c_gamma=1.0, t0=0.0, t1=40.0, kde_bandwidth=0.3,
        baseline_particles=14400, snapshot_times=[10.0, 20.0, 40.0],
        grid=[(-5.0, 5.0, 100)] * 2,
    ),
    BenchmarkTag.TRUNCATED_2D: dict(
        gamma=0, c_gamma=1.0, t0=0.0, t1=5.0, kde_bandwidth=0.3,
        baseline_particles=14400, snapshot_times=[1.0, 2.5, 5.0],
        grid=[(-4.0, 4.0, 100)] * 2,
    ),
}


class BenchmarkCase(BaseModel):
    """One of the six benchmark configurations. Unset fields take the
    per-tag defaults from CASE_DEFAULTS."""

    model_config = ConfigDict(extra="forbid")

    tag: BenchmarkTag = BenchmarkTag.BKW2D
    t0: Optional[float] = None
    t1: Optional[float] = None
    gamma: Optional[int] = None
    c_gamma: Optional[float] = Field(None, gt=0)
    reg_eps: float = Field(COULOMB_REG_EPS, gt=0)
    # Rosenbluth shell: radius sigma, sharpness S
    sigma: float = Field(2.0, gt=0)
    sharpness: float = Field(12.0, gt=0)
    # Truncated Gaussian cut radius
    eta: float = Field(1.0, ge=0)
    u1: FloatPair = (-2.0, 1.0)
    u2: FloatPair = (0.0, -1.0)
    mixture: MixtureTable = Field(default_factory=lambda: [list(axis) for axis in DEFAULT_MIXTURE])
    kde_bandwidth: Optional[float] = Field(None, gt=0)
    baseline_particles: Optional[int] = Field(None, ge=2)
    snapshot_times: Optional[FloatList] = None
    grid: Optional[AxisList] = None

    @model_validator(mode="after")
    def _fill_defaults(self):
        for key, value in CASE_DEFAULTS[self.tag].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.gamma not in (0, -3):
            raise ValueError("gamma must be 0 or -3")
        if not self.t0 < self.t1:
            raise ValueError(f"time window must satisfy t0 < t1 (got {self.t0}, {self.t1})")
        if self.tag == BenchmarkTag.BKW3D and self.t0 <= 0:
            raise ValueError("BKW3D requires t0 > 0 (K(t0) > 0)")
        if len(self.mixture) != 3 or any(abs(sum(c[0] for c in axis) - 1.0) > 1e-9 for axis in self.mixture):
            raise ValueError("mixture needs three axes whose component weights sum to 1")
        return self

    @property
    def dim(self) -> int:
        return self.tag.dim

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(gamma=self.gamma, c_gamma=self.c_gamma, reg_eps=self.reg_eps)

    @property
    def grid_spec(self) -> "GridSpec":
        return GridSpec(axes=self.grid)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    benchmark: BenchmarkTag = BenchmarkTag.BKW2D
    n_particles: int = Field(1000, ge=2)
    n_times: int = Field(16, ge=1)
    lambda_score: float = Field(1.0, ge=0)
    epochs: int = Field(3000, ge=0)
    lr: float = Field(1e-4, gt=0)
    seed: int = 0
    # None falls back to the benchmark's window and kernel
    t0: Optional[float] = None
    t1: Optional[float] = None
    kernel: Optional[KernelConfig] = None
    time_sampling: Literal["stratified", "uniform"] = "stratified"
    resample_particles: bool = False
    ism_through_flow: bool = True
    flow: ArchConfig = ArchConfig()
    score: ArchConfig = ArchConfig()
    log_every: int = Field(50, ge=1)


class SteppingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dt: float = Field(0.01, gt=0)
    # None: run until the last snapshot time
    n_steps: Optional[int] = Field(None, ge=0)
    n_particles: int = Field(4000, ge=2)
    fit_iters: int = Field(25, ge=1)
    initial_fit_iters: int = Field(500, ge=0)
    lr: float = Field(1e-4, gt=0)
    initial_lr: float = Field(1e-3, gt=0)
    blob_bandwidth: Optional[float] = Field(None, gt=0)
    seed: int = 0
    warm_start: bool = True
    score: ArchConfig = ArchConfig(vel_embed=(32, 1), time_embed=(8, 1), trunk=(32, 3))


class GridSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    axes: AxisList

    @field_validator("axes")
    @classmethod
    def _check_axes(cls, axes):
        if len(axes) not in (2, 3):
            raise ValueError("grid must have 2 or 3 axes")
        for lo, hi, n in axes:
            if n < 2:
                raise ValueError("each axis needs at least 2 nodes")
            if not lo < hi:
                raise ValueError("axis min must be < max")
        return axes

    @classmethod
    def uniform(cls, d: int, lo: float, hi: float, count: int) -> "GridSpec":
        return cls(axes=[(lo, hi, count)] * d)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(int(n) for _, _, n in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axis_points(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, int(n)) for lo, hi, n in self.axes]

    @property
    def cell_volume(self) -> float:
        return float(np.prod([(hi - lo) / (n - 1) for lo, hi, n in self.axes]))

    def nodes(self) -> np.ndarray:
        """All grid nodes as a (size, d) array in C order (last axis fastest)."""
        mesh = np.meshgrid(*self.axis_points(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


class RateStudyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(2, ge=2, le=3)
    n_values: IntList = [1000, 3000, 10000, 30000, 100000]
    replicates: int = Field(10, ge=1)
    # eps(N) = c * N^(-1/(d+6)) unless fixed_bandwidth is set
    c: float = Field(0.8, gt=0)
    fixed_bandwidth: Optional[float] = Field(None, gt=0)
    grid_points: int = Field(80, ge=2)
    half_width: float = Field(5.0, gt=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    solver: Literal["pinnpm", "pinn_score", "sbp", "blob", "reference"] = "pinnpm"
    seed: int = 0
    benchmark: BenchmarkCase = Field(default_factory=BenchmarkCase)
    train: TrainConfig = Field(default_factory=TrainConfig)
    stepping: SteppingConfig = Field(default_factory=SteppingConfig)
    rate: RateStudyConfig = Field(default_factory=RateStudyConfig)
    # None: the benchmark's snapshot times
    snapshot_times: Optional[FloatList] = None
    grid: Optional[AxisList] = None
    kde_bandwidth: Optional[float] = Field(None, gt=0)
    # Flow-pushed samples per snapshot for KDE (PINN solvers)
    kde_samples: int = Field(100000, ge=1)
    # Particles followed for trajectory metrics
    eval_particles: int = Field(10000, ge=1)
    certificate_particles: int = Field(1000, ge=2)
    certificate_points: int = Field(11, ge=2)
    # Directory of a finished training run (pinnpm / pinn_score)
    train_run: Optional[str] = None
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistency(self):
        case = self.benchmark
        # The experiment seed and benchmark drive every solver block
        if self.train.benchmark != case.tag or self.train.seed != self.seed:
            self.train = self.train.model_copy(update={"benchmark": case.tag, "seed": self.seed})
        if self.stepping.seed != self.seed:
            self.stepping = self.stepping.model_copy(update={"seed": self.seed})
        times = self.effective_snapshot_times
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot_times must be strictly increasing")
        lo, hi = self.solver_window
        for t in times:
            if t < lo - 1e-12 or t > hi + 1e-12:
                raise ValueError(f"snapshot time {t} outside the {self.solver} window [{lo}, {hi}]")
        return self

    @property
    def effective_snapshot_times(self) -> List[float]:
        return list(self.snapshot_times if self.snapshot_times is not None else self.benchmark.snapshot_times)

    @property
    def solver_window(self) -> Tuple[float, float]:
        case = self.benchmark
        if self.solver == "pinnpm":
            t0 = self.train.t0 if self.train.t0 is not None else case.t0
            t1 = self.train.t1 if self.train.t1 is not None else case.t1
            return t0, t1
        if self.stepping.n_steps is not None:
            return case.t0, case.t0 + self.stepping.n_steps * self.stepping.dt
        return case.t0, max(case.t1, case.t0)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(axes=self.grid if self.grid is not None else self.benchmark.grid)

    @property
    def effective_kde_bandwidth(self) -> float:
        return self.kde_bandwidth if self.kde_bandwidth is not None else self.benchmark.kde_bandwidth


class HistoryRecord(BaseModel):
    step: int
    loss_phys: float
    loss_ism: float
    loss_total: float
    seconds: float = 0.0


METRICS_COLUMNS = [
    "t", "rel_l2", "err_traj", "kinetic_energy", "rfd", "entropy_proxy",
    "delta_phys_sq", "delta_2N_sq", "E_mse", "w1_coupling_bound", "gronwall_rhs", "heuristic",
]


class MetricsRecord(BaseModel):
    t: float
    rel_l2: Optional[float] = None
    err_traj: Optional[float] = None
    kinetic_energy: Optional[float] = None
    rfd: Optional[float] = None
    entropy_proxy: Optional[float] = None
    delta_phys_sq: Optional[float] = None
    delta_2N_sq: Optional[float] = None
    E_mse: Optional[float] = None
    w1_coupling_bound: Optional[float] = None
    gronwall_rhs: Optional[float] = None
    heuristic: bool = False


class CertificateRow(BaseModel):
    t: float
    delta_phys_sq: float
    ism_value: float
    ism_excess: Optional[float] = None
    ism_gap: Optional[float] = None
    delta_2N_sq: Optional[float] = None
    E_mse: Optional[float] = None
    w1_coupling_bound: Optional[float] = None
    gronwall_rhs: Optional[float] = None
    kde_bias_term: Optional[float] = None
    kde_variance_term: Optional[float] = None
    kde_trajectory_term: Optional[float] = None
    heuristic: bool = True
    # field name -> reason code for components that could not be computed
    omitted: Dict[str, str] = {}


class RateStudyResult(BaseModel):
    dim: int
    n_values: List[int]
    bandwidths: List[float]
    mse: List[float]
    bias_sq: List[float]
    variance: List[float]
    slope: float
    intercept: float


class FileRecord(BaseModel):
    path: str
    sha256: str
    bytes: int
    # False for files that embed wall-clock timings
    deterministic: bool = True


class RunManifest(BaseModel):
    command: str
    config: Dict[str, str]
    seed: int
    version: str
    created: str
    wall_time: float
    status: Literal["ok", "failed"] = "ok"
    failure: Optional[str] = None
    files: List[FileRecord] = []
    summary: Dict[str, Any] = {}


class CheckResult(BaseModel):
    name: str
    passed: bool
    seconds: float
    detail: str = ""
