"""Joint global-in-time training of the flow map and the score network.

The flow uses the displacement ansatz Phi(v0, t) = v0 + (t - t0) NN(v0, t), so
the initial condition holds for every parameter value. Each step samples
collocation times, builds

    L = (1 / N_t N) sum_k sum_i |dPhi/dt - U(Phi)|^2 + lambda * ISM

on one tape over the concatenated (flow, score) parameters, and takes one
joint Adam step.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from landau.errors import ArtifactError, NumericError, TrainingDiverged
from landau.models import BenchmarkCase, HistoryRecord, KernelConfig, NetworkSpec, TrainConfig
from landau.services.autodiff import (
    AdamState,
    DifferentiableScalar,
    ParameterSet,
    Tape,
    adam_step,
    forward,
    grad,
    init_params,
    output_and_divergence,
    time_derivative,
)
from landau.services.benchmarks import make_case, sample_initial
from landau.services.kernel import DTYPE, ParticleCloud, ScoreField, pairwise_drift

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FlowModel:
    spec: NetworkSpec
    params: ParameterSet
    t0: float
    t1: Optional[float] = None

    def positions(self, v0, t: float) -> np.ndarray:
        v0 = np.asarray(v0, dtype=np.float64)
        return v0 + (t - self.t0) * forward(self.spec, self.params, v0, t)


@dataclass(frozen=True, eq=False)
class ScoreModel:
    spec: NetworkSpec
    params: ParameterSet

    def __call__(self, v, t: float) -> np.ndarray:
        return forward(self.spec, self.params, v, t)

    def field(self) -> ScoreField:
        return ScoreField(lambda v, t: forward(self.spec, self.params, v, t), "neural")


@dataclass
class TrainingHistory:
    records: List[HistoryRecord] = field(default_factory=list)

    # seconds is not written
    COLUMNS = ("step", "loss_phys", "loss_ism", "loss_total")

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("history steps must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.step, repr(r.loss_phys), repr(r.loss_ism), repr(r.loss_total)])

    @classmethod
    def from_csv(cls, path: str) -> "TrainingHistory":
        try:
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
        except OSError as e:
            raise ArtifactError(f"cannot read history {path}: {e}") from e
        return cls([HistoryRecord(**row) for row in rows])


@dataclass(frozen=True)
class LossTerms:
    physics: DifferentiableScalar
    ism: DifferentiableScalar
    total: DifferentiableScalar

    def values(self) -> dict:
        return {"loss_phys": self.physics.value, "loss_ism": self.ism.value, "loss_total": self.total.value}


@dataclass(frozen=True, eq=False)
class RecordedArray:
    tensor: torch.Tensor
    tape: Tape

    def numpy(self) -> np.ndarray:
        return self.tensor.detach().numpy().copy()


def _flow_eval(flow: FlowModel, theta: torch.Tensor, v0: torch.Tensor, t: float):
    """(Phi(v0, t), dPhi/dt) as recorded tensors."""
    nn, nn_t = time_derivative(flow.spec, theta, v0, t)
    tau = t - flow.t0
    return v0 + tau * nn, nn + tau * nn_t


def _residual_and_ism(flow, score, theta_f, theta_s, v0, t, cfg: KernelConfig, ism_through_flow: bool):
    pos, vel = _flow_eval(flow, theta_f, v0, t)
    s, div = output_and_divergence(score.spec, theta_s, pos, t)
    rho = vel - pairwise_drift(pos, s, pos, s, cfg)
    if not ism_through_flow:
        s, div = output_and_divergence(score.spec, theta_s, pos.detach(), t)
    ism = (s * s).sum() + 2.0 * div.sum()
    return rho, ism


def infer_particles(flow: FlowModel, initial: ParticleCloud, t: float) -> ParticleCloud:
    """Particles at time t from a single flow evaluation (no time stepping)."""
    hi = flow.t1 if flow.t1 is not None else math.inf
    if t < flow.t0 or t > hi:
        logger.warning("inference at t=%s outside the training window [%s, %s]", t, flow.t0, flow.t1)
    return ParticleCloud(positions=flow.positions(initial.positions, t), time=t)


def physics_residuals(
    flow: FlowModel,
    score: ScoreModel,
    initial: ParticleCloud,
    times: Sequence[float],
    cfg: KernelConfig,
    tape: Optional[Tape] = None,
) -> RecordedArray:
    """rho_i(t_k) = dPhi/dt(V_i, t_k) - U(Phi(V_i, t_k)), shape (N_t, N, d)."""
    tape = tape or Tape(flow.params, score.params)
    v0 = torch.tensor(initial.positions, dtype=DTYPE)
    rows = []
    for t in times:
        pos, vel = _flow_eval(flow, tape.params(0), v0, float(t))
        s = forward(score.spec, tape.params(1), pos, float(t))
        rows.append(vel - pairwise_drift(pos, s, pos, s, cfg))
    return RecordedArray(torch.stack(rows), tape)


def ism_loss(score: ScoreModel, clouds: Sequence[Union[ParticleCloud, Tuple[ParticleCloud, float]]],
             tape: Optional[Tape] = None) -> DifferentiableScalar:
    """(1 / N_t N) sum (|s|^2 + 2 div s) over the given clouds."""
    if not clouds:
        raise ValueError("ism_loss needs at least one cloud")
    tape = tape or Tape(score.params)
    total = None
    count = 0
    for entry in clouds:
        cloud, t = entry if isinstance(entry, tuple) else (entry, entry.time)
        s, div = output_and_divergence(score.spec, tape.params(0), cloud.positions, float(t))
        term = (s * s).sum() + 2.0 * div.sum()
        total = term if total is None else total + term
        count += cloud.n
    return tape.scalar(total / count)


def loss_terms(
    flow: FlowModel,
    score: ScoreModel,
    initial: ParticleCloud,
    times: Sequence[float],
    cfg: KernelConfig,
    lambda_score: float = 1.0,
    ism_through_flow: bool = True,
    tape: Optional[Tape] = None,
) -> LossTerms:
    if len(times) == 0:
        raise ValueError("need at least one collocation time")
    tape = tape or Tape(flow.params, score.params)
    v0 = torch.tensor(initial.positions, dtype=DTYPE)
    phys = None
    ism = None
    for t in times:
        rho, ism_t = _residual_and_ism(flow, score, tape.params(0), tape.params(1), v0, float(t), cfg, ism_through_flow)
        sq = (rho * rho).sum()
        phys = sq if phys is None else phys + sq
        ism = ism_t if ism is None else ism + ism_t
    norm = float(len(times) * initial.n)
    phys = phys / norm
    ism = ism / norm
    return LossTerms(
        physics=tape.scalar(phys),
        ism=tape.scalar(ism),
        total=tape.scalar(phys + lambda_score * ism),
    )


def total_loss(
    flow: FlowModel,
    score: ScoreModel,
    initial: ParticleCloud,
    times: Sequence[float],
    cfg: KernelConfig,
    lambda_score: float = 1.0,
    ism_through_flow: bool = True,
) -> DifferentiableScalar:
    return loss_terms(flow, score, initial, times, cfg, lambda_score, ism_through_flow).total


def sample_times(rng: np.random.Generator, n: int, t0: float, t1: float, mode: str = "stratified") -> np.ndarray:
    if mode == "uniform":
        return np.sort(t0 + (t1 - t0) * rng.random(n))
    return t0 + (t1 - t0) * (np.arange(n) + rng.random(n)) / n


def build_models(config: TrainConfig, case: BenchmarkCase) -> Tuple[FlowModel, ScoreModel]:
    t0 = config.t0 if config.t0 is not None else case.t0
    t1 = config.t1 if config.t1 is not None else case.t1
    flow_spec = NetworkSpec.from_arch(case.dim, config.flow)
    score_spec = NetworkSpec.from_arch(case.dim, config.score)
    flow = FlowModel(flow_spec, init_params(flow_spec, config.seed), t0=t0, t1=t1)
    score = ScoreModel(score_spec, init_params(score_spec, config.seed + 1))
    return flow, score


def train(config: TrainConfig, case: Optional[BenchmarkCase] = None) -> Tuple[FlowModel, ScoreModel, TrainingHistory]:
    case = case or make_case(config.benchmark)
    kernel = config.kernel or case.kernel
    flow, score = build_models(config, case)
    t0, t1 = flow.t0, flow.t1
    if not t0 < t1:
        raise ValueError(f"training window must satisfy t0 < t1 (got {t0}, {t1})")

    initial = sample_initial(case, config.n_particles, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState.zeros(len(flow.params) + len(score.params), lr=config.lr)
    history = TrainingHistory()
    logger.info(
        "training %s: N=%d N_t=%d epochs=%d params=%d+%d",
        case.tag.value, config.n_particles, config.n_times, config.epochs, len(flow.params), len(score.params),
    )

    for step in range(config.epochs):
        started = time.perf_counter()
        try:
            if config.resample_particles and step > 0:
                initial = sample_initial(case, config.n_particles, int(rng.integers(2 ** 31)))
            times = sample_times(rng, config.n_times, t0, t1, config.time_sampling)
            tape = Tape(flow.params, score.params)
            terms = loss_terms(flow, score, initial, times, kernel, config.lambda_score, config.ism_through_flow, tape)
            components = terms.values()
            if not all(math.isfinite(v) for v in components.values()):
                raise TrainingDiverged(step, components)
            g = grad(terms.total)
            values, state = adam_step(np.concatenate([flow.params.values, score.params.values]), g, state)
        except NumericError as e:
            e.partial = (flow, score, history)
            raise
        flow_values, score_values = tape.split(values)
        flow = replace(flow, params=flow.params.with_values(flow_values))
        score = replace(score, params=score.params.with_values(score_values))
        history.append(HistoryRecord(step=step, seconds=time.perf_counter() - started, **components))
        if step % config.log_every == 0 or step == config.epochs - 1:
            logger.info(
                "step %d: phys=%.4e ism=%.4e total=%.4e",
                step, components["loss_phys"], components["loss_ism"], components["loss_total"],
            )
    return flow, score, history
