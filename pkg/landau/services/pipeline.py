"""Command bodies: each takes a validated ExperimentConfig and an output
directory and leaves a run directory with a manifest behind."""
import json
import logging
import os
from typing import List, Optional, Tuple

from landau.config import BINARY_SNAPSHOT_THRESHOLD
from landau.errors import ArtifactError, ConfigError, NumericError
from landau.models import CertificateRow, ExperimentConfig, MetricsRecord
from landau.services import metrics
from landau.services.autodiff import load_checkpoint, save_checkpoint
from landau.services.baselines import (
    Trajectory,
    blob_run,
    blob_score_field,
    pinn_score_rollout,
    read_trajectory,
    reference_euler,
    resolve_steps,
    sbp_run,
    write_trajectory,
)
from landau.services.benchmarks import analytic_solution, sample_initial
from landau.services.certificates import certificate_report, certificate_times
from landau.services.config_files import flatten
from landau.services.trainer import FlowModel, ScoreModel, TrainingHistory, infer_particles, train
from landau.storage import RunStore, read_manifest

logger = logging.getLogger(__name__)

FLOW_CHECKPOINT = "flow.ckpt"
SCORE_CHECKPOINT = "score.ckpt"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
CERTIFICATE_FILE = "certificates.csv"
TRAJECTORY_FILES = ("trajectory.csv", "trajectory.bin")


def _store(config: ExperimentConfig, out_dir: str, command: str) -> RunStore:
    return RunStore(out_dir, command, flatten(config), config.seed)


# --- train --------------------------------------------------------------------

def _save_training(store: RunStore, flow: FlowModel, score: ScoreModel, history: TrainingHistory,
                   partial: bool = False) -> None:
    meta = {"t0": flow.t0, "t1": flow.t1, "partial": partial}
    save_checkpoint(store.path(FLOW_CHECKPOINT), flow.spec, flow.params, {**meta, "role": "flow"})
    save_checkpoint(store.path(SCORE_CHECKPOINT), score.spec, score.params, {**meta, "role": "score"})
    history.to_csv(store.path(HISTORY_FILE))
    for name in (FLOW_CHECKPOINT, SCORE_CHECKPOINT, HISTORY_FILE):
        store.record(name)


def cmd_train(config: ExperimentConfig, out_dir: str) -> str:
    with _store(config, out_dir, "train") as store:
        try:
            flow, score, history = train(config.train, config.benchmark)
        except NumericError as e:
            partial = getattr(e, "partial", None)
            if partial is not None:
                _save_training(store, *partial, partial=True)
            raise
        _save_training(store, flow, score, history)
        last = history.records[-1] if history.records else None
        store.summary = {
            "benchmark": config.benchmark.tag.value,
            "epochs": len(history),
            "flow_params": len(flow.params),
            "score_params": len(score.params),
            "final_loss_total": last.loss_total if last else None,
            "train_seconds": sum(r.seconds for r in history.records),
        }
    return out_dir


def load_trained(run_dir: Optional[str]) -> Tuple[FlowModel, ScoreModel]:
    if not run_dir:
        raise ConfigError("this solver needs a finished training run (--train-run or train_run=)")
    paths = [os.path.join(run_dir, name) for name in (FLOW_CHECKPOINT, SCORE_CHECKPOINT)]
    for path in paths:
        if not os.path.isfile(path):
            raise ArtifactError(f"missing checkpoint {path}")
    flow_spec, flow_params, meta = load_checkpoint(paths[0])
    score_spec, score_params, _ = load_checkpoint(paths[1])
    if meta.get("partial"):
        logger.warning("%s holds a partial (diverged) training run", run_dir)
    flow = FlowModel(flow_spec, flow_params, t0=float(meta["t0"]), t1=meta.get("t1"))
    return flow, ScoreModel(score_spec, score_params)


# --- simulate -----------------------------------------------------------------

def simulate(config: ExperimentConfig, train_run: Optional[str] = None) -> Optional[Trajectory]:
    """Trajectory at the requested snapshot times; None when no times are requested."""
    case = config.benchmark
    times = config.effective_snapshot_times
    if not times:
        return None
    solver = config.solver
    train_run = train_run or config.train_run
    if solver == "pinnpm":
        flow, _ = load_trained(train_run)
        initial = sample_initial(case, config.eval_particles, config.seed)
        clouds = [infer_particles(flow, initial, t) for t in times]
        return Trajectory(tuple(times), tuple(clouds))

    stepping = config.stepping
    initial = sample_initial(case, stepping.n_particles, config.seed)
    if solver == "reference":
        n_steps = resolve_steps(stepping, case.t0, times)
        traj = reference_euler(case, initial, stepping.dt, n_steps, case.kernel, times)
    elif solver == "sbp":
        traj = sbp_run(case, initial, stepping, times)
    elif solver == "blob":
        traj = blob_run(case, initial, stepping, times)
    else:
        _, score = load_trained(train_run)
        traj = pinn_score_rollout(score, initial, stepping, case.kernel, times)
    return traj.select(times)


def cmd_simulate(config: ExperimentConfig, out_dir: str, train_run: Optional[str] = None) -> str:
    with _store(config, out_dir, "simulate") as store:
        traj = simulate(config, train_run)
        store.summary = {"solver": config.solver, "snapshots": 0 if traj is None else len(traj)}
        if traj is not None:
            name = TRAJECTORY_FILES[1] if traj.n >= BINARY_SNAPSHOT_THRESHOLD else TRAJECTORY_FILES[0]
            write_trajectory(store.path(name), traj)
            store.record(name)
            store.summary.update({"particles": traj.n, "times": list(traj.times)})
    return out_dir


# --- evaluate -----------------------------------------------------------------

def find_trajectory(run_dir: str) -> str:
    manifest = read_manifest(run_dir)
    listed = {record.path for record in manifest.files}
    for name in TRAJECTORY_FILES:
        if name in listed:
            path = os.path.join(run_dir, name)
            if not os.path.isfile(path):
                raise ArtifactError(f"trajectory file listed in the manifest is missing: {path}")
            return path
    raise ArtifactError(f"no trajectory file in {run_dir} (expected {' or '.join(TRAJECTORY_FILES)})")


def evaluate(config: ExperimentConfig, traj: Trajectory, train_run: Optional[str] = None
             ) -> Tuple[List[MetricsRecord], List[CertificateRow]]:
    case = config.benchmark
    kernel = case.kernel
    grid = config.grid_spec
    bandwidth = config.effective_kde_bandwidth
    analytic = analytic_solution(case)
    train_run = train_run or config.train_run
    trained = load_trained(train_run) if config.solver in ("pinnpm", "pinn_score") and train_run else None
    if config.solver in ("pinnpm", "pinn_score") and trained is None:
        logger.warning("no training run given: score and certificate columns stay empty")

    reference = None
    if analytic.available:
        # Same seed, same particle count: the reference follows the same initial particles
        initial = sample_initial(case, traj.n, config.seed)
        n_steps = resolve_steps(config.stepping, case.t0, traj.times)
        reference = reference_euler(case, initial, config.stepping.dt, n_steps, kernel, traj.times)

    certs = {}
    cert_rows: List[CertificateRow] = []
    if trained is not None and config.solver == "pinnpm":
        flow, score = trained
        cert_kwargs = dict(kernel=kernel, n_particles=config.certificate_particles, seed=config.seed,
                           dt=config.stepping.dt, kde_bandwidth=bandwidth)
        for row in certificate_report(flow, score, case, list(traj.times), **cert_kwargs):
            certs[row.t] = row
        t0, t1 = config.solver_window
        cert_rows = certificate_report(
            flow, score, case, certificate_times(t0, t1, config.certificate_points, config.stepping.dt), **cert_kwargs,
        )

    records = []
    for t, cloud in zip(traj.times, traj.clouds):
        record = MetricsRecord(t=t, kinetic_energy=metrics.kinetic_energy(cloud))
        if trained is not None and config.solver == "pinnpm":
            samples = infer_particles(trained[0], sample_initial(case, config.kde_samples, config.seed + 1), t)
        else:
            samples = cloud
        if analytic.available:
            field = metrics.kde(samples, bandwidth, grid)
            record.rel_l2 = metrics.rel_l2_error(field, lambda v: analytic.density(v, t))
            record.err_traj = metrics.trajectory_error(cloud, reference.at(t))

        score = None
        if config.solver == "reference" and analytic.available:
            score = analytic.score_field()
        elif config.solver == "blob":
            score = blob_score_field(cloud, config.stepping.blob_bandwidth or case.kde_bandwidth)
        elif trained is not None:
            score = trained[1].field()
        if score is not None:
            record.entropy_proxy = metrics.entropy_decay_proxy(cloud, score, kernel)
            if analytic.available:
                record.rfd = metrics.relative_fisher_divergence(score, analytic.score_field(), cloud)

        cert = certs.get(t)
        if cert is not None:
            record.delta_phys_sq = cert.delta_phys_sq
            record.delta_2N_sq = cert.delta_2N_sq
            record.E_mse = cert.E_mse
            record.w1_coupling_bound = cert.w1_coupling_bound
            record.gronwall_rhs = cert.gronwall_rhs
            record.heuristic = cert.gronwall_rhs is not None
        records.append(record)
        logger.info("t=%g rel_l2=%s err_traj=%s energy=%.6f", t, record.rel_l2, record.err_traj, record.kinetic_energy)
    return records, cert_rows


def write_certificates_csv(path: str, rows: List[CertificateRow]) -> None:
    columns = [name for name in CertificateRow.model_fields if name != "omitted"] + ["omitted"]
    with open(path, "w", newline="") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for name in columns:
                value = getattr(row, name)
                if name == "omitted":
                    cells.append(";".join(f"{k}:{v}" for k, v in sorted(value.items())))
                else:
                    cells.append(metrics.format_cell(value))
            f.write(",".join(cells) + "\n")


def cmd_evaluate(config: ExperimentConfig, run_dir: str, out_dir: Optional[str] = None,
                 train_run: Optional[str] = None) -> str:
    """Metrics for a simulate run; returns the path of the metrics CSV."""
    traj_path = find_trajectory(run_dir)
    traj = read_trajectory(traj_path)
    out_dir = out_dir or run_dir.rstrip("/\\") + "-eval"
    with _store(config, out_dir, "evaluate") as store:
        records, cert_rows = evaluate(config, traj, train_run)
        metrics.write_metrics_csv(store.path(METRICS_FILE), records)
        store.record(METRICS_FILE)
        if cert_rows:
            write_certificates_csv(store.path(CERTIFICATE_FILE), cert_rows)
            store.record(CERTIFICATE_FILE)
        store.summary = {"source": os.path.abspath(run_dir), "rows": len(records)}
    return os.path.join(out_dir, METRICS_FILE)


# --- rate study ---------------------------------------------------------------

def cmd_rate_study(config: ExperimentConfig, out_dir: str) -> str:
    with _store(config, out_dir, "rate-study") as store:
        result = metrics.kde_rate_study(config.rate, config.seed)
        with open(store.path("rate_study.json"), "w") as f:
            json.dump(result.model_dump(), f, indent=2, sort_keys=True)
        store.record("rate_study.json")
        store.summary = {"dim": result.dim, "slope": result.slope, "expected": -4.0 / (result.dim + 6)}
    return out_dir
