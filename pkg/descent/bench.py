"""Benchmark harness: synthetic datasets, multi-method runs, CSV traces, summaries."""

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import SPIRAL_CLASSES, DatasetSpec, ExperimentConfig, ModelConfig
from .errors import MalformedTrace, MetricFailure, UnknownSpec
from .linalg import as_square, as_vector, cholesky_spd, quadratic_form, spd_solve
from .models import (
    Batch,
    LinearGaussianFixedVar,
    LinearLeastSquares,
    MlpGaussianFixedVar,
    MlpLeastSquares,
    Model,
    SoftmaxClassifier,
)
from .stepper import IterationRecord, Trace, run_descent

logger = logging.getLogger(__name__)

TRACE_HEADER = ["iter", "loss", "grad_norm", "alpha", "step_norm", "constraint", "lambda_used", "wall_ms"]
THRESHOLD_SLACK = 1.05  # default threshold: 5% above the best loss seen


def fmt(x: float) -> str:
    return "%.17g" % x


# ============================== datasets


@dataclass(frozen=True)
class Dataset:
    samples: Batch
    spec: DatasetSpec
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


def _linreg(spec: DatasetSpec, rng: np.random.Generator):
    n, m = spec.input_dim, spec.output_dim
    A = rng.normal(size=(m, n)) if spec.weights is None else np.asarray(spec.weights, dtype=np.float64)
    b = rng.normal(size=m) if spec.bias is None else np.asarray(spec.bias, dtype=np.float64)
    if A.shape != (m, n) or b.shape != (m,):
        raise UnknownSpec(f"linreg weights must be {m}x{n} and bias of length {m}")
    xs = rng.uniform(-1.0, 1.0, size=(spec.size, n))
    ys = xs @ A.T + b + spec.noise * rng.standard_normal((spec.size, m))
    return xs, ys, {"A": A.tolist(), "b": b.tolist(), "x_range": [-1.0, 1.0]}


def _sine(spec: DatasetSpec, rng: np.random.Generator):
    xs = rng.uniform(0.0, 1.0, size=(spec.size, 1))
    ys = np.sin(2 * np.pi * xs) + spec.noise * rng.standard_normal((spec.size, 1))
    return xs, ys, {"x_range": [0.0, 1.0], "frequency": 1.0}


def _spiral3(spec: DatasetSpec, rng: np.random.Generator):
    xs, labels = [], []
    counts = [spec.size // SPIRAL_CLASSES + (1 if k < spec.size % SPIRAL_CLASSES else 0) for k in range(SPIRAL_CLASSES)]
    for k, count in enumerate(counts):
        r = np.linspace(0.0, 1.0, count)
        t = np.linspace(4.0 * k, 4.0 * (k + 1), count) + spec.noise * rng.standard_normal(count)
        xs.append(np.column_stack([r * np.sin(t), r * np.cos(t)]))
        labels.append(np.full(count, k))
    ys = np.eye(SPIRAL_CLASSES)[np.concatenate(labels)]
    return np.vstack(xs), ys, {"classes": SPIRAL_CLASSES, "turns": 4.0}


GENERATORS = {"linreg": _linreg, "sine": _sine, "spiral3": _spiral3}


def generate_dataset(spec: DatasetSpec, seed: Optional[int] = None) -> Dataset:
    if spec.name not in GENERATORS:
        raise UnknownSpec(f"unknown dataset spec {spec.name!r}; choose one of {sorted(GENERATORS)}")
    seed = spec.seed if seed is None else seed
    xs, ys, params = GENERATORS[spec.name](spec, np.random.default_rng(seed))
    metadata = {"spec": spec.model_dump(mode="json"), "seed": seed, "params": params}
    return Dataset(Batch(xs, ys), spec, metadata)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs, ys = dataset.samples.xs, dataset.samples.ys
    path = out / f"{dataset.spec.name}.csv"
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(xs.shape[1])] + [f"y{i}" for i in range(ys.shape[1])])
        for x, y in zip(xs, ys):
            writer.writerow([fmt(v) for v in x] + [fmt(v) for v in y])
    (out / f"{dataset.spec.name}.json").write_text(json.dumps(dataset.metadata, sort_keys=True, indent=2) + "\n")
    logger.info("wrote %d samples to %s", len(dataset), path)
    return path


# ============================== experiments


def build_model(cfg: ModelConfig, dataset: Dataset) -> Model:
    n, m = dataset.samples.xs.shape[1], dataset.samples.ys.shape[1]
    match cfg.kind:
        case "linear_gaussian":
            return LinearGaussianFixedVar(n, m, beta=cfg.beta)
        case "linear_least_squares":
            return LinearLeastSquares(n, m)
        case "mlp_gaussian":
            return MlpGaussianFixedVar(n, m, width=cfg.width or 16, beta=cfg.beta)
        case "mlp_least_squares":
            return MlpLeastSquares(n, m, width=cfg.width or 16)
        case "softmax":
            return SoftmaxClassifier(n, m, width=cfg.width)
        case _:
            raise UnknownSpec(f"unknown model {cfg.kind!r}")


def derive_seed(master: int, method: str) -> int:
    """Per-method seed; fixed hashing keeps each method's stream independent of the others."""
    digest = hashlib.sha256(f"{master}:{method}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def write_trace_csv(trace: Trace, path, timing: bool = False) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in trace.records:
            wall = r.wall_ms if timing else 0.0
            writer.writerow(
                [r.iteration] + [fmt(v) for v in (r.loss, r.grad_norm, r.alpha, r.step_norm, r.constraint, r.lam_used, wall)]
            )
    return path


def read_trace_csv(path) -> list[IterationRecord]:
    path = Path(path)
    try:
        with path.open(newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise MalformedTrace(f"cannot read trace {path}: {exc}") from exc
    if not rows or rows[0] != TRACE_HEADER:
        raise MalformedTrace(f"{path}: header must be {','.join(TRACE_HEADER)}")
    if len(rows) < 2:
        raise MalformedTrace(f"{path}: trace has no iterations")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRACE_HEADER):
            raise MalformedTrace(f"{path}:{lineno}: expected {len(TRACE_HEADER)} fields, got {len(row)}")
        try:
            it = int(row[0])
            loss, grad_norm, alpha, step_norm, constraint, lam, wall = (float(v) for v in row[1:])
        except ValueError as exc:
            raise MalformedTrace(f"{path}:{lineno}: {exc}") from exc
        if it != lineno - 2:
            raise MalformedTrace(f"{path}:{lineno}: iteration index {it} is not contiguous")
        records.append(IterationRecord(it, loss, grad_norm, alpha, step_norm, constraint, lam, wall))
    return records


@dataclass
class ExperimentResult:
    trace_paths: dict[str, Path]
    manifest_path: Path
    final_losses: dict[str, float]
    failures: dict[str, str]

    @property
    def all_failed(self) -> bool:
        return not self.trace_paths and bool(self.failures)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config.dataset)
    policy = config.policy.build()

    paths, losses, failures = {}, {}, {}
    for kind in config.methods:
        method = kind.value
        model = build_model(config.model, dataset)
        logger.info("running %s on %s (%d params, %d iterations)", method, model.name, model.param_dim, config.iterations)
        try:
            trace = run_descent(
                model,
                dataset.samples,
                kind,
                policy,
                lam=config.lam,
                iterations=config.iterations,
                batch_size=config.batch_size,
                seed=derive_seed(config.seed, method),
            )
        except MetricFailure as exc:
            logger.error("method %s failed: %s", method, exc)
            failures[method] = str(exc)
            continue
        paths[method] = write_trace_csv(trace, out / f"{method}.csv", timing=config.timing)
        losses[method] = trace.final_loss
        logger.info("%s finished, final loss %.6g", method, trace.final_loss)

    manifest = {
        "version": __version__,
        "config_hash": config.config_hash(),
        "config": config.model_dump(mode="json", exclude={"out_dir"}),
        "final_loss": losses,
        "failures": failures,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return ExperimentResult(paths, manifest_path, losses, failures)


# ============================== summaries


@dataclass(frozen=True, slots=True)
class SummaryRow:
    method: str
    final_loss: float
    iters_to_threshold: Optional[int]
    mean_alpha: float
    mean_lambda: float


def summarize(trace_paths, threshold: Optional[float] = None) -> list[SummaryRow]:
    traces = [(Path(p).stem, read_trace_csv(p)) for p in trace_paths]
    if not traces:
        raise MalformedTrace("no trace files given")
    if threshold is None:
        best = min(min(r.loss for r in records) for _, records in traces)
        threshold = best * THRESHOLD_SLACK if best >= 0 else best / THRESHOLD_SLACK
    rows = []
    for method, records in traces:
        reached = next((r.iteration for r in records if r.loss <= threshold), None)
        rows.append(
            SummaryRow(
                method=method,
                final_loss=records[-1].loss,
                iters_to_threshold=reached,
                mean_alpha=float(np.mean([r.alpha for r in records])),
                mean_lambda=float(np.mean([r.lam_used for r in records])),
            )
        )
    return sorted(rows, key=lambda r: r.final_loss)


def compare(trace_paths, threshold: Optional[float] = None) -> str:
    rows = summarize(trace_paths, threshold)
    lines = [f"{'method':<22}{'final_loss':>14}{'iters_to_thr':>14}{'mean_alpha':>14}{'mean_lambda':>14}"]
    for r in rows:
        reached = "-" if r.iters_to_threshold is None else str(r.iters_to_threshold)
        lines.append(f"{r.method:<22}{r.final_loss:>14.6g}{reached:>14}{r.mean_alpha:>14.4g}{r.mean_lambda:>14.4g}")
    return "\n".join(lines)


# ============================== step geometry demo


@dataclass(frozen=True, slots=True)
class StepGeometry:
    vanilla: np.ndarray
    metric: np.ndarray
    angle_deg: float

    def to_csv(self) -> str:
        d = self.vanilla.shape[0]
        lines = [",".join(["step"] + [f"d{i}" for i in range(d)] + ["norm", "angle_deg"])]
        for label, v, angle in (("vanilla", self.vanilla, 0.0), ("metric", self.metric, self.angle_deg)):
            lines.append(",".join([label] + [fmt(x) for x in v] + [fmt(float(np.linalg.norm(v))), fmt(angle)]))
        return "\n".join(lines) + "\n"


def _trust_region_step(g: np.ndarray, M: np.ndarray, eps: float) -> np.ndarray:
    p = -spd_solve(cholesky_spd(M), g)
    return eps / math.sqrt(quadratic_form(M, p)) * p


def demo_step_geometry(g, M, eps: float) -> StepGeometry:
    """Steps of equal ε under the Euclidean metric and under M."""
    g = as_vector(g)
    M = as_square(M)
    vanilla = _trust_region_step(g, np.eye(g.shape[0]), eps)
    shaped = _trust_region_step(g, M, eps)
    cos = float(vanilla @ shaped) / (np.linalg.norm(vanilla) * np.linalg.norm(shaped))
    angle = math.degrees(math.acos(min(1.0, max(-1.0, cos))))
    return StepGeometry(vanilla, shaped, angle)
