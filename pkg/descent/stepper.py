"""Per-iteration solution of

    min_δθ ∇L(θ)ᵀδθ   subject to   δθᵀ M(θ) δθ ≤ ε²

whose unique solution is δθ = −α M⁻¹∇L with α = ε / √(∇LᵀM⁻¹∇L), plus the
descent loop that strings those steps together.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import DimensionMismatch, LineSearchFailed, MetricFailure, NotPositiveDefinite
from .linalg import SpdFactor, as_vector, cholesky_spd, quadratic_form, spd_solve
from .metrics import DampedMetric, MetricKind, build_metric, default_damping
from .models import Array, Batch, Model, batch_gradient, batch_loss

logger = logging.getLogger(__name__)

ZERO_GRADIENT_TOL = 1e-14  # scaled by √d
DAMPING_GROWTH = 10.0
MAX_DAMPING_RETRIES = 6


# ============================== step policies


@dataclass(frozen=True, slots=True)
class TrustRegion:
    eps: float
    decay: float = 0.0  # ε_k = ε / (1 + decay·k)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"trust-region radius must be positive, got {self.eps}")
        if self.decay < 0:
            raise ValueError(f"radius decay must be non-negative, got {self.decay}")

    def radius(self, iteration: int) -> float:
        return self.eps / (1.0 + self.decay * iteration)


@dataclass(frozen=True, slots=True)
class FixedRate:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"learning rate must be positive, got {self.alpha}")


@dataclass(frozen=True, slots=True)
class LineSearch:
    alpha0: float = 1.0
    shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError(f"initial step must be positive, got {self.alpha0}")
        if not 0 < self.shrink < 1:
            raise ValueError(f"shrink factor must lie in (0, 1), got {self.shrink}")
        if not 0 < self.armijo_c < 1:
            raise ValueError(f"Armijo constant must lie in (0, 1), got {self.armijo_c}")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be non-negative")


StepPolicy = Union[TrustRegion, FixedRate, LineSearch]


@dataclass(frozen=True, slots=True)
class StepResult:
    delta: Array
    alpha: float
    constraint_value: float  # δθᵀ M_eff δθ
    gradient_norm: float
    direction: Array  # −M_eff⁻¹ g
    metric_kind: MetricKind
    lam_used: float
    backtracks: int = 0

    @property
    def step_norm(self) -> float:
        return float(np.linalg.norm(self.delta))


def _null_step(d: int, gnorm: float, metric: DampedMetric, direction: Optional[Array] = None, backtracks: int = 0):
    return StepResult(
        delta=np.zeros(d),
        alpha=0.0,
        constraint_value=0.0,
        gradient_norm=gnorm,
        direction=np.zeros(d) if direction is None else direction,
        metric_kind=metric.kind,
        lam_used=metric.lam,
        backtracks=backtracks,
    )


def _backtrack(g: Array, direction: Array, policy: LineSearch, loss_probe) -> tuple[float, int]:
    base = float(loss_probe(np.zeros_like(direction)))
    slope = float(g @ direction)
    alpha = policy.alpha0
    for k in range(policy.max_backtracks + 1):
        # NaN compares false, so a blown-up probe counts as a rejection
        if loss_probe(alpha * direction) <= base + policy.armijo_c * alpha * slope:
            return alpha, k
        alpha *= policy.shrink
    return -1.0, policy.max_backtracks


def solve_step(
    g,
    metric: DampedMetric,
    policy: StepPolicy,
    loss_probe: Optional[Callable[[Array], float]] = None,
    *,
    iteration: int = 0,
    factor: Optional[SpdFactor] = None,
) -> StepResult:
    g = as_vector(g)
    d = g.shape[0]
    if metric.dim != d:
        raise DimensionMismatch(f"gradient has {d} entries, metric is {metric.dim}x{metric.dim}")

    gnorm = float(np.linalg.norm(g))
    if gnorm <= ZERO_GRADIENT_TOL * math.sqrt(d):
        return _null_step(d, gnorm, metric)
    if isinstance(policy, LineSearch) and loss_probe is None:
        raise ValueError("line search needs a loss probe")

    if factor is None:
        factor = cholesky_spd(metric.effective)
    direction = -spd_solve(factor, g)
    # gᵀM⁻¹g, evaluated as pᵀMp so the constraint is active to rounding
    curvature = quadratic_form(metric.effective, direction)
    if not curvature > 0:
        raise NotPositiveDefinite(-1, f"non-positive curvature {curvature:g} along the solved direction")

    backtracks = 0
    match policy:
        case TrustRegion():
            alpha = policy.radius(iteration) / math.sqrt(curvature)
        case FixedRate():
            alpha = policy.alpha
        case LineSearch():
            alpha, backtracks = _backtrack(g, direction, policy, loss_probe)
            if alpha < 0:
                raise LineSearchFailed(_null_step(d, gnorm, metric, direction, backtracks), backtracks)
        case _:
            raise ValueError(f"unknown step policy {policy!r}")

    delta = alpha * direction
    return StepResult(
        delta=delta,
        alpha=alpha,
        constraint_value=quadratic_form(metric.effective, delta),
        gradient_norm=gnorm,
        direction=direction,
        metric_kind=metric.kind,
        lam_used=metric.lam,
        backtracks=backtracks,
    )


def damp_until_factorizable(metric: DampedMetric, max_retries: int = MAX_DAMPING_RETRIES) -> tuple[DampedMetric, SpdFactor]:
    """Factor M_eff, raising λ tenfold (from at least the default floor) on failure."""
    start = max(metric.lam, default_damping(metric.base))
    candidate = metric
    for attempt in range(max_retries + 1):
        try:
            return candidate, cholesky_spd(candidate.effective)
        except NotPositiveDefinite:
            if attempt == max_retries:
                break
            lam = start * DAMPING_GROWTH ** (attempt + 1)
            logger.warning("%s: metric not positive-definite at lambda=%g, retrying with %g", metric.kind.value, candidate.lam, lam)
            candidate = metric.with_damping(lam)
    raise MetricFailure(metric.kind.value, candidate.lam)


def predicted_vs_actual_decrease(model: Model, theta, batch: Batch, step: StepResult) -> tuple[float, float]:
    """(∇Lᵀδθ, L(θ+δθ) − L(θ)): the first-order prediction next to the realized change."""
    theta = np.asarray(theta, dtype=np.float64)
    g = batch_gradient(model, theta, batch)
    predicted = float(g @ step.delta)
    actual = batch_loss(model, theta + step.delta, batch) - batch_loss(model, theta, batch)
    return predicted, actual


# ============================== descent loop


class BatchSampler:
    """Batches drawn without replacement; the order is reshuffled every epoch."""

    def __init__(self, data: Batch, batch_size: Optional[int], rng: np.random.Generator):
        n = len(data)
        if batch_size is not None and not 1 <= batch_size <= n:
            raise ValueError(f"batch size {batch_size} does not fit a dataset of {n} samples")
        self.data = data
        self.full = batch_size is None or batch_size == n
        self.batch_size = n if batch_size is None else batch_size
        self.rng = rng
        self.order = np.arange(n)
        self.cursor = n  # forces a shuffle on first draw

    def next(self) -> Batch:
        if self.full:
            return self.data
        if self.cursor + self.batch_size > len(self.data):
            self.order = self.rng.permutation(len(self.data))
            self.cursor = 0
        idx = self.order[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return self.data.subset(idx)


@dataclass(slots=True)
class IterationRecord:
    iteration: int
    loss: float
    grad_norm: float
    alpha: float
    step_norm: float
    constraint: float
    lam_used: float
    wall_ms: float = field(default=0.0, compare=False)


@dataclass(frozen=True, slots=True)
class RunHeader:
    model: str
    metric_kind: MetricKind
    policy: str
    seed: int
    lam: Optional[float]
    eps: Optional[float]


@dataclass
class Trace:
    header: RunHeader
    records: list[IterationRecord] = field(default_factory=list)
    final_loss: float = float("nan")
    final_theta: Array = field(default=None, compare=False)


def run_descent(
    model: Model,
    dataset: Batch,
    metric_kind: MetricKind,
    policy: StepPolicy,
    lam: Optional[float] = None,
    iterations: int = 100,
    batch_size: Optional[int] = None,
    seed: int = 0,
    theta0=None,
) -> Trace:
    if iterations < 1:
        raise ValueError("at least one iteration is required")
    init_seq, batch_seq = np.random.SeedSequence(seed).spawn(2)
    sampler = BatchSampler(dataset, batch_size, np.random.default_rng(batch_seq))
    if theta0 is None:
        theta = model.init_params(np.random.default_rng(init_seq))
    else:
        theta = np.array(theta0, dtype=np.float64).reshape(-1)

    header = RunHeader(
        model=model.name,
        metric_kind=metric_kind,
        policy=repr(policy),
        seed=seed,
        lam=lam,
        eps=policy.eps if isinstance(policy, TrustRegion) else None,
    )
    trace = Trace(header)
    label = metric_kind.value

    for k in range(iterations):
        t0 = time.perf_counter()
        batch = sampler.next()
        loss = batch_loss(model, theta, batch)
        g = batch_gradient(model, theta, batch)

        metric, factor = damp_until_factorizable(build_metric(metric_kind, model, batch, theta, lam))
        probe = None
        if isinstance(policy, LineSearch):
            probe = lambda delta, theta=theta, batch=batch: batch_loss(model, theta + delta, batch)  # noqa: E731
        try:
            step = solve_step(g, metric, policy, probe, iteration=k, factor=factor)
        except LineSearchFailed as exc:
            logger.warning("%s: iteration %d, %s; recording a null step", label, k, exc)
            step = exc.step
        except NotPositiveDefinite as exc:
            raise MetricFailure(label, metric.lam, f"{label}: {exc}") from exc

        theta = theta + step.delta
        record = IterationRecord(
            iteration=k,
            loss=loss,
            grad_norm=step.gradient_norm,
            alpha=step.alpha,
            step_norm=step.step_norm,
            constraint=step.constraint_value,
            lam_used=step.lam_used,
            wall_ms=1000.0 * (time.perf_counter() - t0),
        )
        trace.records.append(record)
        logger.debug("%s: iter %d loss=%.6g |g|=%.3g alpha=%.3g lambda=%.3g", label, k, loss, step.gradient_norm, step.alpha, step.lam_used)

    trace.final_theta = theta
    trace.final_loss = batch_loss(model, theta, dataset)
    return trace
