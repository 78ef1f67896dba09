"""Central finite-difference oracles for checking analytic derivatives."""

import logging
from dataclasses import dataclass
from typing import Callable, ClassVar

import numpy as np

from .errors import NonFiniteEvaluation, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class FdConfig:
    scheme: ClassVar[str] = "central"  # the only scheme; not a constructor argument
    step: float = 1e-5
    rtol: float = 1e-5
    atol: float = 1e-8

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"finite-difference step must be positive, got {self.step}")


@dataclass(frozen=True, slots=True)
class CloseReport:
    ok: bool
    max_abs_diff: float
    argmax: tuple[int, ...]
    rtol: float
    atol: float

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        status = "ok" if self.ok else "MISMATCH"
        return f"{status}: max |a-b| = {self.max_abs_diff:.3e} at {self.argmax} (rtol={self.rtol:g}, atol={self.atol:g})"


def _scalar(f, theta) -> float:
    value = float(f(theta))
    if not np.isfinite(value):
        raise NonFiniteEvaluation(f"function is not finite at {theta}")
    return value


def _vector(F, theta) -> np.ndarray:
    value = np.asarray(F(theta), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(value)):
        raise NonFiniteEvaluation(f"function is not finite at {theta}")
    return value


def fd_gradient(f: Callable[[np.ndarray], float], theta, cfg: FdConfig = FdConfig()) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    h = cfg.step
    grad = np.zeros(theta.shape[0])
    for i in range(theta.shape[0]):
        e = np.zeros_like(theta)
        e[i] = h
        grad[i] = (_scalar(f, theta + e) - _scalar(f, theta - e)) / (2 * h)
    return grad


def fd_jacobian(F: Callable[[np.ndarray], np.ndarray], theta, cfg: FdConfig = FdConfig()) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    h = cfg.step
    columns = []
    for i in range(theta.shape[0]):
        e = np.zeros_like(theta)
        e[i] = h
        columns.append((_vector(F, theta + e) - _vector(F, theta - e)) / (2 * h))
    return np.stack(columns, axis=1)


def fd_hessian(f: Callable[[np.ndarray], float], theta, cfg: FdConfig = FdConfig()) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    h = cfg.step
    d = theta.shape[0]
    f0 = _scalar(f, theta)
    H = np.zeros((d, d))

    def shifted(i, si, j=None, sj=0.0):
        e = np.zeros_like(theta)
        e[i] += si * h
        if j is not None:
            e[j] += sj * h
        return _scalar(f, theta + e)

    for i in range(d):
        H[i, i] = (shifted(i, 1.0) - 2.0 * f0 + shifted(i, -1.0)) / (h * h)
        for j in range(i + 1, d):
            H[i, j] = (
                shifted(i, 1.0, j, 1.0) - shifted(i, 1.0, j, -1.0) - shifted(i, -1.0, j, 1.0) + shifted(i, -1.0, j, -1.0)
            ) / (4 * h * h)
            H[j, i] = H[i, j]
    return H


def assert_close(a, b, rtol: float = 1e-5, atol: float = 1e-8) -> CloseReport:
    """Elementwise |a − b| ≤ atol + rtol·|b|; the report carries the worst entry."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    excess = diff - (atol + rtol * np.abs(b))
    if diff.size == 0:
        return CloseReport(True, 0.0, (), rtol, atol)
    worst = np.unravel_index(int(np.argmax(excess)), diff.shape)
    report = CloseReport(bool(np.all(excess <= 0)), float(diff.max()), tuple(int(i) for i in worst), rtol, atol)
    if not report.ok:
        logger.debug("%s", report)
    return report
