"""The six metric matrices M(θ) of the constrained-step framework.

Every matrix is an empirical mean over the batch. Per-sample contributions
are accumulated by a serialized taichi kernel, so the reduction runs in
batch order and repeated assembly is bit-identical.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import taichi as ti

from .errors import CapabilityMissing
from .linalg import SymMatrix, add_damping, f64_mat, symmetrize
from .models import Array, Batch, GaussianFixedVarHead, Model, batch_gradient, batch_loss, kl_gaussian_fixed_var

DEFAULT_DAMPING_SCALE = 1e-6

f64_cube = ti.types.ndarray(dtype=ti.f64, ndim=3)


class MetricKind(Enum):
    IDENTITY = "identity"
    CLASSICAL_GAUSS_NEWTON = "cgn"
    EMPIRICAL_FISHER = "empirical_fisher"
    GRADIENT_COVARIANCE = "gradient_covariance"
    HESSIAN = "hessian"
    GENERALIZED_GAUSS_NEWTON = "ggn"


@dataclass(frozen=True, slots=True)
class DampedMetric:
    kind: MetricKind
    base: SymMatrix
    lam: float
    effective: SymMatrix

    @classmethod
    def from_base(cls, kind: MetricKind, base: SymMatrix, lam: float) -> "DampedMetric":
        return cls(kind, base, float(lam), add_damping(base, lam))

    def with_damping(self, lam: float) -> "DampedMetric":
        return DampedMetric.from_base(self.kind, self.base, lam)

    @property
    def dim(self) -> int:
        return self.base.shape[0]


# out += Σ_s J_sᵀ C_s J_s, samples visited in order
@ti.kernel
def _accumulate_sandwich(jac: f64_cube, curv: f64_cube, out: f64_mat):
    n, m, d = jac.shape[0], jac.shape[1], jac.shape[2]
    ti.loop_config(serialize=True)
    for s in range(n):
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for a in range(m):
                    cj = 0.0
                    for b in range(m):
                        cj += curv[s, a, b] * jac[s, b, j]
                    acc += jac[s, a, i] * cj
                out[i, j] += acc


def sandwich_mean(jacobians: Array, curvatures: Array) -> SymMatrix:
    """(1/N) Σ_s J_sᵀ C_s J_s for stacks J (N, m, d) and C (N, m, m)."""
    jac = np.ascontiguousarray(jacobians, dtype=np.float64)
    curv = np.ascontiguousarray(curvatures, dtype=np.float64)
    out = np.zeros((jac.shape[2], jac.shape[2]))
    _accumulate_sandwich(jac, curv, out)
    return out / jac.shape[0]


def outer_mean(rows: Array) -> SymMatrix:
    """(1/N) Σ_s r_s r_sᵀ."""
    rows = np.asarray(rows, dtype=np.float64)
    return sandwich_mean(rows[:, None, :], np.ones((rows.shape[0], 1, 1)))


def default_damping(base: SymMatrix) -> float:
    # mean |diagonal| equals tr/d on PSD matrices and stays positive on indefinite Hessians
    return DEFAULT_DAMPING_SCALE * (1.0 + float(np.abs(np.diag(base)).mean()))


def _jacobians(model: Model, theta, batch: Batch) -> Array:
    return np.stack([model.rep_jacobian(theta, s.x) for s in batch])


def _loss_hessians(model: Model, theta, batch: Batch) -> Array:
    return np.stack([model.loss_hess_h(s.y, model.representation(theta, s.x)) for s in batch])


def _identities(model: Model, batch: Batch) -> Array:
    return np.broadcast_to(np.eye(model.rep_dim), (len(batch), model.rep_dim, model.rep_dim))


def _require_density(model: Model):
    if not model.head.has_density:
        raise CapabilityMissing(f"{model.name} has no density; the empirical Fisher is undefined")


def _hessian_raw(model: Model, theta, batch: Batch) -> Array:
    # E[Jᵀ H_y J] + E[Σ_k ∂l/∂h_k ∇²h_k]
    out = sandwich_mean(_jacobians(model, theta, batch), _loss_hessians(model, theta, batch))
    second = np.zeros_like(out)
    for s in batch:
        h = model.representation(theta, s.x)
        second += model.rep_curvature(theta, s.x, model.loss_grad_h(s.y, h))
    return out + second / len(batch)


def assemble_base(kind: MetricKind, model: Model, batch: Batch, theta) -> SymMatrix:
    theta = np.asarray(theta, dtype=np.float64)
    match kind:
        case MetricKind.IDENTITY:
            return np.eye(model.param_dim)
        case MetricKind.CLASSICAL_GAUSS_NEWTON:
            raw = sandwich_mean(_jacobians(model, theta, batch), _identities(model, batch))
        case MetricKind.EMPIRICAL_FISHER:
            _require_density(model)
            raw = outer_mean(np.stack([model.log_density_grad(theta, s) for s in batch]))
        case MetricKind.GRADIENT_COVARIANCE:
            raw = outer_mean(np.stack([model.sample_gradient(theta, s) for s in batch]))
        case MetricKind.HESSIAN:
            raw = _hessian_raw(model, theta, batch)
        case MetricKind.GENERALIZED_GAUSS_NEWTON:
            raw = sandwich_mean(_jacobians(model, theta, batch), _loss_hessians(model, theta, batch))
        case _:
            raise ValueError(f"unknown metric kind {kind!r}")
    return symmetrize(raw)


def build_metric(kind: MetricKind, model: Model, batch: Batch, theta, lam: float | None = None) -> DampedMetric:
    """Assemble M(θ) for ``kind`` and damp it; ``lam=None`` picks the scale-aware default."""
    base = assemble_base(kind, model, batch, theta)
    if lam is None:
        lam = default_damping(base)
    return DampedMetric.from_base(kind, base, lam)


def exact_fisher(model: Model, batch: Batch, theta) -> SymMatrix:
    """Averaged Fisher information of p_θ(·|x): E_s[Jᵀ F_h J] with the head's Fisher F_h."""
    _require_density(model)
    theta = np.asarray(theta, dtype=np.float64)
    jac = _jacobians(model, theta, batch)
    if isinstance(model.head, GaussianFixedVarHead):
        curv = _identities(model, batch) / model.head.beta**2
    else:
        # categorical and other exponential-family heads: Fisher in h equals the NLL Hessian
        curv = _loss_hessians(model, theta, batch)
    return symmetrize(sandwich_mean(jac, curv))


def exact_fisher_gaussian(model: Model, batch: Batch, theta) -> SymMatrix:
    if not isinstance(model.head, GaussianFixedVarHead):
        raise CapabilityMissing(f"{model.name} does not have a fixed-variance Gaussian head")
    return exact_fisher(model, batch, theta)


def measured_change(kind: MetricKind, model: Model, batch: Batch, theta, delta) -> float:
    """The exact change measure whose local quadratic model is δθᵀ M(θ) δθ."""
    theta = np.asarray(theta, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    moved = theta + delta
    n = len(batch)
    match kind:
        case MetricKind.IDENTITY:
            return float(delta @ delta)
        case MetricKind.CLASSICAL_GAUSS_NEWTON:
            total = 0.0
            for s in batch:
                dh = model.representation(moved, s.x) - model.representation(theta, s.x)
                total += float(dh @ dh)
            return total / n
        case MetricKind.EMPIRICAL_FISHER:
            _require_density(model)
            total = 0.0
            for s in batch:
                total += model.head.kl(model.representation(theta, s.x), model.representation(moved, s.x))
            return 2.0 * total / n
        case MetricKind.GRADIENT_COVARIANCE:
            total = 0.0
            for s in batch:
                total += (model.sample_loss(moved, s) - model.sample_loss(theta, s)) ** 2
            return total / n
        case MetricKind.HESSIAN:
            g = batch_gradient(model, theta, batch)
            return 2.0 * (batch_loss(model, moved, batch) - batch_loss(model, theta, batch) - float(g @ delta))
        case MetricKind.GENERALIZED_GAUSS_NEWTON:
            total = 0.0
            for s in batch:
                h = model.representation(theta, s.x)
                dh = model.representation(moved, s.x) - h
                total += model.atomic_loss(s.y, h + dh) - model.atomic_loss(s.y, h) - float(model.loss_grad_h(s.y, h) @ dh)
            return 2.0 * total / n
        case _:
            raise ValueError(f"unknown metric kind {kind!r}")


__all__ = [
    "DampedMetric",
    "MetricKind",
    "assemble_base",
    "build_metric",
    "default_damping",
    "exact_fisher",
    "exact_fisher_gaussian",
    "kl_gaussian_fixed_var",
    "measured_change",
    "outer_mean",
    "sandwich_mean",
]
