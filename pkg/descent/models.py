"""Probabilistic regression models: h_θ(x), its derivatives, and the atomic losses.

Parameter layout is fixed and flat so that linear maps can act on θ:
row-major weights then biases, layer by layer. For the one-hidden-layer
network that is ``W1 (width×in), b1 (width), W2 (out×width), b2 (out)``.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

import numpy as np
from numpy.typing import NDArray
from scipy.special import log_softmax, logsumexp, softmax

from .errors import CapabilityMissing, DimensionMismatch, EmptyBatch

Array = NDArray[np.float64]


class LossKind(Enum):
    GAUSSIAN_NLL = 0
    SQUARED_ERROR = 1
    CROSS_ENTROPY = 2


@dataclass(frozen=True, slots=True)
class Sample:
    x: Array
    y: Array


@dataclass(frozen=True, slots=True)
class Batch:
    """Samples in a fixed order; every empirical mean iterates them in this order."""

    xs: Array  # (N, in_dim)
    ys: Array  # (N, out_dim)

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        ys = np.atleast_2d(np.asarray(self.ys, dtype=np.float64))
        if xs.shape[0] == 0 or xs.size == 0:
            raise EmptyBatch("batch has no samples")
        if xs.shape[0] != ys.shape[0]:
            raise DimensionMismatch(f"{xs.shape[0]} inputs but {ys.shape[0]} outputs")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Batch":
        if not samples:
            raise EmptyBatch("batch has no samples")
        return cls(np.stack([s.x for s in samples]), np.stack([s.y for s in samples]))

    def __len__(self) -> int:
        return self.xs.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for x, y in zip(self.xs, self.ys):
            yield Sample(x, y)

    def subset(self, indices) -> "Batch":
        return Batch(self.xs[indices], self.ys[indices])


# ============================== networks: θ ↦ h_θ(x)


class Network(ABC):
    in_dim: int
    out_dim: int
    param_dim: int

    @abstractmethod
    def forward(self, theta: Array, x: Array) -> Array: ...

    @abstractmethod
    def jacobian(self, theta: Array, x: Array) -> Array:
        """∂h/∂θ, shape (out_dim, param_dim)."""

    @abstractmethod
    def curvature(self, theta: Array, x: Array, weights: Array) -> Array:
        """Σ_k weights_k ∇²_θ h_k, shape (param_dim, param_dim)."""

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> Array: ...


class LinearMap(Network):
    """h = W x (+ b)."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.bias = bias
        self.param_dim = out_dim * in_dim + (out_dim if bias else 0)

    def unpack(self, theta: Array):
        n, m = self.in_dim, self.out_dim
        W = theta[: m * n].reshape(m, n)
        b = theta[m * n :] if self.bias else np.zeros(m)
        return W, b

    def forward(self, theta, x):
        W, b = self.unpack(theta)
        return W @ x + b

    def jacobian(self, theta, x):
        blocks = [np.kron(np.eye(self.out_dim), x)]
        if self.bias:
            blocks.append(np.eye(self.out_dim))
        return np.hstack(blocks)

    def curvature(self, theta, x, weights):
        return np.zeros((self.param_dim, self.param_dim))

    def init_params(self, rng):
        return np.zeros(self.param_dim)


class TanhMlp(Network):
    """h = W2 tanh(W1 x + b1) + b2."""

    def __init__(self, in_dim: int, out_dim: int, width: int = 16):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.width = width
        self.first_dim = width * in_dim + width
        self.param_dim = self.first_dim + out_dim * width + out_dim

    def unpack(self, theta: Array):
        n, H, m = self.in_dim, self.width, self.out_dim
        i = 0
        W1 = theta[i : i + H * n].reshape(H, n)
        i += H * n
        b1 = theta[i : i + H]
        i += H
        W2 = theta[i : i + m * H].reshape(m, H)
        i += m * H
        b2 = theta[i : i + m]
        return W1, b1, W2, b2

    def hidden(self, theta, x):
        W1, b1, _, _ = self.unpack(theta)
        return np.tanh(W1 @ x + b1)

    def forward(self, theta, x):
        _, _, W2, b2 = self.unpack(theta)
        return W2 @ self.hidden(theta, x) + b2

    # rows: hidden unit j, columns: first-layer parameters; row j holds (x, 1) at unit j's slots
    def _first_layer_selector(self, x):
        return np.hstack([np.kron(np.eye(self.width), x), np.eye(self.width)])

    def jacobian(self, theta, x):
        _, _, W2, _ = self.unpack(theta)
        z = self.hidden(theta, x)
        dz = 1.0 - z * z
        first = (W2 * dz) @ self._first_layer_selector(x)
        return np.hstack([first, np.kron(np.eye(self.out_dim), z), np.eye(self.out_dim)])

    def curvature(self, theta, x, weights):
        _, _, W2, _ = self.unpack(theta)
        z = self.hidden(theta, x)
        dz = 1.0 - z * z
        r = W2.T @ weights
        P = self._first_layer_selector(x)
        F = self.first_dim
        out = np.zeros((self.param_dim, self.param_dim))
        # d²tanh(a)/da² = -2 tanh(a) (1 - tanh²(a))
        c = -2.0 * r * z * dz
        out[:F, :F] = P.T @ (c[:, None] * P)
        cross = np.kron(weights[:, None], dz[:, None] * P)
        out[F : F + cross.shape[0], :F] = cross
        out[:F, F : F + cross.shape[0]] = cross.T
        return out

    def init_params(self, rng):
        n, H, m = self.in_dim, self.width, self.out_dim
        s1, s2 = 1.0 / math.sqrt(n), 1.0 / math.sqrt(H)
        return np.concatenate(
            [
                rng.uniform(-s1, s1, H * n),
                rng.uniform(-s1, s1, H),
                rng.uniform(-s2, s2, m * H),
                rng.uniform(-s2, s2, m),
            ]
        )


class ReparametrizedNetwork(Network):
    """The wrapped network seen through coordinates θ' = A θ."""

    def __init__(self, network: Network, A):
        A = np.asarray(A, dtype=np.float64)
        if A.shape != (network.param_dim, network.param_dim):
            raise DimensionMismatch(f"reparametrization must be {network.param_dim}x{network.param_dim}")
        self.network = network
        self.A = A
        self.A_inv = np.linalg.inv(A)
        self.in_dim = network.in_dim
        self.out_dim = network.out_dim
        self.param_dim = network.param_dim

    def forward(self, theta, x):
        return self.network.forward(self.A_inv @ theta, x)

    def jacobian(self, theta, x):
        return self.network.jacobian(self.A_inv @ theta, x) @ self.A_inv

    def curvature(self, theta, x, weights):
        inner = self.network.curvature(self.A_inv @ theta, x, weights)
        return self.A_inv.T @ inner @ self.A_inv

    def init_params(self, rng):
        return self.A @ self.network.init_params(rng)


# ============================== heads: l(y, h) and p(y | h)


class Head(ABC):
    loss_kind: LossKind
    has_density: bool = False
    has_residual: bool = False

    @property
    def is_nll(self) -> bool:
        return self.loss_kind in (LossKind.GAUSSIAN_NLL, LossKind.CROSS_ENTROPY)

    @abstractmethod
    def loss(self, y: Array, h: Array) -> float: ...

    @abstractmethod
    def grad_h(self, y: Array, h: Array) -> Array: ...

    @abstractmethod
    def hess_h(self, y: Array, h: Array) -> Array: ...

    def log_density(self, y: Array, h: Array) -> float:
        raise CapabilityMissing(f"{type(self).__name__} has no density")

    def nll_grad_h(self, y: Array, h: Array) -> Array:
        """Gradient of -log p(y | h) with respect to h."""
        raise CapabilityMissing(f"{type(self).__name__} has no density")

    def kl(self, h1: Array, h2: Array) -> float:
        raise CapabilityMissing(f"{type(self).__name__} has no density")


class SquaredErrorHead(Head):
    """l = ½‖y − h‖²; no density attached."""

    loss_kind = LossKind.SQUARED_ERROR
    has_residual = True

    def loss(self, y, h):
        r = y - h
        return 0.5 * float(r @ r)

    def grad_h(self, y, h):
        return h - y

    def hess_h(self, y, h):
        return np.eye(h.shape[0])


class GaussianFixedVarHead(Head):
    """p(y | h) = N(h, β² I); the loss is the full negative log-likelihood."""

    loss_kind = LossKind.GAUSSIAN_NLL
    has_density = True

    def __init__(self, beta: float = 1.0):
        if not beta > 0:
            raise ValueError(f"beta must be positive, got {beta}")
        self.beta = float(beta)

    def loss(self, y, h):
        r = y - h
        m = h.shape[0]
        return float(r @ r) / (2.0 * self.beta**2) + 0.5 * m * math.log(2.0 * math.pi * self.beta**2)

    def grad_h(self, y, h):
        return (h - y) / self.beta**2

    def hess_h(self, y, h):
        return np.eye(h.shape[0]) / self.beta**2

    def log_density(self, y, h):
        return -self.loss(y, h)

    def nll_grad_h(self, y, h):
        return self.grad_h(y, h)

    def kl(self, h1, h2):
        return kl_gaussian_fixed_var(h1, h2, self.beta)


class SoftmaxHead(Head):
    """Categorical distribution over logits h; y is one-hot."""

    loss_kind = LossKind.CROSS_ENTROPY
    has_density = True

    def loss(self, y, h):
        return float(logsumexp(h) - y @ h)

    def grad_h(self, y, h):
        return softmax(h) - y

    def hess_h(self, y, h):
        p = softmax(h)
        return np.diag(p) - np.outer(p, p)

    def log_density(self, y, h):
        return -self.loss(y, h)

    def nll_grad_h(self, y, h):
        return self.grad_h(y, h)

    def kl(self, h1, h2):
        lp1, lp2 = log_softmax(h1), log_softmax(h2)
        return float(np.exp(lp1) @ (lp1 - lp2))


def kl_gaussian_fixed_var(mu1, mu2, beta: float) -> float:
    """KL(N(μ₁, β²I) ‖ N(μ₂, β²I)) = ‖μ₂ − μ₁‖² / (2β²)."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    if mu1.shape != mu2.shape:
        raise DimensionMismatch(f"means have shapes {mu1.shape} and {mu2.shape}")
    d = mu2 - mu1
    return float(d @ d) / (2.0 * beta * beta)


# ============================== model = network + head


class Model:
    name = "model"

    def __init__(self, network: Network, head: Head, name: Optional[str] = None):
        self.network = network
        self.head = head
        if name is not None:
            self.name = name

    @property
    def param_dim(self) -> int:
        return self.network.param_dim

    @property
    def rep_dim(self) -> int:
        return self.network.out_dim

    @property
    def input_dim(self) -> int:
        return self.network.in_dim

    @property
    def is_nll(self) -> bool:
        return self.head.is_nll

    def _theta(self, theta) -> Array:
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.shape[0] != self.param_dim:
            raise DimensionMismatch(f"{self.name}: expected {self.param_dim} parameters, got {theta.shape[0]}")
        return theta

    def _x(self, x) -> Array:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.input_dim:
            raise DimensionMismatch(f"{self.name}: expected input of dim {self.input_dim}, got {x.shape[0]}")
        return x

    def _yh(self, y, h) -> tuple[Array, Array]:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        h = np.asarray(h, dtype=np.float64).reshape(-1)
        if y.shape[0] != self.rep_dim or h.shape[0] != self.rep_dim:
            raise DimensionMismatch(f"{self.name}: output and representation must have dim {self.rep_dim}")
        return y, h

    def representation(self, theta, x) -> Array:
        return self.network.forward(self._theta(theta), self._x(x))

    def rep_jacobian(self, theta, x) -> Array:
        return self.network.jacobian(self._theta(theta), self._x(x))

    def rep_curvature(self, theta, x, weights) -> Array:
        return self.network.curvature(self._theta(theta), self._x(x), np.asarray(weights, dtype=np.float64))

    def atomic_loss(self, y, h) -> float:
        return self.head.loss(*self._yh(y, h))

    def loss_grad_h(self, y, h) -> Array:
        return self.head.grad_h(*self._yh(y, h))

    def loss_hess_h(self, y, h) -> Array:
        H = self.head.hess_h(*self._yh(y, h))
        return 0.5 * (H + H.T)

    def sample_loss(self, theta, s: Sample) -> float:
        return self.atomic_loss(s.y, self.representation(theta, s.x))

    def sample_gradient(self, theta, s: Sample) -> Array:
        """∇_θ l_θ(s) = Jᵀ ∂l/∂h."""
        h = self.representation(theta, s.x)
        return self.rep_jacobian(theta, s.x).T @ self.loss_grad_h(s.y, h)

    def log_density(self, theta, s: Sample) -> float:
        y, h = self._yh(s.y, self.representation(theta, s.x))
        return self.head.log_density(y, h)

    def log_density_grad(self, theta, s: Sample) -> Array:
        if not self.head.has_density:
            raise CapabilityMissing(f"{self.name} has no density")
        y, h = self._yh(s.y, self.representation(theta, s.x))
        return -(self.rep_jacobian(theta, s.x).T @ self.head.nll_grad_h(y, h))

    def residual(self, theta, s: Sample) -> Array:
        """Δ_θ(s) = y − h_θ(x) for heads with l = ½‖Δ‖²."""
        if not self.head.has_residual:
            raise CapabilityMissing(f"{self.name} has no squared-error residual")
        y, h = self._yh(s.y, self.representation(theta, s.x))
        return y - h

    def residual_jacobian(self, theta, s: Sample) -> Array:
        if not self.head.has_residual:
            raise CapabilityMissing(f"{self.name} has no squared-error residual")
        return -self.rep_jacobian(theta, s.x)

    def init_params(self, rng: np.random.Generator) -> Array:
        return self.network.init_params(rng)


class LinearGaussianFixedVar(Model):
    name = "linear_gaussian"

    def __init__(self, in_dim: int, out_dim: int, beta: float = 1.0, bias: bool = True):
        super().__init__(LinearMap(in_dim, out_dim, bias), GaussianFixedVarHead(beta))


class LinearLeastSquares(Model):
    name = "linear_least_squares"

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__(LinearMap(in_dim, out_dim, bias), SquaredErrorHead())


class MlpGaussianFixedVar(Model):
    name = "mlp_gaussian"

    def __init__(self, in_dim: int, out_dim: int, width: int = 16, beta: float = 1.0):
        super().__init__(TanhMlp(in_dim, out_dim, width), GaussianFixedVarHead(beta))


class MlpLeastSquares(Model):
    name = "mlp_least_squares"

    def __init__(self, in_dim: int, out_dim: int, width: int = 16):
        super().__init__(TanhMlp(in_dim, out_dim, width), SquaredErrorHead())


class SoftmaxClassifier(Model):
    name = "softmax"

    def __init__(self, in_dim: int, n_classes: int, width: Optional[int] = None):
        network = LinearMap(in_dim, n_classes) if width is None else TanhMlp(in_dim, n_classes, width)
        super().__init__(network, SoftmaxHead())


def reparametrize(model: Model, A) -> Model:
    return Model(ReparametrizedNetwork(model.network, A), model.head, name=f"{model.name}_reparam")


def batch_loss(model: Model, theta, batch: Batch) -> float:
    """L̂_B(θ): arithmetic mean of atomic losses, summed in batch order."""
    if len(batch) == 0:
        raise EmptyBatch("batch has no samples")
    total = 0.0
    for s in batch:
        total += model.sample_loss(theta, s)
    return total / len(batch)


def batch_gradient(model: Model, theta, batch: Batch) -> Array:
    if len(batch) == 0:
        raise EmptyBatch("batch has no samples")
    total = np.zeros(model.param_dim)
    for s in batch:
        total += model.sample_gradient(theta, s)
    return total / len(batch)
