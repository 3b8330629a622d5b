"""Synthetic softmax policy family with a low-rank (or dense) adapter.

The policy over a finite response set of size ``V`` is

    pi(y | x, theta) = softmax((W_base + A @ B) @ x)[y]

where ``x`` is a context vector of length ``d`` and ``theta`` collects the
adapter entries. Flattened adapter vectors always list ``A`` row-major first,
then ``B`` row-major (low-rank mode), or ``dW`` row-major (full mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-300
SIMPLEX_ATOL = 1e-9


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class InfiniteDivergenceError(ArithmeticError):
    """Raised when a divergence or cross-entropy is infinite (support mismatch)."""


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PolicySpec:
    W_base: np.ndarray
    rank: int = 4
    R_x: float = 10.0
    R_theta: float = 10.0

    def __post_init__(self):
        W = _frozen(self.W_base)
        if W.ndim != 2:
            raise ContractError("W_base must be a matrix")
        if not np.all(np.isfinite(W)):
            raise ContractError("W_base has non-finite entries")
        V, d = W.shape
        if V < 2 or d < 1:
            raise ContractError(f"need V >= 2 and d >= 1, got V={V}, d={d}")
        if not 1 <= self.rank <= min(V, d):
            raise ContractError(f"rank must lie in [1, {min(V, d)}], got {self.rank}")
        if self.R_x <= 0 or self.R_theta <= 0:
            raise ContractError("ball radii must be positive")
        object.__setattr__(self, "W_base", W)

    @property
    def V(self) -> int:
        return self.W_base.shape[0]

    @property
    def d(self) -> int:
        return self.W_base.shape[1]


@dataclass(frozen=True)
class AdapterState:
    """Adapter factors. ``dW`` is set only in full mode, ``A``/``B`` only in low-rank mode."""

    A: np.ndarray | None = None
    B: np.ndarray | None = None
    dW: np.ndarray | None = None
    mode: str = field(init=False)

    def __post_init__(self):
        if self.dW is not None:
            if self.A is not None or self.B is not None:
                raise ContractError("full-mode adapter cannot carry low-rank factors")
            dW = _frozen(self.dW)
            if dW.ndim != 2 or not np.all(np.isfinite(dW)):
                raise ContractError("dW must be a finite matrix")
            object.__setattr__(self, "dW", dW)
            object.__setattr__(self, "mode", "full")
            return
        if self.A is None or self.B is None:
            raise ContractError("low-rank adapter needs both A and B")
        A, B = _frozen(self.A), _frozen(self.B)
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise ContractError(f"incompatible factor shapes {A.shape} and {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ContractError("adapter factors have non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "mode", "low-rank")

    @property
    def rank(self) -> int:
        if self.mode == "full":
            return int(min(self.dW.shape))
        return self.A.shape[1]

    @property
    def n_params(self) -> int:
        if self.mode == "full":
            return self.dW.size
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        """Effective weight delta ``A @ B`` (or ``dW``)."""
        if self.mode == "full":
            return np.array(self.dW)
        return self.A @ self.B

    def flat(self) -> np.ndarray:
        if self.mode == "full":
            return self.dW.ravel().copy()
        return np.concatenate([self.A.ravel(), self.B.ravel()])

    def with_flat(self, vec: np.ndarray) -> "AdapterState":
        """New adapter of the same shape holding the entries of ``vec``."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        if self.mode == "full":
            return AdapterState(dW=vec.reshape(self.dW.shape))
        nA = self.A.size
        return AdapterState(A=vec[:nA].reshape(self.A.shape), B=vec[nA:].reshape(self.B.shape))

    @classmethod
    def zeros(cls, spec: PolicySpec, mode: str = "low-rank", rng=None, init_scale: float = 0.1):
        """Adapter whose effective delta is zero.

        In low-rank mode ``A`` starts at zero and ``B`` is drawn at random
        (``init_scale`` / sqrt(d) per entry) so the factor gradients are not
        identically zero. With ``rng=None`` both factors start at zero.
        """
        if mode == "full":
            return cls(dW=np.zeros((spec.V, spec.d)))
        if mode != "low-rank":
            raise ContractError(f"unknown adapter mode {mode!r}")
        A = np.zeros((spec.V, spec.rank))
        if rng is None:
            B = np.zeros((spec.rank, spec.d))
        else:
            B = rng.normal(scale=init_scale / np.sqrt(spec.d), size=(spec.rank, spec.d))
        return cls(A=A, B=B)


def check_distribution(p, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 1:
        raise ContractError("distribution must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ContractError("distribution entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > atol:
        raise ContractError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def check_context(x, R_x: float | None = None, tol: float = 1e-9) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("context must be a vector")
    if not np.all(np.isfinite(x)):
        raise ContractError("context has non-finite entries")
    if R_x is not None and np.linalg.norm(x) > R_x * (1 + tol):
        raise ContractError(f"context norm {np.linalg.norm(x):.6g} exceeds R_x={R_x}")
    return x


def clamp_to_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n <= radius:
        return v.copy()
    return v * (radius / n)


def clamp_adapter(adapter: AdapterState, radius: float) -> AdapterState:
    """Rescale so the effective delta has Frobenius norm at most ``radius``.

    Low-rank factors are each scaled by the square root of the shrink factor,
    which keeps the product on the boundary exactly.
    """
    n = np.linalg.norm(adapter.delta())
    if n <= radius:
        return adapter
    s = radius / n
    if adapter.mode == "full":
        return AdapterState(dW=adapter.dW * s)
    r = np.sqrt(s)
    return AdapterState(A=adapter.A * r, B=adapter.B * r)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_dims(spec: PolicySpec, adapter: AdapterState, x=None):
    shape = adapter.dW.shape if adapter.mode == "full" else (adapter.A.shape[0], adapter.B.shape[1])
    if shape != spec.W_base.shape:
        raise ContractError(f"adapter delta shape {shape} does not match W_base {spec.W_base.shape}")
    if x is not None and np.shape(x) != (spec.d,):
        raise ContractError(f"context has shape {np.shape(x)}, expected ({spec.d},)")


def compose_parameters(spec: PolicySpec, adapter: AdapterState) -> np.ndarray:
    _check_dims(spec, adapter)
    return spec.W_base + adapter.delta()


def policy_logits(spec: PolicySpec, adapter: AdapterState, x) -> np.ndarray:
    x = check_context(x)
    _check_dims(spec, adapter, x)
    logits = compose_parameters(spec, adapter) @ x
    if not np.all(np.isfinite(logits)):
        raise ContractError("non-finite logits")
    return logits


def policy_distribution(spec: PolicySpec, adapter: AdapterState, x) -> np.ndarray:
    return softmax(policy_logits(spec, adapter, x))


def entropy(p) -> float:
    p = check_distribution(p)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def cross_entropy(p, q) -> float:
    """-sum p log q, with 0 log 0 = 0."""
    p, q = check_distribution(p), check_distribution(q)
    if p.shape != q.shape:
        raise ContractError("distributions have different lengths")
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise InfiniteDivergenceError("p has mass where q has none")
    return float(-np.sum(p[nz] * np.log(np.maximum(q[nz], PROB_FLOOR))))


def kl_divergence(p, q) -> float:
    p, q = check_distribution(p), check_distribution(q)
    if p.shape != q.shape:
        raise ContractError("distributions have different lengths")
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise InfiniteDivergenceError("p has mass where q has none")
    kl = float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))
    return max(kl, 0.0)


def logit_jacobian_theta(spec: PolicySpec, adapter: AdapterState, x) -> np.ndarray:
    """d logits / d theta as a V x P matrix in the flattened-adapter column order."""
    x = check_context(x)
    _check_dims(spec, adapter, x)
    V, d = spec.V, spec.d
    if adapter.mode == "full":
        # d l_k / d dW_ij = [k == i] x_j
        return np.kron(np.eye(V), x[None, :])
    r = adapter.rank
    Bx = adapter.B @ x
    # d l_k / d A_ij = [k == i] (Bx)_j
    dA = np.kron(np.eye(V), Bx[None, :])
    # d l_k / d B_ij = A_ki x_j
    dB = (adapter.A[:, :, None] * x[None, None, :]).reshape(V, r * d)
    return np.hstack([dA, dB])


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


def policy_jacobian_theta(spec: PolicySpec, adapter: AdapterState, x) -> np.ndarray:
    """J[y, k] = d pi(y) / d theta_k."""
    p = policy_distribution(spec, adapter, x)
    return softmax_jacobian(p) @ logit_jacobian_theta(spec, adapter, x)


def log_policy_gradients(spec: PolicySpec, adapter: AdapterState, x):
    """Per-response score functions.

    Returns ``(G_x, G_theta)`` with row ``y`` holding the gradient of
    ``log pi(y)`` with respect to ``x`` and to the flattened adapter.
    """
    p = policy_distribution(spec, adapter, x)
    W = compose_parameters(spec, adapter)
    D = logit_jacobian_theta(spec, adapter, x)
    G_x = W - (p @ W)[None, :]
    G_theta = D - (p @ D)[None, :]
    return G_x, G_theta
