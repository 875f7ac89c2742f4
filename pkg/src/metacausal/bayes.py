"""Variational machinery: diagonal Gaussians, KL, Bayesian logistic
likelihoods and reparameterized ELBO gradients.

Everything here is stateless math over caller-owned buffers; RNG streams
are owned by callers.  Gradients are exact (analytic) and are verified
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 3.0
LOGIT_CLAMP = 50.0


class ClampMonitor:
    """Counts silent log-std clamp activations so tests can assert none occur."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_monitor = ClampMonitor()


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with mean and log standard deviation vectors."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.log_std = np.asarray(self.log_std, dtype=float).reshape(-1)
        if self.mean.shape != self.log_std.shape:
            raise DomainError("mean and log_std must have equal length")
        if self.mean.size < 1:
            raise DomainError("dimension must be at least 1")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_std))):
            raise DomainError("non-finite Gaussian parameters")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.clamped_log_std())

    def clamped_log_std(self) -> np.ndarray:
        clipped = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        if np.any(clipped != self.log_std):
            clamp_monitor.count += 1
        return clipped

    def copy(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.copy(), self.log_std.copy())

    @classmethod
    def isotropic(cls, dim: int, mean: float = 0.0, std: float = 1.0) -> "DiagGaussian":
        return cls(np.full(dim, mean), np.full(dim, np.log(std)))


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p) for diagonal Gaussians."""
    if q.dim != p.dim:
        raise DomainError("KL requires equal dimensions")
    vq = np.exp(2.0 * q.log_std)
    vp = np.exp(2.0 * p.log_std)
    return float(
        np.sum(p.log_std - q.log_std + (vq + (q.mean - p.mean) ** 2) / (2.0 * vp) - 0.5)
    )


def kl_diag_grad_q(q: DiagGaussian, p: DiagGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of kl_diag w.r.t. q's mean and log_std."""
    vq = np.exp(2.0 * q.log_std)
    vp = np.exp(2.0 * p.log_std)
    g_mean = (q.mean - p.mean) / vp
    g_log_std = vq / vp - 1.0
    return g_mean, g_log_std


def sample(q: DiagGaussian, rng: np.random.Generator, n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized draws; returns (values, base noise) for pathwise grads."""
    if n < 1:
        raise ConfigurationError("sample count must be at least 1")
    zeta = rng.standard_normal((n, q.dim))
    return q.mean + q.std * zeta, zeta


@dataclass(frozen=True)
class PredictorSpec:
    """Architecture of the task predictor whose weights are inferred."""

    arch: str = "linear"  # "linear" | "mlp"
    input_dim: int = 10
    hidden: int = 0

    def __post_init__(self):
        if self.arch not in ("linear", "mlp"):
            raise ConfigurationError(f"unknown arch {self.arch!r}")
        if self.arch == "mlp" and self.hidden < 1:
            raise ConfigurationError("mlp needs hidden >= 1")

    @property
    def param_dim(self) -> int:
        if self.arch == "linear":
            return self.input_dim + 1
        return self.hidden * (self.input_dim + 2) + 1

    def to_json(self) -> dict:
        return {"arch": self.arch, "input_dim": self.input_dim, "hidden": self.hidden}

    @classmethod
    def from_json(cls, payload: dict) -> "PredictorSpec":
        return cls(**payload)


def _unpack_mlp(spec: PredictorSpec, phi: np.ndarray):
    h, d = spec.hidden, spec.input_dim
    w1 = phi[: h * d].reshape(h, d)
    b1 = phi[h * d : h * d + h]
    w2 = phi[h * d + h : h * d + 2 * h]
    b2 = phi[-1]
    return w1, b1, w2, b2


def logits(spec: PredictorSpec, phi: np.ndarray, X: np.ndarray) -> np.ndarray:
    if phi.shape[0] != spec.param_dim:
        raise DomainError("parameter vector length does not match spec")
    if spec.arch == "linear":
        f = X @ phi[:-1] + phi[-1]
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, phi)
        f = np.tanh(X @ w1.T + b1) @ w2 + b2
    return np.clip(f, -LOGIT_CLAMP, LOGIT_CLAMP)


def sigmoid(f: np.ndarray) -> np.ndarray:
    out = np.empty_like(f, dtype=float)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    ef = np.exp(f[~pos])
    out[~pos] = ef / (1.0 + ef)
    return out


def loglik(
    spec: PredictorSpec, phi: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Bernoulli log-likelihood (summed over rows) and its gradient in phi."""
    y = np.asarray(y)
    if y.shape[0] != X.shape[0]:
        raise DomainError("X and y row counts differ")
    if np.any((y != 0) & (y != 1)):
        raise DomainError("labels must be binary")
    yf = y.astype(float)
    f = logits(spec, phi, X)
    # sum_i y f - softplus(f), stable at large |f|
    value = float(np.sum(yf * f - np.logaddexp(0.0, f)))
    resid = yf - sigmoid(f)
    if spec.arch == "linear":
        grad = np.concatenate([X.T @ resid, [resid.sum()]])
    else:
        w1, b1, w2, _ = _unpack_mlp(spec, phi)
        hidden_in = X @ w1.T + b1
        hact = np.tanh(hidden_in)
        g_w2 = hact.T @ resid
        g_b2 = resid.sum()
        back = (resid[:, None] * w2[None, :]) * (1.0 - hact**2)
        g_w1 = back.T @ X
        g_b1 = back.sum(axis=0)
        grad = np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])
    return value, grad


def batched_loglik(
    spec: PredictorSpec, phis: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """loglik for a stack of parameter vectors; (S,) values and (S, p) grads.

    The linear architecture is evaluated with one matmul per batch; the
    MLP falls back to a per-sample loop.
    """
    yf = np.asarray(y, dtype=float)
    if spec.arch == "linear":
        F = np.clip(X @ phis[:, :-1].T + phis[:, -1], -LOGIT_CLAMP, LOGIT_CLAMP)  # M x S
        values = yf @ F - np.logaddexp(0.0, F).sum(axis=0)
        resid = yf[:, None] - sigmoid(F)  # M x S
        grads = np.concatenate([resid.T @ X, resid.sum(axis=0)[:, None]], axis=1)
        return values, grads
    values = np.empty(phis.shape[0])
    grads = np.empty_like(phis)
    for s in range(phis.shape[0]):
        values[s], grads[s] = loglik(spec, phis[s], X, y)
    return values, grads


@dataclass
class ElboEstimate:
    """Monte Carlo estimate of the inner objective and its gradients."""

    value: float
    grad_mean: np.ndarray
    grad_log_std: np.ndarray
    mc_samples: int

    def finite(self) -> bool:
        return (
            np.isfinite(self.value)
            and np.all(np.isfinite(self.grad_mean))
            and np.all(np.isfinite(self.grad_log_std))
        )


def elbo_grad(
    q: DiagGaussian,
    prior: DiagGaussian,
    X: np.ndarray,
    y: np.ndarray,
    spec: PredictorSpec,
    n_samples: int,
    kl_weight: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> ElboEstimate:
    """Negative ELBO (mean NLL + weighted KL) with pathwise gradients.

    ``noise`` may pin the base draws for common-random-number comparisons;
    otherwise ``rng`` supplies them.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    if kl_weight < 0:
        raise ConfigurationError("kl_weight must be non-negative")
    if noise is None:
        if rng is None:
            raise ConfigurationError("either rng or noise must be provided")
        noise = rng.standard_normal((n_samples, q.dim))
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (n_samples, q.dim):
            raise DomainError("noise has wrong shape")
    m = X.shape[0]
    std = q.std
    phis = q.mean + std * noise
    values, grads = batched_loglik(spec, phis, X, y)
    scale = 1.0 / (n_samples * m)
    value = -values.sum() * scale
    g_mean = -grads.sum(axis=0) * scale
    g_logstd = -(grads * noise).sum(axis=0) * std * scale
    if kl_weight > 0.0:
        value += kl_weight * kl_diag(q, prior)
        km, kls = kl_diag_grad_q(q, prior)
        g_mean += kl_weight * km
        g_logstd += kl_weight * kls
    return ElboEstimate(
        value=float(value), grad_mean=g_mean, grad_log_std=g_logstd, mc_samples=n_samples
    )


def predict_proba(
    q: DiagGaussian,
    X: np.ndarray,
    spec: PredictorSpec,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Posterior-averaged class-1 probabilities."""
    phis, _ = sample(q, rng, n_samples)
    if spec.arch == "linear":
        F = np.clip(X @ phis[:, :-1].T + phis[:, -1], -LOGIT_CLAMP, LOGIT_CLAMP)
        return sigmoid(F).mean(axis=1)
    acc = np.zeros(X.shape[0])
    for s in range(n_samples):
        acc += sigmoid(logits(spec, phis[s], X))
    return acc / n_samples


@dataclass
class AdamState:
    """Adaptive-moment accumulator for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=float), v=np.zeros_like(param, dtype=float))

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Returns the update to *subtract* from the parameter."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)
