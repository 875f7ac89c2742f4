"""Expert-guided inference of a target task's embedding.

An expert answers pairwise queries ("is source i closer to the target
than source j?").  Responses follow a probit likelihood in the signed
distance difference; a diagonal Gaussian posterior over the target
embedding is refit by stochastic variational inference after every
answer, and queries are selected by maximizing the expected information
gain of the next response.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import log_ndtr, ndtr

from .bayes import AdamState, DiagGaussian
from .errors import ConfigurationError, DomainError, NumericalError
from .embedding import EmbeddingSet
from .rng import substream

log = logging.getLogger(__name__)

PROBIT_ARG_CLAMP = 40.0
_NORM_CONST = -0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ExpertQuery:
    i: str
    j: str

    def __post_init__(self):
        if self.i == self.j:
            raise DomainError("query must compare two distinct sources")


@dataclass
class Comparison:
    query: ExpertQuery
    c: int  # 1 means source i judged closer
    eig_at_selection: float
    timestamp: float

    def __post_init__(self):
        if self.c not in (0, 1):
            raise DomainError("comparison outcome must be 0 or 1")


@dataclass
class SviParams:
    lr: float = 0.01
    steps: int = 150
    mc_samples: int = 16


@dataclass
class ExpertSession:
    """State of one elicitation run over a fixed set of source embeddings."""

    sources: EmbeddingSet
    budget: int
    acquisition: str = "bald"  # "bald" | "random"
    tau: float = 1.0  # fixed during inference
    svi: SviParams = field(default_factory=SviParams)
    bald_mc: int = 200
    rng_seed: int = 0
    oracle_z: np.ndarray | None = None  # enables the RMSE trace
    posterior: DiagGaussian = None
    history: list[Comparison] = field(default_factory=list)
    rmse_trace: list[float] = field(default_factory=list)
    pool_exhausted: bool = False

    def __post_init__(self):
        if self.acquisition not in ("bald", "random"):
            raise ConfigurationError(f"unknown acquisition {self.acquisition!r}")
        if self.budget < 0:
            raise ConfigurationError("budget must be non-negative")
        if self.posterior is None:
            self.posterior = DiagGaussian.isotropic(self.sources.d)
        if self.oracle_z is not None:
            self.oracle_z = np.asarray(self.oracle_z, dtype=float).reshape(-1)
            if not self.rmse_trace:
                self.rmse_trace.append(self.current_rmse())

    @property
    def remaining(self) -> int:
        return self.budget - len(self.history)

    def asked_pairs(self) -> set[tuple[str, str]]:
        return {tuple(sorted((c.query.i, c.query.j))) for c in self.history}

    def current_rmse(self) -> float:
        return rmse(self.posterior.mean, self.oracle_z)

    def to_json(self) -> dict:
        out = {
            "sources": self.sources.to_json(),
            "tau": self.tau,
            "budget": self.budget,
            "acquisition": self.acquisition,
            "bald_mc": self.bald_mc,
            "rng_seed": self.rng_seed,
            "svi": {"lr": self.svi.lr, "steps": self.svi.steps, "mc_samples": self.svi.mc_samples},
            "history": [
                {"i": c.query.i, "j": c.query.j, "c": c.c, "eig": c.eig_at_selection}
                for c in self.history
            ],
            "posterior": {
                "mean": self.posterior.mean.tolist(),
                "log_std": self.posterior.log_std.tolist(),
            },
        }
        if self.oracle_z is not None:
            out["oracle_z"] = self.oracle_z.tolist()
            out["rmse_trace"] = list(self.rmse_trace)
        return out


def rmse(estimate, truth) -> float:
    a = np.asarray(estimate, dtype=float).reshape(-1)
    b = np.asarray(truth, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise DomainError("dimension mismatch in rmse")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def delta(query: ExpertQuery, z, sources: EmbeddingSet) -> float:
    """Signed dissimilarity difference; positive means source i is closer."""
    zv = np.asarray(z.z if hasattr(z, "z") else z, dtype=float)
    zi = sources.get(query.i)
    zj = sources.get(query.j)
    return float(np.linalg.norm(zv - zj) - np.linalg.norm(zv - zi))


def probit_lik(query: ExpertQuery, z, sources: EmbeddingSet, tau: float) -> float:
    """P(expert answers 'i closer') under the probit response model."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    a = np.clip(tau * delta(query, z, sources), -PROBIT_ARG_CLAMP, PROBIT_ARG_CLAMP)
    return float(ndtr(a))


def _phi_over_big_phi(a: np.ndarray) -> np.ndarray:
    # d/da log(Phi(a)), stable for a down to the clamp
    return np.exp(_NORM_CONST - 0.5 * a**2 - log_ndtr(a))


def preference_elbo_grad(
    q: DiagGaussian,
    comparisons: list[Comparison],
    sources: EmbeddingSet,
    tau: float,
    n_samples: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative ELBO of the preference model and its gradients in q.

    The likelihood term is a reparameterized Monte Carlo average over the
    embedding posterior; the KL to the standard normal prior is closed
    form.  ``noise`` pins the draws for finite-difference verification.
    """
    from .bayes import kl_diag, kl_diag_grad_q

    d = q.dim
    if noise is None:
        if rng is None:
            raise ConfigurationError("either rng or noise must be provided")
        noise = rng.standard_normal((n_samples, d))
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (n_samples, d):
            raise DomainError("noise has wrong shape")
    std = q.std
    z_samples = q.mean + std * noise  # S x d

    prior = DiagGaussian.isotropic(d)
    value = kl_diag(q, prior)
    g_mean, g_log_std = kl_diag_grad_q(q, prior)

    if comparisons:
        idx = {tid: k for k, tid in enumerate(sources.ids)}
        i_idx = np.array([idx[c.query.i] for c in comparisons])
        j_idx = np.array([idx[c.query.j] for c in comparisons])
        signs = np.array([1.0 if c.c == 1 else -1.0 for c in comparisons])

        diff = z_samples[:, None, :] - sources.Z[None, :, :]  # S x n x d
        dist = np.maximum(np.linalg.norm(diff, axis=2), 1e-12)  # S x n
        unit = diff / dist[:, :, None]
        deltas = dist[:, j_idx] - dist[:, i_idx]  # S x B
        a = np.clip(tau * signs[None, :] * deltas, -PROBIT_ARG_CLAMP, PROBIT_ARG_CLAMP)
        loglik_per_sample = log_ndtr(a).sum(axis=1)  # S
        value -= float(loglik_per_sample.mean())

        ratio = _phi_over_big_phi(a)  # S x B
        coeff = tau * signs[None, :] * ratio
        grad_z = np.einsum("sb,sbd->sd", coeff, unit[:, j_idx, :] - unit[:, i_idx, :])
        g_mean -= grad_z.mean(axis=0)
        g_log_std -= (grad_z * noise * std).mean(axis=0)

    return float(value), g_mean, g_log_std


def _run_svi(
    start: DiagGaussian,
    comparisons: list[Comparison],
    sources: EmbeddingSet,
    tau: float,
    params: SviParams,
    seed: int,
    stream_tag: int,
) -> DiagGaussian:
    q = start.copy()
    opt_mean = AdamState.like(q.mean)
    opt_ls = AdamState.like(q.log_std)
    for step in range(params.steps):
        rng = substream(seed, "svi", stream_tag, step)
        value, g_mean, g_ls = preference_elbo_grad(
            q, comparisons, sources, tau, params.mc_samples, rng=rng
        )
        if not (np.isfinite(value) and np.all(np.isfinite(g_mean)) and np.all(np.isfinite(g_ls))):
            raise NumericalError(f"SVI diverged at step {step}")
        q.mean = q.mean - opt_mean.step(g_mean, params.lr)
        q.log_std = q.log_std - opt_ls.step(g_ls, params.lr)
    return q


def svi_update(session: ExpertSession) -> DiagGaussian:
    """Refit the embedding posterior on the full comparison history.

    Warm-starts from the current posterior; on divergence the posterior is
    reset to the prior and the history replayed once before giving up.
    """
    tag = len(session.history)
    try:
        q = _run_svi(
            session.posterior, session.history, session.sources, session.tau,
            session.svi, session.rng_seed, tag,
        )
    except NumericalError:
        log.warning("SVI diverged; replaying history from the prior")
        q = _run_svi(
            DiagGaussian.isotropic(session.sources.d),
            session.history, session.sources, session.tau,
            session.svi, session.rng_seed, tag,
        )
    session.posterior = q
    return q


def binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 1e-15, 1.0 - 1e-15)
    return -(p * np.log(p) + (1.0 - p) * np.log1p(-p))


def _posterior_samples(session: ExpertSession, n: int) -> np.ndarray:
    rng = substream(session.rng_seed, "bald", len(session.history))
    return session.posterior.mean + session.posterior.std * rng.standard_normal(
        (n, session.posterior.dim)
    )


def bald_eig(
    session: ExpertSession, query: ExpertQuery, z_samples: np.ndarray | None = None
) -> float:
    """Expected information gain (nats) of asking ``query`` next."""
    if z_samples is None:
        z_samples = _posterior_samples(session, session.bald_mc)
    zi = session.sources.get(query.i)
    zj = session.sources.get(query.j)
    di = np.linalg.norm(z_samples - zi, axis=1)
    dj = np.linalg.norm(z_samples - zj, axis=1)
    a = np.clip(session.tau * (dj - di), -PROBIT_ARG_CLAMP, PROBIT_ARG_CLAMP)
    p = ndtr(a)
    return float(binary_entropy(p.mean()) - binary_entropy(p).mean())


def candidate_pairs(session: ExpertSession) -> list[tuple[str, str]]:
    """Unasked unordered pairs in lexicographic order; full pool on exhaustion."""
    pool = list(combinations(sorted(session.sources.ids), 2))
    asked = session.asked_pairs()
    fresh = [p for p in pool if p not in asked]
    if fresh:
        return fresh
    if not session.pool_exhausted:
        session.pool_exhausted = True
        log.warning("query pool exhausted; allowing repeats")
    return pool


def select_query(session: ExpertSession) -> tuple[ExpertQuery, float]:
    """Next query and its acquisition value (EIG; NaN in random mode)."""
    if session.remaining <= 0:
        raise ConfigurationError("query budget exhausted")
    pairs = candidate_pairs(session)
    if session.acquisition == "random":
        rng = substream(session.rng_seed, "acq", len(session.history))
        i, j = pairs[int(rng.integers(len(pairs)))]
        q = ExpertQuery(i, j)
        return q, bald_eig(session, q)
    z_samples = _posterior_samples(session, session.bald_mc)
    best_pair = None
    best_eig = -np.inf
    for i, j in pairs:
        e = bald_eig(session, ExpertQuery(i, j), z_samples=z_samples)
        if e > best_eig:  # strict: ties keep the lexicographically first pair
            best_eig = e
            best_pair = (i, j)
    return ExpertQuery(*best_pair), float(best_eig)


def simulate_expert(
    query: ExpertQuery,
    z_true,
    tau_expert: float,
    rng: np.random.Generator,
    sources: EmbeddingSet,
) -> int:
    """Noisy oracle answer drawn from the probit response model."""
    if tau_expert <= 0:
        raise DomainError("tau_expert must be positive")
    zv = np.asarray(z_true.z if hasattr(z_true, "z") else z_true, dtype=float)
    a = np.clip(
        tau_expert * delta(query, zv, sources), -PROBIT_ARG_CLAMP, PROBIT_ARG_CLAMP
    )
    return int(rng.uniform() < ndtr(a))


@dataclass
class SimulatedExpert:
    """Answer source backed by the true embedding geometry."""

    z_true: np.ndarray
    tau_expert: float
    sources: EmbeddingSet  # the expert's reference embeddings
    seed: int = 0

    def __call__(self, query: ExpertQuery, index: int) -> int:
        rng = substream(self.seed, "expert_answer", index)
        return simulate_expert(query, self.z_true, self.tau_expert, rng, self.sources)


def add_comparison(
    session: ExpertSession,
    query: ExpertQuery,
    c: int,
    eig: float,
    timestamp: float | None = None,
) -> Comparison:
    if session.remaining <= 0:
        raise ConfigurationError("budget exhausted")
    comp = Comparison(
        query=query, c=int(c), eig_at_selection=float(eig),
        timestamp=time.time() if timestamp is None else timestamp,
    )
    session.history.append(comp)
    return comp


def run_loop(session: ExpertSession, answer) -> dict:
    """Drive select/answer/update until the budget is spent.

    ``answer`` is any callable (query, index) -> {0, 1}; use
    :class:`SimulatedExpert` for simulation studies.
    """
    mean_trace = [session.posterior.mean.copy()]
    while session.remaining > 0:
        query, eig = select_query(session)
        c = answer(query, len(session.history))
        add_comparison(session, query, c, eig)
        svi_update(session)
        mean_trace.append(session.posterior.mean.copy())
        if session.oracle_z is not None:
            session.rmse_trace.append(session.current_rmse())
    out = {"z_hat": session.posterior.mean.copy(), "mean_trace": mean_trace}
    if session.oracle_z is not None:
        out["rmse_trace"] = list(session.rmse_trace)
    return out
