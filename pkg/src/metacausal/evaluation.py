"""Metrics and empirical theory checks.

AUROC and log loss drive the experiment tables; the remaining routines
verify, by Monte Carlo, that the prior-induced risk is Lipschitz in the
embedding and that the embedding-conditioned prior mitigates negative
transfer when the inference errors are small relative to the task shift.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .bayes import DiagGaussian, PredictorSpec, logits
from .errors import ConfigurationError, DomainError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
LOSS_BOUND = 1.0  # zero-one loss bound used by the theory checks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling.

    Returns NaN (with a warning) when only one class is present.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DomainError("scores and labels must have equal length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUROC undefined for single-class labels", RuntimeWarning)
        return float("nan")
    ranks = rankdata(scores)
    u = float(np.sum(ranks[labels == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def log_loss(scores, labels) -> float:
    """Mean binary cross-entropy with probability clamping."""
    p = np.clip(np.asarray(scores, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise DomainError("scores and labels must have equal length")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def negative_transfer(scores_method, scores_no_transfer, labels) -> float:
    """Log-loss gap to the no-transfer baseline; positive means transfer hurt."""
    return log_loss(scores_method, labels) - log_loss(scores_no_transfer, labels)


@dataclass
class RiskEstimate:
    value: float
    n_param_samples: int
    n_data: int
    std_err: float


def prior_induced_risk(
    prior: DiagGaussian,
    X: np.ndarray,
    y: np.ndarray,
    predictor: PredictorSpec,
    n_param_samples: int,
    rng: np.random.Generator,
) -> RiskEstimate:
    """Monte Carlo mean of the zero-one risk under parameters drawn from the prior."""
    if n_param_samples < 100:
        raise ConfigurationError("need at least 100 parameter samples")
    draws = prior.mean + prior.std * rng.standard_normal((n_param_samples, prior.dim))
    y = np.asarray(y)
    risks = np.empty(n_param_samples)
    for i in range(n_param_samples):
        pred = (logits(predictor, draws[i], X) > 0.0).astype(int)
        risks[i] = np.mean(pred != y)
    return RiskEstimate(
        value=float(risks.mean()),
        n_param_samples=n_param_samples,
        n_data=X.shape[0],
        std_err=float(risks.std(ddof=1) / np.sqrt(n_param_samples)),
    )


def lipschitz_constant(w_emb: np.ndarray, sigma: float, loss_bound: float = LOSS_BOUND) -> float:
    """Bound constant: loss_bound * spectral_norm(W) / (2 sigma)."""
    return loss_bound * float(np.linalg.norm(w_emb, 2)) / (2.0 * sigma)


def check_lipschitz(
    prior1: DiagGaussian,
    prior2: DiagGaussian,
    z1: np.ndarray,
    z2: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    predictor: PredictorSpec,
    w_emb: np.ndarray,
    sigma: float,
    n_param_samples: int,
    rng: np.random.Generator,
) -> dict:
    """Check |risk(z1) - risk(z2)| <= L ||z1 - z2|| within MC tolerance."""
    r1 = prior_induced_risk(prior1, X, y, predictor, n_param_samples, rng)
    r2 = prior_induced_risk(prior2, X, y, predictor, n_param_samples, rng)
    lhs = abs(r1.value - r2.value)
    rhs = lipschitz_constant(w_emb, sigma) * float(np.linalg.norm(np.asarray(z1) - np.asarray(z2)))
    tol = 3.0 * float(np.hypot(r1.std_err, r2.std_err))
    return {
        "lhs": lhs,
        "rhs": rhs,
        "holds": bool(lhs <= rhs + tol),
        "mc_tolerance": tol,
    }


@dataclass
class EpsDecomposition:
    """Distances decomposing the prior mismatch, and the implied bound."""

    eps_ood: float
    eps_causal: float
    eps_expert: float
    lipschitz_const: float
    bound: float


def eps_decomposition(
    z_true, z_discovered, z_deployed, z_source_mean, w_emb: np.ndarray, sigma: float
) -> EpsDecomposition:
    vecs = [np.asarray(v, dtype=float).reshape(-1) for v in (z_true, z_discovered, z_deployed, z_source_mean)]
    if len({v.shape[0] for v in vecs}) != 1:
        raise DomainError("embedding dimensions disagree")
    z_t, z_tilde, z_hat, z_bar = vecs
    e_ood = float(np.linalg.norm(z_t - z_bar))
    e_causal = float(np.linalg.norm(z_tilde - z_t))
    e_expert = float(np.linalg.norm(z_hat - z_tilde))
    lip = lipschitz_constant(w_emb, sigma)
    return EpsDecomposition(
        eps_ood=e_ood,
        eps_causal=e_causal,
        eps_expert=e_expert,
        lipschitz_const=lip,
        bound=lip * (e_ood + e_causal + e_expert),
    )


def check_nt_mitigation(
    rows: list[dict],
    n_boot: int = 2000,
    seed: int = 0,
) -> dict:
    """Paired comparison of negative transfer under the embedding-conditioned
    vs. global prior, restricted to runs where the inference errors are
    dominated by the task shift.

    Each row needs: nt_causal, nt_global, eps_expert, eps_causal, eps_ood.
    """
    subset = [
        r for r in rows if r["eps_expert"] + r["eps_causal"] <= r["eps_ood"]
    ]
    if not subset:
        return {"condition_met": False, "message": "condition never met", "n": 0}
    nt_c = np.array([r["nt_causal"] for r in subset])
    nt_g = np.array([r["nt_global"] for r in subset])
    diff = nt_c - nt_g
    rng = np.random.default_rng(seed)
    boots = np.array(
        [diff[rng.integers(0, len(diff), len(diff))].mean() for _ in range(n_boot)]
    )
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return {
        "condition_met": True,
        "n": len(subset),
        "mean_nt_causal": float(nt_c.mean()),
        "mean_nt_global": float(nt_g.mean()),
        "mean_diff": float(diff.mean()),
        "ci_low": float(lo),
        "ci_high": float(hi),
        # mitigation claim violated only if the CI shows causal strictly worse
        "violation": bool(lo > 0.0),
    }
