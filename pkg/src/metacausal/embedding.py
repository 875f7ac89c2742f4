"""Embedding-space geometry and alternative embedding constructions.

Covers the metric and similarity predicate, the norm-preserving
directional corruption used to model imperfect causal discovery, and the
correlation-based embeddings that serve as the non-causal baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .taskgen import TaskDataset, TaskEmbedding

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    """Named embeddings with a provenance tag."""

    ids: list[str]
    Z: np.ndarray  # n x d
    provenance: str = "oracle"

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim != 2 or self.Z.shape[0] != len(self.ids):
            raise ConfigurationError("ids and Z row count disagree")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("ids must be unique")
        if not np.all(np.isfinite(self.Z)):
            raise ConfigurationError("embedding rows must be finite")

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def get(self, task_id: str) -> np.ndarray:
        try:
            return self.Z[self.ids.index(task_id)]
        except ValueError:
            raise DomainError(f"unknown task id {task_id!r}") from None

    def to_json(self) -> dict:
        return {
            "ids": list(self.ids),
            "d": self.d,
            "provenance": self.provenance,
            "rows": self.Z.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EmbeddingSet":
        return cls(
            ids=list(payload["ids"]),
            Z=np.asarray(payload["rows"], dtype=float),
            provenance=payload.get("provenance", "oracle"),
        )


def dist(z1, z2) -> float:
    """Euclidean metric on the embedding space."""
    a = np.asarray(z1.z if isinstance(z1, TaskEmbedding) else z1, dtype=float)
    b = np.asarray(z2.z if isinstance(z2, TaskEmbedding) else z2, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def eps_similar(z1, z2, eps: float) -> bool:
    if eps < 0:
        raise DomainError("eps must be non-negative")
    return dist(z1, z2) <= eps


def corrupt(z: TaskEmbedding, sigma_c: float, rng: np.random.Generator) -> TaskEmbedding:
    """Directional misalignment that preserves the embedding norm.

    A random unit direction u is mixed in at relative strength sigma_c and
    the result is rescaled back to the original norm.  The zero embedding
    is returned unchanged (the construction degenerates there).
    """
    if sigma_c < 0:
        raise DomainError("sigma_c must be non-negative")
    zv = z.z
    norm = np.linalg.norm(zv)
    if norm == 0.0:
        log.debug("corrupt called on zero embedding; returning unchanged")
        return TaskEmbedding(zv.copy())
    for _ in range(16):
        direction = rng.standard_normal(zv.shape[0])
        dn = np.linalg.norm(direction)
        if dn == 0.0:
            continue
        u = direction / dn
        mixed = zv + sigma_c * norm * u
        mn = np.linalg.norm(mixed)
        if mn > 1e-12:
            return TaskEmbedding(norm * mixed / mn)
    raise DomainError("could not draw a usable corruption direction")


def corrupt_set(
    emb: EmbeddingSet, sigma_c: float, rng: np.random.Generator
) -> EmbeddingSet:
    rows = [corrupt(TaskEmbedding(row), sigma_c, rng).z for row in emb.Z]
    return EmbeddingSet(
        ids=list(emb.ids), Z=np.stack(rows), provenance=f"corrupted(sigma_c={sigma_c:g})"
    )


def mean_source_embedding(emb: EmbeddingSet) -> TaskEmbedding:
    if emb.Z.shape[0] == 0:
        raise ConfigurationError("cannot average an empty embedding set")
    return TaskEmbedding(emb.Z.mean(axis=0))


@dataclass
class CorrelationProjector:
    """PCA basis over per-task feature-label correlation vectors."""

    loadings: np.ndarray  # feature_dim x d, orthonormal columns
    center: np.ndarray  # feature_dim
    flagged_columns: list[int] = field(default_factory=list)

    def __post_init__(self):
        gram = self.loadings.T @ self.loadings
        if not np.allclose(gram, np.eye(gram.shape[0]), atol=1e-8):
            raise ConfigurationError("loadings columns must be orthonormal")


def correlation_vector(dataset: TaskDataset) -> tuple[np.ndarray, list[int]]:
    """Pearson correlation of each feature with the label; flags dead columns."""
    X, y = dataset.X, dataset.y.astype(float)
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = xc.std(axis=0)
    sy = yc.std()
    flagged = [int(j) for j in np.nonzero(sx == 0.0)[0]]
    if sy == 0.0:
        log.warning("task %s has a single-class label vector", dataset.task_id)
        return np.zeros(X.shape[1]), flagged
    denom = sx * sy
    corr = np.zeros(X.shape[1])
    ok = denom > 0
    corr[ok] = (xc[:, ok] * yc[:, None]).mean(axis=0) / denom[ok]
    if flagged:
        log.warning("task %s: zero-variance columns %s", dataset.task_id, flagged)
    return corr, flagged


def fit_correlation_projector(source_datasets: list[TaskDataset], d: int = 4) -> CorrelationProjector:
    """Fit the d-dimensional PCA basis on source correlation vectors."""
    if len(source_datasets) < d:
        raise ConfigurationError(f"need at least {d} source tasks to fit the projector")
    flagged: list[int] = []
    rows = []
    for ds in source_datasets:
        c, fl = correlation_vector(ds)
        rows.append(c)
        flagged.extend(fl)
    C = np.stack(rows)
    center = C.mean(axis=0)
    _, _, vt = np.linalg.svd(C - center, full_matrices=False)
    loadings = vt[:d].T
    # fix signs so the dominant entry of each component is positive
    for k in range(loadings.shape[1]):
        j = np.argmax(np.abs(loadings[:, k]))
        if loadings[j, k] < 0:
            loadings[:, k] = -loadings[:, k]
    return CorrelationProjector(loadings=loadings, center=center, flagged_columns=sorted(set(flagged)))


def embed_by_correlation(projector: CorrelationProjector, dataset: TaskDataset) -> TaskEmbedding:
    c, _ = correlation_vector(dataset)
    return TaskEmbedding(projector.loadings.T @ (c - projector.center))
