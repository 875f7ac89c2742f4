"""Synthetic task families from a shared linear structural causal model.

Each task is a binary prediction problem whose mechanism is controlled by
a low-dimensional task embedding: the embedding sets the effect vector of
the causal parent features, outcomes are thresholded at a fixed quantile,
and one non-parent column carries a label-correlated shortcut whose
strength decays with the shift magnitude of target tasks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalError
from .jsonio import content_hash, dump, dumps, load
from .rng import substream

log = logging.getLogger(__name__)

DEFAULT_SHIFT_LEVELS = (0.1, 1.0, 2.0, 3.0, 4.0)
DEFAULT_SOURCE_SD = 0.8
DEFAULT_N_SOURCE = 20


@dataclass(frozen=True)
class TaskEmbedding:
    """Point in the causal embedding space."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if not np.all(np.isfinite(z)):
            raise DomainError("embedding has non-finite entries")
        object.__setattr__(self, "z", z)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.z))


@dataclass(frozen=True)
class GeneratorSpec:
    """Frozen parameters of one synthetic world.

    ``effect_weights`` maps embeddings to effect vectors; its rows and the
    entries of ``effect_bias`` are zero outside the parent set.
    """

    seed: int
    feature_dim: int = 10
    embed_dim: int = 4
    parents: tuple[int, ...] = (1, 2, 3, 4)  # 1-based feature indices
    effect_weights: np.ndarray = None  # feature_dim x embed_dim
    effect_bias: np.ndarray = None  # feature_dim
    effect_noise_sd: float = 0.15
    outcome_noise_sd: float = 0.6
    alpha_source: float = 0.3
    shift_max: float = 4.0
    label_quantile: float = 0.7
    shift_direction: np.ndarray = None  # unit vector, embed_dim
    samples_per_task: int = 500

    def __post_init__(self):
        if not 0.0 < self.label_quantile < 1.0:
            raise ConfigurationError("label_quantile must lie in (0, 1)")
        pset = set(self.parents)
        if not pset or not pset.issubset(range(1, self.feature_dim + 1)):
            raise ConfigurationError("parents must be 1-based feature indices")
        w = np.asarray(self.effect_weights, dtype=float)
        b = np.asarray(self.effect_bias, dtype=float)
        d = np.asarray(self.shift_direction, dtype=float).reshape(-1)
        if w.shape != (self.feature_dim, self.embed_dim):
            raise ConfigurationError("effect_weights has wrong shape")
        if b.shape != (self.feature_dim,):
            raise ConfigurationError("effect_bias has wrong shape")
        if d.shape != (self.embed_dim,):
            raise ConfigurationError("shift_direction has wrong dimension")
        mask = self.parent_mask()
        if np.any(w[~mask] != 0.0) or np.any(b[~mask] != 0.0):
            raise ConfigurationError("non-parent rows of the effect model must be zero")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ConfigurationError("shift_direction must be a unit vector")
        object.__setattr__(self, "effect_weights", w)
        object.__setattr__(self, "effect_bias", b)
        object.__setattr__(self, "shift_direction", d)
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))

    def parent_mask(self) -> np.ndarray:
        mask = np.zeros(self.feature_dim, dtype=bool)
        mask[[p - 1 for p in self.parents]] = True
        return mask

    @property
    def parent_idx(self) -> np.ndarray:
        return np.array([p - 1 for p in self.parents], dtype=int)

    @property
    def spurious_idx(self) -> int:
        # last feature column carries the label shortcut
        return self.feature_dim - 1

    @classmethod
    def create(cls, seed: int, shift_direction=None, **overrides) -> "GeneratorSpec":
        """Draw the frozen effect model for a world from its seed."""
        feature_dim = overrides.pop("feature_dim", 10)
        embed_dim = overrides.pop("embed_dim", 4)
        parents = tuple(overrides.pop("parents", (1, 2, 3, 4)))
        rng_w = substream(seed, "world", "effect_weights")
        rng_b = substream(seed, "world", "effect_bias")
        w = np.zeros((feature_dim, embed_dim))
        b = np.zeros(feature_dim)
        for p in parents:
            w[p - 1] = rng_w.normal(0.0, 0.5, size=embed_dim)
            b[p - 1] = rng_b.uniform(0.5, 1.0)
        if shift_direction is None:
            shift_direction = np.ones(embed_dim)
        shift_direction = np.asarray(shift_direction, dtype=float).reshape(-1)
        nrm = np.linalg.norm(shift_direction)
        if nrm == 0:
            raise ConfigurationError("shift_direction cannot be zero")
        shift_direction = shift_direction / nrm
        return cls(
            seed=seed,
            feature_dim=feature_dim,
            embed_dim=embed_dim,
            parents=parents,
            effect_weights=w,
            effect_bias=b,
            shift_direction=shift_direction,
            **overrides,
        )

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "feature_dim": self.feature_dim,
            "embed_dim": self.embed_dim,
            "parents": list(self.parents),
            "effect_weights": self.effect_weights.tolist(),
            "effect_bias": self.effect_bias.tolist(),
            "effect_noise_sd": self.effect_noise_sd,
            "outcome_noise_sd": self.outcome_noise_sd,
            "alpha_source": self.alpha_source,
            "shift_max": self.shift_max,
            "label_quantile": self.label_quantile,
            "shift_direction": self.shift_direction.tolist(),
            "samples_per_task": self.samples_per_task,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "GeneratorSpec":
        kw = dict(payload)
        kw["parents"] = tuple(kw["parents"])
        kw["effect_weights"] = np.asarray(kw["effect_weights"], dtype=float)
        kw["effect_bias"] = np.asarray(kw["effect_bias"], dtype=float)
        kw["shift_direction"] = np.asarray(kw["shift_direction"], dtype=float)
        return cls(**kw)


@dataclass(frozen=True)
class TaskDataset:
    """Sampled table for one task plus its generating ground truth."""

    task_id: str
    X: np.ndarray
    y: np.ndarray
    effect_vector: np.ndarray
    embedding_true: TaskEmbedding
    shift_s: float
    role: str  # "source" | "target"

    @property
    def n(self) -> int:
        return self.y.shape[0]


def sample_source_embeddings(
    spec: GeneratorSpec, n: int = DEFAULT_N_SOURCE, sd: float = DEFAULT_SOURCE_SD
) -> list[TaskEmbedding]:
    """Draw n centered source embeddings, one independent stream per task."""
    if not isinstance(n, (int, np.integer)) or n <= 0:
        raise ConfigurationError(f"n must be a positive integer, got {n!r}")
    if sd < 0:
        raise ConfigurationError(f"sd must be non-negative, got {sd!r}")
    out = []
    for t in range(n):
        rng = substream(spec.seed, "source_embedding", t)
        out.append(TaskEmbedding(rng.normal(0.0, sd, size=spec.embed_dim)))
    return out


def make_target_embedding(spec: GeneratorSpec, s: float) -> TaskEmbedding:
    """Target embedding at shift magnitude s along the fixed unit direction."""
    if s < 0:
        raise DomainError(f"shift magnitude must be non-negative, got {s}")
    return TaskEmbedding(s * spec.shift_direction)


def _threshold_labels(yc: np.ndarray, quantile: float) -> tuple[np.ndarray, float, bool]:
    m = yc.shape[0]
    k = int(np.ceil(quantile * m))
    tau = np.sort(yc)[k - 1]
    y = (yc > tau).astype(np.int8)
    ok = int(y.sum()) == m - k
    return y, float(tau), ok


def generate_task(
    spec: GeneratorSpec,
    z: TaskEmbedding,
    role: str,
    s: float = 0.0,
    task_id: str | None = None,
) -> TaskDataset:
    """Sample one task dataset given its embedding.

    The spurious column is redrawn after labels exist:
    ``X_spur = alpha * (2y - 1) + noise`` with alpha fixed for sources and
    decaying linearly in s for targets.
    """
    if role not in ("source", "target"):
        raise DomainError(f"role must be source or target, got {role!r}")
    if z.dim != spec.embed_dim:
        raise DomainError(f"embedding dim {z.dim} != spec embed_dim {spec.embed_dim}")
    if role == "target" and not 0.0 <= s <= spec.shift_max:
        raise DomainError(f"target shift s={s} outside [0, {spec.shift_max}]")
    if task_id is None:
        task_id = f"{role}-{content_hash(dumps(z.z.tolist()))}"

    m = spec.samples_per_task
    mask = spec.parent_mask()

    effects = spec.effect_bias + spec.effect_weights @ z.z
    effects = effects + spec.effect_noise_sd * substream(
        spec.seed, "task", task_id, "effects"
    ).standard_normal(spec.feature_dim)
    effects[~mask] = 0.0

    X = substream(spec.seed, "task", task_id, "features").standard_normal(
        (m, spec.feature_dim)
    )

    rng_out = substream(spec.seed, "task", task_id, "outcome")
    signal = X[:, spec.parent_idx] @ effects[spec.parent_idx]
    for attempt in range(8):
        noise = spec.outcome_noise_sd * rng_out.standard_normal(m)
        yc = signal + noise
        y, _, ok = _threshold_labels(yc, spec.label_quantile)
        if ok:
            break
        log.warning("threshold tie in task %s (attempt %d); redrawing noise", task_id, attempt)
    else:
        raise NumericalError(f"could not break threshold ties for task {task_id}")

    alpha = spec.alpha_source if role == "source" else 0.5 * (1.0 - s / spec.shift_max)
    eps = substream(spec.seed, "task", task_id, "spurious").standard_normal(m)
    X[:, spec.spurious_idx] = alpha * (2.0 * y - 1.0) + eps

    return TaskDataset(
        task_id=task_id,
        X=X,
        y=y.astype(np.int8),
        effect_vector=effects,
        embedding_true=z,
        shift_s=0.0 if role == "source" else float(s),
        role=role,
    )


@dataclass(frozen=True)
class World:
    """One frozen experiment world: sources plus shifted targets."""

    spec: GeneratorSpec
    sources: list[TaskDataset]
    targets: list[TaskDataset]

    def source_embeddings(self) -> np.ndarray:
        return np.stack([t.embedding_true.z for t in self.sources])

    def to_json(self) -> dict:
        def row(t: TaskDataset) -> dict:
            return {
                "task_id": t.task_id,
                "z": t.embedding_true.z.tolist(),
                "s": t.shift_s,
                "X": t.X.tolist(),
                "y": t.y.astype(int).tolist(),
                "e_t": t.effect_vector.tolist(),
            }

        return {
            "spec": self.spec.to_json(),
            "sources": [row(t) for t in self.sources],
            "targets": [row(t) for t in self.targets],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "World":
        spec = GeneratorSpec.from_json(payload["spec"])

        def task(row: dict, role: str) -> TaskDataset:
            return TaskDataset(
                task_id=row["task_id"],
                X=np.asarray(row["X"], dtype=float),
                y=np.asarray(row["y"], dtype=np.int8),
                effect_vector=np.asarray(row["e_t"], dtype=float),
                embedding_true=TaskEmbedding(np.asarray(row["z"], dtype=float)),
                shift_s=float(row["s"]),
                role=role,
            )

        return cls(
            spec=spec,
            sources=[task(r, "source") for r in payload["sources"]],
            targets=[task(r, "target") for r in payload["targets"]],
        )

    def save(self, path) -> None:
        dump(self.to_json(), path)

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_json(load(path))

    def hash(self) -> str:
        return content_hash(dumps(self.to_json()))


def generate_experiment_world(
    spec: GeneratorSpec,
    n_source: int = DEFAULT_N_SOURCE,
    shift_levels=DEFAULT_SHIFT_LEVELS,
    source_sd: float = DEFAULT_SOURCE_SD,
) -> World:
    """Generate the full source/target world for one seed."""
    shift_levels = tuple(float(s) for s in shift_levels)
    if not shift_levels:
        raise ConfigurationError("shift_levels must be non-empty")
    embeddings = sample_source_embeddings(spec, n=n_source, sd=source_sd)
    sources = [
        generate_task(spec, z, "source", task_id=f"src{t:02d}")
        for t, z in enumerate(embeddings)
    ]
    targets = [
        generate_task(
            spec,
            make_target_embedding(spec, s),
            "target",
            s=s,
            task_id=f"tgt{k:02d}",
        )
        for k, s in enumerate(shift_levels)
    ]
    return World(spec=spec, sources=sources, targets=targets)
