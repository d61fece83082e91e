"""Semi-supervised k-means with pinned labelled samples.

Known classes get one center each, initialised at the mean of that class's
labelled rows; labelled rows stay assigned to their class center for the
whole run. Remaining centers are seeded from unlabelled rows by k-means++,
with distances measured to every center chosen so far (class means
included). Lloyd iterations then alternate assignment and mean updates.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import SplitMix64
from .store import EmbeddingBundle

log = logging.getLogger(__name__)

EMPTY_POLICIES = ("keep", "farthest")


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    n_clusters: int
    max_iters: int = 300
    tol: float = 1e-6
    seed: int = 0
    freeze_known_centers: bool = False
    empty_cluster: str = "keep"

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ClusteringError("n_clusters must be positive")
        if self.max_iters < 1:
            raise ClusteringError("max_iters must be positive")
        if not self.tol >= 0:
            raise ClusteringError("tol must be non-negative")
        if self.empty_cluster not in EMPTY_POLICIES:
            raise ClusteringError(f"empty_cluster must be one of {EMPTY_POLICIES}")


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    pinned: dict[str, int]
    inertia_trace: list[float]
    iterations_run: int
    converged: bool
    config: ClusterConfig
    sample_ids: list[str] = field(default_factory=list)
    history: Optional[list[np.ndarray]] = None

    def to_json(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "pinned": dict(sorted(self.pinned.items())),
            "assignments": [int(a) for a in self.assignments],
            "sample_ids": list(self.sample_ids),
            "inertia_trace": [float(x) for x in self.inertia_trace],
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "config": asdict(self.config),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterModel":
        cfg = dict(obj["config"])
        cfg["tol"] = float(cfg["tol"])
        return cls(
            centers=np.asarray(obj["centers"], dtype=np.float64),
            assignments=np.asarray(obj["assignments"], dtype=np.int64),
            pinned={str(k): int(v) for k, v in obj["pinned"].items()},
            inertia_trace=[float(x) for x in obj["inertia_trace"]],
            iterations_run=int(obj["iterations_run"]),
            converged=bool(obj["converged"]),
            config=ClusterConfig(**cfg),
            sample_ids=list(obj.get("sample_ids", [])),
        )

    def save(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: os.PathLike | str) -> "ClusterModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _rows_and_labels(fused: EmbeddingBundle) -> tuple[np.ndarray, list[Optional[str]], list[str]]:
    recs = fused.records_by_row()
    return fused.as_float64(), [r.label for r in recs], [r.id for r in recs]


def sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """``n x K`` squared Euclidean distances, one center at a time."""
    out = np.empty((x.shape[0], centers.shape[0]), dtype=np.float64)
    for j, c in enumerate(centers):
        diff = x - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def known_classes(labels) -> list[str]:
    return sorted({lab for lab in labels if lab is not None})


def init_centers(fused: EmbeddingBundle, cfg: ClusterConfig) -> tuple[np.ndarray, dict[str, int]]:
    x, labels, ids = _rows_and_labels(fused)
    classes = known_classes(labels)
    if cfg.n_clusters < len(classes):
        raise ClusteringError(f"n_clusters={cfg.n_clusters} < {len(classes)} known classes")
    pinned = {c: j for j, c in enumerate(classes)}
    label_arr = np.array([lab if lab is not None else "" for lab in labels], dtype=object)
    centers = np.zeros((cfg.n_clusters, fused.dim), dtype=np.float64)
    for c, j in pinned.items():
        members = np.flatnonzero(label_arr == c)
        centers[j] = x[members].sum(axis=0) / members.size

    n_novel = cfg.n_clusters - len(classes)
    if n_novel == 0:
        return centers, pinned

    # candidates ordered by record id so seeding ignores physical row order
    unl = [i for i, lab in enumerate(labels) if lab is None]
    unl.sort(key=lambda i: ids[i])
    if len(unl) < n_novel:
        raise ClusteringError(f"{len(unl)} unlabelled rows cannot seed {n_novel} novel centers")
    cand = x[unl]
    rng = SplitMix64(cfg.seed)

    first = len(classes)
    centers[first] = cand[rng.randbelow(len(unl))]
    if first:
        d2 = sq_distances(cand, centers[: first + 1]).min(axis=1)
    else:
        d2 = sq_distances(cand, centers[:1])[:, 0]
    for j in range(first + 1, cfg.n_clusters):
        cum = np.cumsum(d2)
        total = cum[-1]
        if not total > 0:
            raise ClusteringError("too few distinct unlabelled rows to seed novel centers")
        u = rng.random() * total
        pick = min(int(np.searchsorted(cum, u, side="right")), len(unl) - 1)
        centers[j] = cand[pick]
        diff = cand - centers[j]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return centers, pinned


def assign(fused: EmbeddingBundle, centers: np.ndarray, pinned: dict[str, int]) -> np.ndarray:
    x, labels, _ = _rows_and_labels(fused)
    return _assign(x, labels, np.asarray(centers, dtype=np.float64), pinned)[0]


def _assign(x, labels, centers, pinned) -> tuple[np.ndarray, np.ndarray]:
    if centers.shape[0] == 0 or centers.shape[1] != x.shape[1]:
        raise ClusteringError(f"centers shape {centers.shape} incompatible with data dim {x.shape[1]}")
    d2 = sq_distances(x, centers)
    out = np.argmin(d2, axis=1)  # first minimum: lowest center index wins ties
    for i, lab in enumerate(labels):
        if lab is not None:
            try:
                out[i] = pinned[lab]
            except KeyError:
                raise ClusteringError(f"label {lab!r} has no pinned center") from None
    return out, d2[np.arange(x.shape[0]), out]


def update_centers(
    fused: EmbeddingBundle,
    assignments,
    n_clusters: int,
    previous: Optional[np.ndarray] = None,
) -> np.ndarray:
    x = fused.as_float64()
    return _update(x, np.asarray(assignments), n_clusters, previous, frozen=(), empty="keep")


def _update(x, assignments, n_clusters, previous, frozen, empty, dist=None) -> np.ndarray:
    centers = np.zeros((n_clusters, x.shape[1])) if previous is None else previous.copy()
    taken: set[int] = set()
    for j in range(n_clusters):
        if j in frozen:
            continue
        members = np.flatnonzero(assignments == j)
        if members.size:
            centers[j] = x[members].sum(axis=0) / members.size
            continue
        if empty == "farthest" and dist is not None:
            far = next(int(i) for i in np.argsort(-dist, kind="stable") if int(i) not in taken)
            taken.add(far)
            centers[j] = x[far]
            log.warning("cluster %d is empty; re-seeded at row %d", j, far)
        else:
            log.warning("cluster %d is empty; keeping its previous center", j)
    return centers


def fit(fused: EmbeddingBundle, cfg: ClusterConfig, keep_history: bool = False) -> ClusterModel:
    x, labels, ids = _rows_and_labels(fused)
    centers, pinned = init_centers(fused, cfg)
    frozen = set(pinned.values()) if cfg.freeze_known_centers else set()
    trace: list[float] = []
    history: list[np.ndarray] = []
    converged = False
    it = 0
    assignments = np.zeros(x.shape[0], dtype=np.int64)
    while it < cfg.max_iters:
        it += 1
        assignments, dist = _assign(x, labels, centers, pinned)
        trace.append(float(dist.sum()))
        if keep_history:
            history.append(assignments.copy())
        new = _update(x, assignments, cfg.n_clusters, centers, frozen, cfg.empty_cluster, dist)
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift <= cfg.tol:
            converged = True
            break
    return ClusterModel(
        centers=centers,
        assignments=assignments.astype(np.int64),
        pinned=pinned,
        inertia_trace=trace,
        iterations_run=it,
        converged=converged,
        config=cfg,
        sample_ids=ids,
        history=history if keep_history else None,
    )


def inertia(fused: EmbeddingBundle, centers: np.ndarray, assignments) -> float:
    x = fused.as_float64()
    diff = x - np.asarray(centers)[np.asarray(assignments)]
    return float(np.einsum("ij,ij->", diff, diff))
