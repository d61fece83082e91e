"""Exhaustive cosine top-k search of caption embeddings for image queries."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .store import EmbeddingBundle, l2_normalize, normalize_rows


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    hits: tuple[tuple[str, float], ...]
    k: int

    @property
    def caption_ids(self) -> list[str]:
        return [cid for cid, _ in self.hits]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.hits]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(l2_normalize(a), l2_normalize(b)), -1.0, 1.0))


class CaptionIndex:
    """A text corpus with rows pre-normalized once, in float64.

    Scores are computed per query as ``units @ q`` so every query sees the same
    arithmetic whether it is run alone, in a batch, or on a worker thread.
    """

    def __init__(self, corpus: EmbeddingBundle):
        if corpus.count == 0:
            raise ValueError("empty corpus")
        self.corpus = corpus
        self.units = normalize_rows(corpus.data)
        by_row = corpus.records_by_row()
        self.row_ids = [r.id for r in by_row]

    @property
    def dim(self) -> int:
        return self.corpus.dim

    def search(self, query, k: int, query_id: str = "") -> RetrievalResult:
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: query {q.shape[0] if q.ndim else 0} vs corpus {self.dim}")
        scores = self.units @ l2_normalize(q)
        # stable sort on -score keeps ascending row order among ties
        order = np.argsort(-scores, kind="stable")[:k]
        hits = tuple(
            (self.row_ids[j], float(np.clip(scores[j], -1.0, 1.0))) for j in order
        )
        return RetrievalResult(query_id, hits, k)


def retrieve_topk(query, corpus: EmbeddingBundle, k: int, query_id: str = "") -> RetrievalResult:
    return CaptionIndex(corpus).search(query, k, query_id)


def batch_retrieve(
    queries: EmbeddingBundle,
    corpus: EmbeddingBundle | CaptionIndex,
    k: int,
    workers: int = 1,
) -> list[RetrievalResult]:
    """One result per query row, in query row order."""
    index = corpus if isinstance(corpus, CaptionIndex) else CaptionIndex(corpus)
    if queries.count == 0:
        return []
    if queries.dim != index.dim:
        raise ValueError(f"dimension mismatch: queries {queries.dim} vs corpus {index.dim}")
    rows = queries.records_by_row()
    q64 = queries.as_float64()

    def one(i: int) -> RetrievalResult:
        return index.search(q64[i], k, rows[i].id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(queries.count)))
    return [one(i) for i in range(queries.count)]


def write_retrievals(results: Sequence[RetrievalResult], path: os.PathLike | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps({"query_id": r.query_id, "k": r.k, "hits": [list(h) for h in r.hits]}) + "\n")
    return path


def read_retrievals(path: os.PathLike | str) -> list[RetrievalResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            hits = tuple((str(c), float(s)) for c, s in obj["hits"])
            out.append(RetrievalResult(str(obj["query_id"]), hits, int(obj.get("k", len(hits)))))
    return out
