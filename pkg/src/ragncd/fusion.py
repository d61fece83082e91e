"""Image/text view fusion.

The text view of a sample is the mean of its retrieved caption embeddings.
Each view is unit-normalized on its own and the two are concatenated, image
first, so both modalities carry equal weight under squared Euclidean distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .retrieval import RetrievalResult
from .store import EmbeddingBundle, l2_normalize

log = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusedView:
    sample_id: str
    vector: np.ndarray
    d_img: int
    d_txt: int


def mean_pool(vectors) -> np.ndarray:
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vecs:
        raise FusionError("empty text view: nothing to pool")
    shape = vecs[0].shape
    if any(v.shape != shape for v in vecs):
        raise FusionError("dimension mismatch among pooled vectors")
    return np.mean(np.stack(vecs), axis=0)


def fuse(image_vec, retrieved, sample_id: str = "", renormalize_joint: bool = False) -> FusedView:
    img = np.asarray(image_vec, dtype=np.float64)
    caps = [np.asarray(c, dtype=np.float64) for c in retrieved]
    for c in caps:
        if not np.any(c):
            raise FusionError("zero caption vector")
    txt = mean_pool(caps)
    vec = np.concatenate([l2_normalize(img), l2_normalize(txt)])
    if renormalize_joint:
        vec = l2_normalize(vec)
    return FusedView(sample_id, vec, img.shape[0], txt.shape[0])


def fuse_dataset(
    images: EmbeddingBundle,
    retrievals: Sequence[RetrievalResult],
    corpus: EmbeddingBundle,
    renormalize_joint: bool = False,
) -> EmbeddingBundle:
    """Fuse every image row with its retrieved captions.

    Output row ``i`` corresponds to image row ``i`` and keeps that row's record
    (labels and ground truth pass through untouched).
    """
    by_query = {r.query_id: r for r in retrievals}
    caption_rows = corpus.id_index()
    img64 = images.as_float64()
    cap64 = corpus.as_float64()
    out = np.zeros((images.count, images.dim + corpus.dim), dtype=np.float32)
    for rec in images.records:
        res = by_query.get(rec.id)
        if res is None:
            raise FusionError(f"no retrieval result for image {rec.id!r}")
        try:
            caps = [cap64[caption_rows[cid]] for cid in res.caption_ids]
            fv = fuse(img64[rec.row], caps, rec.id, renormalize_joint)
        except KeyError as e:
            raise FusionError(f"sample {rec.id!r}: caption {e.args[0]!r} not in corpus") from e
        except ValueError as e:
            raise FusionError(f"sample {rec.id!r}: {e}") from e
        out[rec.row] = fv.vector
    return EmbeddingBundle(out, images.records, False, images.dim + corpus.dim)


def image_only(images: EmbeddingBundle) -> EmbeddingBundle:
    """The no-text ablation: unit-normalized image views alone."""
    img64 = images.as_float64()
    out = np.zeros_like(img64)
    for rec in images.records:
        try:
            out[rec.row] = l2_normalize(img64[rec.row])
        except ValueError as e:
            raise FusionError(f"sample {rec.id!r}: {e}") from e
    return EmbeddingBundle(out.astype(np.float32), images.records, False, images.dim)
