"""Synthetic stand-ins for encoder outputs and caption corpora.

Class means sit on a regular simplex scaled so every pair is
``class_separation`` apart (in units of the unit within-class noise). Image
rows are ``mean + N(0, I)``, then unit-normalized. Image and caption vectors
share one embedding space: each class's text anchor is the direction of its
image mean, and its captions are ``anchor + text_noise * g`` with
``g ~ N(0, I / d)``, unit-normalized.

``style_modes > 0`` adds image-only nuisance structure: every image is
shifted by one of ``style_modes`` offsets of length ``style_strength`` that
lie orthogonal to the class-mean subspace. Styles are shared across classes,
so they can pull k-means on image features toward grouping by style, while
cosine scores against the class text anchors ignore them.

Distractor captions carry no class information: each is a style direction
plus ``distractor_noise * g``, or a uniformly random direction when there are
no styles. They score just below a class's own captions for matching-style
images, so large retrieval k drags style back into the text view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .store import EmbeddingBundle, SampleRecord, make_bundle


class SynthError(ValueError):
    pass


def class_name(c: int) -> str:
    return f"class_{c:03d}"


@dataclass(frozen=True)
class MixtureSpec:
    num_classes: int = 10
    dim_img: int = 32
    dim_txt: int = 32
    samples_per_class: int = 100
    class_separation: float = 3.0
    text_noise: float = 0.1
    captions_per_class: int = 5
    seed: int = 0
    distractors_per_class: int = 0
    distractor_noise: float = 0.5
    style_modes: int = 0
    style_strength: float = 0.0

    def __post_init__(self):
        for name in ("num_classes", "dim_img", "dim_txt", "samples_per_class", "captions_per_class"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be positive")
        if not self.class_separation > 0:
            raise SynthError("class_separation must be positive")
        if min(self.text_noise, self.distractor_noise, self.distractors_per_class,
               self.style_modes, self.style_strength) < 0:
            raise SynthError("noise levels and distractor count must be non-negative")
        if self.dim_img != self.dim_txt:
            raise SynthError("image and caption vectors share one space: dim_img must equal dim_txt")


@dataclass(frozen=True)
class SplitSpec:
    known_classes: frozenset
    labeled_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "known_classes", frozenset(str(c) for c in self.known_classes))
        if not self.known_classes:
            raise SynthError("known_classes must be nonempty")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise SynthError("labeled_fraction must lie in (0, 1]")


def simplex_means(rng: np.random.Generator, num_classes: int, dim: int, separation: float) -> np.ndarray:
    if num_classes == 1:
        return np.zeros((1, dim))
    if dim >= num_classes:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        vertices = np.eye(num_classes) - 1.0 / num_classes
        return (separation / math.sqrt(2.0)) * vertices @ basis.T
    # too few dimensions for an exact simplex: random directions, separation holds on average
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return (separation / math.sqrt(2.0)) * dirs


def style_offsets(rng: np.random.Generator, means: np.ndarray, modes: int, strength: float) -> np.ndarray:
    raw = rng.standard_normal((modes, means.shape[1]))
    span, _ = np.linalg.qr(means.T)
    raw -= (raw @ span) @ span.T
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise SynthError("no room orthogonal to the class means for style offsets")
    return strength * raw / norms


def _distractors(rng: np.random.Generator, styles: np.ndarray, c: int, k: int, noise: float) -> np.ndarray:
    d = styles.shape[1]
    g = rng.standard_normal((k, d))
    if not len(styles):
        return g
    centers = _unit(styles)[(c * k + np.arange(k)) % len(styles)]
    return centers + noise * g / math.sqrt(d)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_mixture(spec: MixtureSpec) -> tuple[EmbeddingBundle, EmbeddingBundle, dict[str, Optional[str]]]:
    """Return ``(images, captions, truth)``.

    ``truth`` maps every row id to its generating class (``None`` for
    distractor captions).
    """
    rng = np.random.default_rng(spec.seed)
    C, d, n = spec.num_classes, spec.dim_img, spec.samples_per_class
    means = simplex_means(rng, C, d, spec.class_separation)

    img = np.repeat(means, n, axis=0) + rng.standard_normal((C * n, d))
    styles = np.zeros((0, d))  # keeps the stream unchanged when styles are off
    if spec.style_modes:
        styles = style_offsets(rng, means, spec.style_modes, spec.style_strength)
        img += styles[rng.integers(spec.style_modes, size=C * n)]
    img_ids = [f"img_{c:03d}_{j:05d}" for c in range(C) for j in range(n)]
    img_truth = [class_name(c) for c in range(C) for _ in range(n)]
    images = make_bundle(
        _unit(img).astype(np.float32), img_ids, modality="image", class_truth=img_truth, normalized=True
    )

    # a degenerate single-class mixture has a zero mean; give it any direction
    anchors = np.where(np.linalg.norm(means, axis=1, keepdims=True) > 0, means, rng.standard_normal((C, d)))
    anchors = _unit(anchors)
    rows, ids, truth = [], [], []
    for c in range(C):
        m, k = spec.captions_per_class, spec.distractors_per_class
        rows.append(anchors[c] + spec.text_noise * rng.standard_normal((m, d)) / math.sqrt(d))
        ids += [f"cap_{c:03d}_{j:04d}" for j in range(m)]
        truth += [class_name(c)] * m
        if k:
            rows.append(_distractors(rng, styles, c, k, spec.distractor_noise))
            ids += [f"dis_{c:03d}_{j:04d}" for j in range(k)]
            truth += [None] * k
    captions = make_bundle(
        _unit(np.concatenate(rows)).astype(np.float32), ids, modality="text", class_truth=truth, normalized=True
    )

    table = dict(zip(img_ids, img_truth))
    table.update(zip(ids, truth))
    return images, captions, table


def labelled_ids(bundle: EmbeddingBundle, spec: SplitSpec) -> set[str]:
    """Ids drawn as labelled: ``labeled_fraction`` of each known class, uniformly under ``spec.seed``."""
    by_class: dict[str, list[SampleRecord]] = {}
    for r in sorted(bundle.records, key=lambda r: r.row):
        if r.class_truth is not None:
            by_class.setdefault(r.class_truth, []).append(r)
    missing = sorted(spec.known_classes - by_class.keys())
    if missing:
        raise SynthError(f"known classes absent from bundle: {missing}")
    if spec.known_classes >= by_class.keys():
        raise SynthError("known_classes must be a strict subset of the bundle's classes")

    rng = np.random.default_rng(spec.seed)
    chosen: set[str] = set()
    for c in sorted(spec.known_classes):
        members = by_class[c]
        if len(members) < 2:
            raise SynthError(f"known class {c!r} has {len(members)} sample(s); at least 2 required")
        n_lab = min(len(members), max(1, int(round(spec.labeled_fraction * len(members)))))
        picks = rng.permutation(len(members))[:n_lab]
        chosen.update(members[i].id for i in picks)
    return chosen


def apply_split(bundle: EmbeddingBundle, spec: SplitSpec) -> EmbeddingBundle:
    """Same rows, with ``label`` set on the labelled draw and cleared elsewhere."""
    chosen = labelled_ids(bundle, spec)
    recs = [
        SampleRecord(r.id, r.row, r.modality, r.class_truth if r.id in chosen else None, r.class_truth)
        for r in bundle.records
    ]
    return bundle.with_records(recs)


def subset(bundle: EmbeddingBundle, keep: Iterable[str]) -> EmbeddingBundle:
    keep = set(keep)
    recs = sorted((r for r in bundle.records if r.id in keep), key=lambda r: r.row)
    data = bundle.data[[r.row for r in recs]] if recs else np.zeros((0, bundle.dim), np.float32)
    new = [SampleRecord(r.id, i, r.modality, r.label, r.class_truth) for i, r in enumerate(recs)]
    return EmbeddingBundle(data, tuple(new), bundle.normalized, bundle.dim)


def build_split(bundle: EmbeddingBundle, spec: SplitSpec) -> tuple[EmbeddingBundle, EmbeddingBundle]:
    """Partition into ``(labelled, unlabelled)`` bundles; ground truth is kept on both."""
    split = apply_split(bundle, spec)
    lab = {r.id for r in split.records if r.label is not None}
    return subset(split, lab), subset(split, {r.id for r in split.records} - lab)


def first_classes(n_known: int, num_classes: int) -> frozenset:
    if not 0 < n_known < num_classes:
        raise SynthError(f"need 0 < known classes ({n_known}) < classes ({num_classes})")
    return frozenset(class_name(c) for c in range(n_known))


def old_classes_of(bundle: EmbeddingBundle) -> list[str]:
    return sorted({r.label for r in bundle.records if r.label is not None})


def truth_of(bundle: EmbeddingBundle) -> dict[str, Optional[str]]:
    return {r.id: r.class_truth for r in bundle.records}
