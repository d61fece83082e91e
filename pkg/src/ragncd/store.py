"""Embedding bundles: precomputed vectors plus per-row metadata, stored on disk as

    manifest.json   schema_version, dim, count, dtype ("f32le"), normalized
    embeddings.bin  count * dim little-endian float32, row-major
    records.jsonl   one {"id", "row", "modality", "label", "class_truth"} per line
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1
DTYPE_TAG = "f32le"
MODALITIES = ("image", "text")
NORM_TOL = 1e-4

MANIFEST = "manifest.json"
MATRIX = "embeddings.bin"
RECORDS = "records.jsonl"


class BundleError(ValueError):
    """Malformed bundle on disk or in memory."""


@dataclass(frozen=True)
class SampleRecord:
    id: str
    row: int
    modality: str = "image"
    label: Optional[str] = None
    class_truth: Optional[str] = None

    @property
    def labelled(self) -> bool:
        return self.label is not None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "row": self.row,
            "modality": self.modality,
            "label": self.label,
            "class_truth": self.class_truth,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleRecord":
        def _cls(v):
            return None if v is None else str(v)

        return cls(
            id=str(obj["id"]),
            row=int(obj["row"]),
            modality=str(obj.get("modality", "image")),
            label=_cls(obj.get("label")),
            class_truth=_cls(obj.get("class_truth")),
        )


@dataclass(frozen=True, eq=False)
class EmbeddingBundle:
    """Immutable ``count x dim`` float32 matrix with one record per row.

    The matrix is stored read-only; derive new bundles with
    :meth:`with_records` or :func:`make_bundle` instead of editing in place.
    """

    data: np.ndarray
    records: tuple[SampleRecord, ...]
    normalized: bool = False
    dim: int = field(default=0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2:
            raise BundleError(f"bundle matrix must be 2-D, got shape {data.shape}")
        dim = data.shape[1] if data.shape[1] else self.dim
        if dim <= 0:
            raise BundleError("bundle dim must be positive")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "dim", int(dim))
        if len(self.records) != data.shape[0]:
            raise BundleError(
                f"records length {len(self.records)} != matrix rows {data.shape[0]}"
            )

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def row_of(self, sample_id: str) -> int:
        for r in self.records:
            if r.id == sample_id:
                return r.row
        raise KeyError(sample_id)

    def id_index(self) -> dict[str, int]:
        return {r.id: r.row for r in self.records}

    def records_by_row(self) -> list[SampleRecord]:
        out: list[Optional[SampleRecord]] = [None] * self.count
        for r in self.records:
            out[r.row] = r
        return out  # type: ignore[return-value]

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def with_records(self, records: Sequence[SampleRecord]) -> "EmbeddingBundle":
        return EmbeddingBundle(self.data, tuple(records), self.normalized, self.dim)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingBundle):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.normalized == other.normalized
            and self.records == other.records
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def make_bundle(
    data,
    ids: Sequence[str],
    *,
    modality: str = "image",
    labels: Optional[Sequence[Optional[str]]] = None,
    class_truth: Optional[Sequence[Optional[str]]] = None,
    normalized: bool = False,
    dim: Optional[int] = None,
) -> EmbeddingBundle:
    """Build a bundle whose record ``i`` points at matrix row ``i``."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, dim or 1)
    n = arr.shape[0]
    labels = labels if labels is not None else [None] * n
    class_truth = class_truth if class_truth is not None else [None] * n
    records = tuple(
        SampleRecord(str(ids[i]), i, modality, labels[i], class_truth[i]) for i in range(n)
    )
    return EmbeddingBundle(arr, records, normalized, dim or (arr.shape[1] if arr.ndim == 2 else 0))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0 or not math.isfinite(peak):
        raise ValueError("zero vector has no direction")
    v = v / peak  # pre-scaling keeps tiny and huge inputs away from under/overflow
    return v / np.sqrt(np.dot(v, v))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization in float64; rejects zero rows."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero vector at row {int(bad[0])}")
    return x / norms[:, None]


def validate_bundle(b: EmbeddingBundle) -> list[str]:
    """Return every invariant violation in ``b``; an empty list means valid."""
    problems: list[str] = []
    data = b.data
    if data.shape != (len(b.records), b.dim):
        problems.append(f"matrix shape {data.shape} != ({len(b.records)}, {b.dim})")
    finite = np.isfinite(data).all(axis=1)
    for row in np.flatnonzero(~finite):
        problems.append(f"row {int(row)}: non-finite value")

    seen_ids: set[str] = set()
    seen_rows: set[int] = set()
    for r in b.records:
        if r.id in seen_ids:
            problems.append(f"record {r.id!r}: duplicate id")
        seen_ids.add(r.id)
        if not 0 <= r.row < b.count:
            problems.append(f"record {r.id!r}: row {r.row} out of range [0, {b.count})")
        elif r.row in seen_rows:
            problems.append(f"record {r.id!r}: row {r.row} referenced twice")
        seen_rows.add(r.row)
        if r.modality not in MODALITIES:
            problems.append(f"record {r.id!r}: unknown modality {r.modality!r}")
        if r.label is not None and r.class_truth != r.label:
            problems.append(
                f"record {r.id!r}: label {r.label!r} disagrees with class_truth {r.class_truth!r}"
            )

    if b.normalized and b.count:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        for row in np.flatnonzero(finite & (np.abs(norms - 1.0) > NORM_TOL)):
            problems.append(f"row {int(row)}: norm {norms[row]:.6g} but bundle is flagged normalized")
    return problems


def _require(path: Path) -> Path:
    if not path.is_file():
        raise BundleError(f"missing file: {path}")
    return path


def load_bundle(path: os.PathLike | str) -> EmbeddingBundle:
    root = Path(path)
    manifest = json.loads(_require(root / MANIFEST).read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise BundleError(f"unsupported schema_version {manifest.get('schema_version')!r}")
    if manifest.get("dtype") != DTYPE_TAG:
        raise BundleError(f"unsupported dtype {manifest.get('dtype')!r}, expected {DTYPE_TAG!r}")
    dim, count = int(manifest["dim"]), int(manifest["count"])
    if dim <= 0 or count < 0:
        raise BundleError(f"bad manifest shape dim={dim} count={count}")

    raw = _require(root / MATRIX).read_bytes()
    if len(raw) != count * dim * 4:
        raise BundleError(
            f"matrix size mismatch: manifest says {count}x{dim} ({count * dim * 4} bytes), "
            f"file has {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(count, dim)
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        raise BundleError(f"non-finite value at row {int(np.flatnonzero(~finite)[0])}")

    records = []
    with open(_require(root / RECORDS)) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as e:
                raise BundleError(f"{RECORDS} line {lineno}: {e}") from e
    if len(records) != count:
        raise BundleError(f"records count {len(records)} != manifest count {count}")

    ids: set[str] = set()
    for r in records:
        if r.id in ids:
            raise BundleError(f"duplicate record id {r.id!r}")
        ids.add(r.id)
        if not 0 <= r.row < count:
            raise BundleError(f"record {r.id!r}: row {r.row} out of range")

    bundle = EmbeddingBundle(data, tuple(records), bool(manifest.get("normalized", False)), dim)
    problems = validate_bundle(bundle)
    if problems:
        raise BundleError("; ".join(problems))
    return bundle


def write_bundle(bundle: EmbeddingBundle, path: os.PathLike | str) -> Path:
    root = Path(path)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dim": bundle.dim,
        "count": bundle.count,
        "dtype": DTYPE_TAG,
        "normalized": bundle.normalized,
    }
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / MATRIX).write_bytes(np.ascontiguousarray(bundle.data, dtype="<f4").tobytes())
        with open(root / RECORDS, "w") as fh:
            for r in bundle.records:
                fh.write(json.dumps(r.to_json()) + "\n")
        (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as e:
        raise OSError(e.errno, f"cannot write bundle to {root}: {e.strerror}") from e
    return root


def concat_bundles(parts: Iterable[EmbeddingBundle]) -> EmbeddingBundle:
    """Stack bundles row-wise, renumbering record rows."""
    parts = list(parts)
    if not parts:
        raise BundleError("nothing to concatenate")
    dim = parts[0].dim
    if any(p.dim != dim for p in parts):
        raise BundleError("cannot concatenate bundles of different dim")
    records, offset = [], 0
    for p in parts:
        for r in p.records:
            records.append(replace(r, row=r.row + offset))
        offset += p.count
    data = np.concatenate([p.data for p in parts], axis=0) if offset else np.zeros((0, dim), np.float32)
    return EmbeddingBundle(data, tuple(records), all(p.normalized for p in parts), dim)


def bundle_digest(path: os.PathLike | str) -> str:
    """sha256 over the three bundle files, in fixed order."""
    h = hashlib.sha256()
    root = Path(path)
    for name in (MANIFEST, MATRIX, RECORDS):
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()
