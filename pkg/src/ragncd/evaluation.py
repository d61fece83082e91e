"""Clustering accuracy under the best one-to-one cluster/class matching.

One matching is solved on the whole unlabelled set; the Old and New scores
reuse it, restricted to samples whose true class is known or novel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


class EvaluationError(ValueError):
    pass


def hungarian_match(cost, maximize: bool = False) -> list[tuple[int, int]]:
    """Optimal injective row/column pairing of a rectangular matrix.

    Returns ``min(K, C)`` ``(row, col)`` pairs sorted by row; on a rectangular
    matrix every line of the shorter side is matched. For non-negative benefit
    matrices (contingency counts) this equals zero-padding to square.
    """
    m = np.asarray(cost, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise EvaluationError("cost matrix must be a nonempty 2-D array")
    if not np.isfinite(m).all():
        raise EvaluationError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(m, maximize=maximize)
    return sorted(zip(rows.tolist(), cols.tolist()))


def contingency(pred: Sequence[int], truth: Sequence[Hashable]):
    """Cluster x class count matrix with its sorted row and column labels."""
    if len(pred) != len(truth):
        raise EvaluationError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if len(pred) == 0:
        raise EvaluationError("cannot score an empty prediction set")
    clusters = sorted({int(p) for p in pred})
    classes = sorted(set(truth), key=str)
    ci = {c: i for i, c in enumerate(clusters)}
    ki = {c: i for i, c in enumerate(classes)}
    table = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    for p, t in zip(pred, truth):
        table[ci[int(p)], ki[t]] += 1
    return table, clusters, classes


def cluster_accuracy(pred: Sequence[int], truth: Sequence[Hashable]):
    """Return ``(acc, matching, contingency)`` with ``matching`` cluster id -> class id."""
    table, clusters, classes = contingency(pred, truth)
    pairs = hungarian_match(table, maximize=True)
    matching = {clusters[r]: classes[c] for r, c in pairs}
    correct = int(sum(table[r, c] for r, c in pairs))
    return correct / len(pred), matching, table


@dataclass
class EvalReport:
    correct_all: int
    correct_old: int
    correct_new: int
    n_all: int
    n_old: int
    n_new: int
    matching: dict[int, str]
    contingency: np.ndarray
    clusters: list[int]
    classes: list[str]
    config: dict = field(default_factory=dict)

    @staticmethod
    def _ratio(num: int, den: int) -> Optional[Fraction]:
        return Fraction(num, den) if den else None

    @property
    def acc_all(self) -> Optional[float]:
        r = self._ratio(self.correct_all, self.n_all)
        return None if r is None else float(r)

    @property
    def acc_old(self) -> Optional[float]:
        r = self._ratio(self.correct_old, self.n_old)
        return None if r is None else float(r)

    @property
    def acc_new(self) -> Optional[float]:
        r = self._ratio(self.correct_new, self.n_new)
        return None if r is None else float(r)

    def to_json(self) -> dict:
        def fmt(x):
            return None if x is None else round(x, 4)

        return {
            "acc_all": fmt(self.acc_all),
            "acc_old": fmt(self.acc_old),
            "acc_new": fmt(self.acc_new),
            "counts": {
                "n_all": self.n_all,
                "n_old": self.n_old,
                "n_new": self.n_new,
                "correct_all": self.correct_all,
                "correct_old": self.correct_old,
                "correct_new": self.correct_new,
            },
            "matching": {str(k): v for k, v in sorted(self.matching.items())},
            "contingency": {
                "clusters": self.clusters,
                "classes": self.classes,
                "counts": self.contingency.tolist(),
            },
            "config": self.config,
        }

    def tsv_row(self) -> str:
        def fmt(x):
            return "NA" if x is None else f"{x:.4f}"

        return "\t".join(
            [fmt(self.acc_all), fmt(self.acc_old), fmt(self.acc_new), str(self.n_all), str(self.n_old), str(self.n_new)]
        )

    TSV_HEADER = "acc_all\tacc_old\tacc_new\tn_all\tn_old\tn_new"

    def save(self, path: os.PathLike | str) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        tsv = path.with_suffix(".tsv")
        tsv.write_text(self.TSV_HEADER + "\n" + self.tsv_row() + "\n")
        return path, tsv


def subset_report(pred: Sequence[int], truth: Sequence[str], old_classes) -> EvalReport:
    old = {str(c) for c in old_classes}
    truth = [str(t) for t in truth]
    table, clusters, classes = contingency(pred, truth)
    matching = {clusters[r]: classes[c] for r, c in hungarian_match(table, maximize=True)}
    hit = [matching.get(int(p)) == t for p, t in zip(pred, truth)]
    is_old = [t in old for t in truth]
    return EvalReport(
        correct_all=sum(hit),
        correct_old=sum(h for h, o in zip(hit, is_old) if o),
        correct_new=sum(h for h, o in zip(hit, is_old) if not o),
        n_all=len(truth),
        n_old=sum(is_old),
        n_new=len(truth) - sum(is_old),
        matching=matching,
        contingency=table,
        clusters=clusters,
        classes=classes,
    )
