"""Contrastive loss kernels with analytic gradients.

Logits are ``dot / tau``. The unsupervised term for anchor ``i`` contrasts its
positive ``Z[i] . Zp[i]`` against the second-view logits ``Z[i] . Zp[n]`` for
``n != i`` only, so the positive pair is absent from the denominator and the
loss can go negative. ``denominator="include-positive"`` switches to the usual
InfoNCE form that sums over every ``n``.

The supervised term works within the anchor view ``Z``: positives are the
other rows sharing the anchor's label, the denominator runs over ``n != i``.

Gradients treat the rows of ``Z`` and ``Zp`` as free vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DENOMINATORS = ("exclude-positive", "include-positive")
DEFAULT_TAU = 0.07


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossBatch:
    Z: np.ndarray
    Zp: np.ndarray
    labels: Optional[Sequence[Optional[str]]] = None
    tau: float = DEFAULT_TAU
    lam: float = 0.25
    denominator: str = "exclude-positive"

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.float64)
        Zp = np.asarray(self.Zp, dtype=np.float64)
        if Z.ndim != 2 or Z.shape != Zp.shape:
            raise LossError(f"Z {Z.shape} and Zp {Zp.shape} must be matching 2-D arrays")
        if not self.tau > 0:
            raise LossError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise LossError("lambda must lie in [0, 1]")
        if self.denominator not in DENOMINATORS:
            raise LossError(f"denominator must be one of {DENOMINATORS}")
        labels = tuple(self.labels) if self.labels is not None else (None,) * Z.shape[0]
        if len(labels) != Z.shape[0]:
            raise LossError("one label slot per row required")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Zp", Zp)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.Z.shape[0]

    @property
    def labelled_rows(self) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab is not None]

    def positives(self, i: int) -> np.ndarray:
        lab = self.labels[i]
        return np.array(
            [q for q, other in enumerate(self.labels) if q != i and other == lab and lab is not None],
            dtype=np.int64,
        )

    def unit_rows_ok(self, tol: float = 1e-4) -> bool:
        return bool(
            np.all(np.abs(np.linalg.norm(self.Z, axis=1) - 1) <= tol)
            and np.all(np.abs(np.linalg.norm(self.Zp, axis=1) - 1) <= tol)
        )


def _softmax_masked(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp and softmax over ``mask``, max-shifted."""
    masked = np.where(mask, logits, -np.inf)
    peak = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - peak), 0.0)
    s = e.sum(axis=1, keepdims=True)
    return (peak + np.log(s))[:, 0], e / s


def _unsup_mask(batch: LossBatch) -> np.ndarray:
    B = batch.size
    if batch.denominator == "include-positive":
        return np.ones((B, B), dtype=bool)
    return ~np.eye(B, dtype=bool)


def _check_unsup(batch: LossBatch):
    if batch.size < 2 and batch.denominator == "exclude-positive":
        raise LossError("batch size must be at least 2 (empty denominator)")


def unsup_losses(batch: LossBatch) -> np.ndarray:
    _check_unsup(batch)
    logits = batch.Z @ batch.Zp.T / batch.tau
    lse, _ = _softmax_masked(logits, _unsup_mask(batch))
    return lse - np.diag(logits)


def unsup_loss(batch: LossBatch, i: int) -> float:
    return float(unsup_losses(batch)[i])


def _sup_terms(batch: LossBatch, rows: Sequence[int]):
    """Per-anchor supervised losses and the ``B x B`` logit weights ``softmax - positive mass``."""
    B = batch.size
    if not rows:
        return np.zeros(B), np.zeros((B, B))
    if B < 2:
        raise LossError("row 0: empty positive set")
    logits = batch.Z @ batch.Z.T / batch.tau
    lse, p = _softmax_masked(logits, ~np.eye(B, dtype=bool))
    losses = np.zeros(B)
    weights = np.zeros((B, B))
    for i in rows:
        if batch.labels[i] is None:
            raise LossError(f"row {i} is unlabelled; supervised loss undefined")
        pos = batch.positives(i)
        if pos.size == 0:
            raise LossError(f"row {i}: empty positive set")
        losses[i] = lse[i] - logits[i, pos].mean()
        weights[i] = p[i]
        weights[i, pos] -= 1.0 / pos.size
    return losses, weights


def sup_loss(batch: LossBatch, i: int) -> float:
    losses, _ = _sup_terms(batch, [i])
    return float(losses[i])


def total_loss(batch: LossBatch) -> float:
    unsup = unsup_losses(batch).sum()
    sup, _ = _sup_terms(batch, batch.labelled_rows)
    return float((1.0 - batch.lam) * unsup + batch.lam * sup.sum())


def total_loss_grad(batch: LossBatch) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`total_loss` with respect to ``Z`` and ``Zp``."""
    _check_unsup(batch)
    B, tau, lam = batch.size, batch.tau, batch.lam
    Z, Zp = batch.Z, batch.Zp

    logits = Z @ Zp.T / tau
    _, p = _softmax_masked(logits, _unsup_mask(batch))
    w = (1.0 - lam) * (p - np.eye(B))
    gZ = w @ Zp / tau
    gZp = w.T @ Z / tau

    _, q = _sup_terms(batch, batch.labelled_rows)
    gZ += lam * (q @ Z + q.T @ Z) / tau
    return gZ, gZp


def fd_check(batch: LossBatch, step: float = 1e-4) -> float:
    """Max central-difference deviation from the analytic gradient, relative to its largest entry."""
    gZ, gZp = total_loss_grad(batch)
    analytic = np.concatenate([gZ.ravel(), gZp.ravel()])
    numeric = np.empty_like(analytic)
    base = np.concatenate([batch.Z.ravel(), batch.Zp.ravel()])
    half = batch.Z.size

    def loss_at(flat):
        return total_loss(
            LossBatch(
                flat[:half].reshape(batch.Z.shape),
                flat[half:].reshape(batch.Zp.shape),
                batch.labels,
                batch.tau,
                batch.lam,
                batch.denominator,
            )
        )

    for k in range(base.size):
        up, down = base.copy(), base.copy()
        up[k] += step
        down[k] -= step
        numeric[k] = (loss_at(up) - loss_at(down)) / (2 * step)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def random_batch(
    rng: np.random.Generator,
    size: int,
    dim: int,
    *,
    tau: float = DEFAULT_TAU,
    lam: float = 0.25,
    n_classes: int = 2,
    labelled_fraction: float = 0.5,
    denominator: str = "exclude-positive",
) -> LossBatch:
    """Unit-norm random batch; labelled rows come in same-class pairs so every positive set is nonempty."""
    Z = rng.standard_normal((size, dim))
    Zp = Z + 0.3 * rng.standard_normal((size, dim))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    Zp /= np.linalg.norm(Zp, axis=1, keepdims=True)
    n_lab = int(round(size * labelled_fraction))
    n_lab -= n_lab % 2
    labels: list[Optional[str]] = [None] * size
    for pair in range(n_lab // 2):
        cls = f"c{int(rng.integers(n_classes))}"
        labels[2 * pair] = labels[2 * pair + 1] = cls
    return LossBatch(Z, Zp, labels, tau, lam, denominator)
