"""Contrastive objectives over a batch of paired unit embeddings.

Both losses are summed over the batch (no 1/B factor) and return analytic
gradients with respect to the image embeddings ``F`` and text embeddings
``G``.  Callers that want a per-sample average divide loss and gradients by B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import as_tensor, log_softmax_rows

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    delta: float = 0.05
    epsilon: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")


def build_label_matrix(class_ids) -> np.ndarray:
    """``y[i, j] = 1`` iff samples i and j share a class."""
    ids = np.asarray(class_ids)
    if ids.ndim != 1 or ids.shape[0] < 2:
        raise ValueError("a label matrix needs at least two samples")
    return (ids[:, None] == ids[None, :]).astype(np.float64)


def soft_labels(y, epsilon: float = 0.0) -> np.ndarray:
    """Spread ``1 - epsilon`` uniformly over each row's positives and ``epsilon`` over its negatives.

    A row without negatives keeps all its mass on the positives.
    """
    y = as_tensor(y, 2, "y")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    b = y.shape[1]
    n_pos = y.sum(axis=1, keepdims=True)
    n_neg = b - n_pos
    eps = np.where(n_neg > 0, epsilon, 0.0)
    return (1.0 - eps) * y / n_pos + eps * (1.0 - y) / np.maximum(n_neg, 1.0)


def _check_pair(f, g, check_unit=True):
    f = as_tensor(f, 2, "F")
    g = as_tensor(g, 2, "G")
    if f.shape != g.shape:
        raise ShapeError(f"F {f.shape} and G {g.shape} must have equal shapes")
    if check_unit:
        for name, m in (("F", f), ("G", g)):
            norms = np.sqrt((m * m).sum(axis=1))
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise ContractError(f"rows of {name} must be unit vectors")
    return f, g


def _symmetric_cross_entropy(logits, targets):
    """Row- and column-direction cross-entropy against ``targets``; returns ``(loss, dlogits)``."""
    lr = log_softmax_rows(logits)
    lc = log_softmax_rows(logits.T).T
    loss = -float((targets * lr).sum() + (targets * lc).sum())
    dlogits = (np.exp(lr) * targets.sum(axis=1, keepdims=True) - targets) + (
        np.exp(lc) * targets.sum(axis=0, keepdims=True) - targets
    )
    return loss, dlogits


def info_nce(f, g, tau: float, check_unit: bool = True):
    """Symmetric InfoNCE with single positives on the diagonal.

    Returns ``(loss, dF, dG, dtau)``.
    """
    f, g = _check_pair(f, g, check_unit)
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = f @ g.T
    loss, dlogits = _symmetric_cross_entropy(s / tau, np.eye(s.shape[0]))
    ds = dlogits / tau
    dtau = -float((dlogits * s).sum()) / tau**2
    return loss, ds @ g, ds.T @ f, dtau


def margin_logits(s, y, delta: float, tau: float) -> np.ndarray:
    """``(S + delta * (1 - y)) / tau``: negatives get their similarity raised by the margin."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    s = as_tensor(s, 2, "S")
    y = as_tensor(y, 2, "y")
    if s.shape != y.shape:
        raise ShapeError(f"similarities {s.shape} and labels {y.shape} differ in shape")
    return (s + delta * (1.0 - y)) / tau


def mpm_nce(f, g, y, cfg: LossConfig, check_unit: bool = True):
    """Multi-positive margin NCE. Returns ``(loss, dF, dG)``.

    The image-to-text term weights row-wise log-softmax entries by the soft
    labels, the text-to-image term weights column-wise log-softmax entries
    ``(j, i)`` by ``ytilde[j, i]``.  ``check_unit=False`` skips the unit-row
    precondition, which finite-difference probes need.
    """
    f, g = _check_pair(f, g, check_unit)
    y = as_tensor(y, 2, "y")
    if y.shape != (f.shape[0], f.shape[0]):
        raise ShapeError(f"label matrix {y.shape} does not match batch size {f.shape[0]}")
    yt = soft_labels(y, cfg.epsilon)
    logits = margin_logits(f @ g.T, y, cfg.delta, cfg.tau)
    loss, dlogits = _symmetric_cross_entropy(logits, yt)
    ds = dlogits / cfg.tau
    return loss, ds @ g, ds.T @ f
