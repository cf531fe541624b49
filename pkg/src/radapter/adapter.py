"""Residual linear adapters: stochastic dropping, EMA accumulation and merging.

An adapter wraps the output ``X`` of a pre-trained linear layer as
``h(X) = X @ W_adp + X``.  Because it is linear it can be folded into that
layer after training (``W_org @ (W_adp + I)``), and scaling ``W_adp`` by
``alpha`` before folding yields a weight-space interpolation between the
pre-trained and the fine-tuned layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import SeededRng, as_tensor, gaussian_sample

TRAIN = "train"
EVAL = "eval"


@dataclass
class AdapterWeights:
    """Full-rank (``w``) or low-rank (``b @ a``) adapter of width ``d``."""

    w: np.ndarray | None = None
    b: np.ndarray | None = None
    a: np.ndarray | None = None
    drop_p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.drop_p < 1.0:
            raise ValueError(f"drop_p must lie in [0, 1), got {self.drop_p}")
        if self.w is not None:
            if self.b is not None or self.a is not None:
                raise ValueError("give either a full matrix or a (b, a) factor pair, not both")
            self.w = as_tensor(self.w, 2, "W_adp")
            if self.w.shape[0] != self.w.shape[1]:
                raise ShapeError(f"full-rank adapter must be square, got {self.w.shape}")
        else:
            if self.b is None or self.a is None:
                raise ValueError("low-rank adapter needs both b and a")
            self.b = as_tensor(self.b, 2, "B")
            self.a = as_tensor(self.a, 2, "A")
            d, r = self.b.shape
            if self.a.shape != (r, d):
                raise ShapeError(f"B {self.b.shape} and A {self.a.shape} do not form a d x d product")
            if not 1 <= r < d:
                raise ShapeError(f"low-rank adapter needs 1 <= r < d, got r={r}, d={d}")

    @property
    def low_rank(self) -> bool:
        return self.w is None

    @property
    def d(self) -> int:
        return self.w.shape[0] if self.w is not None else self.b.shape[0]

    @property
    def rank(self) -> int | None:
        return None if self.w is not None else self.b.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        if self.w is not None:
            return {"w": self.w}
        return {"b": self.b, "a": self.a}

    @classmethod
    def zeros(cls, d: int, rank: int | None = None, drop_p: float = 0.0, rng: SeededRng | None = None,
              init_std: float = 0.02) -> "AdapterWeights":
        """Identity-at-start adapter: ``W = 0`` or ``B = 0, A ~ N(0, init_std)``."""
        if rank is None:
            return cls(w=np.zeros((d, d)), drop_p=drop_p)
        if rng is None:
            raise ValueError("low-rank initialization needs an rng")
        return cls(b=np.zeros((d, rank)), a=gaussian_sample(rng, rank, d, 0.0, init_std), drop_p=drop_p)


def effective_matrix(aw: AdapterWeights) -> np.ndarray:
    if aw.w is not None:
        return aw.w
    return aw.b @ aw.a


@dataclass
class AdapterRecord:
    """What :func:`adapter_backward` needs from the matching forward call."""

    x: np.ndarray
    scale: float  # gamma / (1 - p) in train mode, 1 in eval mode
    gamma: int | None = None


def adapter_apply(x, aw: AdapterWeights, mode: str = EVAL, rng: SeededRng | None = None,
                  return_record: bool = False):
    """Apply ``h(x) = s * x @ W_eff + x``.

    In eval mode ``s = 1``.  In train mode a single ``gamma ~ Bernoulli(1 - p)``
    is drawn per call and ``s = gamma / (1 - p)``, shared across all rows.
    """
    x = as_tensor(x)
    if x.shape[-1] != aw.d:
        raise ShapeError(f"adapter width {aw.d} does not match input width {x.shape[-1]}")
    gamma = None
    scale = 1.0
    if mode == TRAIN:
        if rng is None:
            raise ValueError("train mode needs an rng for adapter dropping")
        gamma = rng.bernoulli(1.0 - aw.drop_p)
        scale = gamma / (1.0 - aw.drop_p)
    elif mode != EVAL:
        raise ValueError(f"unknown mode {mode!r}")
    if scale == 0.0:
        out = x.copy()
    else:
        out = scale * (x @ effective_matrix(aw)) + x
    if return_record:
        return out, AdapterRecord(x=x, scale=scale, gamma=gamma)
    return out


def adapter_backward(record: AdapterRecord | None, aw: AdapterWeights, upstream, mode: str = EVAL):
    """Return ``(dx, grads)`` where ``grads`` maps ``"w"`` or ``"b"``/``"a"`` to arrays."""
    if record is None:
        raise ContractError("adapter_backward needs the record of the matching forward")
    if mode == TRAIN and record.gamma is None:
        raise ContractError("train-mode backward needs the recorded gamma draw")
    g = as_tensor(upstream)
    x = record.x
    d = aw.d
    s = record.scale
    if s == 0.0:
        dw = np.zeros((d, d))
        dx = g.copy()
    else:
        w_eff = effective_matrix(aw)
        dx = s * (g @ w_eff.T) + g
        dw = s * (x.reshape(-1, d).T @ g.reshape(-1, d))
    if aw.w is not None:
        return dx, {"w": dw}
    return dx, {"b": dw @ aw.a.T, "a": aw.b.T @ dw}


@dataclass
class AdapterEma:
    """EMA shadow of an adapter's effective d x d matrix."""

    shadow: np.ndarray
    momentum: float = 0.999
    update_count: int = 0

    def __post_init__(self):
        self.shadow = as_tensor(self.shadow, 2, "shadow")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    @classmethod
    def from_adapter(cls, aw: AdapterWeights, momentum: float = 0.999) -> "AdapterEma":
        return cls(shadow=effective_matrix(aw).copy(), momentum=momentum)


def ema_update(ema: AdapterEma, aw: AdapterWeights) -> AdapterEma:
    w = effective_matrix(aw)
    if w.shape != ema.shadow.shape:
        raise ShapeError(f"EMA shadow {ema.shadow.shape} vs adapter {w.shape}")
    m = ema.momentum
    ema.shadow = m * ema.shadow + (1.0 - m) * w
    ema.update_count += 1
    return ema


@dataclass
class MergedLayer:
    w: np.ndarray
    b: np.ndarray = field(default=None)


def _check_fold(w_org, b_org, w_adp):
    w_org = as_tensor(w_org, 2, "W_org")
    w_adp = as_tensor(w_adp, 2, "W_adp")
    d = w_org.shape[1]
    if w_adp.shape != (d, d):
        raise ShapeError(f"W_org {w_org.shape} cannot absorb adapter {w_adp.shape}")
    if b_org is None:
        b_org = np.zeros(d)
    b_org = as_tensor(b_org, 1, "b_org")
    if b_org.shape != (d,):
        raise ShapeError(f"bias {b_org.shape} does not match width {d}")
    return w_org, b_org, w_adp


def reparametrize(w_org, b_org, w_adp) -> MergedLayer:
    """Fold ``x -> x W_adp + x`` into the preceding layer ``x -> x W_org + b_org``."""
    w_org, b_org, w_adp = _check_fold(w_org, b_org, w_adp)
    fold = w_adp + np.eye(w_adp.shape[0])
    return MergedLayer(w=w_org @ fold, b=b_org @ fold)


def rescale_merge(w_org, b_org, shadow, alpha: float) -> MergedLayer:
    """Fold ``alpha * shadow`` into the layer, interpolating zero-shot and fine-tuned weights.

    ``alpha = 0`` returns copies of the originals bit for bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    w_org, b_org, shadow = _check_fold(w_org, b_org, shadow)
    if alpha == 0.0:
        return MergedLayer(w=w_org.copy(), b=b_org.copy())
    fold = alpha * shadow + np.eye(shadow.shape[0])
    return MergedLayer(w=w_org @ fold, b=b_org @ fold)
