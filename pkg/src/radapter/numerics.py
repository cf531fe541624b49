"""Dense float64 primitives, a portable seeded generator and a gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Functions that
act "per row" operate on the last axis, so a stack of matrices with shape
``(..., rows, cols)`` is accepted wherever a single matrix is.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from .errors import DegenerateEmbeddingError, NumericalError, ShapeError

_MASK64 = (1 << 64) - 1
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

LN_EPS = 1e-5


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with a readable error on inner-dimension mismatch."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x) -> np.ndarray:
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    """Normalize each row to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    y, _, _ = layer_norm_with_stats(x, gain, bias, eps)
    return y


def layer_norm_with_stats(x, gain, bias, eps: float = LN_EPS):
    """Like :func:`layer_norm` but also return ``(x_hat, 1/sqrt(var + eps))`` for backprop."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm gain {gain.shape} / bias {bias.shape} do not match width {x.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    x_hat = xc * rstd
    return x_hat * gain + bias, x_hat, rstd


def layer_norm_backward(dy, x_hat, rstd, gain):
    """Return ``(dx, dgain, dbias)`` for :func:`layer_norm_with_stats`."""
    width = x_hat.shape[-1]
    dx_hat = dy * gain
    dx = rstd * (
        dx_hat
        - dx_hat.sum(axis=-1, keepdims=True) / width
        - x_hat * (dx_hat * x_hat).sum(axis=-1, keepdims=True) / width
    )
    flat_dy = dy.reshape(-1, width)
    dgain = (flat_dy * x_hat.reshape(-1, width)).sum(axis=0)
    dbias = flat_dy.sum(axis=0)
    return dx, dgain, dbias


def gelu(x) -> np.ndarray:
    """Tanh-approximation GELU."""
    return gelu_with_tanh(x)[0]


def gelu_with_tanh(x):
    """GELU and the inner ``tanh`` term, which :func:`gelu_grad` can reuse."""
    x = as_tensor(x)
    t = x * x
    t *= _GELU_K
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = 1.0 + t
    y *= x
    y *= 0.5
    return y, t


def gelu_grad(x, t=None) -> np.ndarray:
    x = as_tensor(x)
    if t is None:
        t = gelu_with_tanh(x)[1]
    # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2), evaluated in place
    g = t * t
    np.subtract(1.0, g, out=g)
    g *= x
    b = x * x
    b *= 1.5 * _GELU_C * _GELU_K
    b += 0.5 * _GELU_C
    g *= b
    g += 0.5
    g += 0.5 * t
    return g


def l2_normalize_rows(x) -> np.ndarray:
    x = as_tensor(x)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("cannot normalize an all-zero row")
    return x / norms


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    param: np.ndarray,
    analytic_grad,
    h: float = 1e-6,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``param``.

    ``param`` is perturbed in place and restored after each coordinate, so
    ``f`` may close over the very array being checked.  Returns the maximum
    over coordinates of ``|fd - an| / max(1e-8, |fd| + |an|)``.  ``indices``
    restricts the check to a subset of coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    analytic_grad = as_tensor(analytic_grad)
    if analytic_grad.shape != param.shape:
        raise ShapeError(f"gradient shape {analytic_grad.shape} != parameter shape {param.shape}")
    if indices is None:
        indices = np.ndindex(*param.shape)
    worst = 0.0
    for idx in indices:
        orig = param[idx]
        param[idx] = orig + h
        fp = float(f(param))
        param[idx] = orig - h
        fm = float(f(param))
        param[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite function value while perturbing index {idx}")
        fd = (fp - fm) / (2.0 * h)
        an = float(analytic_grad[idx])
        worst = max(worst, abs(fd - an) / max(1e-8, abs(fd) + abs(an)))
    return worst


# --------------------------------------------------------------------------
# Random numbers: SplitMix64 seeding a xoshiro256++ state, Box-Muller normals.
# --------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    return fnv1a64(str(key).encode("utf-8"))


class SeededRng:
    """xoshiro256++ generator with a reproducible, platform independent stream.

    ``SeededRng(seed, "data", 3)`` derives an independent stream from the seed
    and any number of extra keys (strings or integers); streams created with
    different keys never share state.
    """

    def __init__(self, seed: int, *keys):
        self.seed = int(seed) & _MASK64
        self.keys = keys
        sm = self.seed
        for key in keys:
            sm, out = splitmix64(sm ^ _key_to_int(key))
            sm = out
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        if not any(s):
            s[0] = 1
        self._s = s
        self._spare: float | None = None

    def child(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        t = (s0 + s3) & _MASK64
        result = ((((t << 23) | (t >> 41)) & _MASK64) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in ``[0, 1)`` with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def randbelow(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` (rejection sampling)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def bernoulli(self, prob: float) -> int:
        return 1 if self.uniform() < prob else 0

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``range(n)`` (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return np.array(pool[:k], dtype=np.int64)


def gaussian_sample(rng: SeededRng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return mean + std * rng.normals(rows * cols).reshape(rows, cols)
