"""Pre-LN Transformer encoder with adapter hooks and a hand-written backward pass.

Activations are batched as ``(N, seq_len, d)``; a single sequence may be passed
as ``(seq_len, d)``.  Adapter hooks sit on the output of MHA and of the FFN,
before the residual addition, so a trained adapter folds exactly into ``W_O``
and ``W_2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .adapter import EVAL, AdapterRecord, AdapterWeights, adapter_apply, adapter_backward
from .errors import ContractError, DegenerateEmbeddingError, ShapeError, SpecError
from .numerics import (
    LN_EPS,
    SeededRng,
    gaussian_sample,
    gelu_grad,
    gelu_with_tanh,
    layer_norm_backward,
    layer_norm_with_stats,
    softmax_rows,
)

MHA_SITE = "mha"
FFN_SITE = "ffn"


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    k: int = 4
    L: int = 2
    seq_len: int = 16
    vocab_size: int = 64
    embed_dim: int = 16
    w_o_has_bias: bool = True

    def __post_init__(self):
        if self.d % self.k:
            raise SpecError(f"d={self.d} is not divisible by k={self.k}")
        if self.L < 1 or self.seq_len < 1 or self.vocab_size < 2 or self.embed_dim < 2:
            raise SpecError(f"invalid encoder config {self}")

    @property
    def d_h(self) -> int:
        return self.d // self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderConfig":
        return cls(**data)

    def sites(self) -> list[str]:
        return [f"layers.{l}.{s}" for l in range(self.L) for s in (MHA_SITE, FFN_SITE)]


@dataclass
class LayerWeights:
    wq: np.ndarray  # (k, d, d_h)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (d, d)
    bo: np.ndarray | None
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray  # (d, 4d)
    b1: np.ndarray
    w2: np.ndarray  # (4d, d)
    b2: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in _LAYER_FIELDS}
        if self.bo is None:
            del out["bo"]
        return out


_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "bo", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                 "w1", "b1", "w2", "b2")


@dataclass
class EncoderWeights:
    config: EncoderConfig
    token_embedding: np.ndarray
    positional_embedding: np.ndarray
    layers: list[LayerWeights]
    final_ln_gain: np.ndarray
    final_ln_bias: np.ndarray
    projection: np.ndarray

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view (arrays are shared, not copied)."""
        out = {"token_embedding": self.token_embedding, "positional_embedding": self.positional_embedding}
        for l, lw in enumerate(self.layers):
            for name, arr in lw.named().items():
                out[f"layers.{l}.{name}"] = arr
        out["final_ln_gain"] = self.final_ln_gain
        out["final_ln_bias"] = self.final_ln_bias
        out["projection"] = self.projection
        return out

    @classmethod
    def from_named(cls, config: EncoderConfig, tensors: Mapping[str, np.ndarray]) -> "EncoderWeights":
        layers = []
        for l in range(config.L):
            kw = {}
            for name in _LAYER_FIELDS:
                key = f"layers.{l}.{name}"
                if name == "bo" and key not in tensors:
                    kw[name] = None
                    continue
                kw[name] = np.asarray(tensors[key], dtype=np.float64)
            layers.append(LayerWeights(**kw))
        w = cls(
            config=config,
            token_embedding=np.asarray(tensors["token_embedding"], dtype=np.float64),
            positional_embedding=np.asarray(tensors["positional_embedding"], dtype=np.float64),
            layers=layers,
            final_ln_gain=np.asarray(tensors["final_ln_gain"], dtype=np.float64),
            final_ln_bias=np.asarray(tensors["final_ln_bias"], dtype=np.float64),
            projection=np.asarray(tensors["projection"], dtype=np.float64),
        )
        w.validate()
        return w

    def copy(self) -> "EncoderWeights":
        return EncoderWeights.from_named(self.config, {k: v.copy() for k, v in self.named_tensors().items()})

    def validate(self) -> None:
        expected = expected_shapes(self.config)
        got = {k: v.shape for k, v in self.named_tensors().items()}
        if got != expected:
            bad = sorted(set(got.items()) ^ set(expected.items()))
            raise ShapeError(f"encoder weights do not match config: {bad}")


def expected_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, k, dh = cfg.d, cfg.k, cfg.d_h
    shapes = {"token_embedding": (cfg.vocab_size, d), "positional_embedding": (cfg.seq_len, d)}
    for l in range(cfg.L):
        p = f"layers.{l}."
        shapes.update({p + "wq": (k, d, dh), p + "wk": (k, d, dh), p + "wv": (k, d, dh), p + "wo": (d, d)})
        if cfg.w_o_has_bias:
            shapes[p + "bo"] = (d,)
        shapes.update({p + "ln1_gain": (d,), p + "ln1_bias": (d,), p + "ln2_gain": (d,), p + "ln2_bias": (d,),
                       p + "w1": (d, 4 * d), p + "b1": (4 * d,), p + "w2": (4 * d, d), p + "b2": (d,)})
    shapes.update({"final_ln_gain": (d,), "final_ln_bias": (d,), "projection": (d, cfg.embed_dim)})
    return shapes


def init_encoder(cfg: EncoderConfig, rng: SeededRng, std: float = 0.02) -> EncoderWeights:
    """Gaussian(0, std) matrices and embeddings, unit LN gains, zero biases."""
    d = cfg.d

    def g(*shape):
        n = int(np.prod(shape))
        return gaussian_sample(rng, 1, n, 0.0, std).reshape(shape)

    layers = []
    for _ in range(cfg.L):
        layers.append(LayerWeights(
            wq=g(cfg.k, d, cfg.d_h), wk=g(cfg.k, d, cfg.d_h), wv=g(cfg.k, d, cfg.d_h), wo=g(d, d),
            bo=np.zeros(d) if cfg.w_o_has_bias else None,
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d), ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
            w1=g(d, 4 * d), b1=np.zeros(4 * d), w2=g(4 * d, d), b2=np.zeros(d),
        ))
    return EncoderWeights(
        config=cfg,
        token_embedding=g(cfg.vocab_size, d),
        positional_embedding=g(cfg.seq_len, d),
        layers=layers,
        final_ln_gain=np.ones(d),
        final_ln_bias=np.zeros(d),
        projection=g(d, cfg.embed_dim),
    )


# --------------------------------------------------------------------------
# Sub-blocks
# --------------------------------------------------------------------------


def _stack_heads(w):
    # (k, d, dh) -> (d, k*dh), head-major columns
    k, d, dh = w.shape
    return w.transpose(1, 0, 2).reshape(d, k * dh)


def _unstack_heads(m, k):
    # (d, k*dh) -> (k, d, dh)
    d = m.shape[0]
    return m.reshape(d, k, -1).transpose(1, 0, 2)


def _split_heads(x, w):
    # x: (..., S, d), w: (k, d, dh) -> (..., k, S, dh)
    k, _, dh = w.shape
    y = x @ _stack_heads(w)
    return np.swapaxes(y.reshape(*y.shape[:-1], k, dh), -3, -2)


def _merge_heads(o):
    # (..., k, S, dh) -> (..., S, k*dh)
    o = np.swapaxes(o, -3, -2)
    return o.reshape(*o.shape[:-2], o.shape[-2] * o.shape[-1])


def _check_width(x, lw: LayerWeights):
    if x.shape[-1] != lw.wo.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer width {lw.wo.shape[0]}")


def mha_forward(x, lw: LayerWeights, cache: dict | None = None, n_query: int | None = None) -> np.ndarray:
    """Multi-head self-attention: concat of per-head attention, times W_O (+ b_O).

    With ``n_query`` only the first ``n_query`` positions attend (keys and
    values still cover the whole sequence) and only their outputs are returned.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, lw)
    dh = lw.wq.shape[-1]
    q = _split_heads(x if n_query is None else x[..., :n_query, :], lw.wq)
    k = _split_heads(x, lw.wk)
    v = _split_heads(x, lw.wv)
    att = softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(dh))
    concat = _merge_heads(att @ v)
    out = concat @ lw.wo
    if lw.bo is not None:
        out = out + lw.bo
    if cache is not None:
        cache.update(q=q, k=k, v=v, att=att, concat=concat)
    return out


def mha_backward(dout, x, lw: LayerWeights, cache: dict):
    q, k, v, att, concat = cache["q"], cache["k"], cache["v"], cache["att"], cache["concat"]
    d = lw.wo.shape[0]
    kh, _, dh = lw.wq.shape
    grads = {"wo": concat.reshape(-1, d).T @ dout.reshape(-1, d)}
    if lw.bo is not None:
        grads["bo"] = dout.reshape(-1, d).sum(axis=0)
    dconcat = dout @ lw.wo.T
    do = np.swapaxes(dconcat.reshape(*dconcat.shape[:-1], kh, dh), -3, -2)
    datt = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(att, -1, -2) @ do
    dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    d_in = x.shape[-1]
    dx = np.zeros_like(x)
    n_query = q.shape[-2]
    for name, dproj, w in (("wq", dq, lw.wq), ("wk", dk, lw.wk), ("wv", dv, lw.wv)):
        dflat = _merge_heads(dproj)
        rows = n_query if name == "wq" else x.shape[-2]
        src = x[..., :rows, :].reshape(-1, d_in)
        grads[name] = _unstack_heads(src.T @ dflat.reshape(-1, kh * dh), kh)
        dx[..., :rows, :] += dflat @ _stack_heads(w).T
    return dx, grads


def ffn_forward(x, lw: LayerWeights, cache: dict | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, lw)
    u = x @ lw.w1 + lw.b1
    hidden, t = gelu_with_tanh(u)
    if cache is not None:
        cache.update(u=u, hidden=hidden, tanh=t)
    return hidden @ lw.w2 + lw.b2


def ffn_backward(dout, x, lw: LayerWeights, cache: dict):
    u, hidden = cache["u"], cache["hidden"]
    d = lw.w2.shape[1]
    dff = lw.w1.shape[1]
    grads = {"w2": hidden.reshape(-1, dff).T @ dout.reshape(-1, d), "b2": dout.reshape(-1, d).sum(axis=0)}
    du = (dout @ lw.w2.T) * gelu_grad(u, cache.get("tanh"))
    grads["w1"] = x.reshape(-1, d).T @ du.reshape(-1, dff)
    grads["b1"] = du.reshape(-1, dff).sum(axis=0)
    return du @ lw.w1.T, grads


# --------------------------------------------------------------------------
# Layer and encoder
# --------------------------------------------------------------------------


@dataclass
class LayerTape:
    x: np.ndarray
    ln1: tuple
    h1: np.ndarray
    mha: dict
    mha_rec: AdapterRecord | None
    x_bar: np.ndarray
    ln2: tuple
    h2: np.ndarray
    ffn: dict
    ffn_rec: AdapterRecord | None
    out: np.ndarray


def layer_forward(x, lw: LayerWeights, adapters=(None, None), mode: str = EVAL,
                  rng: SeededRng | None = None, first_only: bool = False):
    """One pre-LN layer with optional adapters after MHA and FFN.

    Returns ``(out, tape)``.  ``adapters`` is ``(mha_adapter, ffn_adapter)``;
    either may be ``None``.  In train mode each present adapter draws its own
    dropping variable from ``rng``.  ``first_only`` computes the output at the
    first position only, which is all that first-token pooling reads.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, lw)
    a_mha, a_ffn = adapters
    for a in (a_mha, a_ffn):
        if a is not None and a.d != x.shape[-1]:
            raise ShapeError(f"adapter width {a.d} does not match layer width {x.shape[-1]}")

    _, x_hat1, rstd1 = layer_norm_with_stats(x, lw.ln1_gain, lw.ln1_bias, LN_EPS)
    h1 = x_hat1 * lw.ln1_gain + lw.ln1_bias
    mha_cache: dict = {}
    m = mha_forward(h1, lw, mha_cache, 1 if first_only else None)
    mha_rec = None
    if a_mha is not None:
        m, mha_rec = adapter_apply(m, a_mha, mode, rng, return_record=True)
    x_bar = m + (x[..., :1, :] if first_only else x)

    _, x_hat2, rstd2 = layer_norm_with_stats(x_bar, lw.ln2_gain, lw.ln2_bias, LN_EPS)
    h2 = x_hat2 * lw.ln2_gain + lw.ln2_bias
    ffn_cache: dict = {}
    f = ffn_forward(h2, lw, ffn_cache)
    ffn_rec = None
    if a_ffn is not None:
        f, ffn_rec = adapter_apply(f, a_ffn, mode, rng, return_record=True)
    out = f + x_bar
    tape = LayerTape(x=x, ln1=(x_hat1, rstd1), h1=h1, mha=mha_cache, mha_rec=mha_rec, x_bar=x_bar,
                     ln2=(x_hat2, rstd2), h2=h2, ffn=ffn_cache, ffn_rec=ffn_rec, out=out)
    return out, tape


def layer_backward(dout, lw: LayerWeights, tape: LayerTape, adapters=(None, None), mode: str = EVAL):
    """Returns ``(dx, layer_grads, (mha_adapter_grads, ffn_adapter_grads))``."""
    a_mha, a_ffn = adapters
    grads: dict[str, np.ndarray] = {}
    dx_bar = dout.copy()
    df = dout
    ffn_ag = None
    if a_ffn is not None:
        df, ffn_ag = adapter_backward(tape.ffn_rec, a_ffn, df, mode)
    dh2, g = ffn_backward(df, tape.h2, lw, tape.ffn)
    grads.update(g)
    dxb, grads["ln2_gain"], grads["ln2_bias"] = layer_norm_backward(dh2, *tape.ln2, lw.ln2_gain)
    dx_bar += dxb

    dm = dx_bar
    mha_ag = None
    if a_mha is not None:
        dm, mha_ag = adapter_backward(tape.mha_rec, a_mha, dm, mode)
    dh1, g = mha_backward(dm, tape.h1, lw, tape.mha)
    grads.update(g)
    dx, grads["ln1_gain"], grads["ln1_bias"] = layer_norm_backward(dh1, *tape.ln1, lw.ln1_gain)
    dx[..., :dx_bar.shape[-2], :] += dx_bar
    return dx, grads, (mha_ag, ffn_ag)


@dataclass
class EncoderTape:
    tokens: np.ndarray
    layer_tapes: list[LayerTape]
    final_ln: tuple
    pooled: np.ndarray
    raw: np.ndarray
    norm: np.ndarray
    embedding: np.ndarray
    mode: str
    single: bool = False
    adapters: dict = field(default_factory=dict)


def _check_tokens(tokens, cfg: EncoderConfig) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ShapeError(f"token sequences must have length {cfg.seq_len}, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ContractError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError(f"token out of range [0, {cfg.vocab_size})")
    return tokens.astype(np.int64), single


def encode(tokens, w: EncoderWeights, adapters: Mapping[str, AdapterWeights] | None = None,
           mode: str = EVAL, rng: SeededRng | None = None):
    """Embed token sequence(s) to unit vectors.

    ``tokens`` is ``(seq_len,)`` or ``(N, seq_len)``; the embedding has the
    matching ``(embed_dim,)`` or ``(N, embed_dim)`` shape.  ``adapters`` maps
    site names (``"layers.0.mha"``) to adapter weights.
    """
    cfg = w.config
    toks, single = _check_tokens(tokens, cfg)
    adapters = dict(adapters or {})
    x = w.token_embedding[toks] + w.positional_embedding
    tapes = []
    for l, lw in enumerate(w.layers):
        pair = (adapters.get(f"layers.{l}.{MHA_SITE}"), adapters.get(f"layers.{l}.{FFN_SITE}"))
        x, tape = layer_forward(x, lw, pair, mode, rng, first_only=(l == cfg.L - 1))
        tapes.append(tape)
    _, x_hat, rstd = layer_norm_with_stats(x, w.final_ln_gain, w.final_ln_bias, LN_EPS)
    pooled = x_hat[:, 0, :] * w.final_ln_gain + w.final_ln_bias
    raw = pooled @ w.projection
    norm = np.sqrt((raw * raw).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateEmbeddingError("encoder produced an all-zero embedding")
    emb = raw / norm
    tape = EncoderTape(tokens=toks, layer_tapes=tapes, final_ln=(x_hat, rstd), pooled=pooled, raw=raw,
                       norm=norm, embedding=emb, mode=mode, single=single, adapters=adapters)
    return (emb[0] if single else emb), tape


def encode_backward(tape: EncoderTape, w: EncoderWeights, upstream):
    """Vector-Jacobian product of :func:`encode`.

    Returns ``(weight_grads, adapter_grads)``: flat dicts keyed like
    :meth:`EncoderWeights.named_tensors` and ``"<site>.<param>"`` respectively.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    if g.shape != tape.embedding.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match embedding {tape.embedding.shape}")
    if len(tape.layer_tapes) != len(w.layers) or tape.pooled.shape[-1] != w.config.d:
        raise ShapeError("tape does not belong to these weights")
    cfg = w.config
    emb = tape.embedding
    draw = (g - emb * (emb * g).sum(axis=-1, keepdims=True)) / tape.norm
    grads: dict[str, np.ndarray] = {"projection": tape.pooled.T @ draw}
    dpooled = draw @ w.projection.T
    x_hat, rstd = tape.final_ln
    dy = np.zeros_like(x_hat)
    dy[:, 0, :] = dpooled
    dx, grads["final_ln_gain"], grads["final_ln_bias"] = layer_norm_backward(dy, x_hat, rstd, w.final_ln_gain)

    adapter_grads: dict[str, np.ndarray] = {}
    for l in reversed(range(cfg.L)):
        site_m, site_f = f"layers.{l}.{MHA_SITE}", f"layers.{l}.{FFN_SITE}"
        pair = (tape.adapters.get(site_m), tape.adapters.get(site_f))
        dx, lg, (ag_m, ag_f) = layer_backward(dx, w.layers[l], tape.layer_tapes[l], pair, tape.mode)
        for name, arr in lg.items():
            grads[f"layers.{l}.{name}"] = arr
        for site, ag in ((site_m, ag_m), (site_f, ag_f)):
            if ag is not None:
                for name, arr in ag.items():
                    adapter_grads[f"{site}.{name}"] = arr
    grads["positional_embedding"] = dx.sum(axis=0)
    dtok = np.zeros_like(w.token_embedding)
    np.add.at(dtok, tape.tokens.reshape(-1), dx.reshape(-1, cfg.d))
    grads["token_embedding"] = dtok
    return grads, adapter_grads
