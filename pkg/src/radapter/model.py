"""Dual-encoder container and the bank of adapters attached to it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapter import EVAL, AdapterEma, AdapterWeights, effective_matrix, ema_update, rescale_merge
from .encoder import EncoderConfig, EncoderWeights, encode, init_encoder
from .numerics import SeededRng

TOWERS = ("image", "text")
TAU_INIT = 0.07
LOG_TAU_BOUNDS = (math.log(1e-3), math.log(1.0))


@dataclass
class DualEncoder:
    image: EncoderWeights
    text: EncoderWeights
    log_temperature: np.ndarray = field(default_factory=lambda: np.array([math.log(TAU_INIT)]))

    def tower(self, name: str) -> EncoderWeights:
        return self.image if name == "image" else self.text

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for t in TOWERS:
            for name, arr in self.tower(t).named_tensors().items():
                out[f"{t}.{name}"] = arr
        out["log_temperature"] = self.log_temperature
        return out

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.image.copy(), self.text.copy(), self.log_temperature.copy())

    @classmethod
    def init(cls, image_cfg: EncoderConfig, text_cfg: EncoderConfig, seed: int) -> "DualEncoder":
        return cls(init_encoder(image_cfg, SeededRng(seed, "init", "image")),
                   init_encoder(text_cfg, SeededRng(seed, "init", "text")))


@dataclass
class AdapterBank:
    """Adapters and their EMA shadows at every site of both towers."""

    adapters: dict[str, dict[str, AdapterWeights]]
    emas: dict[str, dict[str, AdapterEma]]
    rank: int | None = None
    drop_p: float = 0.2
    momentum: float = 0.999

    @classmethod
    def attach(cls, model: DualEncoder, rank: int | None = None, drop_p: float = 0.2, momentum: float = 0.999,
               seed: int = 0) -> "AdapterBank":
        """Identity-initialized adapters after every MHA and FFN block of both towers."""
        adapters: dict[str, dict[str, AdapterWeights]] = {}
        emas: dict[str, dict[str, AdapterEma]] = {}
        for t in TOWERS:
            cfg = model.tower(t).config
            rng = SeededRng(seed, "init", "adapters", t)
            adapters[t] = {s: AdapterWeights.zeros(cfg.d, rank, drop_p, rng) for s in cfg.sites()}
            emas[t] = {s: AdapterEma.from_adapter(a, momentum) for s, a in adapters[t].items()}
        return cls(adapters, emas, rank, drop_p, momentum)

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for t in TOWERS:
            for site, aw in self.adapters[t].items():
                for name, arr in aw.parameters().items():
                    out[f"adapters.{t}.{site}.{name}"] = arr
        return out

    def named_shadows(self) -> dict[str, np.ndarray]:
        return {f"ema.{t}.{site}": ema.shadow for t in TOWERS for site, ema in self.emas[t].items()}

    def update_emas(self) -> None:
        for t in TOWERS:
            for site, aw in self.adapters[t].items():
                ema_update(self.emas[t][site], aw)

    def scaled_eval_adapters(self, tower: str, alpha: float, use_ema: bool = True) -> dict[str, AdapterWeights]:
        """Full-rank eval adapters whose matrices are ``alpha`` times the shadow (or raw) weights."""
        out = {}
        for site, aw in self.adapters[tower].items():
            w = self.emas[tower][site].shadow if use_ema else effective_matrix(aw)
            out[site] = AdapterWeights(w=alpha * w)
        return out


def merge_into(model: DualEncoder, bank: AdapterBank, alpha: float, use_ema: bool = True) -> DualEncoder:
    """Fold every adapter, rescaled by ``alpha``, into a copy of the backbone."""
    merged = model.copy()
    for t in TOWERS:
        enc = merged.tower(t)
        for site, aw in bank.adapters[t].items():
            _, l, kind = site.split(".")
            lw = enc.layers[int(l)]
            shadow = bank.emas[t][site].shadow if use_ema else effective_matrix(aw)
            if kind == "mha":
                m = rescale_merge(lw.wo, lw.bo, shadow, alpha)
                lw.wo = m.w
                if lw.bo is not None:
                    lw.bo = m.b
            else:
                m = rescale_merge(lw.w2, lw.b2, shadow, alpha)
                lw.w2, lw.b2 = m.w, m.b
    return merged


def embed(model: DualEncoder, tower: str, tokens, adapters=None, batch: int = 512) -> np.ndarray:
    """Eval-mode unit embeddings of ``tokens`` (N x seq_len), computed in chunks."""
    tokens = np.asarray(tokens)
    enc = model.tower(tower)
    chunks = [encode(tokens[i:i + batch], enc, adapters, EVAL)[0] for i in range(0, len(tokens), batch)]
    if not chunks:
        return np.zeros((0, enc.config.embed_dim))
    return np.concatenate(chunks, axis=0)
