"""Finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import EVAL, TRAIN, AdapterWeights, adapter_apply, adapter_backward
from .encoder import EncoderConfig, encode, encode_backward, init_encoder
from .loss import LossConfig, build_label_matrix, info_nce, mpm_nce
from .numerics import SeededRng, finite_diff_check, gaussian_sample, l2_normalize_rows

LOSS_TOL = 1e-6
INFONCE_TOL = 1e-7
ADAPTER_TOL = 1e-6
ENCODER_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def _sample_indices(shape, rng: SeededRng, limit: int):
    total = int(np.prod(shape))
    if total <= limit:
        return list(np.ndindex(*shape))
    return [np.unravel_index(int(i), shape) for i in rng.choice(total, limit)]


def check_losses(seed: int, h: float = 1e-6) -> list[CheckResult]:
    rng = SeededRng(seed, "gradcheck", "loss")
    out = []
    f = l2_normalize_rows(gaussian_sample(rng, 6, 8))
    g = l2_normalize_rows(gaussian_sample(rng, 6, 8))
    y = build_label_matrix([0, 0, 0, 1, 1, 1])
    cfg = LossConfig(tau=0.01, delta=0.05, epsilon=0.05)
    _, df, dg = mpm_nce(f, g, y, cfg)
    out.append(CheckResult("mpm_nce.F", finite_diff_check(
        lambda p: mpm_nce(p, g, y, cfg, check_unit=False)[0], f.copy(), df, h), LOSS_TOL))
    out.append(CheckResult("mpm_nce.G", finite_diff_check(
        lambda p: mpm_nce(f, p, y, cfg, check_unit=False)[0], g.copy(), dg, h), LOSS_TOL))

    f = l2_normalize_rows(gaussian_sample(rng, 5, 8))
    g = l2_normalize_rows(gaussian_sample(rng, 5, 8))
    _, df, dg, _ = info_nce(f, g, 0.5)
    out.append(CheckResult("info_nce.F", finite_diff_check(
        lambda p: info_nce(p, g, 0.5, check_unit=False)[0], f.copy(), df, h), INFONCE_TOL))
    out.append(CheckResult("info_nce.G", finite_diff_check(
        lambda p: info_nce(f, p, 0.5, check_unit=False)[0], g.copy(), dg, h), INFONCE_TOL))
    tau = np.array([0.5])
    _, _, _, dtau = info_nce(f, g, 0.5)
    out.append(CheckResult("info_nce.tau", finite_diff_check(
        lambda p: info_nce(f, g, float(p[0]))[0], tau, np.array([dtau]), h), INFONCE_TOL))
    return out


def check_adapter(seed: int, h: float = 1e-6, d: int = 6) -> list[CheckResult]:
    rng = SeededRng(seed, "gradcheck", "adapter")
    x = gaussian_sample(rng, 5, d)
    probe = gaussian_sample(rng, 5, d)
    out = []
    for label, aw in (
        ("full", AdapterWeights(w=gaussian_sample(rng, d, d, 0.0, 0.3), drop_p=0.2)),
        ("lowrank", AdapterWeights(b=gaussian_sample(rng, d, 2, 0.0, 0.3), a=gaussian_sample(rng, 2, d, 0.0, 0.3),
                                   drop_p=0.2)),
    ):
        for mode in (EVAL, TRAIN):
            seed_key = ("gradcheck", "gamma", label)

            def fwd(_=None, xx=x):
                r = SeededRng(seed, *seed_key) if mode == TRAIN else None
                return float((adapter_apply(xx, aw, mode, r) * probe).sum())

            r = SeededRng(seed, *seed_key) if mode == TRAIN else None
            _, rec = adapter_apply(x, aw, mode, r, return_record=True)
            dx, grads = adapter_backward(rec, aw, probe, mode)
            for name, param in aw.parameters().items():
                out.append(CheckResult(f"adapter.{label}.{mode}.{name}",
                                       finite_diff_check(fwd, param, grads[name], h), ADAPTER_TOL))
            xc = x.copy()
            out.append(CheckResult(f"adapter.{label}.{mode}.x",
                                   finite_diff_check(lambda p: fwd(xx=p), xc, dx, h), ADAPTER_TOL))
    return out


def check_encoder(seed: int, h: float = 1e-6, d: int = 16, layers: int = 2, per_tensor: int = 12) -> list[CheckResult]:
    """MPM-NCE loss on a batch, differentiated end to end into both towers.

    Every backbone and adapter tensor is checked on a random subset of at
    most ``per_tensor`` coordinates.
    """
    rng = SeededRng(seed, "gradcheck", "encoder")
    cfgs = {
        "image": EncoderConfig(d=d, k=4, L=layers, seq_len=6, vocab_size=12, embed_dim=8),
        "text": EncoderConfig(d=d, k=2, L=layers, seq_len=5, vocab_size=10, embed_dim=8, w_o_has_bias=False),
    }
    towers = {t: init_encoder(c, rng.child("init", t), std=0.25) for t, c in cfgs.items()}
    adapters = {}
    for t, c in cfgs.items():
        adapters[t] = {}
        for i, site in enumerate(c.sites()):
            if i == 1:
                adapters[t][site] = AdapterWeights(b=gaussian_sample(rng, d, 3, 0.0, 0.3),
                                                   a=gaussian_sample(rng, 3, d, 0.0, 0.3))
            else:
                adapters[t][site] = AdapterWeights(w=gaussian_sample(rng, d, d, 0.0, 0.2))
        for lw in towers[t].layers:
            for vec in (lw.b1, lw.b2, lw.ln1_bias, lw.ln2_bias):
                vec += gaussian_sample(rng, 1, vec.shape[0], 0.0, 0.1)[0]
            if lw.bo is not None:
                lw.bo += gaussian_sample(rng, 1, d, 0.0, 0.1)[0]
    batch = 4
    tokens = {t: np.array([[rng.randbelow(c.vocab_size) for _ in range(c.seq_len)] for _ in range(batch)])
              for t, c in cfgs.items()}
    y = build_label_matrix([0, 0, 1, 2])
    loss_cfg = LossConfig(tau=0.1, delta=0.05, epsilon=0.05)

    def loss_fn(_=None):
        f, _ = encode(tokens["image"], towers["image"], adapters["image"], EVAL)
        g, _ = encode(tokens["text"], towers["text"], adapters["text"], EVAL)
        return mpm_nce(f, g, y, loss_cfg)[0]

    f, tf = encode(tokens["image"], towers["image"], adapters["image"], EVAL)
    g, tg = encode(tokens["text"], towers["text"], adapters["text"], EVAL)
    _, df, dg = mpm_nce(f, g, y, loss_cfg)
    out = []
    for t, tape, up in (("image", tf, df), ("text", tg, dg)):
        wg, ag = encode_backward(tape, towers[t], up)
        pick = rng.child("coords", t)
        for name, param in towers[t].named_tensors().items():
            idx = _sample_indices(param.shape, pick, per_tensor)
            out.append(CheckResult(f"encoder.{t}.{name}", finite_diff_check(loss_fn, param, wg[name], h, idx),
                                   ENCODER_TOL))
        for site, aw in adapters[t].items():
            for pname, param in aw.parameters().items():
                key = f"{site}.{pname}"
                idx = _sample_indices(param.shape, pick, per_tensor)
                out.append(CheckResult(f"encoder.{t}.adapter.{key}",
                                       finite_diff_check(loss_fn, param, ag[key], h, idx), ENCODER_TOL))
    return out


def run_all(seed: int, h: float = 1e-6) -> list[CheckResult]:
    return check_losses(seed, h) + check_adapter(seed, h) + check_encoder(seed, h)
