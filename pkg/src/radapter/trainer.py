"""Training loops: InfoNCE pretraining of the whole dual encoder and
adapter-only fine-tuning with MPM-NCE, adapter dropping and EMA accumulation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .adapter import TRAIN
from .encoder import EncoderConfig, encode, encode_backward
from .errors import NumericalError, ShapeError, SpecError
from .loss import LossConfig, info_nce, mpm_nce
from .model import LOG_TAU_BOUNDS, TOWERS, AdapterBank, DualEncoder
from .numerics import SeededRng
from .synthdata import Batch, RecordSet, TaskSpec, TaskWorld, sample_batch

log = logging.getLogger(__name__)

MASK_ALL = "all"
MASK_ADAPTERS = "adapters_only"


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 64
    epochs: int = 10
    lr_init: float = 5e-4
    warmup_steps: int | None = None  # None: 5% of the total step count
    drop_p: float = 0.2
    momentum: float = 0.999
    delta: float = 0.05
    epsilon: float = 0.0
    tau: float = 0.01
    mask: str = MASK_ADAPTERS
    loss: str = "mpm"  # "mpm" or "infonce"
    loss_scaling: str = "mean"  # "mean" divides the summed loss by the batch size
    min_per_class: int = 2
    rank: int | None = None
    seed: int = 0
    # backbone shape, used when pretraining from scratch
    d: int = 32
    k: int = 4
    layers: int = 2
    embed_dim: int = 16
    w_o_has_bias: bool = True

    def __post_init__(self):
        if self.lr_init <= 0:
            raise SpecError("lr_init must be positive")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise SpecError("warmup_steps must be non-negative")
        if self.mask not in (MASK_ALL, MASK_ADAPTERS):
            raise SpecError(f"unknown trainability mask {self.mask!r}")
        if self.loss not in ("mpm", "infonce"):
            raise SpecError(f"unknown loss {self.loss!r}")
        if self.loss_scaling not in ("mean", "sum"):
            raise SpecError(f"unknown loss scaling {self.loss_scaling!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        return cls(**data)

    def warmup_for(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.05 * total_steps))


def pretrain_defaults(**overrides) -> TrainConfig:
    """Full-parameter InfoNCE pretraining defaults."""
    base = dict(epochs=30, mask=MASK_ALL, loss="infonce", min_per_class=1, drop_p=0.0, delta=0.0, epsilon=0.0)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(step: int, lr_init: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``lr_init`` then cosine decay reaching 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_init * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_init if step <= warmup_steps else 0.0
    progress = min(1.0, (step - warmup_steps) / span)
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """Adam moments per parameter name."""

    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], opt: OptimState,
               lr: float) -> OptimState:
    """Bias-corrected Adam update applied in place; weight decay is zero."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = opt.first.get(name)
        if m is None:
            m = opt.first[name] = np.zeros_like(p)
            opt.second[name] = np.zeros_like(p)
        v = opt.second[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return opt


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]


def compute_gradients(model: DualEncoder, bank: AdapterBank | None, batch: Batch, cfg: TrainConfig,
                      rng: SeededRng | None, mode: str = TRAIN, learn_temperature: bool = False) -> StepResult:
    """Forward both towers, evaluate the configured loss and backpropagate.

    Gradient keys follow :meth:`DualEncoder.named_tensors` and
    :meth:`AdapterBank.named_parameters`.
    """
    feats, tapes = {}, {}
    for t, toks in (("image", batch.img), ("text", batch.txt)):
        adapters = bank.adapters[t] if bank is not None else None
        feats[t], tapes[t] = encode(toks, model.tower(t), adapters, mode, rng)
    b = batch.img.shape[0]
    scale = 1.0 / b if cfg.loss_scaling == "mean" else 1.0
    grads: dict[str, np.ndarray] = {}
    if cfg.loss == "infonce":
        tau = model.temperature if learn_temperature else cfg.tau
        loss, d_img, d_txt, dtau = info_nce(feats["image"], feats["text"], tau)
        grads["log_temperature"] = np.array([dtau * tau * scale])
    else:
        loss, d_img, d_txt = mpm_nce(feats["image"], feats["text"], batch.y,
                                     LossConfig(cfg.tau, cfg.delta, cfg.epsilon))
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    for t, up in (("image", d_img), ("text", d_txt)):
        wg, ag = encode_backward(tapes[t], model.tower(t), up * scale)
        for name, g in wg.items():
            grads[f"{t}.{name}"] = g
        for name, g in ag.items():
            grads[f"adapters.{t}.{name}"] = g
    return StepResult(loss * scale, grads)


def trainable(model: DualEncoder, bank: AdapterBank | None, cfg: TrainConfig,
              learn_temperature: bool = False) -> dict[str, np.ndarray]:
    if cfg.mask == MASK_ALL:
        params = dict(model.named_tensors())
        if not learn_temperature:
            del params["log_temperature"]
        if bank is not None:
            params.update(bank.named_parameters())
        return params
    if bank is None:
        raise SpecError("adapters_only training needs attached adapters")
    return bank.named_parameters()


def train_step(model: DualEncoder, bank: AdapterBank | None, batch: Batch, cfg: TrainConfig, rng: SeededRng,
               opt: OptimState, lr: float, learn_temperature: bool = False) -> float:
    """One optimizer step; returns the (scaled) batch loss.

    Order: train-mode forward with fresh dropping draws, loss, backward,
    Adam on the trainable tensors, then an EMA update of every adapter.
    """
    res = compute_gradients(model, bank, batch, cfg, rng, TRAIN, learn_temperature)
    params = trainable(model, bank, cfg, learn_temperature)
    adamw_step(params, {n: res.grads[n] for n in params}, opt, lr)
    if learn_temperature:
        np.clip(model.log_temperature, *LOG_TAU_BOUNDS, out=model.log_temperature)
    if bank is not None:
        bank.update_emas()
    return res.loss


@dataclass
class TrainResult:
    model: DualEncoder
    bank: AdapterBank | None
    losses: list[float]
    epoch_log: list[str]


def _run(model: DualEncoder, bank: AdapterBank | None, records: RecordSet, world: TaskWorld, cfg: TrainConfig,
         learn_temperature: bool, label: str, steps: int | None = None) -> TrainResult:
    steps_per_epoch = max(1, len(records) // cfg.batch)
    total = cfg.epochs * steps_per_epoch if steps is None else steps
    warmup = cfg.warmup_for(total)
    data_rng = SeededRng(cfg.seed, label, "data")
    drop_rng = SeededRng(cfg.seed, label, "dropping")
    opt = OptimState()
    losses: list[float] = []
    lines: list[str] = []
    t0 = time.perf_counter()
    for step in range(total):
        batch = sample_batch(records, cfg.batch, data_rng, cfg.min_per_class, world)
        lr = lr_at(step, cfg.lr_init, warmup, total)
        losses.append(train_step(model, bank, batch, cfg, drop_rng, opt, lr, learn_temperature))
        if (step + 1) % steps_per_epoch == 0 or step + 1 == total:
            epoch = (step + 1 + steps_per_epoch - 1) // steps_per_epoch
            recent = losses[-steps_per_epoch:]
            line = (f"epoch={epoch} step={step + 1} lr={lr:.6g} train_loss={sum(recent) / len(recent):.6f} "
                    f"wall_ms={int((time.perf_counter() - t0) * 1000)}")
            lines.append(line)
            log.info(line)
    return TrainResult(model, bank, losses, lines)


def check_compatible(model: DualEncoder, spec: TaskSpec) -> None:
    img, txt = model.image.config, model.text.config
    if (img.seq_len, img.vocab_size) != (spec.img_seq_len, spec.img_vocab) or \
            (txt.seq_len, txt.vocab_size) != (spec.txt_seq_len, spec.txt_vocab):
        raise SpecError("model vocabulary / sequence length does not match the dataset")


def encoder_configs(spec: TaskSpec, cfg: TrainConfig) -> tuple[EncoderConfig, EncoderConfig]:
    common = dict(d=cfg.d, k=cfg.k, L=cfg.layers, embed_dim=cfg.embed_dim, w_o_has_bias=cfg.w_o_has_bias)
    return (EncoderConfig(seq_len=spec.img_seq_len, vocab_size=spec.img_vocab, **common),
            EncoderConfig(seq_len=spec.txt_seq_len, vocab_size=spec.txt_vocab, **common))


def pretrain(records: RecordSet, spec: TaskSpec, cfg: TrainConfig, steps: int | None = None) -> TrainResult:
    """Train every backbone tensor and the temperature with InfoNCE from a fresh init."""
    if cfg.loss != "infonce" or cfg.mask != MASK_ALL:
        cfg = replace(cfg, loss="infonce", mask=MASK_ALL)
    model = DualEncoder.init(*encoder_configs(spec, cfg), seed=cfg.seed)
    return _run(model, None, records, TaskWorld(spec), cfg, True, "pretrain", steps)


def finetune(base: DualEncoder, records: RecordSet, spec: TaskSpec, cfg: TrainConfig,
             steps: int | None = None) -> TrainResult:
    """Attach identity adapters to a copy of ``base`` and train only them."""
    check_compatible(base, spec)
    model = base.copy()
    bank = AdapterBank.attach(model, cfg.rank, cfg.drop_p, cfg.momentum, cfg.seed)
    return _run(model, bank, records, TaskWorld(spec), cfg, False, "finetune", steps)


__all__ = [
    "TrainConfig", "OptimState", "TrainResult", "lr_at", "adamw_step", "train_step", "compute_gradients",
    "pretrain", "finetune", "pretrain_defaults", "encoder_configs", "TOWERS",
]
