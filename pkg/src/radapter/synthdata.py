"""Synthetic paired image/text tokens with a controllable rendering-style shift.

Each class owns a unit prototype in a latent space.  An "image" is the
prototype pushed through a style-specific projection, perturbed by Gaussian
noise and quantized into equal-probability bins.  A "text" is a template
prefix followed by a class-specific token block, so every class has
``n_templates`` distinct captions.  Styles:

* ``pre``: pretraining data, the projection is a random blend of the
  in-distribution projection and an alternative one.
* ``id``: the in-distribution projection.
* ``ood``: a fixed blend ``(1 - s) * P + s * P_alt`` with doubled noise.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, SpecError
from .loss import build_label_matrix
from .numerics import SeededRng, gaussian_sample

PAD, BOS = 0, 1
TEMPLATE_WORDS = range(2, 16)
TEMPLATE_LEN = 3  # words after BOS
CLASS_BLOCK_LEN = 3
SPLITS = ("pretrain", "id_train", "id_test", "ood_test")
STYLES = ("pre", "id", "ood")


@dataclass(frozen=True)
class TaskSpec:
    latent_dim: int = 16
    n_classes_pretrain: int = 64
    n_classes_task: int = 16
    n_templates: int = 4
    img_seq_len: int = 16
    txt_seq_len: int = 16
    img_vocab: int = 64
    txt_vocab: int = 64
    noise_std_id: float = 0.5
    noise_std_ood: float = 1.0
    style_mix: float = 0.5
    seed: int = 0
    n_pretrain: int = 8192
    n_id_train: int = 2048
    n_id_test: int = 512
    n_ood_test: int = 512

    def __post_init__(self):
        if not 1 <= self.n_classes_task <= self.n_classes_pretrain:
            raise SpecError("need 1 <= n_classes_task <= n_classes_pretrain")
        if not 0.0 <= self.style_mix <= 1.0:
            raise SpecError("style_mix must lie in [0, 1]")
        if self.noise_std_id < 0 or self.noise_std_ood < 0:
            raise SpecError("noise levels must be non-negative")
        if self.n_templates < 1:
            raise SpecError("need at least one template")
        if self.txt_seq_len < 1 + TEMPLATE_LEN + CLASS_BLOCK_LEN:
            raise SpecError(f"txt_seq_len must be at least {1 + TEMPLATE_LEN + CLASS_BLOCK_LEN}")
        if self.txt_vocab < TEMPLATE_WORDS.stop + 2:
            raise SpecError(f"txt_vocab must be at least {TEMPLATE_WORDS.stop + 2}")
        if self.img_vocab < 2 or self.img_seq_len < 1 or self.latent_dim < 1:
            raise SpecError("invalid image modality sizes")
        if len(TEMPLATE_WORDS) ** TEMPLATE_LEN < self.n_templates:
            raise SpecError("too many templates for the template vocabulary")
        if (self.txt_vocab - TEMPLATE_WORDS.stop) ** CLASS_BLOCK_LEN < self.n_classes_pretrain:
            raise SpecError("text vocabulary too small to give every class a distinct block")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskSpec":
        return cls(**data)

    def split_size(self, split: str) -> int:
        return {"pretrain": self.n_pretrain, "id_train": self.n_id_train,
                "id_test": self.n_id_test, "ood_test": self.n_ood_test}[split]


@dataclass
class PairRecord:
    class_id: int
    template_id: int
    style: str
    img_tokens: list[int]
    txt_tokens: list[int]

    def to_json(self) -> str:
        return json.dumps({"class": self.class_id, "template": self.template_id, "style": self.style,
                           "img": list(self.img_tokens), "txt": list(self.txt_tokens)},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        d = json.loads(line)
        return cls(int(d["class"]), int(d["template"]), str(d["style"]),
                   [int(t) for t in d["img"]], [int(t) for t in d["txt"]])


@dataclass
class RenderStyle:
    projection: np.ndarray  # latent_dim x seq_len
    noise_std: float
    bin_edges: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.bin_edges) <= 0):
            raise SpecError("bin edges must be strictly increasing")


def equal_probability_edges(vocab_size: int) -> np.ndarray:
    """``vocab_size - 1`` standard-normal quantiles splitting the line into equal-mass bins."""
    nd = NormalDist()
    return np.array([nd.inv_cdf(i / vocab_size) for i in range(1, vocab_size)])


def _rms_rows(m: np.ndarray) -> np.ndarray:
    return m / np.sqrt((m * m).mean(axis=1, keepdims=True))


class TaskWorld:
    """Everything that is fixed for a seed: prototypes, projections, vocabularies."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.prototypes = gen_prototypes(spec, SeededRng(spec.seed, "prototypes"))
        rng = SeededRng(spec.seed, "projections")
        self.proj_id = _rms_rows(gaussian_sample(rng, spec.latent_dim, spec.img_seq_len))
        self.proj_alt = _rms_rows(gaussian_sample(rng, spec.latent_dim, spec.img_seq_len))
        self.bin_edges = equal_probability_edges(spec.img_vocab)
        self.task_classes = np.sort(
            SeededRng(spec.seed, "task_classes").choice(spec.n_classes_pretrain, spec.n_classes_task))
        self.template_prefixes = _distinct_blocks(SeededRng(spec.seed, "templates"), spec.n_templates,
                                                  TEMPLATE_LEN, TEMPLATE_WORDS.start, TEMPLATE_WORDS.stop)
        self.class_blocks = _distinct_blocks(SeededRng(spec.seed, "class_tokens"), spec.n_classes_pretrain,
                                             CLASS_BLOCK_LEN, TEMPLATE_WORDS.stop, spec.txt_vocab)

    def blended_projection(self, s: float) -> np.ndarray:
        if s == 0.0:
            return self.proj_id
        return _rms_rows((1.0 - s) * self.proj_id + s * self.proj_alt)

    def style(self, name: str, blend: float | None = None) -> RenderStyle:
        spec = self.spec
        if name == "id":
            return RenderStyle(self.proj_id, spec.noise_std_id, self.bin_edges)
        if name == "ood":
            return RenderStyle(self.blended_projection(spec.style_mix), spec.noise_std_ood, self.bin_edges)
        if name == "pre":
            if blend is None:
                raise ValueError("pre style needs a blend factor")
            return RenderStyle(self.blended_projection(blend), spec.noise_std_id, self.bin_edges)
        raise ValueError(f"unknown style {name!r}")

    def text_tokens(self, class_id: int, template_id: int) -> list[int]:
        spec = self.spec
        if not 0 <= class_id < spec.n_classes_pretrain or not 0 <= template_id < spec.n_templates:
            raise SpecError(f"class {class_id} / template {template_id} out of range")
        toks = [BOS, *self.template_prefixes[template_id], *self.class_blocks[class_id]]
        return toks + [PAD] * (spec.txt_seq_len - len(toks))


def _distinct_blocks(rng: SeededRng, count: int, length: int, lo: int, hi: int) -> list[tuple[int, ...]]:
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < count:
        block = tuple(lo + rng.randbelow(hi - lo) for _ in range(length))
        if block not in seen:
            seen.add(block)
            out.append(block)
    return out


def gen_prototypes(spec: TaskSpec, rng: SeededRng, max_cos: float = 0.9, attempts: int = 100) -> np.ndarray:
    """Unit Gaussian prototypes whose pairwise cosine stays below ``max_cos``."""
    n, dim = spec.n_classes_pretrain, spec.latent_dim

    def draw():
        v = np.array(rng.normals(dim))
        return v / np.linalg.norm(v)

    protos = np.stack([draw() for _ in range(n)])
    for _ in range(attempts):
        cos = protos @ protos.T
        np.fill_diagonal(cos, -np.inf)
        bad = np.argwhere(cos >= max_cos)
        if bad.size == 0:
            return protos
        for i in sorted({int(max(i, j)) for i, j in bad}):
            protos[i] = draw()
    raise SpecError(f"could not separate {n} prototypes in {dim} dimensions after {attempts} attempts")


def render_pair(world: TaskWorld, class_id: int, template_id: int, style: RenderStyle, rng: SeededRng,
                style_tag: str = "id") -> PairRecord:
    spec = world.spec
    if not 0 <= class_id < spec.n_classes_pretrain or not 0 <= template_id < spec.n_templates:
        raise SpecError(f"class {class_id} / template {template_id} out of range")
    z = world.prototypes[class_id] @ style.projection
    if style.noise_std > 0:
        z = z + style.noise_std * rng.normals(z.shape[0])
    img = np.searchsorted(style.bin_edges, z, side="right")
    return PairRecord(class_id, template_id, style_tag, [int(t) for t in img],
                      world.text_tokens(class_id, template_id))


def _render_split(world: TaskWorld, split: str) -> list[PairRecord]:
    spec = world.spec
    n = spec.split_size(split)
    classes = np.arange(spec.n_classes_pretrain) if split == "pretrain" else world.task_classes
    fixed = None
    if split in ("id_train", "id_test"):
        fixed = ("id", world.style("id"))
    elif split == "ood_test":
        fixed = ("ood", world.style("ood"))
    # id_test and ood_test share noise streams: record i of each is the same draw in two styles
    stream = "test" if split in ("id_test", "ood_test") else split
    out = []
    for i in range(n):
        rng = SeededRng(spec.seed, "render", stream, i)
        class_id = int(classes[i % len(classes)])
        template_id = (i // len(classes)) % spec.n_templates
        if fixed is None:
            tag, style = "pre", world.style("pre", blend=rng.uniform())
        else:
            tag, style = fixed
        out.append(render_pair(world, class_id, template_id, style, rng, tag))
    return out


def gen_split(spec: TaskSpec, splits: Iterable[str] = SPLITS) -> dict[str, list[PairRecord]]:
    """Render every requested split; output depends only on ``spec``."""
    world = TaskWorld(spec)
    return {split: _render_split(world, split) for split in splits}


class RecordSet:
    """Array view of a list of records, indexed by class for batch sampling."""

    def __init__(self, records: list[PairRecord]):
        if not records:
            raise DataError("empty record set")
        self.records = records
        self.class_ids = np.array([r.class_id for r in records], dtype=np.int64)
        self.template_ids = np.array([r.template_id for r in records], dtype=np.int64)
        self.img = np.array([r.img_tokens for r in records], dtype=np.int64)
        self.txt = np.array([r.txt_tokens for r in records], dtype=np.int64)
        self.classes = np.unique(self.class_ids)
        self.by_class = {int(c): np.flatnonzero(self.class_ids == c) for c in self.classes}

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Batch:
    img: np.ndarray
    txt: np.ndarray
    class_ids: np.ndarray
    y: np.ndarray


def sample_batch(records: RecordSet, batch_size: int, rng: SeededRng, min_per_class: int = 2,
                 world: TaskWorld | None = None) -> Batch:
    """Class-grouped batch: ``batch_size / min_per_class`` class slots of ``min_per_class`` records.

    Class slots cycle through random permutations of the available classes, so
    a class appears in several slots when there are more slots than classes.
    When ``world`` is given each caption is re-rendered with a uniformly drawn
    template.
    """
    if min_per_class < 1 or batch_size < 2 * min_per_class or batch_size % min_per_class:
        raise DataError(f"batch size {batch_size} incompatible with min_per_class={min_per_class}")
    n_slots = batch_size // min_per_class
    classes = records.classes
    slot_classes: list[int] = []
    while len(slot_classes) < n_slots:
        perm = rng.permutation(len(classes))
        slot_classes.extend(int(classes[p]) for p in perm[: n_slots - len(slot_classes)])
    counts: dict[int, int] = {}
    for c in slot_classes:
        counts[c] = counts.get(c, 0) + min_per_class
    picked: dict[int, list[int]] = {}
    for c, need in counts.items():
        pool = records.by_class[c]
        if need > len(pool):
            raise DataError(f"class {c} has {len(pool)} records, batch needs {need}")
        picked[c] = [int(pool[j]) for j in rng.choice(len(pool), need)]
    idx = []
    for c in slot_classes:
        idx.extend(picked[c][:min_per_class])
        picked[c] = picked[c][min_per_class:]
    idx = np.array(idx, dtype=np.int64)
    class_ids = records.class_ids[idx]
    txt = records.txt[idx]
    if world is not None:
        txt = np.array([world.text_tokens(int(c), rng.randbelow(world.spec.n_templates)) for c in class_ids],
                       dtype=np.int64)
    return Batch(img=records.img[idx], txt=txt, class_ids=class_ids, y=build_label_matrix(class_ids))


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(out_dir, spec: TaskSpec, data: Mapping[str, list[PairRecord]]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, recs in data.items():
        _atomic_write_text(out / f"{split}.jsonl", "".join(r.to_json() + "\n" for r in recs))
    _atomic_write_text(out / "spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def read_spec(data_dir) -> TaskSpec:
    path = Path(data_dir) / "spec.json"
    try:
        return TaskSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise DataError(f"missing dataset spec {path}") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"malformed dataset spec {path}: {exc}") from exc


def read_split(data_dir, split: str) -> list[PairRecord]:
    path = Path(data_dir) / f"{split}.jsonl"
    try:
        with open(path, encoding="utf-8") as fh:
            return [PairRecord.from_json(line) for line in fh if line.strip()]
    except FileNotFoundError as exc:
        raise DataError(f"missing split file {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed record in {path}: {exc}") from exc
