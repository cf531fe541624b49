"""Prototype classification, retrieval recall and the alpha sweep report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import KIND_MERGED, Checkpoint, merge_checkpoint, model_from_checkpoint
from .errors import CheckpointError, DataError, DegenerateEmbeddingError, ShapeError
from .model import DualEncoder, embed
from .synthdata import RecordSet, TaskWorld

REPORT_HEADER = ("alpha", "split", "metric", "value", "seed", "config_hash")
DEFAULT_METRICS = ("accuracy", "recall@1")
DEFAULT_SPLITS = ("id_test", "ood_test")


def class_prototypes(model: DualEncoder, world: TaskWorld, classes: Sequence[int],
                     templates: Sequence[int] | None = None, adapters=None) -> np.ndarray:
    """Average each class's caption embeddings over templates and re-normalize."""
    if templates is None:
        templates = range(world.spec.n_templates)
    templates = list(templates)
    toks = np.array([world.text_tokens(int(c), t) for c in classes for t in templates], dtype=np.int64)
    emb = embed(model, "text", toks, adapters).reshape(len(classes), len(templates), -1)
    mean = emb.mean(axis=1)
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        bad = [int(classes[i]) for i in np.flatnonzero(norms[:, 0] < 1e-12)]
        raise DegenerateEmbeddingError(f"template embeddings cancel out for classes {bad}")
    return mean / norms


def predict(image_emb: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Index of the most similar prototype; ties go to the lowest index."""
    return np.argmax(image_emb @ prototypes.T, axis=1)


def classify_accuracy(model: DualEncoder, records: RecordSet, prototypes: np.ndarray, classes: Sequence[int],
                      adapters=None) -> float:
    if len(records) == 0:
        raise DataError("cannot score an empty record set")
    classes = np.asarray(classes)
    pred = classes[predict(embed(model, "image", records.img, adapters), prototypes)]
    return float(np.mean(pred == records.class_ids))


def recall_at_k(queries: np.ndarray, gallery: np.ndarray, positives: np.ndarray, k: int) -> float:
    """Fraction of queries with at least one positive among their top-k gallery items.

    ``positives`` is a boolean (n_queries x n_gallery) matrix.  Scores are
    cosine similarities of unit rows; equal scores rank by gallery index.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > gallery.shape[0]:
        raise ValueError(f"k={k} exceeds gallery size {gallery.shape[0]}")
    positives = np.asarray(positives, dtype=bool)
    if positives.shape != (queries.shape[0], gallery.shape[0]):
        raise ShapeError(f"positives {positives.shape} vs ({queries.shape[0]}, {gallery.shape[0]})")
    scores = queries @ gallery.T
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(positives, top, axis=1).any(axis=1)
    return float(hits.mean())


def split_metrics(model: DualEncoder, world: TaskWorld, records: RecordSet,
                  metrics: Iterable[str] = DEFAULT_METRICS, adapters_by_tower=None) -> dict[str, float]:
    """Evaluate ``metrics`` on one split; ``recall@k`` is image-to-caption retrieval within the split."""
    adapters_by_tower = adapters_by_tower or {}
    classes = world.task_classes
    out = {}
    img = txt = None
    for metric in metrics:
        if metric == "accuracy":
            protos = class_prototypes(model, world, classes, adapters=adapters_by_tower.get("text"))
            out[metric] = classify_accuracy(model, records, protos, classes, adapters_by_tower.get("image"))
        elif metric.startswith("recall@"):
            if img is None:
                img = embed(model, "image", records.img, adapters_by_tower.get("image"))
                txt = embed(model, "text", records.txt, adapters_by_tower.get("text"))
            pos = records.class_ids[:, None] == records.class_ids[None, :]
            out[metric] = recall_at_k(img, txt, pos, int(metric.split("@", 1)[1]))
        else:
            raise ValueError(f"unknown metric {metric!r}")
    return out


@dataclass
class EvalReport:
    rows: list[tuple[float, str, str, float, int, str]] = field(default_factory=list)

    def add(self, alpha: float, split: str, metric: str, value: float, seed: int, config_hash: str) -> None:
        self.rows.append((float(alpha), split, metric, float(value), int(seed), config_hash))

    def sorted(self) -> "EvalReport":
        return EvalReport(sorted(self.rows, key=lambda r: (r[0], r[1], r[2], r[4])))

    def value(self, alpha: float, split: str, metric: str) -> float:
        for r in self.rows:
            if r[0] == alpha and r[1] == split and r[2] == metric:
                return r[3]
        raise KeyError((alpha, split, metric))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for alpha, split, metric, value, seed, h in self.sorted().rows:
            w.writerow([f"{alpha:.6f}", split, metric, f"{value:.6f}", seed, h])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != REPORT_HEADER:
            raise DataError(f"unexpected report header {header}")
        return cls([(float(a), s, m, float(v), int(sd), h) for a, s, m, v, sd, h in reader])


def _row_alpha(ckpt: Checkpoint, alpha: float | None) -> float:
    if alpha is not None:
        return alpha
    if ckpt.kind == KIND_MERGED:
        return float(ckpt.provenance["alpha"])
    return 0.0


def evaluate_checkpoint(ckpt: Checkpoint, world: TaskWorld, data: Mapping[str, RecordSet],
                        splits: Sequence[str] = DEFAULT_SPLITS, metrics: Sequence[str] = DEFAULT_METRICS,
                        alpha: float | None = None, report: EvalReport | None = None) -> EvalReport:
    """Score an adapter-free checkpoint on every split.

    Adapter checkpoints must be merged first.  The alpha column defaults to
    the merge coefficient recorded in the checkpoint (0 for a base model).
    """
    if ckpt.adapters is not None:
        raise CheckpointError("evaluate a merged checkpoint; this one still carries adapters")
    model, _ = model_from_checkpoint(ckpt)
    report = report if report is not None else EvalReport()
    row_alpha = _row_alpha(ckpt, alpha)
    seed = int(ckpt.provenance.get("seed", 0))
    chash = str(ckpt.provenance.get("config_hash", ""))
    for split in splits:
        if split not in data:
            raise DataError(f"split {split!r} not loaded")
        for metric, value in split_metrics(model, world, data[split], metrics).items():
            report.add(row_alpha, split, metric, value, seed, chash)
    return report


def _backbone_shapes(ckpt: Checkpoint) -> dict:
    return {k: np.shape(v) for k, v in ckpt.tensors.items() if not k.startswith(("adapters.", "ema."))}


def alpha_sweep(base: Checkpoint | None, finetuned: Checkpoint, alphas: Sequence[float], world: TaskWorld,
                data: Mapping[str, RecordSet], splits: Sequence[str] = DEFAULT_SPLITS,
                metrics: Sequence[str] = DEFAULT_METRICS, use_ema: bool = True) -> EvalReport:
    """Merge ``finetuned`` at every alpha and evaluate; rows are sorted (alpha, split, metric)."""
    if finetuned.adapters is None:
        raise CheckpointError("alpha sweep needs a checkpoint with adapters")
    if base is not None and (base.encoders != finetuned.encoders or
                             _backbone_shapes(base) != _backbone_shapes(finetuned)):
        raise CheckpointError("base and fine-tuned checkpoints have different architectures")
    report = EvalReport()
    for alpha in alphas:
        evaluate_checkpoint(merge_checkpoint(finetuned, alpha, use_ema), world, data, splits, metrics,
                            report=report)
    return report.sorted()
