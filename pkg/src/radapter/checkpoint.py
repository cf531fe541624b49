"""Binary checkpoint container and adapter merging.

Layout::

    8 bytes   magic  b"RADPTCK1"
    u32 LE    format version
    u64 LE    header length in bytes
    header    UTF-8 JSON: configs, adapter metadata, provenance and a tensor
              table of {name, shape, offset, nbytes} (offsets into the payload)
    payload   float64 little-endian tensor data
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .adapter import AdapterEma, AdapterWeights
from .encoder import EncoderConfig, EncoderWeights
from .errors import (
    BadMagicError,
    CheckpointError,
    MissingAdapterError,
    OutOfBoundsError,
    OverlappingTensorsError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .model import TOWERS, AdapterBank, DualEncoder, merge_into
from .numerics import fnv1a64

MAGIC = b"RADPTCK1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_LE_F64 = np.dtype("<f8")

KIND_BASE = "base"
KIND_FINETUNED = "finetuned"
KIND_MERGED = "merged"


def config_hash(config: Mapping[str, Any]) -> str:
    """FNV-1a 64 of the canonical JSON form, as 16 hex digits."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return f"{fnv1a64(canonical.encode('utf-8')):016x}"


@dataclass
class Checkpoint:
    encoders: dict[str, dict]
    tensors: dict[str, np.ndarray]
    adapters: dict | None = None
    provenance: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def kind(self) -> str:
        return self.provenance.get("kind", KIND_BASE)

    def digest(self) -> str:
        """Content hash over names, shapes and raw tensor bytes."""
        parts = []
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype=_LE_F64)
            parts.append(f"{name}:{arr.shape}".encode() + arr.tobytes())
        return f"{fnv1a64(b''.join(parts)):016x}"


# --------------------------------------------------------------------------
# Save / load
# --------------------------------------------------------------------------


def to_bytes(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "encoders": ckpt.encoders,
        "adapters": ckpt.adapters,
        "provenance": ckpt.provenance,
        "payload_nbytes": offset,
        "tensors": table,
    }
    hbytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, ckpt.version, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise TruncatedPayloadError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise TruncatedPayloadError("header extends past end of file")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        table = header["tensors"]
        declared = int(header["payload_nbytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    payload = memoryview(blob)[start + hlen:]
    if len(payload) < declared:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {declared}")

    spans = []
    names = set()
    for entry in table:
        name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if name in names:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        names.add(name)
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r}: {nbytes} bytes cannot hold shape {shape}")
        if off < 0 or off + nbytes > len(payload) or off + nbytes > declared:
            raise OutOfBoundsError(f"tensor {name!r} spans [{off}, {off + nbytes}) beyond the payload")
        spans.append((off, off + nbytes, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingTensorsError(f"tensors {n0!r} and {n1!r} overlap")

    tensors = {}
    for entry in table:
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        arr = np.frombuffer(payload[off:off + nbytes], dtype=_LE_F64).astype(np.float64)
        tensors[entry["name"]] = arr.reshape(tuple(entry["shape"]))
    return Checkpoint(encoders=header["encoders"], tensors=tensors, adapters=header.get("adapters"),
                      provenance=header.get("provenance") or {}, version=version)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    blob = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Model <-> checkpoint
# --------------------------------------------------------------------------


def checkpoint_from_model(model: DualEncoder, bank: AdapterBank | None = None,
                          provenance: Mapping | None = None) -> Checkpoint:
    tensors = {name: arr.copy() for name, arr in model.named_tensors().items()}
    adapters = None
    if bank is not None:
        tensors.update({n: a.copy() for n, a in bank.named_parameters().items()})
        tensors.update({n: a.copy() for n, a in bank.named_shadows().items()})
        adapters = {
            "sites": {t: sorted(bank.adapters[t]) for t in TOWERS},
            "rank": bank.rank,
            "drop_p": bank.drop_p,
            "momentum": bank.momentum,
            "ema_updates": {t: {s: e.update_count for s, e in bank.emas[t].items()} for t in TOWERS},
        }
    prov = dict(provenance or {})
    prov.setdefault("kind", KIND_FINETUNED if bank is not None else KIND_BASE)
    return Checkpoint(encoders={t: model.tower(t).config.to_dict() for t in TOWERS}, tensors=tensors,
                      adapters=adapters, provenance=prov)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DualEncoder, AdapterBank | None]:
    try:
        towers = {}
        for t in TOWERS:
            cfg = EncoderConfig.from_dict(ckpt.encoders[t])
            prefix = t + "."
            towers[t] = EncoderWeights.from_named(
                cfg, {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})
        model = DualEncoder(towers["image"], towers["text"], ckpt.tensors["log_temperature"].reshape(1).copy())
    except (KeyError, TypeError, ShapeError) as exc:
        raise CheckpointError(f"checkpoint does not describe a dual encoder: {exc}") from exc
    if ckpt.adapters is None:
        return model, None
    meta = ckpt.adapters
    adapters: dict[str, dict[str, AdapterWeights]] = {}
    emas: dict[str, dict[str, AdapterEma]] = {}
    try:
        for t in TOWERS:
            adapters[t], emas[t] = {}, {}
            for site in meta["sites"][t]:
                p = f"adapters.{t}.{site}."
                if meta["rank"] is None:
                    aw = AdapterWeights(w=ckpt.tensors[p + "w"], drop_p=meta["drop_p"])
                else:
                    aw = AdapterWeights(b=ckpt.tensors[p + "b"], a=ckpt.tensors[p + "a"], drop_p=meta["drop_p"])
                adapters[t][site] = aw
                emas[t][site] = AdapterEma(ckpt.tensors[f"ema.{t}.{site}"], meta["momentum"],
                                           meta.get("ema_updates", {}).get(t, {}).get(site, 0))
    except KeyError as exc:
        raise MissingAdapterError(f"adapter tensor {exc} missing from checkpoint") from exc
    return model, AdapterBank(adapters, emas, meta["rank"], meta["drop_p"], meta["momentum"])


def merge_checkpoint(ckpt: Checkpoint, alpha: float = 0.5, use_ema: bool = True) -> Checkpoint:
    """Fold ``alpha``-scaled adapters into the backbone, producing an adapter-free checkpoint."""
    if ckpt.adapters is None:
        raise MissingAdapterError("checkpoint has no adapters to merge")
    model, bank = model_from_checkpoint(ckpt)
    merged = merge_into(model, bank, alpha, use_ema)
    prov = {k: v for k, v in ckpt.provenance.items() if k != "kind"}
    prov.update(kind=KIND_MERGED, alpha=float(alpha), merged_from=ckpt.digest(),
                merge_weights="ema" if use_ema else "raw")
    return checkpoint_from_model(merged, None, prov)
