"""Binary container for checkpoints, corpora, and feature files.

One format serves all three: magic "FS2S", format version (u16), a 64-bit
hash guarding against loading data under the wrong configuration, then
named array entries (name length u16, name bytes, rank u8, one u32 per
dim, dtype code u8, little-endian payload). Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig, config_hash
from .models import StudentModel, TeacherModel

__all__ = [
    "FormatError",
    "ConfigMismatchError",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "save_corpus",
    "load_corpus",
    "save_features",
    "load_features",
]

MAGIC = b"FS2S"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Malformed or truncated container file."""


class ConfigMismatchError(ValueError):
    """File was written under a different configuration."""


def _fnv1a64(blob: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in blob:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def write_container(path, entries, header_hash: int) -> None:
    """Write named arrays; ``entries`` is an iterable of (name, array)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<Q", header_hash))
        for name, arr in entries:
            arr = np.asarray(arr)
            code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
            if code is None:
                code = _DTYPE_CODES.get(np.dtype(arr.dtype.str.replace(">", "<")))
            if code is None:
                raise FormatError(f"unsupported dtype {arr.dtype} for entry '{name}'")
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated container: short read in {what}")
    return buf


def read_container(path):
    """Read back (header_hash, {name: array}) with full validation."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError("bad magic; not a feature-container file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        (header_hash,) = struct.unpack("<Q", _read_exact(fh, 8, "header"))
        entries = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated container: partial entry header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "entry name").decode()
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dims"))[0] for _ in range(rank)
            )
            (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
            if code not in _DTYPES:
                raise FormatError(f"unknown dtype code {code} in entry '{name}'")
            dt = np.dtype(_DTYPES[code])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(fh, count * dt.itemsize, f"payload of '{name}'")
            entries[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return header_hash, entries


# ---------------------------------------------------------------------------
# checkpoints


def _model_meta(model) -> dict:
    cfg = model.cfg
    return {
        "kind": "student" if isinstance(model, StudentModel) else "teacher",
        "weight_norm": cfg.weight_norm,
        "model": {
            "mel_bands": cfg.mel_bands,
            "reduction": cfg.reduction,
            "context_dim": cfg.context_dim,
            "n_classes": cfg.n_classes,
            "embed_dim": cfg.embed_dim,
            "n_heads": cfg.n_heads,
            "kernel_size": cfg.kernel_size,
            "dilations": list(cfg.dilations),
            "noise_dim": cfg.noise_dim,
            "lookback": cfg.lookback,
            "weight_norm": cfg.weight_norm,
        },
    }


def save_checkpoint(path, model) -> None:
    meta = _model_meta(model)
    blob = json.dumps(meta, sort_keys=True).encode()
    entries = [("__meta__", np.frombuffer(blob, dtype=np.uint8))]
    entries.extend((name, p.data) for name, p in model.named_parameters())
    write_container(path, entries, config_hash(model.cfg))


def _config_from_meta(meta: dict) -> ModelConfig:
    kw = dict(meta["model"])
    kw["dilations"] = tuple(kw["dilations"])
    return ModelConfig(**kw)


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Rebuild a model from a checkpoint.

    ``expect`` pins the configuration the caller was initialized with;
    a checkpoint written under any other configuration is rejected.
    """
    header_hash, entries = read_container(path)
    if "__meta__" not in entries:
        raise FormatError("checkpoint is missing its metadata entry")
    meta = json.loads(entries.pop("__meta__").tobytes().decode())
    cfg = _config_from_meta(meta)
    if config_hash(cfg) != header_hash:
        raise FormatError("checkpoint header hash does not match its metadata")
    if expect is not None and config_hash(expect) != header_hash:
        raise ConfigMismatchError(
            "checkpoint was written under a different model configuration"
        )
    rng = np.random.default_rng(0)  # shapes only; every value is overwritten
    model = StudentModel(cfg, rng) if meta["kind"] == "student" else TeacherModel(cfg, rng)
    names = dict(model.named_parameters())
    if set(names) != set(entries):
        missing = set(names) - set(entries)
        extra = set(entries) - set(names)
        raise FormatError(f"checkpoint parameter mismatch: missing={missing} extra={extra}")
    for name, p in names.items():
        if p.data.shape != entries[name].shape:
            raise FormatError(f"parameter '{name}' has shape {entries[name].shape}, "
                              f"expected {p.data.shape}")
        p.data[...] = entries[name]
    if isinstance(model, StudentModel):
        for _, p in model.source.parameters():
            p.requires_grad = False
            p.grad = None
        for _, p in model.decoder.parameters():
            p.requires_grad = False
            p.grad = None
    return model


# ---------------------------------------------------------------------------
# corpora and feature files


def save_corpus(path, corpus) -> None:
    meta = {
        "kind": "corpus",
        "n_classes": corpus.n_classes,
        "pairs": [
            {
                "id": src.uid,
                "src_cls": src.cls,
                "tgt_cls": tgt.cls,
                "has_warp": src.warp is not None,
            }
            for src, tgt in corpus.pairs
        ],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    entries = [("__meta__", np.frombuffer(blob, dtype=np.uint8))]
    for i, (src, tgt) in enumerate(corpus.pairs):
        entries.append((f"pair{i:05d}.src", src.features))
        entries.append((f"pair{i:05d}.tgt", tgt.features))
        if src.warp is not None:
            entries.append((f"pair{i:05d}.warp", src.warp))
    write_container(path, entries, _fnv1a64(blob))


def load_corpus(path):
    from .corpus import ParallelCorpus, Utterance

    header_hash, entries = read_container(path)
    if "__meta__" not in entries:
        raise FormatError("corpus file is missing its metadata entry")
    blob = entries.pop("__meta__").tobytes()
    if _fnv1a64(blob) != header_hash:
        raise FormatError("corpus header hash does not match its metadata")
    meta = json.loads(blob.decode())
    pairs = []
    for i, rec in enumerate(meta["pairs"]):
        warp = entries.get(f"pair{i:05d}.warp") if rec["has_warp"] else None
        src = Utterance(cls=rec["src_cls"], features=entries[f"pair{i:05d}.src"],
                        warp=warp, uid=rec["id"])
        tgt = Utterance(cls=rec["tgt_cls"], features=entries[f"pair{i:05d}.tgt"],
                        warp=None, uid=rec["id"])
        pairs.append((src, tgt))
    return ParallelCorpus(pairs=pairs, n_classes=meta["n_classes"])


def save_features(path, features: np.ndarray, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["kind"] = "features"
    blob = json.dumps(meta, sort_keys=True).encode()
    entries = [("__meta__", np.frombuffer(blob, dtype=np.uint8)),
               ("features", np.asarray(features, dtype=np.float64))]
    write_container(path, entries, _fnv1a64(blob))


def load_features(path):
    header_hash, entries = read_container(path)
    if "__meta__" not in entries or "features" not in entries:
        raise FormatError("feature file must contain metadata and a features entry")
    blob = entries["__meta__"].tobytes()
    if _fnv1a64(blob) != header_hash:
        raise FormatError("feature header hash does not match its metadata")
    return entries["features"], json.loads(blob.decode())
