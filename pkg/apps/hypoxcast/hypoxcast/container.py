"""
TBST model container

Little-endian layout: magic "TBST", u16 version, u8 type tag, u32-prefixed
JSON metadata, u32 tensor count, tensor records, then a SHA-256 digest of
every preceding byte. A tensor record is u16 name length, name, u8 dtype
code, u8 ndim, u32 per dimension, u64 byte count and the raw bytes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ChecksumError, ContainerError, ModelTypeError, VersionMismatchError
from .gbt import GBTConfig, GBTModel, TreeNode
from .lstm import LSTMConfig, LSTMModel, LSTMParams

logger = logging.getLogger(__name__)

MAGIC = b"TBST"
VERSION = 1
DIGEST_SIZE = 32
TYPE_TAGS = {"lstm": 1, "gbt": 2}
DTYPE_CODES = {
    1: np.dtype("<f8"),
    2: np.dtype("<f4"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("u1"),
}

ModelKind = Literal["lstm", "gbt"]


def _dtype_code(name: str, dtype: np.dtype) -> int:
    for code, known in DTYPE_CODES.items():
        if dtype.kind == known.kind and dtype.itemsize == known.itemsize:
            return code
    raise ContainerError(f"tensor '{name}' has unsupported dtype {dtype}")


def encode(kind: ModelKind, metadata: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HB", VERSION, TYPE_TAGS[kind])]
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        code = _dtype_code(name, array.dtype)
        raw = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ContainerError("container is truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError("container is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode(blob: bytes, expected: ModelKind | None = None) -> tuple[ModelKind, dict, dict[str, np.ndarray]]:
    """Verify checksum, then magic and version, then type tag"""
    if len(blob) < DIGEST_SIZE + 7:
        raise ChecksumError("container too short to hold a digest")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("container checksum mismatch")

    r = _Reader(body)
    if r.raw(4) != MAGIC:
        raise VersionMismatchError("not a TBST container (bad magic)")
    version, tag = r.take("<HB")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported container version {version}, expected {VERSION}")
    kinds = {v: k for k, v in TYPE_TAGS.items()}
    if tag not in kinds:
        raise ModelTypeError(f"unknown model type tag {tag}")
    kind = kinds[tag]
    if expected is not None and kind != expected:
        raise ModelTypeError(f"container holds a {kind} model, expected {expected}")

    (meta_len,) = r.take("<I")
    metadata = json.loads(r.raw(meta_len).decode("utf-8"))
    (count,) = r.take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode("utf-8")
        code, ndim = r.take("<BB")
        if code not in DTYPE_CODES:
            raise ContainerError(f"tensor '{name}' has unknown dtype code {code}")
        shape = r.take(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.take("<Q")
        tensors[name] = np.frombuffer(r.raw(nbytes), dtype=DTYPE_CODES[code]).reshape(shape).copy()
    if r.pos != len(body):
        raise ContainerError("trailing bytes after the last tensor record")
    return kind, metadata, tensors


def _tree_tensors(k: int, tree: TreeNode) -> dict[str, np.ndarray]:
    nodes = list(tree.preorder())
    return {
        f"tree.{k}.feature": np.array([n.feature for n in nodes], dtype=np.int32),
        f"tree.{k}.value": np.array([n.weight if n.is_leaf else n.threshold for n in nodes], dtype=np.float64),
        f"tree.{k}.default_left": np.array([n.default_left for n in nodes], dtype=np.uint8),
        f"tree.{k}.gain": np.array([n.gain for n in nodes], dtype=np.float64),
        f"tree.{k}.cover": np.array([n.cover for n in nodes], dtype=np.float64),
    }


def _tree_from(k: int, tensors: dict[str, np.ndarray]) -> TreeNode:
    feature = tensors[f"tree.{k}.feature"]
    value = tensors[f"tree.{k}.value"]
    default_left = tensors[f"tree.{k}.default_left"]
    gain, cover = tensors[f"tree.{k}.gain"], tensors[f"tree.{k}.cover"]
    pos = 0

    def build() -> TreeNode:
        nonlocal pos
        if pos >= feature.size:
            raise ContainerError(f"tree {k} record ends early")
        i = pos
        pos += 1
        f = int(feature[i])
        if f < 0:
            return TreeNode(weight=float(value[i]), cover=float(cover[i]))
        node = TreeNode(
            feature=f,
            threshold=float(value[i]),
            default_left=bool(default_left[i]),
            gain=float(gain[i]),
            cover=float(cover[i]),
        )
        node.left = build()
        node.right = build()
        return node

    root = build()
    if pos != feature.size:
        raise ContainerError(f"tree {k} record has unused nodes")
    return root


def save_model(path: str | Path, model: LSTMModel | GBTModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, LSTMModel):
        metadata = {
            "config": model.config.model_dump(mode="json"),
            "lookback": model.lookback,
            "channels": list(model.channels),
            "metadata": model.metadata,
        }
        blob = encode("lstm", metadata, model.params.tensors)
    elif isinstance(model, GBTModel):
        metadata = {
            "config": None if model.config is None else model.config.model_dump(mode="json"),
            "base_margin": model.base_margin,
            "learning_rate": model.learning_rate,
            "feature_names": list(model.feature_names),
            "n_trees": len(model.trees),
            "metadata": model.metadata,
        }
        tensors = {}
        for k, tree in enumerate(model.trees):
            tensors.update(_tree_tensors(k, tree))
        blob = encode("gbt", metadata, tensors)
    else:
        raise ModelTypeError(f"cannot serialize {type(model).__name__}")
    path.write_bytes(blob)
    logger.info(f"Saved {type(model).__name__} to {path} ({len(blob)} bytes)")
    return path


def read_header(path: str | Path) -> tuple[ModelKind, dict]:
    kind, metadata, _ = decode(Path(path).read_bytes())
    return kind, metadata


def load_model(path: str | Path, expected: ModelKind | None = None) -> LSTMModel | GBTModel:
    kind, meta, tensors = decode(Path(path).read_bytes(), expected)
    if kind == "lstm":
        return LSTMModel(
            config=LSTMConfig.model_validate(meta["config"]),
            params=LSTMParams(tensors),
            lookback=int(meta["lookback"]),
            channels=tuple(meta["channels"]),
            metadata=meta.get("metadata") or {},
        )
    return GBTModel(
        base_margin=float(meta["base_margin"]),
        trees=[_tree_from(k, tensors) for k in range(int(meta["n_trees"]))],
        learning_rate=float(meta["learning_rate"]),
        feature_names=tuple(meta["feature_names"]),
        config=None if meta["config"] is None else GBTConfig.model_validate(meta["config"]),
        metadata=meta.get("metadata") or {},
    )
