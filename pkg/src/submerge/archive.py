"""Bit-exact container for named float32 tensors plus string metadata.

File layout (version 1): bytes 0..7 hold the header length as a
little-endian u64; the UTF-8 JSON header follows; the raw payload starts
immediately after. The header is minified JSON with sorted keys:

    {"tensors": {name: {"dtype": "f32", "shape": [...],
                        "offsets": [begin, end]}},
     "meta": {...}}

Offsets are byte positions relative to the payload start. Tensors are
stored row-major little-endian f32, in lexicographic name order with no
gaps, so a given archive always serializes to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    CoeffError,
    CompatError,
    DataError,
    FormatError,
    IoError,
    TruncationError,
)

_HEADER_PREFIX = struct.Struct("<Q")
_DTYPE_TAG = "f32"
_ITEM_SIZE = 4


@dataclass
class TensorArchive:
    """Named float32 tensors with string metadata, iterated in name order."""

    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ordered: dict[str, np.ndarray] = {}
        for name in sorted(self.tensors):
            if not isinstance(name, str) or not name:
                raise FormatError(f"tensor name must be a non-empty string, got {name!r}")
            ordered[name] = np.ascontiguousarray(self.tensors[name], dtype=np.float32)
        self.tensors = ordered
        for key, value in self.meta.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise FormatError("meta must map strings to strings")

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self.tensors.items()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorArchive):
            return NotImplemented
        if self.meta != other.meta or self.names != other.names:
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b, equal_nan=True)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _validate_for_write(archive: TensorArchive) -> None:
    for name, arr in archive.tensors.items():
        if any(int(extent) <= 0 for extent in arr.shape):
            raise FormatError(f"tensor {name!r} has a non-positive extent {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError(f"tensor {name!r} contains non-finite values")


def archive_bytes(archive: TensorArchive) -> bytes:
    """Canonical serialization; equal archives yield identical bytes."""
    _validate_for_write(archive)
    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    cursor = 0
    for name, arr in archive.tensors.items():
        raw = arr.astype("<f4", copy=False).tobytes(order="C")
        entries[name] = {
            "dtype": _DTYPE_TAG,
            "shape": [int(extent) for extent in arr.shape],
            "offsets": [cursor, cursor + len(raw)],
        }
        chunks.append(raw)
        cursor += len(raw)
    header = json.dumps(
        {"tensors": entries, "meta": archive.meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _HEADER_PREFIX.pack(len(header)) + header + b"".join(chunks)


def archive_digest(archive: TensorArchive) -> str:
    return hashlib.sha256(archive_bytes(archive)).hexdigest()


def write_archive(archive: TensorArchive, path) -> None:
    data = archive_bytes(archive)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write archive to {path}: {exc}") from exc


def _parse_header(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < _HEADER_PREFIX.size:
        raise FormatError("file too short to hold a header length")
    (header_len,) = _HEADER_PREFIX.unpack_from(blob)
    body = blob[_HEADER_PREFIX.size :]
    if len(body) < header_len:
        raise TruncationError("header truncated")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"tensors", "meta"}:
        raise FormatError("header must contain exactly 'tensors' and 'meta'")
    return header, body[header_len:]


def read_archive(path) -> TensorArchive:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read archive from {path}: {exc}") from exc
    header, payload = _parse_header(blob)

    entries = header["tensors"]
    meta = header["meta"]
    if not isinstance(entries, dict):
        raise FormatError("'tensors' must be an object")
    if not isinstance(meta, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in meta.items()
    ):
        raise FormatError("'meta' must map strings to strings")

    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for name in sorted(entries):
        entry = entries[name]
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "offsets"}:
            raise FormatError(f"tensor entry {name!r} has unexpected fields")
        if entry["dtype"] != _DTYPE_TAG:
            raise FormatError(f"tensor {name!r} has unsupported dtype {entry['dtype']!r}")
        shape = entry["shape"]
        if not isinstance(shape, list) or any(
            not isinstance(extent, int) or extent <= 0 for extent in shape
        ):
            raise FormatError(f"tensor {name!r} has invalid shape {shape!r}")
        offsets = entry["offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(not isinstance(o, int) or o < 0 for o in offsets)
        ):
            raise FormatError(f"tensor {name!r} has invalid offsets {offsets!r}")
        begin, end = offsets
        if begin != cursor:
            raise FormatError(f"tensor {name!r} breaks the gapless lexicographic layout")
        if end - begin != _ITEM_SIZE * math.prod(shape):
            raise FormatError(f"tensor {name!r} offsets disagree with its shape")
        if end > len(payload):
            raise TruncationError(f"tensor {name!r} ends past the payload")
        arr = np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape).copy()
        if not np.isfinite(arr).all():
            raise DataError(f"tensor {name!r} contains non-finite values")
        tensors[name] = arr
        cursor = end
    if cursor != len(payload):
        raise FormatError("payload has trailing bytes past the last tensor")
    return TensorArchive(tensors=tensors, meta=dict(meta))


def shape_compatible(a: TensorArchive, b: TensorArchive) -> bool:
    return a.shapes() == b.shapes()


def _require_compatible(a: TensorArchive, b: TensorArchive, what: str) -> None:
    if not shape_compatible(a, b):
        ours, theirs = a.shapes(), b.shapes()
        missing = sorted(set(ours) ^ set(theirs))
        if missing:
            raise CompatError(f"{what}: tensor names differ, e.g. {missing[:3]}")
        off = next(n for n in ours if ours[n] != theirs[n])
        raise CompatError(f"{what}: tensor {off!r} shapes differ ({ours[off]} vs {theirs[off]})")


def task_vector(fine_tuned: TensorArchive, base: TensorArchive) -> TensorArchive:
    """Elementwise difference fine_tuned - base."""
    _require_compatible(fine_tuned, base, "task_vector")
    tensors = {
        name: fine_tuned.tensors[name] - base.tensors[name] for name in base.tensors
    }
    meta = dict(base.meta)
    meta["kind"] = "task_vector"
    return TensorArchive(tensors=tensors, meta=meta)


def linear_combine(
    base: TensorArchive,
    vectors: Sequence[TensorArchive],
    coeffs: Mapping[str, Sequence[float]],
) -> TensorArchive:
    """Per name n: out[n] = base[n] + sum_t coeffs[n][t] * vectors[t][n].

    Accumulates in float64 and rounds once back to f32.
    """
    for t, vec in enumerate(vectors):
        _require_compatible(vec, base, f"linear_combine vector {t}")
    count = len(vectors)
    tensors: dict[str, np.ndarray] = {}
    for name, arr in base.tensors.items():
        if name not in coeffs:
            raise CoeffError(f"no coefficients for tensor {name!r}")
        weights = coeffs[name]
        if len(weights) != count:
            raise CoeffError(
                f"tensor {name!r} has {len(weights)} coefficients for {count} vectors"
            )
        acc = arr.astype(np.float64)
        for weight, vec in zip(weights, vectors):
            acc = acc + float(weight) * vec.tensors[name].astype(np.float64)
        tensors[name] = acc.astype(np.float32)
    return TensorArchive(tensors=tensors, meta=dict(base.meta))


def uniform_coeffs(archive: TensorArchive, weights: Sequence[float]) -> dict[str, list[float]]:
    """The same coefficient vector for every tensor name."""
    values = [float(w) for w in weights]
    return {name: list(values) for name in archive.tensors}
