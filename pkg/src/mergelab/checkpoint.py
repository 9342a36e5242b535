"""Single-file checkpoint container with per-tensor streaming access.

Layout::

    u64 little-endian   manifest length in bytes
    UTF-8 JSON          manifest: [{"name", "shape", "offset", "dtype"}, ...]
    raw bytes           little-endian float32 payload, row-major

Offsets are relative to the start of the payload. Tensors are stored in
ascending lexicographic name order, which is also the streaming order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

TensorMap = dict[str, np.ndarray]

DTYPE = "f32"
_NP_DTYPE = np.dtype("<f4")
_HEADER = struct.Struct("<Q")


class ContainerError(ValueError):
    """Raised for malformed, mismatched or invalid containers."""


@dataclass(frozen=True)
class TensorMeta:
    name: str
    shape: tuple[int, ...]
    offset: int
    dtype: str = DTYPE

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return 4 * self.size

    def to_json(self) -> dict:
        return {"name": self.name, "shape": list(self.shape), "offset": self.offset, "dtype": self.dtype}


def as_tensor_map(entries: Mapping[str, np.ndarray]) -> TensorMap:
    """Return a name-sorted map of float32 C-contiguous arrays."""
    return {name: np.ascontiguousarray(entries[name], dtype=np.float32) for name in sorted(entries)}


def build_manifest(shapes: Mapping[str, Sequence[int]]) -> list[TensorMeta]:
    metas = []
    offset = 0
    for name in sorted(shapes):
        shape = tuple(int(s) for s in shapes[name])
        if not shape or any(s <= 0 for s in shape):
            raise ContainerError(f"tensor {name!r} has invalid shape {list(shape)}")
        meta = TensorMeta(name, shape, offset)
        metas.append(meta)
        offset += meta.nbytes
    return metas


class ContainerWriter:
    """Writes a container block by block, in manifest order.

    The manifest is fixed up front from the tensor shapes, so the payload can
    be appended one tensor at a time without holding the whole model.
    """

    def __init__(self, path: str | os.PathLike, shapes: Mapping[str, Sequence[int]], strict: bool = False):
        if not shapes:
            raise ContainerError("empty container")
        self.path = Path(path)
        self.metas = build_manifest(shapes)
        self.strict = strict
        self._next = 0
        manifest = json.dumps([m.to_json() for m in self.metas], separators=(",", ":")).encode("utf-8")
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(len(manifest)))
        self._fh.write(manifest)

    def write(self, name: str, values: np.ndarray) -> None:
        if self._next >= len(self.metas):
            raise ContainerError(f"unexpected tensor {name!r}: all tensors already written")
        meta = self.metas[self._next]
        if name != meta.name:
            raise ContainerError(f"expected tensor {meta.name!r}, got {name!r}")
        arr = np.asarray(values)
        if tuple(arr.shape) != meta.shape:
            raise ContainerError(f"tensor {name!r}: shape {list(arr.shape)} != manifest {list(meta.shape)}")
        arr = np.ascontiguousarray(arr, dtype=_NP_DTYPE)
        if self.strict and not np.all(np.isfinite(arr)):
            raise ContainerError(f"tensor {name!r} contains non-finite values")
        self._fh.write(arr.tobytes())
        self._next += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.close()
        if self._next != len(self.metas):
            missing = self.metas[self._next].name
            self.path.unlink(missing_ok=True)
            raise ContainerError(f"container incomplete: tensor {missing!r} never written")

    def abort(self) -> None:
        self._fh.close()
        self.path.unlink(missing_ok=True)

    def __enter__(self) -> "ContainerWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.abort()
        else:
            self.close()


def write_container(
    tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    path: str | os.PathLike,
    strict: bool = False,
) -> None:
    """Write ``tensors`` (a mapping or ``(name, array)`` pairs) to ``path``.

    Every tensor needs a nonempty shape. With ``strict`` set, NaN/inf values
    are rejected.
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    if not items:
        raise ContainerError("empty container")
    shapes = {}
    arrays = {}
    for name, values in items:
        if name in shapes:
            raise ContainerError(f"duplicate tensor name {name!r}")
        arrays[name] = np.asarray(values)
        shapes[name] = arrays[name].shape
    tensors = arrays
    with ContainerWriter(path, shapes, strict=strict) as writer:
        for name in sorted(tensors):
            writer.write(name, tensors[name])


def _parse_manifest(raw: bytes) -> list[TensorMeta]:
    try:
        entries = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed manifest: {exc}") from None
    if not isinstance(entries, list):
        raise ContainerError("malformed manifest: expected a JSON array")
    if not entries:
        raise ContainerError("empty container")
    metas = []
    for entry in entries:
        try:
            meta = TensorMeta(
                name=entry["name"],
                shape=tuple(int(s) for s in entry["shape"]),
                offset=int(entry["offset"]),
                dtype=entry["dtype"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"malformed manifest entry {entry!r}: {exc}") from None
        if meta.dtype != DTYPE:
            raise ContainerError(f"tensor {meta.name!r}: unsupported dtype {meta.dtype!r}")
        if not meta.shape or any(s <= 0 for s in meta.shape):
            raise ContainerError(f"tensor {meta.name!r}: invalid shape {list(meta.shape)}")
        if meta.offset < 0:
            raise ContainerError(f"tensor {meta.name!r}: negative offset")
        metas.append(meta)
    for prev, cur in zip(metas, metas[1:]):
        if cur.name == prev.name:
            raise ContainerError(f"duplicate tensor name {cur.name!r}")
        if cur.name < prev.name:
            raise ContainerError(f"manifest not in lexicographic order at {cur.name!r}")
    return metas


class Container:
    """Read-only handle on a container file with random access by name.

    A handle owns one file descriptor and is not meant to be shared between
    threads; open one handle per reader instead.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        try:
            header = self._fh.read(_HEADER.size)
            if len(header) != _HEADER.size:
                raise ContainerError(f"{self.path}: truncated header")
            (manifest_len,) = _HEADER.unpack(header)
            raw = self._fh.read(manifest_len)
            if len(raw) != manifest_len:
                raise ContainerError(f"{self.path}: truncated manifest")
            self.metas = _parse_manifest(raw)
            self._payload_start = _HEADER.size + manifest_len
            payload_len = os.fstat(self._fh.fileno()).st_size - self._payload_start
            expected = sum(m.nbytes for m in self.metas)
            end = max(m.offset + m.nbytes for m in self.metas)
            if payload_len != expected or end > payload_len:
                raise ContainerError(
                    f"{self.path}: payload length mismatch (have {payload_len} bytes, manifest needs {expected})"
                )
        except Exception:
            self._fh.close()
            raise
        self._index = {m.name: m for m in self.metas}

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.metas]

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {m.name: m.shape for m in self.metas}

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def read(self, name: str) -> np.ndarray:
        try:
            meta = self._index[name]
        except KeyError:
            raise ContainerError(f"{self.path}: no tensor named {name!r}") from None
        self._fh.seek(self._payload_start + meta.offset)
        buf = self._fh.read(meta.nbytes)
        if len(buf) != meta.nbytes:
            raise ContainerError(f"{self.path}: payload length mismatch reading {name!r}")
        return np.frombuffer(buf, dtype=_NP_DTYPE).astype(np.float32).reshape(meta.shape)

    def blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        for meta in self.metas:
            yield meta.name, self.read(meta.name)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "Container":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_container(path: str | os.PathLike) -> TensorMap:
    with Container(path) as c:
        return dict(c.blocks())


def check_aligned(shapes: Sequence[Mapping[str, tuple[int, ...]]], labels: Sequence[str] | None = None) -> None:
    """Raise ContainerError naming the first tensor whose name set or shape differs."""
    labels = labels or [f"#{i}" for i in range(len(shapes))]
    ref = shapes[0]
    for label, other in zip(labels[1:], shapes[1:]):
        for name in sorted(set(ref) | set(other)):
            if name not in other:
                raise ContainerError(f"manifest mismatch: tensor {name!r} missing from {label}")
            if name not in ref:
                raise ContainerError(f"manifest mismatch: tensor {name!r} missing from {labels[0]}")
            if tuple(ref[name]) != tuple(other[name]):
                raise ContainerError(
                    f"manifest mismatch: tensor {name!r} has shape {list(other[name])} in {label}, "
                    f"expected {list(ref[name])}"
                )


def stream_blocks(paths: Sequence[str | os.PathLike]) -> Iterator[tuple[str, list[np.ndarray]]]:
    """Yield ``(name, [tensor from each container])`` in manifest order.

    Only one tensor per container is resident at a time. All containers must
    share names and shapes; the check runs before anything is yielded.
    """
    if not paths:
        raise ContainerError("no containers to stream")
    handles = []
    try:
        for p in paths:
            handles.append(Container(p))
        check_aligned([h.shapes for h in handles], [str(h.path) for h in handles])
        for name in handles[0].names:
            yield name, [h.read(name) for h in handles]
    finally:
        for h in handles:
            h.close()
