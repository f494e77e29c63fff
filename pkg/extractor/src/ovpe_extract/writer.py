"""Streaming writer for the OVPE embedding container.

Layout: magic "OVPE", u32 version = 1, u32 dim, u64 record count, then
records of (u64 image_id, 4 x f32 corner box, f32 objectness, dim x f32
vector), all little-endian. Records are flushed in chunks and the count is
patched into the header on close, so arbitrarily large datasets stream
through constant memory.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OVPE"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_COUNT_OFFSET = 12


class StreamingOvpeWriter:
    """Append-only single-writer OVPE emitter with a final count patch."""

    def __init__(self, path: str | Path, dim: int, chunk_records: int = 1024):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = int(dim)
        self._dtype = np.dtype(
            [
                ("image_id", "<u8"),
                ("box", "<f4", (4,)),
                ("objectness", "<f4"),
                ("vector", "<f4", (self.dim,)),
            ]
        )
        self._chunk_records = chunk_records
        self._pending: list[np.ndarray] = []
        self._pending_count = 0
        self._total = 0
        self._file = open(path, "wb")
        self._file.write(_HEADER.pack(MAGIC, VERSION, self.dim, 0))

    def append(
        self,
        image_id: int,
        box: tuple[float, float, float, float],
        objectness: float,
        vector: np.ndarray,
    ) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ValueError(f"vector shape {vector.shape} does not match dim {self.dim}")
        record = np.zeros(1, dtype=self._dtype)
        record["image_id"] = image_id
        record["box"] = np.asarray(box, dtype=np.float32)
        record["objectness"] = objectness
        record["vector"] = vector
        self._pending.append(record)
        self._pending_count += 1
        self._total += 1
        if self._pending_count >= self._chunk_records:
            self._flush()

    def append_batch(
        self,
        image_ids: np.ndarray,
        boxes: np.ndarray,
        objectness: np.ndarray,
        vectors: np.ndarray,
    ) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        n = vectors.shape[0]
        records = np.zeros(n, dtype=self._dtype)
        records["image_id"] = np.asarray(image_ids, dtype=np.uint64)
        records["box"] = np.asarray(boxes, dtype=np.float32).reshape(n, 4)
        records["objectness"] = np.asarray(objectness, dtype=np.float32)
        records["vector"] = vectors
        self._pending.append(records)
        self._pending_count += n
        self._total += n
        if self._pending_count >= self._chunk_records:
            self._flush()

    def _flush(self) -> None:
        if self._pending:
            self._file.write(np.concatenate(self._pending).tobytes())
            self._pending = []
            self._pending_count = 0

    @property
    def count(self) -> int:
        return self._total

    def close(self) -> None:
        if self._file.closed:
            return
        self._flush()
        self._file.seek(_COUNT_OFFSET)
        self._file.write(struct.pack("<Q", self._total))
        self._file.close()

    def __enter__(self) -> "StreamingOvpeWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()
