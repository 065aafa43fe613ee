"""Run-length index maps: global sample index -> chunk id, and global sample
index -> shape. Both stay O(number of runs) in memory and on disk no matter
how many payload bytes the tensor holds.
"""

from __future__ import annotations

import struct
from bisect import bisect_left
from typing import Iterable, Optional, Sequence

import numpy as np

from tensorlake.errors import (
    CorruptHeaderError,
    IndexOutOfRangeError,
    InvariantViolationError,
)

CHUNK_ENCODER_MAGIC = b"DLEN"
SHAPE_ENCODER_MAGIC = b"DLSH"
SAMPLE_ID_MAGIC = b"DLID"


class ChunkEncoder:
    """Ordered (last_global_index, chunk_id) rows; every global index maps to
    exactly one chunk and each chunk occupies one contiguous row."""

    def __init__(self, rows: Optional[Iterable[tuple[int, str]]] = None):
        self.lasts: list[int] = []
        self.ids: list[str] = []
        if rows:
            for last, chunk_id in rows:
                self.lasts.append(int(last))
                self.ids.append(chunk_id)
            self._check()

    def _check(self) -> None:
        prev = -1
        for last, chunk_id in zip(self.lasts, self.ids):
            if last <= prev:
                raise InvariantViolationError("row last indices must strictly increase")
            prev = last

    @property
    def num_samples(self) -> int:
        return self.lasts[-1] + 1 if self.lasts else 0

    @property
    def num_rows(self) -> int:
        return len(self.lasts)

    def rows(self) -> list[tuple[int, str]]:
        return list(zip(self.lasts, self.ids))

    def chunk_ids(self) -> list[str]:
        return list(self.ids)

    def lookup(self, global_index: int) -> tuple[str, int]:
        """Binary-search the row covering ``global_index``; local index is the
        offset past the previous row's last index."""
        if not (0 <= global_index < self.num_samples):
            raise IndexOutOfRangeError(
                f"index {global_index} out of range ({self.num_samples} samples)"
            )
        row = bisect_left(self.lasts, global_index)
        prev_last = self.lasts[row - 1] if row > 0 else -1
        return self.ids[row], global_index - prev_last - 1

    def row_span(self, row: int) -> tuple[int, int]:
        """[first, last] global index range of a row."""
        first = self.lasts[row - 1] + 1 if row > 0 else 0
        return first, self.lasts[row]

    def row_of(self, global_index: int) -> int:
        if not (0 <= global_index < self.num_samples):
            raise IndexOutOfRangeError(f"index {global_index} out of range")
        return bisect_left(self.lasts, global_index)

    def append(self, chunk_id: str, count: int) -> None:
        if count < 1:
            raise InvariantViolationError(f"append count must be >= 1, got {count}")
        new_last = self.num_samples + count - 1
        if self.ids and self.ids[-1] == chunk_id:
            self.lasts[-1] = new_last
        else:
            self.lasts.append(new_last)
            self.ids.append(chunk_id)

    def replace_range(self, start: int, end: int, new_rows: Sequence[tuple[int, str]]) -> None:
        """Splice rows covering [start, end) with ``new_rows`` (same span,
        absolute last indices), merging equal neighbours back together."""
        n = self.num_samples
        if not (0 <= start < end <= n):
            raise InvariantViolationError(f"replace range [{start}, {end}) out of bounds")
        first_row = bisect_left(self.lasts, start)
        last_row = bisect_left(self.lasts, end - 1)
        lo, _ = self.row_span(first_row)
        _, hi = self.row_span(last_row)
        if lo != start or hi != end - 1:
            raise InvariantViolationError(
                f"replace range [{start}, {end}) does not align with row boundaries "
                f"[{lo}, {hi + 1})"
            )
        prev = start - 1
        for last, _id in new_rows:
            if last <= prev:
                raise InvariantViolationError("replacement rows must strictly increase")
            prev = last
        if prev != end - 1:
            raise InvariantViolationError(
                f"replacement rows cover up to {prev}, expected {end - 1}"
            )
        lasts = self.lasts[:first_row] + [r[0] for r in new_rows] + self.lasts[last_row + 1 :]
        ids = self.ids[:first_row] + [r[1] for r in new_rows] + self.ids[last_row + 1 :]
        # re-merge equal adjacent ids at the splice seams
        merged_lasts: list[int] = []
        merged_ids: list[str] = []
        for last, cid in zip(lasts, ids):
            if merged_ids and merged_ids[-1] == cid:
                merged_lasts[-1] = last
            else:
                merged_lasts.append(last)
                merged_ids.append(cid)
        self.lasts = merged_lasts
        self.ids = merged_ids

    def serialize(self, ordinal_of: dict[str, int]) -> bytes:
        table = np.empty((len(self.lasts), 2), dtype="<u8")
        for i, (last, cid) in enumerate(zip(self.lasts, self.ids)):
            table[i, 0] = last
            table[i, 1] = ordinal_of[cid]
        return CHUNK_ENCODER_MAGIC + struct.pack("<Q", len(self.lasts)) + table.tobytes()

    @classmethod
    def deserialize(cls, data: bytes, names: Sequence[str]) -> "ChunkEncoder":
        if data[:4] != CHUNK_ENCODER_MAGIC:
            raise CorruptHeaderError(f"bad chunk encoder magic {data[:4]!r}")
        (count,) = struct.unpack_from("<Q", data, 4)
        table = np.frombuffer(data, dtype="<u8", count=2 * count, offset=12).reshape(count, 2)
        enc = cls()
        enc.lasts = [int(v) for v in table[:, 0]]
        enc.ids = [names[int(v)] for v in table[:, 1]]
        enc._check()
        return enc


class ShapeEncoder:
    """Ordered (last_global_index, shape) rows, run-length merged over equal
    consecutive shapes; covers [0, num_samples)."""

    def __init__(self, rows: Optional[Iterable[tuple[int, tuple[int, ...]]]] = None):
        self.lasts: list[int] = []
        self.shapes: list[tuple[int, ...]] = []
        if rows:
            for last, shape in rows:
                self.lasts.append(int(last))
                self.shapes.append(tuple(int(d) for d in shape))

    @property
    def num_samples(self) -> int:
        return self.lasts[-1] + 1 if self.lasts else 0

    @property
    def num_rows(self) -> int:
        return len(self.lasts)

    def rows(self) -> list[tuple[int, tuple[int, ...]]]:
        return list(zip(self.lasts, self.shapes))

    def lookup(self, global_index: int) -> tuple[int, ...]:
        if not (0 <= global_index < self.num_samples):
            raise IndexOutOfRangeError(
                f"index {global_index} out of range ({self.num_samples} samples)"
            )
        return self.shapes[bisect_left(self.lasts, global_index)]

    def append(self, shape: tuple[int, ...], count: int = 1) -> None:
        if count < 1:
            raise InvariantViolationError(f"append count must be >= 1, got {count}")
        shape = tuple(int(d) for d in shape)
        new_last = self.num_samples + count - 1
        if self.shapes and self.shapes[-1] == shape:
            self.lasts[-1] = new_last
        else:
            self.lasts.append(new_last)
            self.shapes.append(shape)

    def set_shape(self, global_index: int, shape: tuple[int, ...]) -> None:
        """Point update; splits the covering run into up to three rows."""
        shape = tuple(int(d) for d in shape)
        if self.lookup(global_index) == shape:
            return
        row = bisect_left(self.lasts, global_index)
        first = self.lasts[row - 1] + 1 if row > 0 else 0
        last = self.lasts[row]
        old = self.shapes[row]
        new_rows: list[tuple[int, tuple[int, ...]]] = []
        if global_index > first:
            new_rows.append((global_index - 1, old))
        new_rows.append((global_index, shape))
        if global_index < last:
            new_rows.append((last, old))
        lasts = self.lasts[:row] + [r[0] for r in new_rows] + self.lasts[row + 1 :]
        shapes = self.shapes[:row] + [r[1] for r in new_rows] + self.shapes[row + 1 :]
        merged_l: list[int] = []
        merged_s: list[tuple[int, ...]] = []
        for l, s in zip(lasts, shapes):
            if merged_s and merged_s[-1] == s:
                merged_l[-1] = l
            else:
                merged_l.append(l)
                merged_s.append(s)
        self.lasts = merged_l
        self.shapes = merged_s

    def shapes_range(self, start: int, end: int) -> list[tuple[int, ...]]:
        """Per-sample shapes for global indices [start, end)."""
        if start >= end:
            return []
        if not (0 <= start and end <= self.num_samples):
            raise IndexOutOfRangeError(f"range [{start}, {end}) out of bounds")
        out: list[tuple[int, ...]] = []
        row = bisect_left(self.lasts, start)
        idx = start
        while idx < end:
            run_last = self.lasts[row]
            take = min(end - 1, run_last) - idx + 1
            out.extend([self.shapes[row]] * take)
            idx += take
            row += 1
        return out

    def serialize(self) -> bytes:
        parts = [SHAPE_ENCODER_MAGIC, struct.pack("<Q", len(self.lasts))]
        for last, shape in zip(self.lasts, self.shapes):
            parts.append(struct.pack("<QB", last, len(shape)))
            if shape:
                parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes) -> "ShapeEncoder":
        if data[:4] != SHAPE_ENCODER_MAGIC:
            raise CorruptHeaderError(f"bad shape encoder magic {data[:4]!r}")
        (count,) = struct.unpack_from("<Q", data, 4)
        pos = 12
        enc = cls()
        for _ in range(count):
            last, ndim = struct.unpack_from("<QB", data, pos)
            pos += 9
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            enc.lasts.append(int(last))
            enc.shapes.append(tuple(int(d) for d in shape))
        return enc


def serialize_sample_ids(ids: Sequence[int]) -> bytes:
    arr = np.asarray(ids, dtype="<u8")
    return SAMPLE_ID_MAGIC + struct.pack("<Q", len(arr)) + arr.tobytes()


def deserialize_sample_ids(data: bytes) -> list[int]:
    if data[:4] != SAMPLE_ID_MAGIC:
        raise CorruptHeaderError(f"bad sample id magic {data[:4]!r}")
    (count,) = struct.unpack_from("<Q", data, 4)
    return [int(v) for v in np.frombuffer(data, dtype="<u8", count=count, offset=12)]
