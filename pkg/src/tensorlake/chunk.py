"""Binary chunk layout and (de)serialization.

A chunk is a self-contained blob holding one or more samples:

    magic "DLCH" | format_version u32 | sample_count u32 | byte_table_len u32
    | byte_table entries (u64 start, u64 end) per sample
    | shape_table_len u32 | shape rows (u32 last_local_index, u8 ndim, u64*ndim dims)
    | compression_tag u8 | payload

All integers little-endian. Byte-table offsets are relative to the payload
start, so header growth never invalidates them. The shape table is run-length
merged over equal consecutive shapes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from tensorlake.errors import (
    ChunkOverflowError,
    CorruptHeaderError,
    IndexOutOfRangeError,
)
from tensorlake.htype import HtypeSchema, validate_sample

CHUNK_MAGIC = b"DLCH"
CHUNK_FORMAT_VERSION = 1

COMPRESSION_NONE = 0
COMPRESSION_LZ = 1
COMPRESSION_TAGS = {"none": COMPRESSION_NONE, "lz": COMPRESSION_LZ}

MIB = 1024 * 1024

_FIXED_PREFIX = struct.Struct("<4sIII")  # magic, version, sample_count, byte_table_len
_SHAPE_ROW_HEAD = struct.Struct("<IB")


@dataclass
class ChunkPolicy:
    """Lower and upper bound on chunk payload size."""

    min_bytes: int = 8 * MIB
    max_bytes: int = 16 * MIB

    def __post_init__(self):
        if not (0 < self.min_bytes <= self.max_bytes):
            raise ValueError(
                f"need 0 < min_bytes <= max_bytes, got {self.min_bytes}/{self.max_bytes}"
            )

    def to_dict(self) -> dict:
        return {"min_bytes": self.min_bytes, "max_bytes": self.max_bytes}

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkPolicy":
        return cls(min_bytes=d["min_bytes"], max_bytes=d["max_bytes"])


def run_length_shapes(shapes: Sequence[tuple[int, ...]]) -> list[tuple[int, tuple[int, ...]]]:
    """Collapse a shape-per-sample list into (last_index, shape) runs."""
    rows: list[tuple[int, tuple[int, ...]]] = []
    for i, shape in enumerate(shapes):
        if rows and rows[-1][1] == shape:
            rows[-1] = (i, shape)
        else:
            rows.append((i, tuple(int(d) for d in shape)))
    return rows


@dataclass
class ChunkHeader:
    format_version: int
    sample_count: int
    byte_table: np.ndarray  # (n, 2) uint64, payload-relative [start, end)
    shape_rows: list[tuple[int, tuple[int, ...]]]
    compression_tag: int
    payload_offset: int

    def shape_of(self, local_index: int) -> tuple[int, ...]:
        if not (0 <= local_index < self.sample_count):
            raise IndexOutOfRangeError(
                f"local index {local_index} out of range ({self.sample_count} samples)"
            )
        for last, shape in self.shape_rows:
            if local_index <= last:
                return shape
        raise CorruptHeaderError("shape table does not cover all samples")

    def shapes(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []
        prev = -1
        for last, shape in self.shape_rows:
            out.extend([shape] * (last - prev))
            prev = last
        return out

    @property
    def payload_size(self) -> int:
        if self.sample_count == 0:
            return 0
        return int(self.byte_table[:, 1].max())

    @property
    def live_bytes(self) -> int:
        return int((self.byte_table[:, 1] - self.byte_table[:, 0]).sum())


def header_size(sample_count: int, shape_rows: Sequence[tuple[int, tuple[int, ...]]]) -> int:
    size = _FIXED_PREFIX.size + 16 * sample_count + 4
    for _last, shape in shape_rows:
        size += _SHAPE_ROW_HEAD.size + 8 * len(shape)
    return size + 1  # compression tag


def serialize_chunk(
    sample_payloads: Sequence[bytes],
    shapes: Sequence[tuple[int, ...]],
    compression_tag: int,
) -> bytes:
    """Assemble a chunk blob from per-sample payload bytes and shapes."""
    n = len(sample_payloads)
    byte_table = np.empty((n, 2), dtype="<u8")
    offset = 0
    for i, payload in enumerate(sample_payloads):
        byte_table[i, 0] = offset
        offset += len(payload)
        byte_table[i, 1] = offset
    payload = b"".join(sample_payloads)

    rows = run_length_shapes(shapes)
    parts = [
        _FIXED_PREFIX.pack(CHUNK_MAGIC, CHUNK_FORMAT_VERSION, n, n),
        byte_table.tobytes(),
        struct.pack("<I", len(rows)),
    ]
    for last, shape in rows:
        if len(shape) > 255:
            raise ChunkOverflowError(f"sample rank {len(shape)} exceeds 255")
        parts.append(_SHAPE_ROW_HEAD.pack(last, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape) if shape else b"")
    parts.append(struct.pack("<B", compression_tag))
    parts.append(payload)
    return b"".join(parts)


def parse_header(data: bytes | memoryview) -> ChunkHeader:
    data = memoryview(data)
    try:
        magic, version, sample_count, table_len = _FIXED_PREFIX.unpack_from(data, 0)
    except struct.error as e:
        raise CorruptHeaderError(f"truncated chunk prefix: {e}") from None
    if magic != CHUNK_MAGIC:
        raise CorruptHeaderError(f"bad chunk magic {bytes(magic)!r}")
    if version != CHUNK_FORMAT_VERSION:
        raise CorruptHeaderError(f"unsupported chunk format version {version}")
    if table_len != sample_count:
        raise CorruptHeaderError(
            f"byte table length {table_len} != sample count {sample_count}"
        )
    pos = _FIXED_PREFIX.size
    table_bytes = 16 * sample_count
    if len(data) < pos + table_bytes + 4:
        raise CorruptHeaderError("truncated byte table")
    byte_table = np.frombuffer(data, dtype="<u8", count=2 * sample_count, offset=pos)
    byte_table = byte_table.reshape(sample_count, 2)
    pos += table_bytes
    (n_rows,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shape_rows: list[tuple[int, tuple[int, ...]]] = []
    prev_last = -1
    for _ in range(n_rows):
        try:
            last, ndim = _SHAPE_ROW_HEAD.unpack_from(data, pos)
            pos += _SHAPE_ROW_HEAD.size
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
        except struct.error as e:
            raise CorruptHeaderError(f"truncated shape table: {e}") from None
        if last <= prev_last:
            raise CorruptHeaderError("shape table indices not strictly increasing")
        prev_last = last
        shape_rows.append((last, tuple(int(d) for d in shape)))
    if sample_count and prev_last != sample_count - 1:
        raise CorruptHeaderError("shape table does not cover all samples")
    try:
        (compression_tag,) = struct.unpack_from("<B", data, pos)
    except struct.error:
        raise CorruptHeaderError("missing compression tag") from None
    pos += 1
    header = ChunkHeader(
        format_version=version,
        sample_count=sample_count,
        byte_table=byte_table,
        shape_rows=shape_rows,
        compression_tag=compression_tag,
        payload_offset=pos,
    )
    if sample_count:
        starts = byte_table[:, 0]
        ends = byte_table[:, 1]
        if (ends < starts).any():
            raise CorruptHeaderError("byte table has negative-length ranges")
        if (starts[1:] < ends[:-1]).any():
            raise CorruptHeaderError("byte table ranges overlap or descend")
        if len(data) - pos < header.payload_size:
            raise CorruptHeaderError(
                f"payload truncated: header implies {header.payload_size} bytes, "
                f"got {len(data) - pos}"
            )
    return header


def encode_sample_payload(sample: np.ndarray, compression_tag: int) -> bytes:
    raw = sample.tobytes() if sample.ndim == 0 else np.ascontiguousarray(sample).tobytes()
    if compression_tag == COMPRESSION_LZ:
        return zlib.compress(raw, 1)
    return raw


def decode_sample_payload(
    payload: bytes | memoryview,
    shape: tuple[int, ...],
    dtype: np.dtype,
    compression_tag: int,
) -> np.ndarray:
    if compression_tag == COMPRESSION_LZ:
        payload = zlib.decompress(payload)
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    return arr.reshape(shape)


def encode_chunk(
    samples: Sequence[np.ndarray],
    schema: HtypeSchema,
    policy: ChunkPolicy,
    pre_validated: bool = False,
) -> bytes:
    """Serialize samples into one chunk, rejecting payloads over max_bytes."""
    tag = COMPRESSION_TAGS[schema.sample_compression]
    payloads = []
    shapes = []
    total = 0
    for sample in samples:
        if not pre_validated:
            sample = validate_sample(schema, sample)
        payload = encode_sample_payload(sample, tag)
        total += len(payload)
        if total > policy.max_bytes:
            raise ChunkOverflowError(
                f"payload {total} bytes would exceed max_bytes {policy.max_bytes}"
            )
        payloads.append(payload)
        shapes.append(tuple(sample.shape))
    return serialize_chunk(payloads, shapes, tag)


def decode_sample(
    chunk_bytes: bytes | memoryview,
    local_index: int,
    dtype: np.dtype | str,
) -> np.ndarray:
    """Decode one sample out of a serialized chunk."""
    header = parse_header(chunk_bytes)
    return decode_sample_from_header(chunk_bytes, header, local_index, dtype)


def decode_sample_from_header(
    chunk_bytes: bytes | memoryview,
    header: ChunkHeader,
    local_index: int,
    dtype: np.dtype | str,
) -> np.ndarray:
    if not (0 <= local_index < header.sample_count):
        raise IndexOutOfRangeError(
            f"local index {local_index} out of range ({header.sample_count} samples)"
        )
    start, end = (int(v) for v in header.byte_table[local_index])
    shape = header.shape_of(local_index)
    view = memoryview(chunk_bytes)[header.payload_offset + start : header.payload_offset + end]
    return decode_sample_payload(view, shape, np.dtype(dtype).newbyteorder("<"), header.compression_tag)


def decode_all(chunk_bytes: bytes | memoryview, dtype: np.dtype | str) -> list[np.ndarray]:
    header = parse_header(chunk_bytes)
    return [
        decode_sample_from_header(chunk_bytes, header, i, dtype)
        for i in range(header.sample_count)
    ]


def patch_sample(
    chunk_bytes: bytes,
    local_index: int,
    new_payload: bytes,
    new_shape: tuple[int, ...],
) -> Optional[bytes]:
    """Rewrite one sample in place if the replacement fits its byte range.

    Returns the new chunk bytes, or None when the payload does not fit (the
    caller then splits the run instead). A shorter replacement leaves stale
    bytes behind; only rechunk reclaims them.
    """
    header = parse_header(chunk_bytes)
    if not (0 <= local_index < header.sample_count):
        raise IndexOutOfRangeError(f"local index {local_index} out of range")
    start, end = (int(v) for v in header.byte_table[local_index])
    if len(new_payload) > end - start:
        return None
    payload = bytearray(chunk_bytes[header.payload_offset :])
    payload[start : start + len(new_payload)] = new_payload
    table = header.byte_table.copy()
    table[local_index, 1] = start + len(new_payload)
    shapes = header.shapes()
    shapes[local_index] = tuple(int(d) for d in new_shape)
    rows = run_length_shapes(shapes)
    parts = [
        _FIXED_PREFIX.pack(CHUNK_MAGIC, CHUNK_FORMAT_VERSION, header.sample_count, header.sample_count),
        np.ascontiguousarray(table, dtype="<u8").tobytes(),
        struct.pack("<I", len(rows)),
    ]
    for last, shape in rows:
        parts.append(_SHAPE_ROW_HEAD.pack(last, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape) if shape else b"")
    parts.append(struct.pack("<B", header.compression_tag))
    parts.append(bytes(payload))
    return b"".join(parts)


def expected_layout(
    shapes: Sequence[tuple[int, ...]],
    dtype: np.dtype | str,
) -> tuple[int, list[tuple[int, int]]]:
    """Predict (header_size, absolute sample byte ranges) of a clean,
    uncompressed chunk holding ``shapes`` — what encode_chunk would produce.

    Lets readers issue exact range requests for individual samples without
    fetching the header first. Only valid for unfragmented chunks.
    """
    itemsize = np.dtype(dtype).itemsize
    rows = run_length_shapes(shapes)
    hsize = header_size(len(shapes), rows)
    ranges = []
    offset = hsize
    for shape in shapes:
        nbytes = int(np.prod(shape)) * itemsize if len(shape) else itemsize
        if any(d == 0 for d in shape):
            nbytes = 0
        ranges.append((offset, offset + nbytes))
        offset += nbytes
    return hsize, ranges
