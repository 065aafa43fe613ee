"""Dataset and tensor engine: append / update / ragged reads / tiling /
sparse writes over the chunk format, with branch-scoped version control.

All mutation happens on the working head of the checked-out branch; committed
snapshots are immutable and shared chunk-by-chunk (copy-on-write).
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from tensorlake import chunk as chunkfmt
from tensorlake.chunk import (
    COMPRESSION_TAGS,
    ChunkPolicy,
    decode_sample_payload,
    encode_sample_payload,
)
from tensorlake.encoders import (
    ChunkEncoder,
    ShapeEncoder,
    deserialize_sample_ids,
    serialize_sample_ids,
)
from tensorlake.errors import (
    AlreadyExistsError,
    BranchLockedError,
    DatasetNotFoundError,
    DirtyStateError,
    IndexOutOfRangeError,
    InvalidSchemaError,
    LinkResolveFailureError,
    ReadOnlyCommitError,
    RegionOutOfBoundsError,
    TensorLakeError,
    UnknownTensorError,
    ValidationError,
)
from tensorlake.htype import HtypeSchema, empty_sample, validate_sample
from tensorlake.layout import KeyLayout
from tensorlake.storage import FilesystemProvider, StorageProvider
from tensorlake.tiles import (
    TileEntry,
    TileMap,
    cell_ordinal,
    cells_intersecting,
    grid_shape,
    iter_cells,
    plan_tile_shape,
    tile_slices,
)
from tensorlake.version_control import (
    CommitDiff,
    VersionTree,
    diff_commits,
    merge_branches,
)

DATASET_FORMAT_VERSION = 1
TILE_SENTINEL_PREFIX = "@tile/"
CHUNK_CACHE_BYTES = 64 * 1024 * 1024


def new_sample_id() -> int:
    return int.from_bytes(os.urandom(8), "little") >> 1  # keep json-safe (< 2**63)


def new_chunk_name() -> str:
    return secrets.token_hex(8)


# --- linked samples ----------------------------------------------------------


@dataclass
class LinkedSample:
    """External reference stored in a link tensor; resolved on read."""

    url: str
    provider_hint: Optional[str] = None
    creds_tag: Optional[str] = None

    def __post_init__(self):
        if not self.url:
            raise ValidationError("linked sample url must be non-empty")


def _fetch_file_url(url: str) -> bytes:
    path = url[len("file://") :]
    with open(path, "rb") as f:
        return f.read()


_LINK_SCHEMES: dict[str, Callable[[str], bytes]] = {"file": _fetch_file_url}


def register_link_scheme(scheme: str, fetch: Callable[[str], bytes]) -> None:
    """Register a fetcher for ``scheme://...`` urls used by link tensors."""
    _LINK_SCHEMES[scheme] = fetch


def resolve_link(url: str) -> bytes:
    scheme = url.split("://", 1)[0] if "://" in url else ""
    fetch = _LINK_SCHEMES.get(scheme)
    if fetch is None:
        raise LinkResolveFailureError(f"no fetcher registered for url scheme {scheme!r} ({url!r})")
    try:
        return fetch(url)
    except Exception as e:
        raise LinkResolveFailureError(f"failed to resolve {url!r}: {e}") from e


# --- per-tensor state ---------------------------------------------------------


class _TensorState:
    """Encoders, tile map, sample ids, and staging buffers of one tensor at
    one commit node. Snapshot states are read-only; the working state mutates."""

    def __init__(self, schema: HtypeSchema):
        self.schema = schema
        self.chunk_enc = ChunkEncoder()
        self.shape_enc = ShapeEncoder()
        self.tile_map = TileMap()
        self.sample_ids: list[int] = []
        self.fragmented: set[str] = set()
        self.chunk_info: dict[str, dict] = {}  # name -> {payload, live}
        # working-head staging: the open tail chunk
        self.tail_name: Optional[str] = None
        self.tail_payloads: list[bytes] = []
        self.tail_shapes: list[tuple[int, ...]] = []
        self.tail_bytes = 0
        self.tail_dirty = False
        self.dirty = False
        self.diff = CommitDiff()
        self.chunk_set: set[str] = set()
        self.cache: OrderedDict[str, bytes] = OrderedDict()
        self.cache_bytes = 0
        self.cache_lock = threading.Lock()

    @property
    def length(self) -> int:
        return self.chunk_enc.num_samples

    @property
    def compression_tag(self) -> int:
        return COMPRESSION_TAGS[self.schema.sample_compression]

    def cache_get(self, name: str) -> Optional[bytes]:
        with self.cache_lock:
            data = self.cache.get(name)
            if data is not None:
                self.cache.move_to_end(name)
            return data

    def cache_put(self, name: str, data: bytes) -> None:
        if len(data) > CHUNK_CACHE_BYTES:
            return
        with self.cache_lock:
            if name in self.cache:
                self.cache_bytes -= len(self.cache.pop(name))
            self.cache[name] = data
            self.cache_bytes += len(data)
            while self.cache_bytes > CHUNK_CACHE_BYTES:
                _, old = self.cache.popitem(last=False)
                self.cache_bytes -= len(old)

    def cache_drop(self, name: str) -> None:
        with self.cache_lock:
            if name in self.cache:
                self.cache_bytes -= len(self.cache.pop(name))

    def referenced_chunk_names(self) -> list[str]:
        """Encoder-referenced names plus tile chunks, first-use order."""
        names: list[str] = []
        seen = set()
        for cid in self.chunk_enc.chunk_ids():
            if cid not in seen:
                seen.add(cid)
                names.append(cid)
        for entry in self.tile_map.entries.values():
            for cname in entry.chunks:
                if cname not in seen:
                    seen.add(cname)
                    names.append(cname)
        return names


Sample = Union[np.ndarray, LinkedSample, int, float, Sequence]


class Dataset:
    """A set of parallel tensors sharing row semantics, stored as chunked
    columns under one root prefix with built-in version control."""

    def __init__(
        self,
        provider: StorageProvider,
        layout: KeyLayout,
        schemas: dict[str, HtypeSchema],
        policy: ChunkPolicy,
        tree: VersionTree,
        branch: Optional[str],
        commit_id: str,
        read_only: bool = False,
        strict: bool = True,
    ):
        self.provider = provider
        self.layout = layout
        self.schemas = schemas
        self.policy = policy
        self.tree = tree
        self.branch = branch
        self.commit_id = commit_id
        self.read_only = read_only
        self.strict = strict
        self._states: dict[str, _TensorState] = {}
        self._snapshots: dict[tuple[str, str], _TensorState] = {}
        self._lock_token: Optional[str] = None
        self._mutex = threading.RLock()
        self._schema_dirty = False
        if not read_only and branch is not None:
            self._acquire_branch_lock(branch)

    # --- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        if not self.read_only and self.branch is not None:
            self.flush()
            self._release_branch_lock()

    def __enter__(self) -> "Dataset":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _acquire_branch_lock(self, branch: str, force: bool = False) -> None:
        key = self.layout.branch_lock(branch)
        token = secrets.token_hex(8)
        if self.provider.exists(key) and not force:
            raise BranchLockedError(
                f"branch {branch!r} is locked by another writer (lock file {key})"
            )
        self.provider.put(key, json.dumps({"token": token, "pid": os.getpid()}).encode())
        self._lock_token = token

    def _release_branch_lock(self) -> None:
        if self._lock_token is None or self.branch is None:
            return
        key = self.layout.branch_lock(self.branch)
        try:
            held = json.loads(self.provider.get(key).decode())
            if held.get("token") == self._lock_token:
                self.provider.delete(key)
        except KeyError:
            pass
        self._lock_token = None

    # --- schema / tensors ----------------------------------------------------

    def tensors(self, commit: Optional[str] = None) -> list[str]:
        """Tensor names that exist at the given commit (default: current)."""
        commit_id = self._resolve_commit(commit)
        return [
            name
            for name in sorted(self.schemas)
            if self.tree.find_tensor_state(name, commit_id) is not None
        ]

    def schema(self, tensor: str) -> HtypeSchema:
        try:
            return self.schemas[tensor]
        except KeyError:
            raise UnknownTensorError(f"unknown tensor {tensor!r}") from None

    def add_tensor(self, name: str, schema: Optional[HtypeSchema] = None, **kwargs) -> None:
        self._require_writable()
        if name in self.schemas:
            raise AlreadyExistsError(f"tensor {name!r} already exists")
        if schema is None:
            schema = HtypeSchema(name=name, **kwargs)
        if schema.name != name:
            raise InvalidSchemaError(f"schema name {schema.name!r} != tensor name {name!r}")
        self.schemas[name] = schema
        self._write_dataset_meta()
        state = _TensorState(schema)
        state.dirty = True
        self._states[name] = state
        self._flush_tensor(name, state)
        self._schema_dirty = True

    def _write_dataset_meta(self) -> None:
        meta = {
            "format_version": DATASET_FORMAT_VERSION,
            "policy": self.policy.to_dict(),
            "tensors": {name: s.to_dict() for name, s in sorted(self.schemas.items())},
        }
        self.provider.put(self.layout.dataset_meta(), json.dumps(meta, indent=2).encode())

    # --- state loading ---------------------------------------------------------

    def _resolve_commit(self, commit: Optional[str]) -> str:
        if commit is None:
            return self.commit_id
        if commit in self.tree.branches:
            return self.tree.branches[commit]
        self.tree.node(commit)
        return commit

    def _state_for(self, tensor: str, commit: Optional[str] = None) -> _TensorState:
        schema = self.schema(tensor)
        commit_id = self._resolve_commit(commit)
        if commit_id == self.commit_id:
            if tensor not in self._states:
                with self._mutex:
                    if tensor not in self._states:
                        self._states[tensor] = self._load_state(tensor, schema, commit_id)
            return self._states[tensor]
        key = (commit_id, tensor)
        if key not in self._snapshots:
            with self._mutex:
                if key not in self._snapshots:
                    self._snapshots[key] = self._load_state(tensor, schema, commit_id)
        return self._snapshots[key]

    def _load_state(self, tensor: str, schema: HtypeSchema, commit_id: str) -> _TensorState:
        state = _TensorState(schema)
        meta_commit = self.tree.find_tensor_state(tensor, commit_id)
        if meta_commit is None:
            return state
        meta = json.loads(self.provider.get(self.layout.tensor_meta(meta_commit, tensor)).decode())
        names = meta.get("chunk_names", [])
        state.fragmented = set(meta.get("fragmented", []))
        state.chunk_info = {k: dict(v) for k, v in meta.get("chunk_info", {}).items()}
        try:
            enc_bytes = self.provider.get(self.layout.chunk_encoder(meta_commit, tensor))
            state.chunk_enc = ChunkEncoder.deserialize(enc_bytes, names)
        except KeyError:
            pass
        try:
            state.shape_enc = ShapeEncoder.deserialize(
                self.provider.get(self.layout.shape_encoder(meta_commit, tensor))
            )
        except KeyError:
            pass
        try:
            state.tile_map = TileMap.deserialize(
                self.provider.get(self.layout.tile_map(meta_commit, tensor))
            )
        except KeyError:
            pass
        try:
            state.sample_ids = deserialize_sample_ids(
                self.provider.get(self.layout.sample_ids(meta_commit, tensor))
            )
        except KeyError:
            pass
        if commit_id == self.commit_id and not self.read_only:
            # share objects with the tree cache so chunk resolution and diff
            # queries see unflushed working mutations
            state.chunk_set = self.tree.chunk_set(commit_id, tensor)
            state.diff = self.tree.commit_diff(commit_id, tensor)
            if self.branch is not None:
                self._adopt_tail(tensor, state, commit_id)
        return state

    def _adopt_tail(self, tensor: str, state: _TensorState, commit_id: str) -> None:
        """Reopen an under-filled final chunk as the staging tail so appends
        keep filling it instead of fragmenting into new small chunks."""
        rows = state.chunk_enc.rows()
        if not rows:
            return
        last_id = rows[-1][1]
        if last_id.startswith(TILE_SENTINEL_PREFIX) or last_id in state.fragmented:
            return
        info = state.chunk_info.get(last_id)
        if not info or info["payload"] >= self.policy.min_bytes or info["live"] != info["payload"]:
            return
        try:
            data = self.provider.get(self.tree.resolve_chunk(tensor, last_id, commit_id))
        except TensorLakeError:
            return
        header = chunkfmt.parse_header(data)
        view = memoryview(data)
        state.tail_name = last_id
        state.tail_payloads = [
            bytes(view[header.payload_offset + int(s) : header.payload_offset + int(e)])
            for s, e in header.byte_table
        ]
        state.tail_shapes = header.shapes()
        state.tail_bytes = header.payload_size

    # --- flush / commit / checkout --------------------------------------------

    def _require_writable(self) -> None:
        if self.read_only or self.branch is None:
            raise ReadOnlyCommitError(
                "dataset is checked out read-only (historic commit); create a branch to write"
            )

    @property
    def has_changes(self) -> bool:
        """Uncommitted logical changes, in memory or already flushed to the
        working node (an open tail chunk alone does not count)."""
        if self.branch is None or self.tree.node(self.commit_id).committed:
            return False
        if self._schema_dirty:
            return True
        for name in self.schemas:
            state = self._states.get(name)
            if state is not None:
                if not state.diff.empty:
                    return True
            elif not self.tree.commit_diff(self.commit_id, name).empty:
                return True
        return False

    def flush(self) -> None:
        """Persist staged tail chunks, encoders, and commit records for every
        dirty tensor of the working head."""
        if self.read_only or self.branch is None:
            return
        for name, state in self._states.items():
            if state.dirty:
                self._flush_tensor(name, state)

    def _flush_tensor(self, tensor: str, state: _TensorState) -> None:
        if state.tail_name is not None and state.tail_dirty:
            data = chunkfmt.serialize_chunk(
                state.tail_payloads, state.tail_shapes, state.compression_tag
            )
            self._put_chunk(tensor, state, state.tail_name, data)
            state.tail_dirty = False
        names = state.referenced_chunk_names()
        ordinal_of = {n: i for i, n in enumerate(names)}
        meta = dict(state.schema.to_dict())
        meta["chunk_names"] = names
        meta["fragmented"] = sorted(state.fragmented)
        meta["chunk_info"] = {n: state.chunk_info[n] for n in names if n in state.chunk_info}
        c = self.commit_id
        self.provider.put(self.layout.tensor_meta(c, tensor), json.dumps(meta, indent=2).encode())
        self.provider.put(self.layout.chunk_encoder(c, tensor), state.chunk_enc.serialize(ordinal_of))
        self.provider.put(self.layout.shape_encoder(c, tensor), state.shape_enc.serialize())
        self.provider.put(self.layout.tile_map(c, tensor), state.tile_map.serialize())
        self.provider.put(self.layout.sample_ids(c, tensor), serialize_sample_ids(state.sample_ids))
        self.tree.store_records(c, tensor, state.chunk_set, state.diff)
        state.dirty = False

    def commit(self, message: str = "", allow_empty: bool = False) -> str:
        """Freeze the working state as an immutable snapshot; returns its id."""
        self._require_writable()
        with self._mutex:
            dirty = self.has_changes
            self.flush()
            frozen, new_head = self.tree.commit_head(self.branch, message, dirty, allow_empty)
            self.commit_id = new_head
            self._schema_dirty = False
            for name, state in self._states.items():
                state.chunk_set = set()
                state.diff = CommitDiff()
                self.tree._chunk_sets[(new_head, name)] = state.chunk_set
                self.tree._commit_diffs[(new_head, name)] = state.diff
                state.dirty = False  # open tail carries over; rewritten only if touched
            return frozen

    def checkout(self, target: str, create: bool = False, force: bool = False) -> None:
        """Move to a branch or commit; ``create`` forks a branch at the current
        commit. Uncommitted changes block checkout unless ``force``."""
        with self._mutex:
            if create:
                if self.read_only:
                    raise ReadOnlyCommitError("dataset was opened read-only")
                if self.has_changes and not force:
                    raise DirtyStateError(
                        "uncommitted changes; commit or pass force=True before branching"
                    )
                self.flush()
                node = self.tree.node(self.commit_id)
                if not node.committed and (node.parent is None or self.has_changes):
                    # the fork point must be immutable; freeze the working
                    # state so the new branch sees exactly today's rows
                    self.commit(f"branch point for {target!r}", allow_empty=True)
                head = self.tree.create_branch(target, self.commit_id)
                self._release_branch_lock()
                self.branch = target
                self.commit_id = head
                self._acquire_branch_lock(target)
                self._states = {}
                self._snapshots = {}
                return
            branch, commit_id = self.tree.resolve_target(target)
            if self.has_changes and not force:
                raise DirtyStateError("uncommitted changes; commit or pass force=True")
            self.flush()
            if not self.read_only:
                self._release_branch_lock()
            self.branch = branch
            self.commit_id = commit_id
            if branch is not None and not self.read_only:
                self._acquire_branch_lock(branch)
            self._states = {}
            self._snapshots = {}

    def log(self) -> list:
        return self.tree.log(self.commit_id)

    def diff(self, a: str, b: str) -> dict[str, dict]:
        if not self.read_only and self.branch is not None:
            self.flush()
        _, ca = self.tree.resolve_target(a)
        _, cb = self.tree.resolve_target(b)
        tensors = sorted(set(self.tensors(commit=ca)) | set(self.tensors(commit=cb)))
        return diff_commits(self.tree, ca, cb, tensors)

    def merge(self, source: str, policy: str = "fail_on_conflict", message: Optional[str] = None) -> str:
        self._require_writable()
        return merge_branches(self, source, policy, message)

    # --- chunk io ---------------------------------------------------------------

    def _put_chunk(self, tensor: str, state: _TensorState, name: str, data: bytes) -> None:
        self.provider.put(self.layout.chunk(self.commit_id, tensor, name), data)
        state.chunk_set.add(name)
        header = chunkfmt.parse_header(data)
        state.chunk_info[name] = {
            "payload": header.payload_size,
            "live": header.live_bytes,
        }
        state.cache_drop(name)

    def chunk_bytes(self, tensor: str, chunk_name: str, commit: Optional[str] = None) -> bytes:
        """Raw bytes of a chunk as visible from ``commit``, staging-aware."""
        commit_id = self._resolve_commit(commit)
        state = self._state_for(tensor, commit_id)
        if commit_id == self.commit_id and state.tail_name == chunk_name:
            return chunkfmt.serialize_chunk(
                state.tail_payloads, state.tail_shapes, state.compression_tag
            )
        cached = state.cache_get(chunk_name)
        if cached is not None:
            return cached
        key = self.tree.resolve_chunk(tensor, chunk_name, commit_id)
        data = self.provider.get(key)
        state.cache_put(chunk_name, data)
        return data

    def chunk_storage_key(self, tensor: str, chunk_name: str, commit: Optional[str] = None) -> str:
        return self.tree.resolve_chunk(tensor, chunk_name, self._resolve_commit(commit))

    # --- append ------------------------------------------------------------------

    def _prepare_sample(
        self, schema: HtypeSchema, sample: Sample, raw: bool
    ) -> tuple[np.ndarray, bool]:
        if isinstance(sample, LinkedSample):
            if not schema.is_link:
                raise ValidationError(
                    f"{schema.name}: linked samples require a link meta tensor"
                )
            arr = np.frombuffer(sample.url.encode("utf-8"), dtype=np.uint8).copy()
            return arr, True
        arr = np.asarray(sample)
        if schema.is_link:
            # merge/materialize copy raw url bytes back into link tensors
            if arr.dtype != np.uint8 or arr.ndim != 1:
                raise ValidationError(f"{schema.name}: link tensors store url bytes")
            return arr, True
        if raw:
            return validate_sample(schema, arr, raw_bytes=True), True
        return validate_sample(schema, arr), False

    def append(self, tensor: str, sample: Sample, raw: bool = False) -> int:
        """Append one sample; returns its global index."""
        return self.extend(tensor, [sample], raw=raw)

    def extend(self, tensor: str, samples: Iterable[Sample], raw: bool = False) -> int:
        """Append many samples; returns the index of the first one."""
        self._require_writable()
        with self._mutex:
            state = self._state_for(tensor)
            schema = state.schema
            first = state.length
            for sample in samples:
                arr, is_raw = self._prepare_sample(schema, sample, raw)
                payload = encode_sample_payload(arr, state.compression_tag)
                index = state.length
                if len(payload) > self.policy.max_bytes:
                    if schema.tileable and not is_raw:
                        self._append_tiled(tensor, state, arr)
                    else:
                        raise ValidationError(
                            f"{tensor}: sample payload {len(payload)} bytes exceeds "
                            f"max_bytes {self.policy.max_bytes} and htype is not tileable"
                        )
                else:
                    self._stage_sample(tensor, state, payload, tuple(arr.shape))
                state.sample_ids.append(new_sample_id())
                state.diff.record_append(index, 1)
                state.dirty = True
            return first

    def append_with_id(self, tensor: str, sample: Sample, sample_id: int) -> int:
        """Append preserving an existing sample id (merge bookkeeping)."""
        index = self.append_stored(tensor, sample)
        state = self._state_for(tensor)
        state.sample_ids[index] = sample_id
        return index

    def append_stored(self, tensor: str, sample: Sample) -> int:
        """Append a value copied verbatim from another version or dataset;
        opaque 1-D uint8 blobs fall back to the raw pass-through path."""
        try:
            return self.append(tensor, sample)
        except ValidationError:
            arr = np.asarray(sample)
            if arr.dtype == np.uint8 and arr.ndim == 1:
                return self.append(tensor, sample, raw=True)
            raise

    def append_row(self, row: dict[str, Sample]) -> int:
        """Append one logical row across all tensors; absent tensors receive
        an empty sample so lengths stay aligned."""
        self._require_writable()
        unknown = set(row) - set(self.schemas)
        if unknown:
            raise UnknownTensorError(f"unknown tensors in row: {sorted(unknown)}")
        index = None
        for name in self.tensors():
            schema = self.schema(name)
            value = row.get(name)
            if value is None:
                idx = self.append(name, empty_sample(schema))
            elif isinstance(value, (bytes, bytearray)):
                idx = self.append(name, np.frombuffer(bytes(value), dtype=np.uint8), raw=True)
            else:
                idx = self.append(name, value)
            if index is None:
                index = idx
        if index is None:
            raise UnknownTensorError("dataset has no tensors")
        return index

    def _stage_sample(self, tensor: str, state: _TensorState, payload: bytes, shape: tuple) -> None:
        if state.tail_name is not None and state.tail_bytes + len(payload) > self.policy.max_bytes:
            self._close_tail(tensor, state)
        if state.tail_name is None:
            state.tail_name = new_chunk_name()
            state.tail_payloads = []
            state.tail_shapes = []
            state.tail_bytes = 0
        state.tail_payloads.append(payload)
        state.tail_shapes.append(shape)
        state.tail_bytes += len(payload)
        state.tail_dirty = True
        state.chunk_enc.append(state.tail_name, 1)
        state.shape_enc.append(shape, 1)
        if state.tail_bytes >= self.policy.max_bytes:
            self._close_tail(tensor, state)

    def _close_tail(self, tensor: str, state: _TensorState) -> None:
        if state.tail_name is None:
            return
        if state.tail_dirty:
            data = chunkfmt.serialize_chunk(
                state.tail_payloads, state.tail_shapes, state.compression_tag
            )
            self._put_chunk(tensor, state, state.tail_name, data)
        state.tail_name = None
        state.tail_payloads = []
        state.tail_shapes = []
        state.tail_bytes = 0
        state.tail_dirty = False

    def _append_tiled(self, tensor: str, state: _TensorState, arr: np.ndarray) -> None:
        schema = state.schema
        index = state.length
        tile_shape = plan_tile_shape(
            tuple(arr.shape),
            arr.dtype.itemsize,
            schema.spatial_ndim(arr.ndim),
            self.policy.max_bytes,
        )
        grid = grid_shape(arr.shape, tile_shape)
        names: list[str] = []
        for cell in iter_cells(grid):
            tile = np.ascontiguousarray(arr[tile_slices(arr.shape, tile_shape, cell)])
            payload = encode_sample_payload(tile, state.compression_tag)
            name = new_chunk_name()
            data = chunkfmt.serialize_chunk([payload], [tuple(tile.shape)], state.compression_tag)
            self._put_chunk(tensor, state, name, data)
            names.append(name)
        state.tile_map.set(
            index,
            TileEntry(
                sample_shape=tuple(arr.shape),
                tile_shape=tile_shape,
                grid=grid,
                chunks=names,
            ),
        )
        state.chunk_enc.append(f"{TILE_SENTINEL_PREFIX}{new_chunk_name()}", 1)
        state.shape_enc.append(tuple(arr.shape), 1)

    # --- read ---------------------------------------------------------------------

    def length(self, tensor: str, commit: Optional[str] = None) -> int:
        return self._state_for(tensor, commit).length

    def num_rows(self, commit: Optional[str] = None) -> int:
        lengths = [self.length(t, commit) for t in self.tensors(commit)]
        return min(lengths) if lengths else 0

    def sample_id_list(self, tensor: str, commit: Optional[str] = None) -> list[int]:
        return list(self._state_for(tensor, commit).sample_ids)

    def sample_id(self, tensor: str, index: int, commit: Optional[str] = None) -> int:
        return self._state_for(tensor, commit).sample_ids[index]

    def shape(self, tensor: str, index: int, commit: Optional[str] = None) -> tuple[int, ...]:
        state = self._state_for(tensor, commit)
        return state.shape_enc.lookup(index)

    def read(
        self,
        tensor: str,
        index: Union[int, slice, Sequence[int]],
        commit: Optional[str] = None,
        resolve_links: bool = True,
    ):
        """Decode sample(s): an array for one index, a list for many."""
        state = self._state_for(tensor, commit)
        if isinstance(index, slice):
            indices = range(*index.indices(state.length))
            return [self._read_one(tensor, state, i, commit, resolve_links) for i in indices]
        if isinstance(index, (list, tuple, np.ndarray)):
            return [self._read_one(tensor, state, int(i), commit, resolve_links) for i in index]
        return self._read_one(tensor, state, int(index), commit, resolve_links)

    def _read_one(
        self,
        tensor: str,
        state: _TensorState,
        index: int,
        commit: Optional[str],
        resolve_links: bool,
    ) -> np.ndarray:
        if not (0 <= index < state.length):
            raise IndexOutOfRangeError(
                f"{tensor}: index {index} out of range ({state.length} samples)"
            )
        if index in state.tile_map:
            return self._read_tiled(tensor, state, index, commit, None)
        chunk_id, local = state.chunk_enc.lookup(index)
        commit_id = self._resolve_commit(commit)
        if commit_id == self.commit_id and state.tail_name == chunk_id:
            arr = decode_sample_payload(
                state.tail_payloads[local],
                state.tail_shapes[local],
                state.schema.np_dtype,
                state.compression_tag,
            )
        else:
            data = self.chunk_bytes(tensor, chunk_id, commit_id)
            arr = chunkfmt.decode_sample(data, local, state.schema.np_dtype)
        if state.schema.is_link and resolve_links:
            if arr.size == 0:
                return arr
            url = bytes(arr.tobytes()).decode("utf-8")
            try:
                payload = resolve_link(url)
            except LinkResolveFailureError as e:
                raise LinkResolveFailureError(f"{tensor}[{index}]: {e}") from None
            return np.frombuffer(payload, dtype=np.uint8).copy()
        return arr

    def _read_tiled(
        self,
        tensor: str,
        state: _TensorState,
        index: int,
        commit: Optional[str],
        region: Optional[list[tuple[int, int]]],
    ) -> np.ndarray:
        entry = state.tile_map[index]
        shape = entry.sample_shape
        if region is None:
            region = [(0, d) for d in shape]
        out_shape = tuple(stop - start for start, stop in region)
        out = np.empty(out_shape, dtype=state.schema.np_dtype)
        for cell in cells_intersecting(region, entry.tile_shape, entry.grid):
            name = entry.chunks[cell_ordinal(entry.grid, cell)]
            data = self.chunk_bytes(tensor, name, commit)
            tile = chunkfmt.decode_sample(data, 0, state.schema.np_dtype)
            sl = tile_slices(shape, entry.tile_shape, cell)
            src = []
            dst = []
            for (rs, re), s in zip(region, sl):
                lo = max(rs, s.start)
                hi = min(re, s.stop)
                src.append(slice(lo - s.start, hi - s.start))
                dst.append(slice(lo - rs, hi - rs))
            out[tuple(dst)] = tile[tuple(src)]
        return out

    def read_region(
        self,
        tensor: str,
        index: int,
        region: Sequence[Union[tuple[int, int], slice]],
        commit: Optional[str] = None,
    ) -> np.ndarray:
        """Sub-array of one sample; fetches only the covering tiles (tiled) or
        the sample's byte range (untiled, clean chunks)."""
        state = self._state_for(tensor, commit)
        if not (0 <= index < state.length):
            raise IndexOutOfRangeError(f"{tensor}: index {index} out of range")
        shape = state.shape_enc.lookup(index)
        norm: list[tuple[int, int]] = []
        for i, d in enumerate(shape):
            r = region[i] if i < len(region) else (0, d)
            if isinstance(r, slice):
                r = (r.start if r.start is not None else 0, r.stop if r.stop is not None else d)
            start, stop = int(r[0]), int(r[1])
            if not (0 <= start <= stop <= d):
                raise RegionOutOfBoundsError(
                    f"{tensor}[{index}]: region {start}:{stop} outside dimension {i} of size {d}"
                )
            norm.append((start, stop))
        if index in state.tile_map:
            return self._read_tiled(tensor, state, index, commit, norm)
        arr = self._read_sample_minimal(tensor, state, index, commit)
        return arr[tuple(slice(a, b) for a, b in norm)]

    def _read_sample_minimal(
        self, tensor: str, state: _TensorState, index: int, commit: Optional[str]
    ) -> np.ndarray:
        """Fetch one untiled sample via an exact byte-range request when the
        chunk is clean and uncompressed; whole-chunk fetch otherwise."""
        chunk_id, local = state.chunk_enc.lookup(index)
        commit_id = self._resolve_commit(commit)
        staged = commit_id == self.commit_id and state.tail_name == chunk_id
        clean = (
            not staged
            and chunk_id not in state.fragmented
            and state.compression_tag == chunkfmt.COMPRESSION_NONE
            and chunk_id not in state.cache
        )
        if not clean:
            return self._read_one(tensor, state, index, commit_id, resolve_links=False)
        row = state.chunk_enc.row_of(index)
        first, last = state.chunk_enc.row_span(row)
        shapes = state.shape_enc.shapes_range(first, last + 1)
        _, ranges = chunkfmt.expected_layout(shapes, state.schema.np_dtype)
        start, end = ranges[local]
        key = self.tree.resolve_chunk(tensor, chunk_id, commit_id)
        shape = shapes[local]
        if start == end:
            return np.zeros(shape, dtype=state.schema.np_dtype)
        data = self.provider.get(key, (start, end))
        return decode_sample_payload(data, shape, state.schema.np_dtype, state.compression_tag)

    # --- update -----------------------------------------------------------------

    def update(
        self,
        tensor: str,
        index: int,
        sample: Sample,
        strict: Optional[bool] = None,
        raw: bool = False,
    ) -> None:
        """Replace the sample at ``index``; the sample id is preserved. With
        strict mode off, writes past the end fill the gap with empty samples."""
        self._require_writable()
        strict = self.strict if strict is None else strict
        with self._mutex:
            state = self._state_for(tensor)
            schema = state.schema
            if index >= state.length:
                if strict:
                    raise IndexOutOfRangeError(
                        f"{tensor}: index {index} out of range ({state.length} samples; "
                        "disable strict mode for sparse writes)"
                    )
                gap = index - state.length
                if gap:
                    self.extend(tensor, [empty_sample(schema)] * gap)
                self.append(tensor, sample, raw=raw)
                return
            if index < 0:
                raise IndexOutOfRangeError(f"{tensor}: negative index {index}")
            arr, _ = self._prepare_sample(schema, sample, raw)
            payload = encode_sample_payload(arr, state.compression_tag)
            if len(payload) > self.policy.max_bytes:
                if not schema.tileable:
                    raise ValidationError(
                        f"{tensor}: replacement exceeds max_bytes and htype is not tileable"
                    )
                self._update_tiled(tensor, state, index, arr)
            else:
                self._update_regular(tensor, state, index, payload, tuple(arr.shape))
            state.diff.record_update(index)
            state.dirty = True

    def update_stored(self, tensor: str, index: int, sample: Sample) -> None:
        """Update with a value copied verbatim from another version (merge)."""
        try:
            self.update(tensor, index, sample)
        except ValidationError:
            arr = np.asarray(sample)
            if arr.dtype == np.uint8 and arr.ndim == 1:
                self.update(tensor, index, sample, raw=True)
            else:
                raise

    def _update_tiled(self, tensor: str, state: _TensorState, index: int, arr: np.ndarray) -> None:
        schema = state.schema
        tile_shape = plan_tile_shape(
            tuple(arr.shape), arr.dtype.itemsize, schema.spatial_ndim(arr.ndim), self.policy.max_bytes
        )
        grid = grid_shape(arr.shape, tile_shape)
        names = []
        for cell in iter_cells(grid):
            tile = np.ascontiguousarray(arr[tile_slices(arr.shape, tile_shape, cell)])
            name = new_chunk_name()
            data = chunkfmt.serialize_chunk(
                [encode_sample_payload(tile, state.compression_tag)],
                [tuple(tile.shape)],
                state.compression_tag,
            )
            self._put_chunk(tensor, state, name, data)
            names.append(name)
        entry = TileEntry(tuple(arr.shape), tile_shape, grid, names)
        old_id, _ = state.chunk_enc.lookup(index)
        if old_id.startswith(TILE_SENTINEL_PREFIX):
            state.tile_map.set(index, entry)
        else:
            self._split_out(tensor, state, index, sentinel=True)
            state.tile_map.set(index, entry)
        state.shape_enc.set_shape(index, tuple(arr.shape))

    def _update_regular(
        self, tensor: str, state: _TensorState, index: int, payload: bytes, shape: tuple
    ) -> None:
        chunk_id, local = state.chunk_enc.lookup(index)
        was_tiled = index in state.tile_map
        if was_tiled:
            # sentinel row becomes a single-sample chunk
            state.tile_map.remove(index)
            name = new_chunk_name()
            data = chunkfmt.serialize_chunk([payload], [shape], state.compression_tag)
            self._put_chunk(tensor, state, name, data)
            state.chunk_enc.replace_range(index, index + 1, [(index, name)])
            state.shape_enc.set_shape(index, shape)
            return
        if state.tail_name == chunk_id:
            grown = state.tail_bytes - len(state.tail_payloads[local]) + len(payload)
            if grown <= self.policy.max_bytes:
                state.tail_bytes = grown
                state.tail_payloads[local] = payload
                state.tail_shapes[local] = shape
                state.tail_dirty = True
                state.shape_enc.set_shape(index, shape)
                return
            self._close_tail(tensor, state)  # replacement overflows: spill, then split
        data = self.chunk_bytes(tensor, chunk_id)
        patched = chunkfmt.patch_sample(data, local, payload, shape)
        if patched is not None:
            header = chunkfmt.parse_header(patched)
            self._put_chunk(tensor, state, chunk_id, patched)
            if header.live_bytes < header.payload_size:
                state.fragmented.add(chunk_id)
            state.shape_enc.set_shape(index, shape)
            return
        self._split_out(tensor, state, index, new_payload=payload, new_shape=shape)

    def _split_out(
        self,
        tensor: str,
        state: _TensorState,
        index: int,
        new_payload: Optional[bytes] = None,
        new_shape: Optional[tuple] = None,
        sentinel: bool = False,
    ) -> None:
        """Split the run containing ``index`` so the sample can move into its
        own chunk (or a tile sentinel); neighbours re-pack under new names."""
        chunk_id, local = state.chunk_enc.lookup(index)
        row = state.chunk_enc.row_of(index)
        first, last = state.chunk_enc.row_span(row)
        if state.tail_name == chunk_id:
            self._close_tail(tensor, state)
        data = self.chunk_bytes(tensor, chunk_id)
        header = chunkfmt.parse_header(data)
        view = memoryview(data)

        def sample_payload(i: int) -> bytes:
            s, e = (int(v) for v in header.byte_table[i])
            return bytes(view[header.payload_offset + s : header.payload_offset + e])

        shapes = header.shapes()
        new_rows: list[tuple[int, str]] = []
        if local > 0:
            left_name = new_chunk_name()
            left = chunkfmt.serialize_chunk(
                [sample_payload(i) for i in range(local)],
                shapes[:local],
                header.compression_tag,
            )
            self._put_chunk(tensor, state, left_name, left)
            new_rows.append((index - 1, left_name))
        if sentinel:
            new_rows.append((index, f"{TILE_SENTINEL_PREFIX}{new_chunk_name()}"))
        else:
            mid_name = new_chunk_name()
            mid = chunkfmt.serialize_chunk([new_payload], [new_shape], header.compression_tag)
            self._put_chunk(tensor, state, mid_name, mid)
            new_rows.append((index, mid_name))
        if local < header.sample_count - 1:
            right_name = new_chunk_name()
            right = chunkfmt.serialize_chunk(
                [sample_payload(i) for i in range(local + 1, header.sample_count)],
                shapes[local + 1 :],
                header.compression_tag,
            )
            self._put_chunk(tensor, state, right_name, right)
            new_rows.append((last, right_name))
        state.chunk_enc.replace_range(first, last + 1, new_rows)
        state.fragmented.discard(chunk_id)
        if new_shape is not None:
            state.shape_enc.set_shape(index, new_shape)

    # --- rechunk -------------------------------------------------------------------

    def fragmentation(self, tensor: str) -> dict:
        """Advisory metric: how much of the tensor's chunk space is stale or
        under the lower bound."""
        state = self._state_for(tensor)
        chunks = below = 0
        payload = live = 0
        for name in state.referenced_chunk_names():
            if name.startswith(TILE_SENTINEL_PREFIX):
                continue
            info = state.chunk_info.get(name)
            if info is None:
                continue
            chunks += 1
            payload += info["payload"]
            live += info["live"]
            if info["payload"] < self.policy.min_bytes:
                below += 1
        return {
            "chunks": chunks,
            "below_min": below,
            "payload_bytes": payload,
            "live_bytes": live,
            "stale_fraction": 0.0 if payload == 0 else 1.0 - live / payload,
        }

    def rechunk(self, tensor: str) -> dict:
        """Re-pack fragmented chunks into policy-sized ones; logical content
        (values, shapes, sample ids) is unchanged. Atomic per tensor: the old
        layout stays referenced until the new encoder replaces it."""
        self._require_writable()
        with self._mutex:
            state = self._state_for(tensor)
            self._close_tail(tensor, state)
            old_rows = state.chunk_enc.rows()
            chunks_before = len(old_rows)
            if not old_rows:
                return {"chunks_before": 0, "chunks_after": 0, "bytes_moved": 0}

            new_enc = ChunkEncoder()
            bytes_moved = 0
            buf_payloads: list[bytes] = []
            buf_shapes: list[tuple] = []
            buf_bytes = 0

            def pack(chunk_bytes_target: int) -> None:
                # emit buffered samples into fresh chunks while the buffer
                # holds at least chunk_bytes_target bytes
                nonlocal buf_payloads, buf_shapes, buf_bytes, bytes_moved
                while buf_payloads and buf_bytes >= chunk_bytes_target:
                    take = 0
                    size = 0
                    while take < len(buf_payloads) and (
                        size + len(buf_payloads[take]) <= self.policy.max_bytes or take == 0
                    ):
                        size += len(buf_payloads[take])
                        take += 1
                    name = new_chunk_name()
                    data = chunkfmt.serialize_chunk(
                        buf_payloads[:take], buf_shapes[:take], state.compression_tag
                    )
                    self._put_chunk(tensor, state, name, data)
                    bytes_moved += size
                    new_enc.append(name, take)
                    buf_payloads = buf_payloads[take:]
                    buf_shapes = buf_shapes[take:]
                    buf_bytes -= size

            row_count = len(old_rows)
            for r, (last, chunk_id) in enumerate(old_rows):
                first = old_rows[r - 1][0] + 1 if r > 0 else 0
                if chunk_id.startswith(TILE_SENTINEL_PREFIX):
                    pack(1)  # drain: tile rows end the contiguous run
                    new_enc.append(chunk_id, last - first + 1)
                    continue
                info = state.chunk_info.get(chunk_id, {"payload": 0, "live": 0})
                optimal = (
                    chunk_id not in state.fragmented
                    and info["live"] == info["payload"]
                    and info["payload"] <= self.policy.max_bytes
                    and (info["payload"] >= self.policy.min_bytes or r == row_count - 1)
                )
                if optimal and not buf_payloads:
                    new_enc.append(chunk_id, last - first + 1)
                    continue
                data = self.chunk_bytes(tensor, chunk_id)
                header = chunkfmt.parse_header(data)
                view = memoryview(data)
                for i in range(header.sample_count):
                    s, e = (int(v) for v in header.byte_table[i])
                    buf_payloads.append(bytes(view[header.payload_offset + s : header.payload_offset + e]))
                    buf_bytes += e - s
                buf_shapes.extend(header.shapes())
                pack(self.policy.max_bytes)  # bound rechunk memory
            pack(1)

            state.chunk_enc = new_enc
            state.fragmented = set()
            state.dirty = True
            self._flush_tensor(tensor, state)
            return {
                "chunks_before": chunks_before,
                "chunks_after": new_enc.num_rows,
                "bytes_moved": bytes_moved,
            }

    # --- queries / loading -----------------------------------------------------------

    def query(self, text: str, version: Optional[str] = None):
        from tensorlake.tql import execute_query

        return execute_query(self, text, version=version)

    def loader(self, config=None, transform=None, tensors=None, **kwargs):
        from tensorlake.loader import Loader, LoaderConfig
        from tensorlake.views import identity_view

        if config is None:
            config = LoaderConfig(tensors=tensors, **kwargs)
        return Loader(identity_view(self), config, transform)

    def stats(self) -> dict:
        out = {"root": self.layout.prefix or ".", "branch": self.branch, "commit": self.commit_id, "tensors": {}}
        for name in self.tensors():
            state = self._state_for(name)
            frag = self.fragmentation(name)
            out["tensors"][name] = {
                "htype": state.schema.htype,
                "dtype": state.schema.dtype,
                "rows": state.length,
                "chunks": frag["chunks"],
                "payload_bytes": frag["payload_bytes"],
                "tiled_samples": len(state.tile_map.entries),
            }
        out["commits"] = sum(1 for n in self.tree.nodes.values() if n.committed)
        out["branches"] = sorted(self.tree.branches)
        return out


# --- creation / opening ------------------------------------------------------------


def _as_provider(target: Union[str, StorageProvider]) -> StorageProvider:
    if isinstance(target, StorageProvider):
        return target
    return FilesystemProvider(str(target))


def _normalize_schemas(schemas: dict) -> dict[str, HtypeSchema]:
    out: dict[str, HtypeSchema] = {}
    for name, spec in schemas.items():
        if isinstance(spec, HtypeSchema):
            if spec.name != name:
                raise InvalidSchemaError(f"schema name {spec.name!r} != tensor name {name!r}")
            out[name] = spec
        elif isinstance(spec, str):
            defaults = {
                "image": {"dtype": "uint8"},
                "binary_mask": {"dtype": "uint8"},
                "class_label": {"dtype": "int64", "ndim": 0},
                "bbox": {"dtype": "float32"},
                "text": {"dtype": "uint8", "ndim": 1},
            }
            out[name] = HtypeSchema(name=name, htype=spec, **defaults.get(spec, {}))
        elif isinstance(spec, dict):
            out[name] = HtypeSchema(name=name, **spec)
        else:
            raise InvalidSchemaError(f"cannot build a schema from {spec!r}")
    return out


def create_dataset(
    target: Union[str, StorageProvider],
    schemas: dict,
    policy: Optional[ChunkPolicy] = None,
    root: str = "",
    strict: bool = True,
) -> Dataset:
    """Create an empty dataset (root commit on branch "main") at ``target``.

    ``target`` is a filesystem path or any StorageProvider; ``schemas`` maps
    tensor names to HtypeSchema instances, htype name strings, or kwargs dicts.
    """
    provider = _as_provider(target)
    layout = KeyLayout(root)
    if provider.list(layout.prefix):
        raise AlreadyExistsError(f"storage root {layout.prefix or '.'!r} is not empty")
    policy = policy or ChunkPolicy()
    schema_map = _normalize_schemas(schemas)
    tree = VersionTree.create(provider, layout)
    ds = Dataset(
        provider,
        layout,
        schema_map,
        policy,
        tree,
        branch="main",
        commit_id=tree.head_of("main"),
        strict=strict,
    )
    ds._write_dataset_meta()
    for name in schema_map:
        state = ds._state_for(name)
        state.dirty = True
    ds.flush()
    return ds


def open_dataset(
    target: Union[str, StorageProvider],
    root: str = "",
    branch: str = "main",
    commit: Optional[str] = None,
    read_only: bool = False,
    strict: bool = True,
) -> Dataset:
    """Open an existing dataset at a branch head or pinned commit."""
    provider = _as_provider(target)
    layout = KeyLayout(root)
    try:
        meta = json.loads(provider.get(layout.dataset_meta()).decode())
    except KeyError:
        raise DatasetNotFoundError(f"no dataset at root {layout.prefix or '.'!r}") from None
    schemas = {name: HtypeSchema.from_dict(d) for name, d in meta["tensors"].items()}
    policy = ChunkPolicy.from_dict(meta["policy"])
    tree = VersionTree.load(provider, layout)
    if commit is not None:
        tree.node(commit)
        return Dataset(
            provider, layout, schemas, policy, tree,
            branch=None, commit_id=commit, read_only=True, strict=strict,
        )
    head = tree.head_of(branch)
    return Dataset(
        provider, layout, schemas, policy, tree,
        branch=None if read_only else branch,
        commit_id=head, read_only=read_only, strict=strict,
    )
