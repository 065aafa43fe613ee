"""Storage providers: a uniform key -> bytes abstraction over memory, local
filesystem, and remote (range-request) backends, composable through an LRU
cache chain.

Keys are relative, slash-separated UTF-8 strings with no leading slash and no
`..` segments; they mean the same object on every provider.
"""

from __future__ import annotations

import os
import threading
import time
from collections import OrderedDict
from typing import Iterator, Optional

from tensorlake.errors import (
    BadKeyError,
    IoFailureError,
    KeyNotFoundError,
    RangeOutOfBoundsError,
    ReadOnlyProviderError,
)

CACHE_BYTES_ENV = "TENSORLAKE_CACHE_BYTES"
DEFAULT_CACHE_BYTES = 256 * 1024 * 1024


def check_key(key: str) -> str:
    if not key or not isinstance(key, str):
        raise BadKeyError(f"empty or non-string key: {key!r}")
    if key.startswith("/"):
        raise BadKeyError(f"key must be relative: {key!r}")
    if any(part == ".." for part in key.split("/")):
        raise BadKeyError(f"key must not contain '..' segments: {key!r}")
    return key


def check_range(start: int, end: int) -> None:
    if not (0 <= start < end):
        raise RangeOutOfBoundsError(f"invalid byte range [{start}, {end})")


class StorageProvider:
    """Key -> bytes store. Subclasses implement the raw byte operations.

    All providers are safe for concurrent reads; writes to distinct keys are
    safe and a racing write to one key resolves to either value whole.
    """

    read_only = False

    def get(self, key: str, byte_range: Optional[tuple[int, int]] = None) -> bytes:
        """Return the object at ``key``, or exactly ``byte_range`` of it.

        Raises KeyNotFoundError if absent and RangeOutOfBoundsError if the
        requested range extends past the end of the object.
        """
        check_key(key)
        if byte_range is not None:
            check_range(*byte_range)
        return self._get(key, byte_range)

    def put(self, key: str, data: bytes) -> None:
        check_key(key)
        if self.read_only:
            raise ReadOnlyProviderError(f"provider is read-only, cannot put {key!r}")
        self._put(key, bytes(data))

    def delete(self, key: str) -> None:
        """Remove ``key`` if present. Deleting an absent key is a no-op."""
        check_key(key)
        if self.read_only:
            raise ReadOnlyProviderError(f"provider is read-only, cannot delete {key!r}")
        self._delete(key)

    def list(self, prefix: str = "") -> list[str]:
        """All keys starting with ``prefix``, lexicographically sorted."""
        return sorted(self._list(prefix))

    def exists(self, key: str) -> bool:
        try:
            self.get_size(key)
            return True
        except KeyNotFoundError:
            return False

    def get_size(self, key: str) -> int:
        return len(self.get(key))

    def clear(self, prefix: str = "") -> None:
        for key in self.list(prefix):
            self.delete(key)

    # subclass surface

    def _get(self, key: str, byte_range: Optional[tuple[int, int]]) -> bytes:
        raise NotImplementedError

    def _put(self, key: str, data: bytes) -> None:
        raise NotImplementedError

    def _delete(self, key: str) -> None:
        raise NotImplementedError

    def _list(self, prefix: str) -> Iterator[str]:
        raise NotImplementedError


def slice_bytes(data: bytes, byte_range: Optional[tuple[int, int]], key: str) -> bytes:
    if byte_range is None:
        return data
    start, end = byte_range
    if end > len(data):
        raise RangeOutOfBoundsError(
            f"range [{start}, {end}) exceeds object length {len(data)} for {key!r}"
        )
    return data[start:end]


class MemoryProvider(StorageProvider):
    """Dict-backed provider, the innermost layer for tests and cache chains."""

    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._lock = threading.RLock()

    def _get(self, key, byte_range):
        with self._lock:
            try:
                data = self._data[key]
            except KeyError:
                raise KeyNotFoundError(key) from None
        return slice_bytes(data, byte_range, key)

    def get_size(self, key):
        with self._lock:
            try:
                return len(self._data[key])
            except KeyError:
                raise KeyNotFoundError(key) from None

    def _put(self, key, data):
        with self._lock:
            self._data[key] = data

    def _delete(self, key):
        with self._lock:
            self._data.pop(key, None)

    def _list(self, prefix):
        with self._lock:
            return [k for k in self._data if k.startswith(prefix)]


class FilesystemProvider(StorageProvider):
    """Maps keys to paths under a root directory, creating parents on put."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.root, *key.split("/"))

    def _get(self, key, byte_range):
        path = self._path(key)
        try:
            with open(path, "rb") as f:
                if byte_range is None:
                    return f.read()
                start, end = byte_range
                size = os.fstat(f.fileno()).st_size
                if end > size:
                    raise RangeOutOfBoundsError(
                        f"range [{start}, {end}) exceeds object length {size} for {key!r}"
                    )
                f.seek(start)
                return f.read(end - start)
        except FileNotFoundError:
            raise KeyNotFoundError(key) from None
        except IsADirectoryError:
            raise KeyNotFoundError(key) from None
        except OSError as e:
            raise IoFailureError(f"read failed for {key!r}: {e}") from e

    def get_size(self, key):
        try:
            return os.path.getsize(self._path(key))
        except FileNotFoundError:
            raise KeyNotFoundError(key) from None

    def _put(self, key, data):
        path = self._path(key)
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tmp = f"{path}.tmp.{os.getpid()}.{threading.get_ident()}"
            with open(tmp, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        except OSError as e:
            raise IoFailureError(f"write failed for {key!r}: {e}") from e

    def _delete(self, key):
        try:
            os.remove(self._path(key))
        except FileNotFoundError:
            pass
        except OSError as e:
            raise IoFailureError(f"delete failed for {key!r}: {e}") from e

    def _list(self, prefix):
        for dirpath, _dirnames, filenames in os.walk(self.root):
            rel = os.path.relpath(dirpath, self.root)
            for name in filenames:
                key = name if rel == "." else "/".join(rel.split(os.sep) + [name])
                if key.startswith(prefix):
                    yield key


class SimulatedRemoteProvider(StorageProvider):
    """Range-request backend with a configurable latency/bandwidth model.

    Wraps any provider and charges ``latency_s`` per request plus the payload
    size divided by ``bandwidth_bps`` (0 disables the bandwidth term). A real
    HTTP object-store client would implement the same interface; this stand-in
    makes remote-streaming behaviour reproducible without cloud credentials.
    """

    def __init__(
        self,
        inner: StorageProvider,
        latency_s: float = 0.05,
        bandwidth_bps: float = 0.0,
        writable: bool = True,
    ):
        self.inner = inner
        self.latency_s = latency_s
        self.bandwidth_bps = bandwidth_bps
        self.read_only = not writable
        self.request_count = 0
        self._lock = threading.Lock()

    def _charge(self, nbytes: int) -> None:
        with self._lock:
            self.request_count += 1
        delay = self.latency_s
        if self.bandwidth_bps > 0:
            delay += nbytes / self.bandwidth_bps
        if delay > 0:
            time.sleep(delay)

    def _get(self, key, byte_range):
        data = self.inner.get(key, byte_range)
        self._charge(len(data))
        return data

    def get_size(self, key):
        # metadata probe, charged like any other request
        size = self.inner.get_size(key)
        self._charge(0)
        return size

    def _put(self, key, data):
        self._charge(len(data))
        self.inner.put(key, data)

    def _delete(self, key):
        self._charge(0)
        self.inner.delete(key)

    def _list(self, prefix):
        self._charge(0)
        return self.inner.list(prefix)


class CountingProvider(StorageProvider):
    """Pass-through wrapper that counts get calls and fetched bytes."""

    def __init__(self, inner: StorageProvider):
        self.inner = inner
        self._lock = threading.Lock()
        self.get_calls = 0
        self.bytes_fetched = 0
        self.keys_fetched: list[str] = []

    def reset(self) -> None:
        with self._lock:
            self.get_calls = 0
            self.bytes_fetched = 0
            self.keys_fetched = []

    def _get(self, key, byte_range):
        data = self.inner.get(key, byte_range)
        with self._lock:
            self.get_calls += 1
            self.bytes_fetched += len(data)
            self.keys_fetched.append(key)
        return data

    def get_size(self, key):
        return self.inner.get_size(key)

    def _put(self, key, data):
        self.inner.put(key, data)

    def _delete(self, key):
        self.inner.delete(key)

    def _list(self, prefix):
        return self.inner.list(prefix)


class LRUCache(StorageProvider):
    """Read-through / write-through LRU cache of ``inner`` held in ``outer``.

    Whole objects are the eviction unit: a full get on a miss caches the
    object in ``outer`` (unless it alone exceeds capacity), a ranged get on a
    miss is served from ``inner`` and caches nothing, and a ranged get of a
    cached object is sliced from the cached copy. Internally synchronized.
    """

    def __init__(self, outer: StorageProvider, inner: StorageProvider, capacity_bytes: int):
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be > 0")
        self.outer = outer
        self.inner = inner
        self.capacity_bytes = capacity_bytes
        self.current_bytes = 0
        self._sizes: OrderedDict[str, int] = OrderedDict()  # key -> cached size, LRU order
        self._lock = threading.RLock()
        self.hits = 0
        self.misses = 0

    def _get(self, key, byte_range):
        with self._lock:
            if key in self._sizes:
                self._sizes.move_to_end(key)
                self.hits += 1
                return slice_bytes(self.outer.get(key), byte_range, key)
            self.misses += 1
        if byte_range is not None:
            # ranged miss: fetch only the slice, admit nothing
            return self.inner.get(key, byte_range)
        data = self.inner.get(key)
        self._admit(key, data)
        return data

    def _admit(self, key: str, data: bytes) -> None:
        if len(data) > self.capacity_bytes:
            return
        with self._lock:
            if key in self._sizes:
                self.current_bytes -= self._sizes.pop(key)
            self._sizes[key] = len(data)
            self.current_bytes += len(data)
            self.outer.put(key, data)
            while self.current_bytes > self.capacity_bytes:
                old_key, old_size = self._sizes.popitem(last=False)
                self.current_bytes -= old_size
                self.outer.delete(old_key)

    def get_size(self, key):
        with self._lock:
            if key in self._sizes:
                return self._sizes[key]
        return self.inner.get_size(key)

    def _put(self, key, data):
        self.inner.put(key, data)
        with self._lock:
            if key in self._sizes:
                # keep the cached copy coherent with inner
                self.current_bytes -= self._sizes.pop(key)
                self.outer.delete(key)
        self._admit(key, data)

    def _delete(self, key):
        self.inner.delete(key)
        with self._lock:
            if key in self._sizes:
                self.current_bytes -= self._sizes.pop(key)
                self.outer.delete(key)

    def _list(self, prefix):
        return self.inner.list(prefix)

    def cached_keys(self) -> list[str]:
        with self._lock:
            return list(self._sizes)


def default_cache_bytes() -> int:
    raw = os.environ.get(CACHE_BYTES_ENV)
    if raw is None:
        return DEFAULT_CACHE_BYTES
    return int(raw)


def chain(
    outer: StorageProvider,
    inner: StorageProvider,
    capacity_bytes: Optional[int] = None,
) -> LRUCache:
    """Chain two providers into an LRU cache; capacity defaults from the
    TENSORLAKE_CACHE_BYTES env var."""
    if capacity_bytes is None:
        capacity_bytes = default_cache_bytes()
    return LRUCache(outer, inner, capacity_bytes)
