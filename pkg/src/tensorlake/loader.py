"""Streaming dataloader: parallel chunk fetch over range requests, decode,
per-sample transforms, and collation into batches, under a bounded in-flight
memory budget.

Pipeline: an admission thread walks the fetch schedule and submits jobs while
the byte budget allows; a fetch pool pulls jobs FIFO; a decode pool picks the
smallest ready job first; the consuming iterator assembles rows in the planned
delivery order, applies the transform, and collates batches. Handover between
stages passes decoded buffers by reference inside one address space.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from tensorlake import chunk as chunkfmt
from tensorlake.errors import IoFailureError, TensorLakeError
from tensorlake.views import DatasetView, identity_view

MIB = 1024 * 1024


@dataclass
class LoaderConfig:
    batch_size: int = 1
    shuffle: bool = False
    shuffle_buffer_bytes: int = 64 * MIB
    num_fetch_workers: int = 4
    num_decode_workers: int = 2
    prefetch_batches: int = 2
    drop_last: bool = False
    seed: Optional[int] = None
    tensors: Optional[list[str]] = None
    ordered_delivery: bool = True
    on_transform_error: str = "fail"  # or "skip"
    fetch_retries: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_fetch_workers < 1 or self.num_decode_workers < 1:
            raise ValueError("worker counts must be >= 1")
        if self.prefetch_batches < 1:
            raise ValueError("prefetch_batches must be >= 1")
        if self.on_transform_error not in ("fail", "skip"):
            raise ValueError("on_transform_error must be 'fail' or 'skip'")


@dataclass
class Batch:
    """One collated batch: stacked arrays where shapes are uniform, lists of
    arrays for ragged columns."""

    columns: dict[str, object]
    indices: list[int]
    sample_ids: dict[str, Optional[list[int]]]

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, name: str):
        return self.columns[name]


@dataclass
class ChunkJob:
    """Fetch unit: one chunk of one tensor plus the view positions it serves."""

    order: int
    tensor: str
    chunk_id: str
    mode: str  # "ranges" | "whole" | "staged" | "engine"
    storage_key: Optional[str]
    ranges: list[tuple[int, int]] = field(default_factory=list)
    # per served position: (view position, global index, local index)
    rows: list[tuple[int, int, int]] = field(default_factory=list)
    sample_spans: dict[int, tuple[int, int, tuple[int, ...]]] = field(default_factory=dict)
    est_bytes: int = 0

    done: threading.Event = field(default_factory=threading.Event, repr=False)
    results: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    error: Optional[BaseException] = field(default=None, repr=False)
    raw: Optional[list[bytes]] = field(default=None, repr=False)
    pending: int = 0


class _Meter:
    def __init__(self):
        self.current = 0
        self.peak = 0
        self._cond = threading.Condition()

    def add(self, n: int) -> None:
        with self._cond:
            self.current += n
            self.peak = max(self.peak, self.current)

    def sub(self, n: int) -> None:
        with self._cond:
            self.current -= n
            self._cond.notify_all()

    def wait_below(self, limit: int, predicate: Callable[[], bool]) -> None:
        with self._cond:
            while self.current > limit and not predicate():
                self._cond.wait(timeout=0.05)


def _mean_sample_bytes(state) -> float:
    enc = state.shape_enc
    n = enc.num_samples
    if n == 0:
        return 0.0
    itemsize = state.schema.np_dtype.itemsize
    total = 0
    prev = -1
    for last, shape in enc.rows():
        count = last - prev
        prev = last
        elems = int(np.prod(shape)) if len(shape) else 1
        total += count * elems * itemsize
    return total / n


def plan_fetch_order(
    view: DatasetView,
    shuffle: bool = False,
    seed: Optional[int] = None,
    tensors: Optional[list[str]] = None,
    shuffle_buffer_bytes: int = 64 * MIB,
) -> tuple[list[int], list[ChunkJob]]:
    """Compute (delivery order of view positions, chunk fetch schedule).

    shuffle=False visits chunks in order of first use with each chunk's byte
    ranges coalesced into as few requests as possible; shuffle=True visits
    chunk-aligned row blocks in seeded random order and re-orders samples
    through a bounded shuffle buffer. Every chunk is scheduled at most once
    per epoch either way.
    """
    ds = view.ds
    commit = view.commit_id
    columns = tensors if tensors is not None else view.tensors()
    fetch_tensors: list[str] = []
    for col in columns:
        for t in view.referenced_tensors(col):
            if t not in fetch_tensors:
                fetch_tensors.append(t)

    positions = list(range(len(view)))
    if shuffle and positions:
        rng = np.random.default_rng(seed)
        primary = max(fetch_tensors, key=lambda t: _mean_sample_bytes(ds._state_for(t, commit))) if fetch_tensors else None
        if primary is not None:
            state = ds._state_for(primary, commit)
            blocks: dict[str, list[int]] = {}
            block_order: list[str] = []
            for pos in positions:
                gidx = view.row_order[pos]
                cid, _ = state.chunk_enc.lookup(gidx)
                if cid not in blocks:
                    blocks[cid] = []
                    block_order.append(cid)
                blocks[cid].append(pos)
            rng.shuffle(block_order)
            stream = [pos for cid in block_order for pos in blocks[cid]]
        else:
            stream = positions
        # bounded sample-level shuffle buffer over the block stream
        state_by_t = {t: ds._state_for(t, commit) for t in fetch_tensors}

        def row_bytes(pos: int) -> int:
            gidx = view.row_order[pos]
            total = 0
            for t, st in state_by_t.items():
                if gidx < st.shape_enc.num_samples:
                    shape = st.shape_enc.lookup(gidx)
                    elems = int(np.prod(shape)) if len(shape) else 1
                    total += elems * st.schema.np_dtype.itemsize
            return max(total, 1)

        delivery: list[int] = []
        buffer: list[int] = []
        buffered = 0
        for pos in stream:
            nbytes = row_bytes(pos)
            while buffer and buffered + nbytes > shuffle_buffer_bytes:
                pick = int(rng.integers(len(buffer)))
                out = buffer.pop(pick)
                buffered -= row_bytes(out)
                delivery.append(out)
            buffer.append(pos)
            buffered += nbytes
        while buffer:
            pick = int(rng.integers(len(buffer)))
            delivery.append(buffer.pop(pick))
    else:
        delivery = positions

    # fetch schedule: group positions by (tensor, chunk) in first-need order
    jobs: list[ChunkJob] = []
    job_index: dict[tuple[str, str], ChunkJob] = {}
    for pos in delivery:
        gidx = view.row_order[pos]
        for t in fetch_tensors:
            state = ds._state_for(t, commit)
            if gidx >= state.chunk_enc.num_samples:
                continue
            if gidx in state.tile_map:
                key = (t, f"@row/{gidx}")
                if key not in job_index:
                    entry = state.tile_map[gidx]
                    elems = int(np.prod(entry.sample_shape))
                    job = ChunkJob(
                        order=len(jobs), tensor=t, chunk_id=key[1], mode="engine",
                        storage_key=None, est_bytes=elems * state.schema.np_dtype.itemsize,
                    )
                    job_index[key] = job
                    jobs.append(job)
                job_index[key].rows.append((pos, gidx, 0))
                continue
            cid, local = state.chunk_enc.lookup(gidx)
            key = (t, cid)
            if key not in job_index:
                job = ChunkJob(order=len(jobs), tensor=t, chunk_id=cid, mode="whole", storage_key=None)
                job_index[key] = job
                jobs.append(job)
            job_index[key].rows.append((pos, gidx, local))

    for job in jobs:
        if job.mode == "engine":
            job.pending = len(job.rows)
            continue
        t = job.tensor
        state = ds._state_for(t, commit)
        staged = state.tail_name == job.chunk_id and commit == ds.commit_id
        clean = (
            not staged
            and state.schema.is_link is False
            and job.chunk_id not in state.fragmented
            and state.compression_tag == chunkfmt.COMPRESSION_NONE
        )
        job.pending = len(job.rows)
        if staged:
            job.mode = "staged"
            job.est_bytes = state.tail_bytes
            continue
        job.storage_key = ds.chunk_storage_key(t, job.chunk_id, commit)
        info = state.chunk_info.get(job.chunk_id)
        job.est_bytes = info["payload"] if info else 0
        if not clean:
            job.mode = "whole"
            continue
        # exact ranged requests from the encoder-predicted layout
        row = state.chunk_enc.row_of(job.rows[0][1])
        first, last = state.chunk_enc.row_span(row)
        shapes = state.shape_enc.shapes_range(first, last + 1)
        _, spans = chunkfmt.expected_layout(shapes, state.schema.np_dtype)
        needed = sorted({local for _, _, local in job.rows})
        ranges: list[tuple[int, int]] = []
        for local in needed:
            start, end = spans[local]
            job.sample_spans[local] = (start, end, shapes[local])
            if start == end:
                continue
            if ranges and ranges[-1][1] == start:
                ranges[-1] = (ranges[-1][0], end)
            else:
                ranges.append((start, end))
        job.mode = "ranges"
        job.ranges = ranges
        job.est_bytes = sum(e - s for s, e in ranges)
    return delivery, jobs


def _fetch_job(job: ChunkJob, ds, commit: str, retries: int) -> None:
    attempt = 0
    while True:
        try:
            if job.mode == "engine":
                job.results = {
                    pos: ds.read(job.tensor, gidx, commit=commit)
                    for pos, gidx, _ in job.rows
                }
                job.raw = None
            elif job.mode == "staged":
                job.raw = [ds.chunk_bytes(job.tensor, job.chunk_id, commit)]
            elif job.mode == "ranges":
                job.raw = [ds.provider.get(job.storage_key, r) for r in job.ranges]
            else:
                # chunk_bytes primes the engine cache so projected columns
                # evaluated by the assembler reuse the same fetch
                job.raw = [ds.chunk_bytes(job.tensor, job.chunk_id, commit)]
            return
        except TensorLakeError:
            raise
        except Exception as e:  # transient backend failure: retry with backoff
            attempt += 1
            if attempt > retries:
                raise IoFailureError(f"fetch of {job.tensor}/{job.chunk_id} failed: {e}") from e
            time.sleep(0.05 * (2 ** (attempt - 1)))


def _decode_job(job: ChunkJob, ds, commit: str) -> None:
    state = ds._state_for(job.tensor, commit)
    dtype = state.schema.np_dtype
    if job.mode == "engine":
        return
    if job.mode == "ranges":
        for pos, gidx, local in job.rows:
            start, end, shape = job.sample_spans[local]
            if start == end:
                job.results[pos] = np.zeros(shape, dtype=dtype)
                continue
            for (rs, re), blob in zip(job.ranges, job.raw):
                if rs <= start and end <= re:
                    view_bytes = memoryview(blob)[start - rs : end - rs]
                    job.results[pos] = np.frombuffer(view_bytes, dtype=dtype).reshape(shape).copy()
                    break
        return
    data = job.raw[0]
    header = chunkfmt.parse_header(data)
    for pos, gidx, local in job.rows:
        arr = chunkfmt.decode_sample_from_header(data, header, local, dtype)
        if state.schema.is_link:
            job.results[pos] = arr  # resolved lazily by the assembler
        else:
            job.results[pos] = arr


class Loader:
    """Iterator of batches over a Dataset or DatasetView; every epoch yields
    each view row exactly once. With a fixed seed the order is deterministic."""

    def __init__(self, view, config: LoaderConfig, transform: Optional[Callable] = None):
        if not isinstance(view, DatasetView):
            view = identity_view(view)
        self.view = view
        self.config = config
        self.transform = transform
        self.last_epoch_stats: dict = {}

    # -- sizing -----------------------------------------------------------------

    def _budget(self, jobs: list[ChunkJob]) -> tuple[int, int]:
        ds = self.view.ds
        cfg = self.config
        columns = cfg.tensors if cfg.tensors is not None else self.view.tensors()
        per_row = 0
        for col in columns:
            for t in self.view.referenced_tensors(col):
                per_row += _mean_sample_bytes(ds._state_for(t, self.view.commit_id))
        batch_bytes = max(int(per_row * cfg.batch_size), 1)
        max_chunk = max((j.est_bytes for j in jobs), default=0)
        budget = (
            cfg.prefetch_batches * batch_bytes
            + (cfg.shuffle_buffer_bytes if cfg.shuffle else 0)
            + (cfg.num_fetch_workers + cfg.num_decode_workers) * max_chunk
        )
        return max(budget, max_chunk or 1), batch_bytes

    def _plan(self):
        cfg = self.config
        return plan_fetch_order(
            self.view,
            shuffle=cfg.shuffle,
            seed=cfg.seed,
            tensors=cfg.tensors,
            shuffle_buffer_bytes=cfg.shuffle_buffer_bytes,
        )

    # -- epoch ------------------------------------------------------------------

    def __iter__(self):
        cfg = self.config
        view = self.view
        ds = view.ds
        commit = view.commit_id
        columns = cfg.tensors if cfg.tensors is not None else view.tensors()
        delivery, jobs = self._plan()
        budget, batch_bytes = self._budget(jobs)
        meter = _Meter()
        self.last_epoch_stats = {"budget": budget, "jobs": len(jobs)}

        identity = view.is_identity
        ids_by_tensor = {}
        for col in columns:
            if identity:
                ids = ds.sample_id_list(col, commit=commit)
                ids_by_tensor[col] = ids
            else:
                ids_by_tensor[col] = None

        # jobs grouped per position for assembly
        jobs_for_pos: dict[int, list[ChunkJob]] = {}
        for job in jobs:
            for pos, _, _ in job.rows:
                jobs_for_pos.setdefault(pos, []).append(job)

        fetch_q: "queue.Queue[Optional[ChunkJob]]" = queue.Queue()
        decode_q: "queue.PriorityQueue" = queue.PriorityQueue()
        stop = threading.Event()
        failure: list[BaseException] = []

        def fetch_worker():
            while not stop.is_set():
                job = fetch_q.get()
                if job is None:
                    return
                try:
                    _fetch_job(job, ds, commit, cfg.fetch_retries)
                    decode_q.put((job.est_bytes, job.order, job))
                except BaseException as e:
                    job.error = e
                    failure.append(e)
                    job.done.set()
                    stop.set()

        def decode_worker():
            while not stop.is_set():
                _, order, job = decode_q.get()
                if job is None:
                    return
                try:
                    _decode_job(job, ds, commit)
                    job.raw = None
                    job.done.set()
                except BaseException as e:
                    job.error = e
                    failure.append(e)
                    job.done.set()
                    stop.set()

        active = [0]
        active_lock = threading.Lock()

        def admit_all():
            for job in jobs:
                if stop.is_set():
                    return
                est = max(job.est_bytes, 1)
                meter.wait_below(budget - est, predicate=lambda: active[0] == 0 or stop.is_set())
                if stop.is_set():
                    return
                meter.add(est)
                job._admitted = est
                with active_lock:
                    active[0] += 1
                fetch_q.put(job)

        fetchers = [threading.Thread(target=fetch_worker, daemon=True) for _ in range(cfg.num_fetch_workers)]
        decoders = [threading.Thread(target=decode_worker, daemon=True) for _ in range(cfg.num_decode_workers)]
        admitter = threading.Thread(target=admit_all, daemon=True)
        for t in fetchers + decoders:
            t.start()
        admitter.start()

        def release_row(job: ChunkJob, pos: int) -> None:
            value = job.results.pop(pos, None)
            job.pending -= 1
            if job.pending == 0:
                with active_lock:
                    active[0] -= 1
                meter.sub(getattr(job, "_admitted", 0))

        def row_value(pos: int) -> dict:
            for job in jobs_for_pos.get(pos, []):
                if not job.done.wait(timeout=300):
                    raise IoFailureError("loader stalled waiting for a fetch job")
                if job.error is not None:
                    raise job.error
            gidx = view.row_order[pos]
            row: dict[str, np.ndarray] = {}
            if identity:
                for job in jobs_for_pos.get(pos, []):
                    value = job.results.get(pos)
                    state = ds._state_for(job.tensor, commit)
                    if state.schema.is_link and value is not None and value.size:
                        from tensorlake.dataset import resolve_link

                        url = value.tobytes().decode("utf-8")
                        value = np.frombuffer(resolve_link(url), dtype=np.uint8).copy()
                    row[job.tensor] = value
                for col in columns:
                    if col not in row:
                        row[col] = ds.read(col, gidx, commit=commit)
            else:
                # projected columns evaluate against engine reads; chunk fetches
                # above primed the per-state caches
                for col in columns:
                    row[col] = view.value(col, pos)
            for job in jobs_for_pos.get(pos, []):
                release_row(job, pos)
            return row

        def collate(rows: list[tuple[int, dict]]) -> Batch:
            cols: dict[str, object] = {}
            for col in columns:
                values = [np.asarray(r[col]) for _, r in rows]
                shapes = {v.shape for v in values}
                cols[col] = np.stack(values) if len(shapes) == 1 else values
            indices = [view.row_order[pos] for pos, _ in rows]
            sample_ids = {}
            for col in columns:
                ids = ids_by_tensor.get(col)
                sample_ids[col] = [ids[i] for i in indices] if ids is not None else None
            return Batch(columns=cols, indices=indices, sample_ids=sample_ids)

        try:
            pending_rows: list[tuple[int, dict]] = []
            for pos in delivery:
                if failure:
                    raise failure[0]
                row = row_value(pos)
                if self.transform is not None:
                    try:
                        row = self.transform(dict(row))
                    except Exception as e:
                        if cfg.on_transform_error == "skip":
                            continue
                        raise TensorLakeError(
                            f"transform failed at row {view.row_order[pos]}: {e}"
                        ) from e
                pending_rows.append((pos, row))
                if len(pending_rows) == cfg.batch_size:
                    yield collate(pending_rows)
                    pending_rows = []
            if pending_rows and not cfg.drop_last:
                yield collate(pending_rows)
            self.last_epoch_stats["peak_bytes"] = meter.peak
        finally:
            stop.set()
            for _ in fetchers:
                fetch_q.put(None)
            for i in range(len(decoders)):
                decode_q.put((float("inf"), -(i + 1), None))
            self.last_epoch_stats["peak_bytes"] = meter.peak


def stream(view_or_dataset, config: Optional[LoaderConfig] = None, transform=None, **kwargs) -> Loader:
    """Build a Loader over a Dataset or DatasetView."""
    if config is None:
        config = LoaderConfig(**kwargs)
    return Loader(view_or_dataset, config, transform)
