"""Command-line surface: dataset lifecycle, ingest, query, versioning, stats,
and the benchmark harness. Every subcommand is a thin adapter over the API;
--format json emits machine-readable output on stdout and errors go to stderr
as structured JSON with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional

import numpy as np

from tensorlake.chunk import ChunkPolicy
from tensorlake.dataset import Dataset, create_dataset, open_dataset
from tensorlake.errors import TensorLakeError
from tensorlake.htype import HtypeSchema
from tensorlake.loader import LoaderConfig, stream
from tensorlake.storage import (
    CountingProvider,
    FilesystemProvider,
    SimulatedRemoteProvider,
    chain,
    MemoryProvider,
)
from tensorlake.views import materialize, view_from_indices

ROOT_ENV = "TENSORLAKE_ROOT"


def _root(args) -> str:
    root = args.root or os.environ.get(ROOT_ENV)
    if not root:
        raise TensorLakeError("no dataset root: pass --root or set TENSORLAKE_ROOT")
    return root


def _open(args, writable: bool = False) -> Dataset:
    ds = open_dataset(_root(args), branch=args.branch, read_only=not writable)
    version = getattr(args, "version", None)
    if version and not writable:
        ds = open_dataset(_root(args), commit=ds._resolve_commit(version))
    return ds


def _emit(args, payload: dict) -> None:
    if args.format == "json":
        print(json.dumps(payload, indent=2, default=_jsonable))
        return
    _print_table(payload)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"not serializable: {type(value)}")


def _print_table(payload: dict, indent: str = "") -> None:
    for key, value in payload.items():
        if isinstance(value, dict):
            print(f"{indent}{key}:")
            _print_table(value, indent + "  ")
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            for item in value:
                print(f"{indent}{key}[]:")
                _print_table(item, indent + "  ")
        else:
            print(f"{indent}{key}: {value}")


# --- subcommands -----------------------------------------------------------------


def cmd_init(args) -> dict:
    schemas = {}
    for part in args.tensors.split(","):
        bits = part.strip().split(":")
        if len(bits) < 2:
            raise TensorLakeError(f"--tensors entries are name:htype[:dtype], got {part!r}")
        name, htype = bits[0], bits[1]
        extra = {}
        if len(bits) > 2:
            extra["dtype"] = bits[2]
        if htype in ("image", "binary_mask"):
            extra.setdefault("dtype", "uint8")
        elif htype == "class_label":
            extra.setdefault("dtype", "int64")
            extra.setdefault("ndim", 0)
        elif htype == "bbox":
            extra.setdefault("dtype", "float32")
        elif htype == "text":
            extra.setdefault("dtype", "uint8")
            extra.setdefault("ndim", 1)
        schemas[name] = HtypeSchema(name=name, htype=htype, **extra)
    policy = ChunkPolicy(min_bytes=args.min_bytes, max_bytes=args.max_bytes)
    ds = create_dataset(_root(args), schemas, policy=policy)
    ds.close()
    return {"created": _root(args), "tensors": sorted(schemas)}


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise TensorLakeError(f"bad shape {text!r}, expected like 250x250x3") from None


def cmd_ingest(args) -> dict:
    ds = _open(args, writable=True)
    try:
        appended = 0
        if args.random:
            shape = _parse_shape(args.random)
            rng = np.random.default_rng(args.seed)
            names = ds.tensors()
            image_tensor = args.tensor or ("images" if "images" in names else names[0])
            label_tensor = "labels" if "labels" in names and image_tensor != "labels" else None
            # one pseudo-random template, rolled per sample: cheap to generate,
            # incompressible enough to behave like the paper's random dataset
            template = rng.integers(0, 256, size=int(np.prod(shape)) + 257, dtype=np.uint8)
            batch = []
            labels = []
            for i in range(args.count):
                offset = (i * 131) % 257
                batch.append(template[offset : offset + int(np.prod(shape))].reshape(shape))
                if label_tensor:
                    labels.append(int(rng.integers(args.classes)))
                if len(batch) == 256 or i == args.count - 1:
                    ds.extend(image_tensor, batch)
                    if label_tensor:
                        ds.extend(label_tensor, [np.int64(l) for l in labels])
                    appended += len(batch)
                    batch, labels = [], []
        elif args.images:
            files = sorted(
                f for f in os.listdir(args.images)
                if os.path.isfile(os.path.join(args.images, f))
            )
            labels = None
            if args.labels:
                with open(args.labels) as fh:
                    labels = [int(line.strip()) for line in fh if line.strip()]
            names = ds.tensors()
            image_tensor = args.tensor or ("images" if "images" in names else names[0])
            for i, fname in enumerate(files):
                with open(os.path.join(args.images, fname), "rb") as fh:
                    payload = np.frombuffer(fh.read(), dtype=np.uint8)
                ds.append(image_tensor, payload, raw=True)
                if labels is not None and "labels" in names:
                    ds.append("labels", np.int64(labels[i]))
                appended += 1
        else:
            raise TensorLakeError("ingest needs --random HxWxC or --images DIR")
        ds.flush()
        return {"appended": appended, "rows": ds.num_rows()}
    finally:
        ds.close()


def cmd_cat(args) -> dict:
    ds = _open(args)
    indices = [int(i) for i in args.index]
    values = ds.read(args.tensor, indices)
    out = {"tensor": args.tensor, "indices": indices}
    if args.export:
        os.makedirs(args.export, exist_ok=True)
        paths = []
        for i, value in zip(indices, values):
            path = os.path.join(args.export, f"{args.tensor.replace('/', '_')}_{i}.bin")
            with open(path, "wb") as fh:
                fh.write(np.ascontiguousarray(value).tobytes())
            paths.append(path)
        out["exported"] = paths
    else:
        out["values"] = [v.tolist() for v in values]
        out["shapes"] = [list(v.shape) for v in values]
    return out


def cmd_query(args) -> dict:
    ds = _open(args)
    view = ds.query(args.text, version=getattr(args, "version", None))
    out = {
        "rows": view.row_order,
        "commit": view.commit_id,
        "count": len(view),
    }
    if view.group_boundaries is not None:
        out["group_boundaries"] = view.group_boundaries
    columns: dict[str, list] = {}
    export_dir = args.export
    if export_dir:
        os.makedirs(export_dir, exist_ok=True)
        out["exported"] = []
    for name in view.tensors():
        rendered = []
        for pos in range(len(view)):
            value = view.value(name, pos)
            if isinstance(value, np.ndarray) and value.ndim > 0:
                if export_dir:
                    path = os.path.join(
                        export_dir, f"{name.replace('/', '_')}_{view.row_order[pos]}.bin"
                    )
                    with open(path, "wb") as fh:
                        fh.write(np.ascontiguousarray(value).tobytes())
                    out["exported"].append(path)
                rendered.append({"shape": list(value.shape), "dtype": str(value.dtype)})
            else:
                rendered.append(_scalar(value))
        columns[name] = rendered
    out["columns"] = columns
    if args.save:
        out["view_key"] = view.save()
    return out


def _scalar(value):
    if isinstance(value, np.ndarray):
        return value.item() if value.size == 1 else value.tolist()
    if isinstance(value, (np.integer, np.floating, np.bool_)):
        return value.item()
    return value


def cmd_commit(args) -> dict:
    ds = _open(args, writable=True)
    try:
        commit_id = ds.commit(args.message, allow_empty=args.allow_empty)
        return {"commit": commit_id, "branch": ds.branch}
    finally:
        ds.close()


def cmd_checkout(args) -> dict:
    ds = _open(args, writable=True)
    try:
        ds.checkout(args.target, create=args.create)
        return {"branch": ds.branch, "commit": ds.commit_id, "created": args.create}
    finally:
        ds.close()


def cmd_branch(args) -> dict:
    ds = _open(args, writable=bool(args.name))
    try:
        if args.name:
            head = ds.tree.create_branch(args.name, ds.commit_id)
            return {"created": args.name, "head": head}
        return {"branches": {name: head for name, head in sorted(ds.tree.branches.items())}}
    finally:
        ds.close()


def cmd_diff(args) -> dict:
    ds = _open(args)
    return {"a": args.a, "b": args.b, "tensors": ds.diff(args.a, args.b)}


def cmd_merge(args) -> dict:
    ds = _open(args, writable=True)
    try:
        commit_id = ds.merge(args.source, policy=args.policy)
        return {"merged": args.source, "policy": args.policy, "commit": commit_id}
    finally:
        ds.close()


def cmd_log(args) -> dict:
    ds = _open(args)
    return {
        "branch": args.branch,
        "commits": [
            {
                "commit": n.commit_id,
                "parent": n.parent,
                "branch": n.branch,
                "message": n.message,
                "timestamp": n.timestamp,
            }
            for n in ds.log()
        ],
    }


def cmd_stats(args) -> dict:
    ds = _open(args)
    return ds.stats()


def cmd_rechunk(args) -> dict:
    ds = _open(args, writable=True)
    try:
        out = {}
        tensors = [args.tensor] if args.tensor else ds.tensors()
        for name in tensors:
            out[name] = ds.rechunk(name)
        ds.flush()
        return out
    finally:
        ds.close()


def cmd_materialize(args) -> dict:
    ds = _open(args)
    if args.query:
        view = ds.query(args.query, version=getattr(args, "version", None))
    elif args.indices:
        indices = [int(i) for i in args.indices.split(",")]
        view = view_from_indices(ds, getattr(args, "version", None), indices)
    else:
        raise TensorLakeError("materialize needs --query or --indices")
    dest = materialize(view, args.dest, skip_links=args.skip_links)
    stats = dest.stats()
    dest.close()
    return {"dest": args.dest, "rows": len(view), "tensors": stats["tensors"]}


def cmd_bench(args) -> dict:
    base = FilesystemProvider(_root(args))
    provider = base
    if args.latency_ms > 0:
        provider = SimulatedRemoteProvider(provider, latency_s=args.latency_ms / 1000.0)
    counter = CountingProvider(provider)
    wrapped = counter
    cache_bytes = os.environ.get("TENSORLAKE_CACHE_BYTES")
    if cache_bytes:
        wrapped = chain(MemoryProvider(), counter, int(cache_bytes))
    ds = open_dataset(wrapped, read_only=True, branch=args.branch)
    config = LoaderConfig(
        batch_size=args.batch_size,
        shuffle=args.shuffle,
        num_fetch_workers=args.workers,
        num_decode_workers=args.decode_workers,
        prefetch_batches=args.prefetch,
        seed=args.seed,
        tensors=args.tensors.split(",") if args.tensors else None,
    )
    loader = stream(ds, config)
    lines = ["config,epoch_seconds,samples_per_second,bytes_fetched,fetch_calls"]
    label = (
        f"workers={args.workers};batch={args.batch_size};shuffle={args.shuffle};"
        f"latency_ms={args.latency_ms}"
    )
    for _epoch in range(args.epochs):
        counter.reset()
        start = time.perf_counter()
        n = 0
        for batch in loader:
            n += len(batch)
        elapsed = time.perf_counter() - start
        lines.append(
            f"{label},{elapsed:.4f},{n / elapsed:.2f},{counter.bytes_fetched},{counter.get_calls}"
        )
    print("\n".join(lines))
    return {}


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subparser from clobbering a flag given before the
    # subcommand; main() fills in the fallbacks
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=argparse.SUPPRESS,
                        help=f"dataset root directory (or ${ROOT_ENV})")
    common.add_argument("--branch", default=argparse.SUPPRESS, help="branch to operate on")
    common.add_argument("--format", choices=("table", "json"), default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="tensorlake",
        description="Chunked tensor storage with version control, queries, and streaming",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name: str, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add_parser("init", help="create an empty dataset")
    p.add_argument("--tensors", required=True, help="name:htype[,name:htype...]")
    p.add_argument("--min-bytes", type=int, default=ChunkPolicy().min_bytes)
    p.add_argument("--max-bytes", type=int, default=ChunkPolicy().max_bytes)
    p.set_defaults(func=cmd_init)

    p = add_parser("ingest", help="append samples from files or a synthetic spec")
    p.add_argument("--random", help="synthetic sample shape, e.g. 250x250x3")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", help="directory of image files (stored pass-through)")
    p.add_argument("--labels", help="labels file, one integer per line")
    p.add_argument("--tensor", help="target tensor (default: images)")
    p.set_defaults(func=cmd_ingest)

    p = add_parser("cat", help="print samples")
    p.add_argument("tensor")
    p.add_argument("index", nargs="+")
    p.add_argument("--version")
    p.add_argument("--export", help="write raw sample payloads to this directory")
    p.set_defaults(func=cmd_cat)

    p = add_parser("query", help="run a query and print the view")
    p.add_argument("text")
    p.add_argument("--version")
    p.add_argument("--export", help="write array payloads to this directory")
    p.add_argument("--save", action="store_true", help="persist the view under the root")
    p.set_defaults(func=cmd_query)

    p = add_parser("commit", help="freeze the working state")
    p.add_argument("-m", "--message", default="")
    p.add_argument("--allow-empty", action="store_true")
    p.set_defaults(func=cmd_commit)

    p = add_parser("checkout", help="switch to a branch or commit")
    p.add_argument("target")
    p.add_argument("-b", "--create", action="store_true")
    p.set_defaults(func=cmd_checkout)

    p = add_parser("branch", help="list branches or create one")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_branch)

    p = add_parser("diff", help="compare two versions")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff)

    p = add_parser("merge", help="merge a branch into the current one")
    p.add_argument("source")
    p.add_argument("--policy", choices=("ours", "theirs", "fail_on_conflict"),
                   default="fail_on_conflict")
    p.set_defaults(func=cmd_merge)

    p = add_parser("log", help="list commits reachable from the branch head")
    p.set_defaults(func=cmd_log)

    p = add_parser("stats", help="dataset summary")
    p.set_defaults(func=cmd_stats)

    p = add_parser("rechunk", help="re-pack fragmented chunks")
    p.add_argument("tensor", nargs="?")
    p.set_defaults(func=cmd_rechunk)

    p = add_parser("materialize", help="copy a view into a fresh dataset")
    p.add_argument("dest")
    p.add_argument("--query")
    p.add_argument("--indices", help="comma-separated row indices")
    p.add_argument("--version")
    p.add_argument("--skip-links", action="store_true")
    p.set_defaults(func=cmd_materialize)

    p = add_parser("bench", help="stream the dataset and report throughput as CSV")
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--decode-workers", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--prefetch", type=int, default=2)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--tensors", help="comma-separated subset to stream")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, fallback in (("root", None), ("branch", "main"), ("format", "table")):
        if not hasattr(args, name):
            setattr(args, name, fallback)
    try:
        payload = args.func(args)
    except TensorLakeError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    if payload:
        _emit(args, payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
