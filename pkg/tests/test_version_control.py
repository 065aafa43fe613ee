import hashlib

import numpy as np
import pytest

from tensorlake import ChunkPolicy, MemoryProvider, create_dataset
from tensorlake.errors import (
    DirtyStateError,
    MergeConflictError,
    NothingToCommitError,
    ReadOnlyCommitError,
    SchemaMismatchError,
    UnknownTargetError,
)


def test_commit_snapshot_semantics(scalar_ds):
    ds = scalar_ds
    ds.extend("x", [np.int64(i) for i in range(10)])
    c = ds.commit("ten")
    ds.extend("x", [np.int64(i) for i in range(5)])
    assert ds.length("x", commit=c) == 10
    assert ds.length("x") == 15


def test_commit_diff_records_updates(scalar_ds):
    ds = scalar_ds
    ds.extend("x", [np.int64(i) for i in range(8)])
    c1 = ds.commit("base")
    for i in (1, 4, 6):
        ds.update("x", i, np.int64(100 + i))
    c2 = ds.commit("edits")
    diff = ds.diff(c1, c2)["x"]
    assert diff["updated_b"] == [1, 4, 6]
    assert diff["added_b"] == []
    assert diff["updated_a"] == [] and diff["added_a"] == []


def test_commit_clean_state_rejected(scalar_ds):
    ds = scalar_ds
    ds.append("x", np.int64(1))
    ds.commit("one")
    with pytest.raises(NothingToCommitError):
        ds.commit("empty")
    ds.commit("forced", allow_empty=True)


def test_linear_diff_matches_example(scalar_ds):
    ds = scalar_ds
    root = ds.commit("root", allow_empty=True)
    ds.extend("x", [np.int64(i) for i in range(5)])
    ds.update("x", 1, np.int64(11))
    ds.update("x", 3, np.int64(33))
    head = ds.commit("head")
    diff = ds.diff(root, head)["x"]
    assert diff["added_b"] == [0, 1, 2, 3, 4]
    assert diff["updated_b"] == [1, 3]


def test_diff_identity_is_empty(scalar_ds):
    ds = scalar_ds
    ds.append("x", np.int64(1))
    c = ds.commit("c")
    diff = ds.diff(c, c)["x"]
    assert diff["added_a"] == diff["added_b"] == []
    assert diff["updated_a"] == diff["updated_b"] == []


def test_diverged_disjoint_updates_do_not_intersect(scalar_ds):
    ds = scalar_ds
    ds.extend("x", [np.int64(i) for i in range(10)])
    ds.commit("base")
    ds.checkout("other", create=True)
    for i in (0, 1, 2):
        ds.update("x", i, np.int64(50 + i))
    ds.commit("theirs")
    ds.checkout("main")
    for i in (7, 8):
        ds.update("x", i, np.int64(70 + i))
    ds.commit("ours")
    diff = ds.diff("main", "other")["x"]
    assert set(diff["updated_a"]) & set(diff["updated_b"]) == set()
    assert diff["updated_a"] == [7, 8]
    assert diff["updated_b"] == [0, 1, 2]


def test_branch_isolation(scalar_ds):
    ds = scalar_ds
    ds.extend("x", [np.int64(i) for i in range(3)])
    ds.commit("base")
    ds.checkout("exp", create=True)
    ds.append("x", np.int64(99))
    assert ds.length("x") == 4
    ds.commit("exp grows")
    ds.checkout("main")
    assert ds.length("x") == 3


def test_checkout_historic_commit_is_read_only(scalar_ds):
    ds = scalar_ds
    ds.append("x", np.int64(1))
    c = ds.commit("one")
    ds.checkout(c)
    assert int(ds.read("x", 0)) == 1
    with pytest.raises(ReadOnlyCommitError):
        ds.append("x", np.int64(2))
    ds.checkout("fix", create=True)  # a branch at the historic commit unlocks writes
    ds.append("x", np.int64(2))
    assert ds.length("x") == 2


def test_checkout_unknown_target(scalar_ds):
    with pytest.raises(UnknownTargetError):
        scalar_ds.checkout("nope")


def test_checkout_dirty_blocked_unless_forced(scalar_ds):
    ds = scalar_ds
    ds.append("x", np.int64(1))
    ds.commit("base")
    ds.checkout("side", create=True)
    ds.checkout("main")
    ds.append("x", np.int64(2))
    with pytest.raises(DirtyStateError):
        ds.checkout("side")
    ds.checkout("side", force=True)
    ds.checkout("main", force=True)
    assert ds.length("x") == 2  # flushed working state survived the detour


def test_resolve_chunk_traversal_base_cases(scalar_ds):
    ds = scalar_ds
    ds.extend("x", [np.int64(i) for i in range(4)])
    root = ds.commit("root")
    mid = ds.commit("mid", allow_empty=True)
    state = ds._state_for("x")
    chunk_id = state.chunk_enc.rows()[0][1]
    # never modified: resolves to the root commit's copy from a grandchild
    key = ds.tree.resolve_chunk("x", chunk_id, ds.commit_id)
    assert f"versions/{root}/" in key
    # rewritten at the child: child and descendants see the child's copy
    ds.update("x", 0, np.int64(50))
    child = ds.commit("rewrite")
    key_child = ds.tree.resolve_chunk("x", chunk_id, child)
    assert f"versions/{child}/" in key_child
    key_root = ds.tree.resolve_chunk("x", chunk_id, root)
    assert f"versions/{root}/" in key_root


def test_committed_bytes_never_change(scalar_ds, rng):
    ds = scalar_ds
    ds.extend("x", [np.int64(i) for i in range(50)])
    c = ds.commit("base")

    def reachable_hash(commit):
        h = hashlib.sha256()
        for key in ds.provider.list(f"versions/{commit}/"):
            h.update(key.encode())
            h.update(ds.provider.get(key))
        return h.hexdigest()

    before = reachable_hash(c)
    for _ in range(60):
        op = rng.integers(3)
        if op == 0:
            ds.append("x", np.int64(int(rng.integers(100))))
        elif op == 1 and ds.length("x"):
            ds.update("x", int(rng.integers(ds.length("x"))), np.int64(7))
        else:
            ds.commit("c", allow_empty=True)
    ds.flush()
    assert reachable_hash(c) == before


# --- randomized history vs naive full-copy oracle -------------------------------


class NaiveOracle:
    """Keeps a complete copy of every branch's rows and snapshots whole
    datasets at each commit, the way a versionless store would."""

    def __init__(self):
        self.branch_rows = {"main": []}
        self.snapshots = {}
        self.bytes_stored = 0

    def append(self, branch, value):
        self.branch_rows[branch].append(value.copy())

    def update(self, branch, index, value):
        self.branch_rows[branch][index] = value.copy()

    def commit(self, branch, commit_id):
        rows = [v.copy() for v in self.branch_rows[branch]]
        self.snapshots[commit_id] = rows
        self.bytes_stored += sum(v.nbytes for v in rows)

    def fork(self, src, dst):
        self.branch_rows[dst] = [v.copy() for v in self.branch_rows[src]]


def test_random_history_matches_naive_oracle(mem, rng):
    policy = ChunkPolicy(min_bytes=512, max_bytes=1024)
    ds = create_dataset(
        mem, {"x": {"htype": "generic", "dtype": "float64", "ndim": 1}}, policy=policy
    )
    oracle = NaiveOracle()
    branches = ["main"]
    commits = []

    def sample():
        return rng.standard_normal(int(rng.integers(1, 24)))

    for step in range(200):
        op = rng.random()
        branch = ds.branch
        if op < 0.45:
            v = sample()
            ds.append("x", v)
            oracle.append(branch, v)
        elif op < 0.7 and ds.length("x") > 0:
            i = int(rng.integers(ds.length("x")))
            v = sample()
            ds.update("x", i, v)
            oracle.update(branch, i, v)
        elif op < 0.85:
            cid = ds.commit(f"step {step}", allow_empty=True)
            oracle.commit(branch, cid)
            commits.append(cid)
        elif len(branches) < 5 and rng.random() < 0.5:
            name = f"b{len(branches)}"
            ds.checkout(name, create=True, force=True)
            oracle.fork(branch, name)
            branches.append(name)
        else:
            target = branches[int(rng.integers(len(branches)))]
            ds.checkout(target, force=True)

    # every read at every commit equals the oracle's full copy
    for cid in commits:
        rows = oracle.snapshots[cid]
        assert ds.length("x", commit=cid) == len(rows)
        for i, want in enumerate(rows):
            np.testing.assert_array_equal(ds.read("x", i, commit=cid), want)


def test_copy_on_write_beats_full_copies(mem, rng):
    # many commits, each touching a small fraction of the chunks
    policy = ChunkPolicy(min_bytes=4096, max_bytes=8192)
    ds = create_dataset(
        mem, {"x": {"htype": "generic", "dtype": "float64", "ndim": 1}}, policy=policy
    )
    oracle = NaiveOracle()
    for _ in range(400):
        v = rng.standard_normal(64)  # 512 B, 16 per chunk -> 25 chunks
        ds.append("x", v)
        oracle.append("main", v)
    cid = ds.commit("base")
    oracle.commit("main", cid)
    for step in range(24):
        for _ in range(2):  # touch at most 2 of 25 chunks
            i = int(rng.integers(400))
            v = rng.standard_normal(64)
            ds.update("x", i, v)
            oracle.update("main", i, v)
        cid = ds.commit(f"s{step}")
        oracle.commit("main", cid)
    ours = sum(len(mem.get(k)) for k in mem.list("versions/"))
    assert oracle.bytes_stored / ours >= 5.0


# --- merge ------------------------------------------------------------------------


def two_branch_dataset(mem, rng, n=12):
    ds = create_dataset(
        mem,
        {"x": {"htype": "generic", "dtype": "int64", "ndim": 0}},
        policy=ChunkPolicy(min_bytes=64, max_bytes=128),
    )
    ds.extend("x", [np.int64(i) for i in range(n)])
    ds.commit("base")
    return ds


def test_merge_disjoint_edits_union(mem, rng):
    ds = two_branch_dataset(mem, rng)
    ds.checkout("other", create=True)
    ds.update("x", 2, np.int64(200))
    ds.append("x", np.int64(500))
    ds.commit("theirs")
    ds.checkout("main")
    ds.update("x", 7, np.int64(700))
    ds.commit("ours")
    ds.merge("other")
    values = [int(v) for v in ds.read("x", slice(None))]
    assert values == [0, 1, 200, 3, 4, 5, 6, 700, 8, 9, 10, 11, 500]
    ids = ds.sample_id_list("x")
    assert len(ids) == len(set(ids))


def test_merge_added_rows_not_duplicated_on_remerge(mem, rng):
    ds = two_branch_dataset(mem, rng)
    ds.checkout("other", create=True)
    ds.append("x", np.int64(500))
    ds.commit("theirs")
    ds.checkout("main")
    ds.merge("other")
    n = ds.length("x")
    ds.merge("other")  # re-merging the same branch adds nothing
    assert ds.length("x") == n


def test_merge_conflict_policies(mem, rng):
    for policy, expected in (("ours", 1), ("theirs", 2)):
        provider = MemoryProvider()
        ds = two_branch_dataset(provider, rng)
        ds.checkout("other", create=True)
        ds.update("x", 0, np.int64(2))
        ds.commit("theirs")
        ds.checkout("main")
        ds.update("x", 0, np.int64(1))
        ds.commit("ours")
        ds.merge("other", policy=policy)
        assert int(ds.read("x", 0)) == expected


def test_merge_conflict_fail_lists_sample_ids(mem, rng):
    ds = two_branch_dataset(mem, rng)
    conflicted_id = ds.sample_id("x", 3)
    ds.checkout("other", create=True)
    ds.update("x", 3, np.int64(31))
    ds.commit("theirs")
    ds.checkout("main")
    ds.update("x", 3, np.int64(32))
    ds.commit("ours")
    with pytest.raises(MergeConflictError) as exc:
        ds.merge("other")
    assert conflicted_id in exc.value.conflicts["x"]


def test_merge_rejects_schema_mismatch(mem, rng):
    ds = two_branch_dataset(mem, rng)
    ds.checkout("other", create=True)
    ds.add_tensor("extra", htype="generic", dtype="int64")
    ds.commit("schema change")
    ds.checkout("main")
    with pytest.raises(SchemaMismatchError):
        ds.merge("other")


def test_merge_randomized_scenarios(rng):
    for scenario in range(15):
        provider = MemoryProvider()
        n = int(rng.integers(6, 20))
        ds = two_branch_dataset(provider, rng, n=n)
        truth = {ds.sample_id("x", i): i for i in range(n)}
        values = {sid: i for sid, i in zip(ds.sample_id_list("x"), range(n))}

        ours_edit = {int(i) for i in rng.choice(n, size=int(rng.integers(1, 4)), replace=False)}
        theirs_edit = {int(i) for i in rng.choice(n, size=int(rng.integers(1, 4)), replace=False)}
        theirs_add = int(rng.integers(0, 3))

        ds.checkout("other", create=True)
        their_ids = ds.sample_id_list("x")
        for i in theirs_edit:
            ds.update("x", i, np.int64(1000 + i))
        added_values = []
        for j in range(theirs_add):
            v = np.int64(5000 + j)
            ds.append("x", v)
            added_values.append(int(v))
        ds.commit("theirs")

        ds.checkout("main")
        for i in ours_edit:
            ds.update("x", i, np.int64(2000 + i))
        ds.commit("ours")

        conflicts = ours_edit & theirs_edit
        if conflicts:
            with pytest.raises(MergeConflictError):
                ds.merge("other", policy="fail_on_conflict")
        ds.merge("other", policy="ours")

        got = [int(v) for v in ds.read("x", slice(None))]
        expected = []
        for i in range(n):
            if i in ours_edit:
                expected.append(2000 + i)
            elif i in theirs_edit:
                expected.append(1000 + i)
            else:
                expected.append(i)
        expected.extend(added_values)
        assert got == expected, f"scenario {scenario}"
