import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adi.datapool import (
    MIX_TABLE,
    Dataset,
    DatasetPool,
    MixSpec,
    build_mixed_target,
    load_csv,
    load_dataset,
    load_pool,
    random_orthogonal,
    rmt_decode,
    rmt_encode,
    save_csv,
    save_dataset,
    save_pool,
    synth_pool,
)
from adi.errors import EmptyClass, IndivisibleDim, MalformedFile, PackingFailure, SpecMismatch


def test_shipped_pool_shape():
    pool = synth_pool(7, 10, 16, 100, 4.0, seed=1)
    assert len(pool.datasets) == 7
    assert pool.num_classes == 70
    assert len(pool) == 7000
    assert pool.dim == 16


def test_centroid_separation_brute_force():
    sep = 4.0
    pool = synth_pool(4, 5, 6, 200, sep, seed=2)
    means = np.array([ds.classes[c].mean(axis=0) for ds in pool.datasets for c in ds.class_ids])
    # empirical means wobble by about sigma/sqrt(n); leave room for that
    D = np.linalg.norm(means[:, None] - means[None], axis=-1)
    np.fill_diagonal(D, np.inf)
    assert D.min() >= sep - 0.5


def test_two_1d_blobs_are_separable():
    pool = synth_pool(1, 2, 1, 10, 6.0, seed=0)
    a, b = (pool.datasets[0].classes[c][:, 0] for c in (0, 1))
    lo, hi = sorted([a, b], key=np.mean)
    assert lo.max() < hi.min()


def test_synth_is_deterministic(tmp_path):
    for i in range(2):
        save_pool(synth_pool(2, 3, 4, 5, 3.0, seed=9), tmp_path / f"p{i}.adip")
    assert (tmp_path / "p0.adip").read_bytes() == (tmp_path / "p1.adip").read_bytes()


def test_packing_failure():
    with pytest.raises(PackingFailure):
        synth_pool(1, 50, 1, 5, 10.0, seed=0, radius=1.0)


def test_dataset_rejects_empty_class():
    with pytest.raises(EmptyClass):
        Dataset("x", {0: np.zeros((0, 3))})


def test_mixed_target_table_row():
    pool = synth_pool(7, 10, 4, 10, 4.0, seed=1)
    target, reduced = build_mixed_target(pool, MixSpec(MIX_TABLE[0], 10, seed=1))
    assert target.class_ids == list(range(10))
    sources = [name for name, _ in target.provenance.values()]
    counts = [sources.count(ds.name) for ds in pool.datasets]
    assert tuple(counts) == MIX_TABLE[0]
    assert reduced.num_classes == 60
    left = {(ds.name, c) for ds in reduced.datasets for c in ds.class_ids}
    assert left.isdisjoint(set(target.provenance.values()))


def test_mixed_target_keep_variant():
    pool = synth_pool(7, 10, 4, 10, 4.0, seed=1)
    target, kept = build_mixed_target(pool, MixSpec(MIX_TABLE[0], 10, seed=1), keep_in_pool=True)
    assert kept.num_classes == 70
    for k, (name, cid) in target.provenance.items():
        np.testing.assert_array_equal(target.classes[k], kept.by_name(name).classes[cid])


def test_mix_spec_mismatch():
    pool = synth_pool(2, 3, 2, 5, 3.0, seed=0)
    with pytest.raises(SpecMismatch):
        build_mixed_target(pool, MixSpec((4, 0), 4, seed=0))
    with pytest.raises(SpecMismatch):
        MixSpec((1, 2), 10, seed=0)


def test_random_mix_spec_is_valid():
    pool = synth_pool(7, 10, 8, 5, 3.0, seed=0)
    spec = MixSpec.random(pool, 10, seed=4)
    assert sum(spec.counts) == 10 and len(spec.counts) == 7


def test_rmt_roundtrip_and_norms(small_pool):
    ds = small_pool.datasets[0]
    enc = rmt_encode(ds, 1, seed=5)
    for c in ds.class_ids:
        np.testing.assert_allclose(np.linalg.norm(enc.classes[c], axis=1),
                                   np.linalg.norm(ds.classes[c], axis=1), atol=1e-9)
    dec = rmt_decode(enc, 1, seed=5)
    for c in ds.class_ids:
        np.testing.assert_allclose(dec.classes[c], ds.classes[c], atol=1e-9)


def test_rmt_indivisible(small_pool):
    with pytest.raises(IndivisibleDim):
        rmt_encode(small_pool.datasets[0], 2, seed=0)


@settings(max_examples=30, deadline=None)
@given(blocks=st.sampled_from([1, 2, 3, 6]), seed=st.integers(0, 10_000))
def test_rmt_blockwise_isometry(blocks, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset("d", {0: rng.normal(size=(8, 6))})
    enc = rmt_encode(ds, blocks, seed)
    w = 6 // blocks
    for j in range(blocks):
        a = ds.classes[0][:, j * w:(j + 1) * w]
        b = enc.classes[0][:, j * w:(j + 1) * w]
        Da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        Db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        np.testing.assert_allclose(Da, Db, atol=1e-9)


def test_random_orthogonal_is_orthogonal():
    Q = random_orthogonal(7, np.random.default_rng(1))
    np.testing.assert_allclose(Q @ Q.T, np.eye(7), atol=1e-12)


def test_dataset_file_roundtrip(tmp_path, small_pool):
    ds = small_pool.datasets[1]
    save_dataset(ds, tmp_path / "d.adid")
    back = load_dataset(tmp_path / "d.adid")
    assert back.class_ids == ds.class_ids
    for c in ds.class_ids:
        assert back.classes[c].tobytes() == ds.classes[c].tobytes()


def test_pool_file_roundtrip(tmp_path, small_pool):
    save_pool(small_pool, tmp_path / "p.adip")
    back = load_pool(tmp_path / "p.adip")
    save_pool(back, tmp_path / "q.adip")
    assert (tmp_path / "p.adip").read_bytes() == (tmp_path / "q.adip").read_bytes()
    assert [d.name for d in back.datasets] == [d.name for d in small_pool.datasets]


def test_dataset_header_layout(tmp_path):
    ds = Dataset("d", {3: np.array([[1.0, 2.0]])})
    save_dataset(ds, tmp_path / "d.adid")
    raw = (tmp_path / "d.adid").read_bytes()
    assert raw[:4] == b"ADID"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:10] == (2).to_bytes(4, "little")
    assert raw[10:14] == (1).to_bytes(4, "little")
    assert raw[14:18] == (3).to_bytes(4, "little")
    assert raw[18:22] == (1).to_bytes(4, "little")
    assert np.frombuffer(raw[22:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("cut", [2, 9, 20, -3])
def test_truncated_file_reports_offset(tmp_path, small_pool, cut):
    save_dataset(small_pool.datasets[0], tmp_path / "d.adid")
    raw = (tmp_path / "d.adid").read_bytes()
    (tmp_path / "t.adid").write_bytes(raw[:cut])
    with pytest.raises(MalformedFile) as err:
        load_dataset(tmp_path / "t.adid")
    assert err.value.offset is not None


def test_bad_magic(tmp_path):
    (tmp_path / "x.adid").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(MalformedFile):
        load_dataset(tmp_path / "x.adid")


def test_csv_import(tmp_path):
    text = "f0,f1,label\n0.5,1.0,2\n1.5,2.0,0\n2.5,3.0,2\n"
    (tmp_path / "d.csv").write_text(text)
    ds = load_csv(tmp_path / "d.csv")
    assert ds.class_ids == [0, 2]
    np.testing.assert_array_equal(ds.classes[2], [[0.5, 1.0], [2.5, 3.0]])
    save_csv(ds, tmp_path / "e.csv")
    again = load_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(again.classes[2], ds.classes[2])


def test_stratified_split(small_pool):
    ds = small_pool.datasets[0]
    train, test = ds.split(0.75, seed=0)
    for c in ds.class_ids:
        assert len(train.classes[c]) == 15 and len(test.classes[c]) == 5


def test_pool_rejects_mixed_dims():
    a = Dataset("a", {0: np.zeros((1, 2))})
    b = Dataset("b", {0: np.zeros((1, 3))})
    with pytest.raises(ValueError):
        DatasetPool([a, b])


def test_mix_table_rows():
    assert MIX_TABLE == (
        (1, 2, 2, 2, 1, 2, 0),
        (0, 1, 4, 0, 3, 1, 1),
        (1, 1, 2, 1, 0, 3, 2),
        (3, 2, 1, 1, 1, 1, 1),
        (2, 3, 0, 1, 1, 0, 3),
    )
    assert all(sum(r) == 10 for r in MIX_TABLE)
