import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedfsl.data import (
    DataFormatError,
    Dataset,
    EpisodeInfeasibleError,
    _largest_remainder_counts,
    load_digits_like,
    make_synthetic_blobs,
    partition,
    rng_stream,
    sample_batch,
    sample_episode,
    save_digits_like,
)


# ---------------------------------------------------------------------------
# blobs


def test_blobs_spread_zero_collapses_to_means():
    ds = make_synthetic_blobs(3, 10, 4, spread=0.0, seed=0)
    for c in range(3):
        rows = ds.inputs[ds.labels == c]
        assert np.all(rows == rows[0])


def test_blobs_deterministic_under_seed():
    a = make_synthetic_blobs(4, 5, 3, spread=1.0, seed=9)
    b = make_synthetic_blobs(4, 5, 3, spread=1.0, seed=9)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    c = make_synthetic_blobs(4, 5, 3, spread=1.0, seed=10)
    assert not np.array_equal(a.inputs, c.inputs)


def test_blobs_counts():
    ds = make_synthetic_blobs(10, 50, 4, spread=1.0, seed=1)
    assert len(ds) == 500
    for c in range(10):
        assert (ds.labels == c).sum() == 50


def test_blobs_novel_split():
    ds = make_synthetic_blobs(10, 5, 4, spread=1.0, seed=2, n_novel=3)
    assert ds.base_classes == tuple(range(7))
    assert ds.novel_classes == (7, 8, 9)


def test_blobs_subspace_means_are_low_rank():
    ds = make_synthetic_blobs(12, 4, 8, spread=0.0, seed=3, subspace_dim=2)
    means = np.stack([ds.inputs[ds.labels == c][0] for c in range(12)])
    assert np.linalg.matrix_rank(means, tol=1e-8) == 2


def test_dataset_rejects_overlapping_split():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 1]), (0, 1), (1,))


def test_dataset_rejects_unsplit_classes():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), (0,), (1,))


# ---------------------------------------------------------------------------
# digits-like file format


def test_digits_roundtrip(tmp_path):
    ds = make_synthetic_blobs(4, 3, 4, spread=1.0, seed=5, n_novel=2)
    path = tmp_path / "toy.csv"
    save_digits_like(path, ds, comment="toy fixture")
    loaded = load_digits_like(path, resolution=2, base_classes=(0, 1), novel_classes=(2, 3))
    np.testing.assert_allclose(loaded.inputs, ds.inputs, rtol=1e-9)
    assert np.array_equal(loaded.labels, ds.labels)


def test_digits_three_row_fixture(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text(
        "# comment line\n"
        "0,1.0,2.0,3.0,4.0\n"
        "5,0.5,0.5,0.5,0.5\n"
        "0,-1.0,0.0,1.0,2.0\n"
    )
    ds = load_digits_like(path, resolution=2, base_classes=(0,), novel_classes=(5,))
    assert len(ds) == 3
    assert ds.labels.tolist() == [0, 5, 0]
    np.testing.assert_allclose(ds.inputs[1], [0.5, 0.5, 0.5, 0.5])


def test_digits_base_contains_no_novel_labels(tmp_path):
    path = tmp_path / "split.csv"
    lines = [f"{c},{c}.0" for c in range(10)]
    path.write_text("\n".join(lines) + "\n")
    ds = load_digits_like(path, resolution=1, base_classes=range(5), novel_classes=range(5, 10))
    base_labels = ds.labels[ds.base_indices]
    assert set(base_labels.tolist()) == set(range(5))
    assert not set(base_labels.tolist()) & set(range(5, 10))


def test_digits_empty_novel_rejected(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("0,1.0\n")
    with pytest.raises(DataFormatError, match="novel split empty"):
        load_digits_like(path, 1, base_classes=(0,), novel_classes=())


def test_digits_missing_file():
    with pytest.raises(FileNotFoundError):
        load_digits_like("/nonexistent/file.csv", 1, (0,), (1,))


def test_digits_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,1.0\n1,2.0,3.0\n")
    with pytest.raises(DataFormatError, match=":2"):
        load_digits_like(path, 1, (0, 1), (2,))


def test_digits_unknown_class_rejected(tmp_path):
    path = tmp_path / "bad2.csv"
    path.write_text("7,1.0\n")
    with pytest.raises(DataFormatError, match="unknown class id 7"):
        load_digits_like(path, 1, (0,), (1,))


# ---------------------------------------------------------------------------
# partitioning


def test_partition_single_client_gets_everything():
    ds = make_synthetic_blobs(5, 8, 3, 1.0, seed=0, n_novel=1)
    for scheme in ("iid", "dirichlet"):
        plan = partition(ds, 1, scheme, seed=0)
        assert np.array_equal(plan.client_indices(0), ds.base_indices)


def test_partition_iid_even_split():
    ds = make_synthetic_blobs(3, 10, 2, 1.0, seed=0)
    plan = partition(ds, 2, "iid", seed=1)
    for c in range(3):
        class_idx = ds.class_indices(c)
        owners = plan.assignments[class_idx]
        assert (owners == 0).sum() == 5
        assert (owners == 1).sum() == 5


def test_partition_conserves_every_base_sample():
    ds = make_synthetic_blobs(8, 37, 3, 1.0, seed=2, n_novel=2)
    plan = partition(ds, 5, "dirichlet", seed=3, concentration=1.0)
    base = ds.base_indices
    assert np.all(plan.assignments[base] >= 0)
    total = sum(plan.client_indices(k).size for k in range(5))
    assert total == base.size
    for c in ds.base_classes:
        owners = plan.assignments[ds.class_indices(c)]
        assert np.all(owners >= 0)
        assert owners.size == (ds.labels == c).sum()


def test_partition_novel_never_assigned():
    ds = make_synthetic_blobs(6, 10, 3, 1.0, seed=4, n_novel=2)
    for scheme in ("iid", "dirichlet"):
        plan = partition(ds, 3, scheme, seed=5)
        assert np.all(plan.assignments[ds.novel_indices] == -1)


def test_partition_rejects_too_many_clients():
    ds = make_synthetic_blobs(2, 3, 2, 1.0, seed=0)
    with pytest.raises(ValueError):
        partition(ds, 7, "iid", seed=0)


def test_partition_rejects_unknown_scheme():
    ds = make_synthetic_blobs(2, 3, 2, 1.0, seed=0)
    with pytest.raises(ValueError):
        partition(ds, 2, "sorted", seed=0)


def test_partition_high_concentration_approaches_iid():
    ds = make_synthetic_blobs(3, 1200, 2, 1.0, seed=6)
    plan = partition(ds, 5, "dirichlet", seed=7, concentration=1e6)
    for c in ds.base_classes:
        owners = plan.assignments[ds.class_indices(c)]
        shares = np.bincount(owners, minlength=5) / owners.size
        assert np.max(np.abs(shares - 0.2)) < 0.05


@given(
    st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8),
    st.integers(0, 500),
)
def test_largest_remainder_conserves_total(raw, total):
    props = np.array(raw) / np.sum(raw)
    counts = _largest_remainder_counts(props, total)
    assert counts.sum() == total
    assert np.all(counts >= 0)
    # every count within 1 of the ideal share
    assert np.all(np.abs(counts - props * total) < 1.0 + 1e-9)


# ---------------------------------------------------------------------------
# episodes


def _full_shard(ds):
    return np.arange(len(ds))


def test_episode_paper_shape_5way_1shot_15query():
    ds = make_synthetic_blobs(8, 30, 3, 1.0, seed=8)
    ep = sample_episode(ds, _full_shard(ds), 5, 1, 15, rng_stream(0))
    assert len(ep.support) == 5
    assert len(ep.query) == 75
    assert len(ep.support) + len(ep.query) == (1 + 15) * 5


def test_episode_counts_and_disjointness():
    ds = make_synthetic_blobs(4, 10, 3, 1.0, seed=9)
    ep = sample_episode(ds, _full_shard(ds), 2, 1, 1, rng_stream(1))
    assert len(ep.support) + len(ep.query) == 4
    assert not set(ep.support_indices) & set(ep.query_indices)
    for label in range(2):
        assert (ep.support.labels == label).sum() == 1
        assert (ep.query.labels == label).sum() == 1


def test_episode_insufficient_classes():
    ds = make_synthetic_blobs(3, 10, 2, 1.0, seed=10)
    with pytest.raises(EpisodeInfeasibleError, match="classes"):
        sample_episode(ds, _full_shard(ds), 5, 1, 1, rng_stream(2))


def test_episode_insufficient_samples():
    ds = make_synthetic_blobs(5, 3, 2, 1.0, seed=11)
    with pytest.raises(EpisodeInfeasibleError, match="samples"):
        sample_episode(ds, _full_shard(ds), 5, 2, 2, rng_stream(3))


def test_episode_retry_skips_understocked_classes():
    # class 0 has plenty; add classes with too few samples: retries must find
    # the feasible subset whenever enough stocked classes exist
    rng = np.random.default_rng(0)
    inputs = rng.normal(size=(3 * 12 + 2 * 2, 2))
    labels = np.array([0] * 12 + [1] * 12 + [2] * 12 + [3] * 2 + [4] * 2)
    ds = Dataset(inputs, labels, (0, 1, 2, 3, 4), ())
    for seed in range(40):
        ep = sample_episode(ds, np.arange(len(ds)), 3, 2, 4, rng_stream(seed))
        assert set(ep.class_map) == {0, 1, 2}


def test_episode_invariants_random_shards():
    ds = make_synthetic_blobs(10, 25, 3, 1.0, seed=12)
    rng = rng_stream(13)
    for trial in range(200):
        shard = rng.choice(len(ds), size=rng.integers(60, len(ds)), replace=False)
        try:
            ep = sample_episode(ds, shard, 4, 2, 3, rng)
        except EpisodeInfeasibleError:
            continue
        assert len(set(ep.class_map)) == 4
        assert len(ep.support) == 8 and len(ep.query) == 12
        assert not set(ep.support_indices) & set(ep.query_indices)
        for j, class_id in enumerate(ep.class_map):
            assert np.all(ds.labels[ep.support_indices[ep.support.labels == j]] == class_id)
            assert np.all(ds.labels[ep.query_indices[ep.query.labels == j]] == class_id)


def test_sample_batch_singleton_and_determinism():
    ds = make_synthetic_blobs(6, 12, 3, 1.0, seed=14)
    single = sample_batch(ds, _full_shard(ds), 1, 3, 1, 2, rng_stream(4))
    assert len(single) == 1
    a = sample_batch(ds, _full_shard(ds), 4, 3, 1, 2, rng_stream(5))
    b = sample_batch(ds, _full_shard(ds), 4, 3, 1, 2, rng_stream(5))
    for ea, eb in zip(a, b):
        assert ea.class_map == eb.class_map
        assert np.array_equal(ea.support_indices, eb.support_indices)
        assert np.array_equal(ea.query_indices, eb.query_indices)


def test_sample_batch_distinct_seeds_differ():
    ds = make_synthetic_blobs(6, 12, 3, 1.0, seed=14)
    a = sample_batch(ds, _full_shard(ds), 4, 3, 1, 2, rng_stream(6))
    b = sample_batch(ds, _full_shard(ds), 4, 3, 1, 2, rng_stream(7))
    assert any(ea.class_map != eb.class_map for ea, eb in zip(a, b))


def test_sample_batch_rejects_empty():
    ds = make_synthetic_blobs(6, 12, 3, 1.0, seed=14)
    with pytest.raises(ValueError):
        sample_batch(ds, _full_shard(ds), 0, 3, 1, 2, rng_stream(8))


def test_rng_stream_reproducible_and_keyed():
    assert rng_stream(1, 2, 3).integers(1 << 30) == rng_stream(1, 2, 3).integers(1 << 30)
    assert rng_stream(1, 2, 3).integers(1 << 30) != rng_stream(1, 2, 4).integers(1 << 30)
