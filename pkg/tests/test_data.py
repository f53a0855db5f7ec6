import numpy as np
import pytest

from core.data import (
    MAIZE_CLASSES,
    MAIZE_COUNTS,
    Dataset,
    generate_blobs,
    load_csv,
    partition_iid,
    plan_partition,
    split,
)
from core.errors import DataError
from core.models import SplitSpec


def test_maize_split_sizes(maize_blobs):
    assert maize_blobs.num_samples == 3852
    parts = split(maize_blobs, SplitSpec(), seed=0)
    assert parts.sizes() == {"train": 3082, "val": 385, "test": 385}


def test_split_is_stratified(maize_blobs):
    parts = split(maize_blobs, SplitSpec(), seed=0)
    val_counts = np.bincount(maize_blobs.labels[parts.val], minlength=4)
    test_counts = np.bincount(maize_blobs.labels[parts.test], minlength=4)
    assert val_counts.tolist() == [119, 51, 99, 116]
    assert test_counts.tolist() == [119, 51, 99, 116]


def _labelled(counts) -> Dataset:
    labels = np.repeat(np.arange(len(counts)), counts)
    return Dataset(
        features=np.zeros((labels.size, 1)), labels=labels, class_names=[f"c{i}" for i in range(len(counts))]
    )


def _assert_folds_track_class_shares(ds, parts):
    n = ds.num_samples
    counts = ds.class_counts()
    for fold in (parts.val, parts.test):
        got = np.bincount(ds.labels[fold], minlength=ds.num_classes)
        share = fold.size * counts / n
        assert np.all(np.abs(got - share) < 1), (counts.tolist(), fold.size, got.tolist())


def test_split_keeps_every_class_within_one_sample_of_its_share():
    rng = np.random.default_rng(2024)
    for _ in range(2000):
        counts = rng.integers(4, 60, size=int(rng.integers(2, 7)))
        val_frac, test_frac = (round(float(f), 3) for f in rng.uniform(0.0, 0.25, size=2))
        spec = SplitSpec(train_frac=1.0 - val_frac - test_frac, val_frac=val_frac, test_frac=test_frac)
        ds = _labelled(counts)
        parts = split(ds, spec, seed=int(rng.integers(1000)))
        n = ds.num_samples
        assert parts.val.size == int(np.floor(val_frac * n + 1e-9))
        assert parts.test.size == int(np.floor(test_frac * n + 1e-9))
        assert parts.train.size + parts.val.size + parts.test.size == n
        _assert_folds_track_class_shares(ds, parts)
        assert np.all(np.bincount(ds.labels[parts.train], minlength=ds.num_classes) >= 1)


def test_split_dominant_class_gets_its_full_test_share():
    ds = _labelled([29, 4, 7, 5])
    parts = split(ds, SplitSpec(train_frac=0.75, val_frac=0.1, test_frac=0.15), seed=3)
    assert parts.test.size == 6
    assert np.bincount(ds.labels[parts.test], minlength=4).tolist() == [4, 0, 1, 1]
    _assert_folds_track_class_shares(ds, parts)


def test_split_moves_a_test_sample_off_a_class_with_no_training_left():
    ds = _labelled([2, 10])
    parts = split(ds, SplitSpec(train_frac=0.5, val_frac=0.25, test_frac=0.25), seed=0)
    assert np.bincount(ds.labels[parts.val], minlength=2).tolist() == [1, 2]
    assert np.bincount(ds.labels[parts.test], minlength=2).tolist() == [0, 3]
    assert np.bincount(ds.labels[parts.train], minlength=2).tolist() == [1, 5]


def test_split_is_a_disjoint_cover(maize_blobs):
    parts = split(maize_blobs, SplitSpec(), seed=4)
    combined = np.concatenate([parts.train, parts.val, parts.test])
    assert np.array_equal(np.sort(combined), np.arange(maize_blobs.num_samples))
    for arr in (parts.train, parts.val, parts.test):
        assert np.all(np.diff(arr) > 0)


def test_split_depends_on_seed(maize_blobs):
    a = split(maize_blobs, seed=1)
    b = split(maize_blobs, seed=1)
    c = split(maize_blobs, seed=2)
    assert np.array_equal(a.val, b.val)
    assert not np.array_equal(a.val, c.val)


def test_split_rejects_tiny_datasets():
    ds = Dataset(features=np.zeros((2, 1)), labels=[0, 1], class_names=["a", "b"])
    with pytest.raises(DataError):
        split(ds)


def test_split_rejects_class_without_training_samples():
    ds = Dataset(features=np.zeros((5, 1)), labels=[0, 0, 1, 1, 1], class_names=["a", "b"])
    with pytest.raises(DataError) as exc:
        split(ds, SplitSpec(train_frac=0.2, val_frac=0.4, test_frac=0.4))
    assert "'a'" in exc.value.message


def test_partition_sizes_for_three_clients():
    shards = partition_iid(np.arange(3082), 3, seed=0)
    assert [s.n_k for s in shards] == [1028, 1027, 1027]
    assert [s.client_id for s in shards] == [1, 2, 3]


@pytest.mark.parametrize("n,k", [(10, 3), (100, 4), (7, 7), (3082, 2)])
def test_partition_is_balanced_and_disjoint(n, k):
    train = np.arange(100, 100 + n)
    shards = partition_iid(train, k, seed=9)
    sizes = [s.n_k for s in shards]
    assert max(sizes) - min(sizes) <= 1
    merged = np.concatenate([s.indices for s in shards])
    assert np.array_equal(np.sort(merged), train)


def test_partition_rejects_more_clients_than_samples():
    with pytest.raises(DataError):
        partition_iid(np.arange(2), 3)


def test_plan_partition_manifest(maize_blobs):
    plan = plan_partition(maize_blobs, 3, SplitSpec(), seed=0)
    manifest = plan.to_manifest()
    assert manifest["class_names"] == list(MAIZE_CLASSES)
    assert manifest["split_sizes"] == {"train": 3082, "val": 385, "test": 385}
    assert [s["n_k"] for s in manifest["shards"]] == [1028, 1027, 1027]
    assert "indices" not in manifest["shards"][0]
    full = plan.to_manifest(include_indices=True)
    assert len(full["shards"][0]["indices"]) == 1028
    assert len(full["test_indices"]) == 385


def test_blobs_default_counts_and_classes(maize_blobs):
    assert maize_blobs.class_counts().tolist() == list(MAIZE_COUNTS)
    assert maize_blobs.class_names == list(MAIZE_CLASSES)
    assert maize_blobs.feature_shape == (16,)


def test_blobs_are_deterministic():
    a = generate_blobs(counts=[5, 5, 5, 5], seed=3)
    b = generate_blobs(counts=[5, 5, 5, 5], seed=3)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_blobs_are_separable_by_nearest_mean(small_blobs):
    means = np.stack([small_blobs.features[small_blobs.labels == c].mean(axis=0) for c in range(4)])
    dist = ((small_blobs.features[:, None, :] - means[None]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == small_blobs.labels) >= 0.99


def test_blobs_with_fewer_dimensions_than_classes():
    ds = generate_blobs(num_classes=5, counts=[3] * 5, dim=2, seed=0)
    assert ds.feature_shape == (2,)
    assert ds.class_names == [f"class_{c}" for c in range(5)]


def test_blobs_with_feature_shape():
    ds = generate_blobs(counts=[4, 4, 4, 4], dim=16, feature_shape=(1, 4, 4))
    assert ds.feature_shape == (1, 4, 4)


def test_blobs_reject_bad_arguments():
    with pytest.raises(DataError):
        generate_blobs(separation=0.0)
    with pytest.raises(DataError):
        generate_blobs(num_classes=4, counts=[1, 2, 3])


def test_with_feature_shape_rejects_size_change(small_blobs):
    with pytest.raises(DataError):
        small_blobs.with_feature_shape((1, 3, 5))


def test_load_csv_with_header(tmp_path):
    path = tmp_path / "leaves.csv"
    path.write_text("label,f1,f2\nrust,1.0,2.0\nhealthy,3,4\n\nrust,5,6\n")
    ds = load_csv(path)
    assert ds.class_names == ["rust", "healthy"]
    assert ds.labels.tolist() == [0, 1, 0]
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])


def test_load_csv_with_fixed_class_order(tmp_path):
    path = tmp_path / "leaves.csv"
    path.write_text("healthy,1,2\nrust,3,4\n")
    ds = load_csv(path, class_names=["rust", "healthy"])
    assert ds.labels.tolist() == [1, 0]
    assert ds.num_classes == 2


def test_load_csv_unknown_label_with_fixed_classes(tmp_path):
    path = tmp_path / "leaves.csv"
    path.write_text("rust,1\nblight,2\n")
    with pytest.raises(DataError) as exc:
        load_csv(path, class_names=["rust"])
    assert "line 2" in exc.value.message


@pytest.mark.parametrize(
    "content,fragment",
    [
        ("a,1,2\nb,3\n", "line 2"),
        ("a,1,2\nb,x,3\n", "line 2"),
        ("", "no samples"),
        ("label,f1\n", "no samples"),
    ],
)
def test_load_csv_errors(tmp_path, content, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(DataError) as exc:
        load_csv(path)
    assert fragment in exc.value.message


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv")
