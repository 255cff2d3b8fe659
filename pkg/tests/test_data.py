import pytest

import numpy as np

from pyfedaf._utils import (
    IDXCountMismatchError,
    IDXMagicError,
    IDXTruncatedError,
    ParameterError,
    ShapeError,
)
from pyfedaf.data import (
    BackdoorSpec,
    ClientPartition,
    Dataset,
    blob_centers,
    corner_trigger,
    drop_samples,
    inject_backdoor,
    load_idx,
    load_mnist,
    make_blobs,
    partition_iid,
    poisoned_indices,
    select_class,
    write_idx,
)
from pyfedaf.federation import local_train
from pyfedaf.nn import ModelSpec, accuracy, xavier_init


@pytest.fixture(scope="module")
def idx_fixture():
    """Four 28x28 images with pixel values that are exact multiples of 1/255."""
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(4, 784))
    return Dataset.from_targets(pixels / 255.0, [3, 1, 4, 1], 10)


def test_dataset_validation():
    with pytest.raises(ParameterError):
        Dataset(np.zeros((2, 3)), np.array([[0.5, 0.5], [1, 0]]))
    with pytest.raises(ParameterError):
        Dataset(np.full((1, 3), -0.1), np.array([[1.0, 0.0]]))
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 3)), np.array([[1.0, 0.0]]))


def test_blobs_zero_spread():
    ds = make_blobs(3, 10, 8, 0.0, seed=1)
    centers = blob_centers(3, 8)
    for c in range(3):
        assert np.all(ds.features[ds.targets == c] == centers[c])


def test_blobs_counts():
    ds = make_blobs(3, 50, 8, 0.05, seed=1)
    assert len(ds) == 150
    assert np.all(ds.class_counts == 50)
    assert ds.features.min() >= 0
    assert ds.features.max() <= 1


def test_blobs_deterministic():
    assert make_blobs(3, 20, 8, 0.05, seed=4) == make_blobs(3, 20, 8, 0.05, seed=4)
    assert make_blobs(3, 20, 8, 0.05, seed=4) != make_blobs(3, 20, 8, 0.05, seed=5)


def test_blobs_bad_input():
    with pytest.raises(ParameterError):
        make_blobs(1, 10, 8, 0.05, seed=1)
    with pytest.raises(ParameterError):
        make_blobs(3, 0, 8, 0.05, seed=1)


def test_partition_equal_sizes():
    ds = make_blobs(4, 25, 8, 0.05, seed=1)
    part = partition_iid(ds, 4, seed=0)
    assert part.sizes.tolist() == [25, 25, 25, 25]


@pytest.mark.parametrize("n,k,seed", [(10, 3, 0), (57, 4, 1), (100, 7, 2), (5, 5, 3), (31, 1, 4)])
def test_partition_is_exact_cover(n, k, seed):
    ds = make_blobs(2, n, 4, 0.05, seed=seed).subset(np.arange(n))
    part = partition_iid(ds, k, seed=seed)

    merged = np.concatenate(part.assignments)
    assert np.array_equal(np.sort(merged), np.arange(n))
    assert part.sizes.max() - part.sizes.min() <= 1


def test_partition_deterministic(blobs):
    assert partition_iid(blobs, 4, seed=9) == partition_iid(blobs, 4, seed=9)


def test_partition_too_many_clients():
    ds = make_blobs(2, 2, 4, 0.05, seed=0)
    with pytest.raises(ParameterError):
        partition_iid(ds, 5, seed=0)


def test_client_partition_rejects_overlap():
    with pytest.raises(ParameterError):
        ClientPartition(n_samples=4, assignments=[[0, 1], [1, 2, 3]])
    with pytest.raises(ParameterError):
        ClientPartition(n_samples=4, assignments=[[0, 1, 2, 3], []])


def test_select_class(blobs):
    idx = select_class(blobs, 2)
    assert idx.size == 100
    assert np.all(blobs.targets[idx] == 2)

    union = np.concatenate([select_class(blobs, c) for c in range(blobs.class_count)])
    assert np.array_equal(np.sort(union), np.arange(len(blobs)))


def test_select_empty_class():
    ds = Dataset.from_targets(np.zeros((3, 2)), [0, 0, 2], 3)
    assert select_class(ds, 1).size == 0


def test_select_class_out_of_range(blobs):
    with pytest.raises(ParameterError):
        select_class(blobs, blobs.class_count)


def test_corner_trigger_image():
    coords = corner_trigger(784)
    assert len(coords) == 9
    assert min(coords) == 25 * 28 + 25
    assert max(coords) == 783


def test_corner_trigger_flat():
    assert corner_trigger(10) == (7, 8, 9)


def test_flip_rule_never_fixed_point():
    for seed in range(20):
        spec = BackdoorSpec.from_seed(36, 4, seed)
        assert all(spec.flip_rule[c] != c for c in range(4))


def test_bad_flip_rule():
    with pytest.raises(ValueError):
        BackdoorSpec(trigger_coords=(0,), flip_rule=(0, 1))


def test_inject_backdoor_full(blobs):
    spec = BackdoorSpec.from_seed(blobs.dim, blobs.class_count, seed=3)
    target = select_class(blobs, 1)[:30]
    poisoned = inject_backdoor(blobs, target, spec, seed=3)

    coords = list(spec.trigger_coords)
    assert np.all(poisoned.features[np.ix_(target, coords)] == spec.trigger_value)
    assert np.all(poisoned.targets[target] != blobs.targets[target])
    assert np.all(poisoned.targets[target] == spec.flip_rule[1])

    others = np.setdiff1d(np.arange(len(blobs)), target)
    assert np.array_equal(poisoned.features[others], blobs.features[others])
    assert np.array_equal(poisoned.labels[others], blobs.labels[others])

    untouched = np.setdiff1d(np.arange(blobs.dim), coords)
    assert np.array_equal(poisoned.features[np.ix_(target, untouched)], blobs.features[np.ix_(target, untouched)])


def test_inject_backdoor_fraction(blobs):
    spec = BackdoorSpec.from_seed(blobs.dim, blobs.class_count, seed=3, poison_fraction=0.5)
    target = select_class(blobs, 0)
    rows = poisoned_indices(target, spec, seed=3)
    assert rows.size == 50
    assert np.all(np.isin(rows, target))

    poisoned = inject_backdoor(blobs, target, spec, seed=3)
    changed = np.flatnonzero(np.any(poisoned.labels != blobs.labels, axis=1))
    assert np.array_equal(changed, rows)


def test_inject_backdoor_dim_mismatch():
    ds = make_blobs(2, 5, 4, 0.05, seed=0)
    spec = BackdoorSpec.from_seed(784, 2, seed=0)
    with pytest.raises(ShapeError):
        inject_backdoor(ds, [0], spec, seed=0)


def test_drop_samples_remaps_partition():
    ds = Dataset.from_targets(np.zeros((6, 2)), [0, 1, 0, 1, 0, 1], 2)
    part = ClientPartition(n_samples=6, assignments=[[0, 3], [1, 4], [2, 5]])
    reduced, new_part = drop_samples(ds, part, [1, 4])

    assert len(reduced) == 4
    assert new_part.client_count == 2
    assert [a.tolist() for a in new_part.assignments] == [[0, 2], [1, 3]]


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_round_trip(tmp_path, idx_fixture, suffix):
    images, labels = tmp_path / f"img{suffix}", tmp_path / f"lbl{suffix}"
    write_idx(idx_fixture, images, labels)
    ds = load_idx(images, labels)

    assert len(ds) == 4
    assert ds.dim == 784
    assert ds == idx_fixture


def test_idx_bad_magic(tmp_path, idx_fixture):
    images, labels = tmp_path / "img", tmp_path / "lbl"
    write_idx(idx_fixture, images, labels)
    with pytest.raises(IDXMagicError):
        load_idx(images, images)


def test_idx_truncated(tmp_path, idx_fixture):
    images, labels = tmp_path / "img", tmp_path / "lbl"
    write_idx(idx_fixture, images, labels)
    images.write_bytes(images.read_bytes()[:-10])
    with pytest.raises(IDXTruncatedError):
        load_idx(images, labels)


def test_idx_count_mismatch(tmp_path, idx_fixture):
    write_idx(idx_fixture, tmp_path / "img", tmp_path / "lbl")
    write_idx(idx_fixture.subset([0, 1]), tmp_path / "img2", tmp_path / "lbl2")
    with pytest.raises(IDXCountMismatchError):
        load_idx(tmp_path / "img", tmp_path / "lbl2")


def test_load_mnist_names_and_limit(tmp_path, idx_fixture):
    write_idx(idx_fixture, tmp_path / "t10k-images-idx3-ubyte.gz", tmp_path / "t10k-labels-idx1-ubyte.gz")
    ds = load_mnist(tmp_path, "test", limit=3)
    assert ds == idx_fixture.subset([0, 1, 2])

    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path, "train")


def test_full_mnist_histogram(mnist_dir):
    ds = load_mnist(mnist_dir, "train")
    assert len(ds) == 60000
    assert ds.dim == 784
    assert ds.class_counts.tolist() == [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]


def test_blobs_linearly_separable():
    ds = make_blobs(4, 100, 8, 0.05, seed=2)
    spec = ModelSpec((8, 4))
    params = local_train(xavier_init(spec, 0), spec, ds, 200, 0.5, 16, seed=0)
    assert accuracy(params, spec, ds.as_batch()) >= 0.99
