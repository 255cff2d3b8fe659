"""
Datasets, client partitions and backdoor triggers.

Datasets are immutable: every function here returns a new :class:`Dataset` rather
than editing one in place, so they can be shared read-only between clients and
threads.
"""

from __future__ import annotations

import attr
import gzip
import logging
import math
import numpy as np
import struct
from pathlib import Path
from typing import Sequence

from ._utils import (
    IDXCountMismatchError,
    IDXFormatError,
    IDXMagicError,
    IDXTruncatedError,
    ParameterError,
    ShapeError,
    Stream,
    derive_rng,
)
from .nn import Batch

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _readonly(arr, dtype=np.float64) -> np.ndarray:
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


def one_hot(targets, class_count: int) -> np.ndarray:
    """One-hot encode integer class indices."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= class_count):
        raise ParameterError(f"class indices must lie in [0, {class_count}).")
    out = np.zeros((targets.size, class_count))
    out[np.arange(targets.size), targets] = 1.0
    return out


@attr.define(frozen=True, eq=False)
class Dataset:
    """
    A feature matrix in [0, 1] with one-hot labels.

    Parameters
    ----------
    features : array
        Shape ``(N, d)``.
    labels : array
        Shape ``(N, C)``; every row one-hot.
    """

    features: np.ndarray = attr.field(converter=_readonly)
    labels: np.ndarray = attr.field(converter=_readonly)

    def __attrs_post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ShapeError("Dataset features and labels must be 2D arrays.")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"Dataset has {self.features.shape[0]} feature rows but "
                f"{self.labels.shape[0]} label rows."
            )
        if len(self) and (self.features.min() < 0 or self.features.max() > 1):
            raise ParameterError("Dataset features must lie in [0, 1].")
        if len(self) and not (
            np.all((self.labels == 0) | (self.labels == 1))
            and np.all(self.labels.sum(axis=1) == 1)
        ):
            raise ParameterError("Dataset labels must be one-hot.")

    @classmethod
    def from_targets(cls, features, targets, class_count: int) -> Dataset:
        """Build a dataset from integer class indices."""
        return cls(features, one_hot(targets, class_count))

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.features, other.features) and np.array_equal(
            self.labels, other.labels
        )

    __hash__ = None

    @property
    def dim(self) -> int:
        """Feature dimension."""
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        """Number of classes, C."""
        return self.labels.shape[1]

    @property
    def targets(self) -> np.ndarray:
        """Integer class index of every row."""
        return np.argmax(self.labels, axis=1)

    @property
    def class_counts(self) -> np.ndarray:
        """Number of samples of each class."""
        return np.bincount(self.targets, minlength=self.class_count)

    def subset(self, indices) -> Dataset:
        """The rows at ``indices``, in that order."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices])

    def as_batch(self) -> Batch:
        """All rows as a single :class:`~pyfedaf.nn.Batch`."""
        return Batch(self.features, self.labels)


def _check_partition(instance, attribute, value):
    if not value:
        raise ParameterError("A partition needs at least one client.")
    if any(len(a) == 0 for a in value):
        raise ParameterError("Every client must hold at least one sample.")
    merged = np.concatenate(value)
    if merged.size != instance.n_samples or not np.array_equal(
        np.sort(merged), np.arange(instance.n_samples)
    ):
        raise ParameterError(
            "Client assignments must be disjoint and cover every sample exactly once."
        )


def _assignments(value) -> tuple[np.ndarray, ...]:
    return tuple(_readonly(a, dtype=np.int64).reshape(-1) for a in value)


@attr.define(frozen=True, eq=False)
class ClientPartition:
    """
    A disjoint assignment of dataset rows to K clients.

    Parameters
    ----------
    assignments : sequence of arrays
        The row indices held by each client.
    n_samples : int
        Size of the partitioned dataset.
    """

    n_samples: int = attr.field(converter=int)
    assignments: tuple[np.ndarray, ...] = attr.field(
        converter=_assignments, validator=_check_partition
    )

    def __len__(self) -> int:
        return len(self.assignments)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.assignments[k]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClientPartition):
            return NotImplemented
        return (
            self.n_samples == other.n_samples
            and len(self) == len(other)
            and all(np.array_equal(a, b) for a, b in zip(self.assignments, other.assignments))
        )

    __hash__ = None

    @property
    def client_count(self) -> int:
        """Number of clients, K."""
        return len(self.assignments)

    @property
    def sizes(self) -> np.ndarray:
        """The local dataset sizes n_k."""
        return np.array([len(a) for a in self.assignments], dtype=np.int64)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------
def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_idx(path: Path, magic: int, kind: str) -> tuple[tuple[int, ...], np.ndarray]:
    with _open(path, "rb") as fl:
        raw = fl.read()

    if len(raw) < 4:
        raise IDXTruncatedError(f"{path}: file is too short to hold an IDX header.")

    (file_magic,) = struct.unpack(">I", raw[:4])
    if file_magic != magic:
        raise IDXMagicError(
            f"{path}: expected magic 0x{magic:08X} for an IDX {kind} file, "
            f"got 0x{file_magic:08X}."
        )

    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXTruncatedError(f"{path}: header is truncated.")
    dims = struct.unpack(f">{ndim}I", raw[4:header])

    expected = math.prod(dims)
    if len(raw) - header < expected:
        raise IDXTruncatedError(
            f"{path}: header declares {expected} bytes of data but only "
            f"{len(raw) - header} are present."
        )
    return dims, np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """
    Read an image/label pair of IDX files, as distributed with MNIST.

    Pixels are scaled by 1/255. Files ending in ``.gz`` are decompressed on the fly.

    Raises
    ------
    IDXMagicError
        If either file does not carry the expected magic number.
    IDXTruncatedError
        If a payload is shorter than its header claims.
    IDXCountMismatchError
        If the two files hold different numbers of items.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_dims, pixels = _read_idx(images_path, IMAGE_MAGIC, "image")
    (n_labels,), targets = _read_idx(labels_path, LABEL_MAGIC, "label")

    n_images = img_dims[0]
    if n_images != n_labels:
        raise IDXCountMismatchError(
            f"{images_path} holds {n_images} images but {labels_path} holds "
            f"{n_labels} labels."
        )
    if n_labels and targets.max() >= class_count:
        raise IDXFormatError(
            f"{labels_path}: label {targets.max()} is out of range for {class_count} classes."
        )

    features = pixels.reshape(n_images, -1).astype(np.float64) / 255.0
    logger.debug(f"Read {n_images} samples of dim {features.shape[1]} from {images_path}")
    return Dataset.from_targets(features, targets, class_count)


def write_idx(dataset: Dataset, images_path, labels_path, image_shape=None):
    """
    Write a dataset as an IDX image/label pair.

    Features are stored as ``round(255 * x)``, so datasets read by :func:`load_idx`
    are reproduced exactly.

    Parameters
    ----------
    image_shape : tuple of int, optional
        ``(rows, cols)`` of each image. Defaults to a square if ``dim`` is a
        perfect square and ``(1, dim)`` otherwise.
    """
    if dataset.class_count > 256:
        raise ParameterError("IDX label files can only hold up to 256 classes.")

    if image_shape is None:
        side = math.isqrt(dataset.dim)
        image_shape = (side, side) if side * side == dataset.dim else (1, dataset.dim)
    rows, cols = image_shape
    if rows * cols != dataset.dim:
        raise ShapeError(f"image_shape {image_shape} does not match dim {dataset.dim}.")

    pixels = np.rint(dataset.features * 255).astype(np.uint8)
    n = len(dataset)
    with _open(Path(images_path), "wb") as fl:
        fl.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fl.write(pixels.tobytes())
    with _open(Path(labels_path), "wb") as fl:
        fl.write(struct.pack(">II", LABEL_MAGIC, n))
        fl.write(dataset.targets.astype(np.uint8).tobytes())


def _find(direc: Path, stem: str) -> Path:
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            pth = direc / f"{name}{suffix}"
            if pth.exists():
                return pth
    raise FileNotFoundError(f"Could not find '{stem}' (or a .gz version) in {direc}")


def load_mnist(direc, split: str = "train", limit: int | None = None) -> Dataset:
    """
    Load an MNIST split from a directory holding the standard file names.

    Parameters
    ----------
    direc : path
        Directory with e.g. ``train-images-idx3-ubyte[.gz]``.
    split : str
        ``"train"`` or ``"test"``.
    limit : int, optional
        Keep only the first ``limit`` samples.
    """
    if split not in _MNIST_FILES:
        raise ValueError(f"split must be one of {list(_MNIST_FILES)}, got '{split}'")

    direc = Path(direc).expanduser()
    images, labels = (_find(direc, stem) for stem in _MNIST_FILES[split])
    ds = load_idx(images, labels)
    if limit is not None and limit < len(ds):
        ds = ds.subset(np.arange(limit))
    return ds


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------
def blob_centers(classes: int, dim: int, center_seed: int = 0) -> np.ndarray:
    """The fixed per-class centers used by :func:`make_blobs`."""
    rng = derive_rng(center_seed, Stream.BLOBS, classes, dim)
    return rng.uniform(0.1, 0.7, size=(classes, dim))


def make_blobs(
    classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    center_seed: int = 0,
) -> Dataset:
    """
    Isotropic Gaussian blobs around fixed per-class centers, clipped to [0, 1].

    Samples are ordered by class. The centers only depend on ``center_seed``, so a
    train and a test set drawn with different ``seed`` share them.
    """
    if classes < 2:
        raise ParameterError("make_blobs needs at least two classes.")
    if per_class < 1:
        raise ParameterError("make_blobs needs at least one sample per class.")

    centers = blob_centers(classes, dim, center_seed)
    rng = derive_rng(seed, Stream.BLOBS)
    targets = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(size=(targets.size, dim))
    features = np.clip(centers[targets] + spread * noise, 0.0, 1.0)
    return Dataset.from_targets(features, targets, classes)


# ---------------------------------------------------------------------------
# Partitioning and selection
# ---------------------------------------------------------------------------
def partition_iid(dataset: Dataset, client_count: int, seed: int) -> ClientPartition:
    """
    Shuffle the rows and split them into near-equal disjoint client shares.

    Client sizes differ by at most one; each share is sorted.
    """
    n = len(dataset)
    if client_count < 1:
        raise ParameterError("Need at least one client.")
    if client_count > n:
        raise ParameterError(f"Cannot split {n} samples among {client_count} clients.")

    order = derive_rng(seed, Stream.PARTITION).permutation(n)
    return ClientPartition(
        n_samples=n,
        assignments=[np.sort(a) for a in np.array_split(order, client_count)],
    )


def select_class(dataset: Dataset, class_id: int) -> np.ndarray:
    """Indices of every row of class ``class_id``."""
    if not 0 <= class_id < dataset.class_count:
        raise ParameterError(
            f"class_id={class_id} is out of range for {dataset.class_count} classes."
        )
    return np.flatnonzero(dataset.targets == class_id)


def drop_samples(
    dataset: Dataset, partition: ClientPartition, indices
) -> tuple[Dataset, ClientPartition]:
    """
    Remove rows from a dataset and remap the partition onto the remaining rows.

    Clients left with no data are dropped from the partition.
    """
    drop = np.zeros(len(dataset), dtype=bool)
    drop[np.asarray(indices, dtype=np.int64)] = True
    keep = ~drop
    new_index = np.cumsum(keep) - 1

    assignments = [new_index[a[keep[a]]] for a in partition.assignments]
    dropped = sum(len(a) == 0 for a in assignments)
    if dropped:
        logger.info(f"Dropping {dropped} client(s) left without data.")
    assignments = [a for a in assignments if len(a)]

    return dataset.subset(np.flatnonzero(keep)), ClientPartition(
        n_samples=int(keep.sum()), assignments=assignments
    )


# ---------------------------------------------------------------------------
# Backdoor
# ---------------------------------------------------------------------------
def corner_trigger(dim: int, size: int = 3) -> tuple[int, ...]:
    """
    Feature coordinates of a trigger patch.

    For square images this is the bottom-right ``size`` x ``size`` block; otherwise
    the last ``size`` coordinates.
    """
    side = math.isqrt(dim)
    if side * side == dim and side >= size:
        return tuple(
            r * side + c for r in range(side - size, side) for c in range(side - size, side)
        )
    return tuple(range(max(dim - size, 0), dim))


def _int_tuple(value) -> tuple[int, ...]:
    return tuple(int(v) for v in value)


@attr.define(frozen=True)
class BackdoorSpec:
    """
    A trigger pattern and the label flip it should teach the model.

    Parameters
    ----------
    trigger_coords : tuple of int
        Feature indices set to ``trigger_value`` on poisoned rows.
    flip_rule : tuple of int
        ``flip_rule[c]`` is the label given to a poisoned sample of class ``c``.
    """

    trigger_coords: tuple[int, ...] = attr.field(converter=_int_tuple)
    flip_rule: tuple[int, ...] = attr.field(converter=_int_tuple)
    trigger_value: float = attr.field(
        default=1.0,
        converter=float,
        validator=[attr.validators.ge(0), attr.validators.le(1)],
    )
    poison_fraction: float = attr.field(
        default=1.0,
        converter=float,
        validator=[attr.validators.gt(0), attr.validators.le(1)],
    )

    @trigger_coords.validator
    def _trigger_coords_vld(self, attribute, value):
        if not value or min(value) < 0:
            raise ValueError("trigger_coords must be a non-empty set of indices")

    @flip_rule.validator
    def _flip_rule_vld(self, attribute, value):
        C = len(value)
        for c, f in enumerate(value):
            if f == c or not 0 <= f < C:
                raise ValueError(f"flip_rule maps class {c} to invalid class {f}")

    @property
    def class_count(self) -> int:
        """Number of classes the flip rule covers."""
        return len(self.flip_rule)

    @classmethod
    def from_seed(
        cls,
        dim: int,
        class_count: int,
        seed: int,
        trigger_size: int = 3,
        trigger_value: float = 1.0,
        poison_fraction: float = 1.0,
    ) -> BackdoorSpec:
        """A corner trigger and the flip ``c -> (c + 1 + u) mod C`` for a seeded u."""
        u = int(derive_rng(seed, Stream.BACKDOOR).integers(0, class_count - 1))
        return cls(
            trigger_coords=corner_trigger(dim, trigger_size),
            flip_rule=[(c + 1 + u) % class_count for c in range(class_count)],
            trigger_value=trigger_value,
            poison_fraction=poison_fraction,
        )

    def flip(self, classes) -> np.ndarray:
        """Apply the flip rule to class indices."""
        return np.asarray(self.flip_rule)[np.asarray(classes, dtype=np.int64)]

    def check_compatible(self, dataset: Dataset):
        """Raise :class:`ShapeError` if the trigger or flip rule don't fit the data."""
        if max(self.trigger_coords) >= dataset.dim:
            raise ShapeError(
                f"trigger coordinate {max(self.trigger_coords)} is outside feature "
                f"dim {dataset.dim}."
            )
        if self.class_count != dataset.class_count:
            raise ShapeError(
                f"flip rule covers {self.class_count} classes, data has "
                f"{dataset.class_count}."
            )


def poisoned_indices(target_indices, spec: BackdoorSpec, seed: int) -> np.ndarray:
    """The seeded subset of ``target_indices`` that receives the trigger."""
    target = np.unique(np.asarray(target_indices, dtype=np.int64))
    if spec.poison_fraction >= 1.0 or target.size == 0:
        return target
    k = max(1, int(round(spec.poison_fraction * target.size)))
    rng = derive_rng(seed, Stream.BACKDOOR, 1)
    return np.sort(rng.choice(target, size=k, replace=False))


def inject_backdoor(
    dataset: Dataset, target_indices: Sequence[int], spec: BackdoorSpec, seed: int
) -> Dataset:
    """
    Stamp the trigger onto a seeded subset of the target rows and flip their labels.

    Every other row is returned bit-identical.
    """
    spec.check_compatible(dataset)
    rows = poisoned_indices(target_indices, spec, seed)
    if rows.size and (rows.min() < 0 or rows.max() >= len(dataset)):
        raise ParameterError("target_indices fall outside the dataset.")

    features = dataset.features.copy()
    labels = dataset.labels.copy()
    features[np.ix_(rows, spec.trigger_coords)] = spec.trigger_value
    labels[rows] = one_hot(spec.flip(dataset.targets[rows]), dataset.class_count)

    logger.debug(f"Poisoned {rows.size} of {len(target_indices)} target rows.")
    return Dataset(features, labels)
