"""Datasets: IDX and CIFAR-binary readers/writers and a synthetic generator."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, c, h, w) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int = 10
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)


# -- IDX ----------------------------------------------------------------------


def _read_idx(path, expect_magic, what):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise DataFormatError(f"{path}: too short for an IDX {what} file")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expect_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} for IDX {what} (expected 0x{expect_magic:08x})")
    ndim = magic & 0xFF
    dims = struct.unpack_from(">" + "I" * ndim, blob, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(blob) - offset != count:
        raise DataFormatError(f"{path}: expected {count} data bytes, found {len(blob) - offset}")
    return np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx(image_path, label_path, num_classes: int = 10, name: str | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (the MNIST family layout)."""
    raw = _read_idx(image_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(label_path, IDX_LABELS_MAGIC, "labels")
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    images = raw[:, None, :, :].astype(np.float64) / 255.0
    return LabeledDataset(images, labels.astype(np.int64), num_classes, name or os.path.basename(str(image_path)))


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write (n, 1, h, w) or (n, h, w) images in [0, 1] as IDX uint8."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise DataFormatError("IDX image files hold single-channel images")
        arr = arr[:, 0]
    data = to_bytes(arr)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">III", *data.shape))
        f.write(data.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    data = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", len(data)))
        f.write(data.tobytes())


def write_idx(image_path, label_path, ds: LabeledDataset) -> None:
    write_idx_images(image_path, ds.images)
    write_idx_labels(label_path, ds.labels)


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def write_idx_array(path, arr: np.ndarray) -> None:
    """Write any uint8/int/float array as IDX, keeping its dtype (big-endian)."""
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataFormatError(f"IDX cannot store dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, code, arr.ndim))
        f.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        f.write(arr.astype(_IDX_TYPES[code]).tobytes())


def read_idx_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: too short for an IDX file")
    zero, code, ndim = struct.unpack_from(">HBB", blob, 0)
    if zero != 0 or code not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad IDX magic")
    dims = struct.unpack_from(">" + "I" * ndim, blob, 4)
    dt = _IDX_TYPES[code]
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(blob) - offset != count * dt.itemsize:
        raise DataFormatError(f"{path}: expected {count * dt.itemsize} data bytes, found {len(blob) - offset}")
    return np.frombuffer(blob, dtype=dt, offset=offset).reshape(dims).astype(dt.newbyteorder("="))


# -- CIFAR binary ---------------------------------------------------------------


def load_cifar_binary(paths, num_classes: int = 10, name: str = "cifar") -> LabeledDataset:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 CHW pixel bytes per record."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) % CIFAR_RECORD:
            whole = len(blob) // CIFAR_RECORD
            raise DataFormatError(
                f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                f"(file length {len(blob)} is not a multiple of {CIFAR_RECORD})"
            )
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not images:
        return LabeledDataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64), num_classes, name)
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), num_classes, name)


def write_cifar_binary(path, ds: LabeledDataset) -> None:
    rec = np.concatenate([ds.labels.astype(np.uint8)[:, None], to_bytes(ds.images).reshape(len(ds), -1)], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# -- synthetic --------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Seeded Gaussian class clusters around smooth, image-like class means.

    Classes are split round-robin into ``groups`` super-classes. Each class
    mean is a shared background, plus a smooth pattern of l2 norm
    ``group_separation`` shared by its super-class, plus a class-specific
    smooth pattern of l2 norm ``separation``. Sibling classes are therefore
    close and classes of different groups far apart, the way shirts and
    coats sit closer than shirts and sandals. A sample is its class mean plus
    ``scale`` times (isotropic per-pixel noise + ``deform`` times a random
    combination of ``n_deform`` smooth unit-norm patterns), clipped to [0, 1].
    """

    num_classes: int = 10
    input_shape: tuple[int, ...] = (1, 28, 28)
    separation: float = 1.0
    groups: int = 3
    group_separation: float = 3.0
    scale: float = 0.1
    deform: float = 10.0
    smoothness: float = 2.0
    n_deform: int = 8
    train_count: int = 5000
    test_count: int = 1000
    seed: int = 0
    quantize: bool = True  # snap pixels to the 8-bit grid so IDX storage is lossless
    means: np.ndarray | None = field(default=None, repr=False)

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 0])
        shape = tuple(self.input_shape)
        sigma = (0,) + (self.smoothness,) * (len(shape) - 1)
        background = gaussian_filter(rng.standard_normal(shape), sigma)
        background = 0.5 + 0.15 * background / np.abs(background).max()
        def pattern():
            pat = gaussian_filter(rng.standard_normal(shape), sigma)
            pat -= pat.mean()
            return pat / np.linalg.norm(pat)

        group_pats = [pattern() for _ in range(max(self.groups, 1))]
        means = []
        for c in range(self.num_classes):
            g = group_pats[c % len(group_pats)]
            means.append(background + self.group_separation * g + self.separation * pattern())
        return np.clip(np.stack(means), 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-balanced train/test sets drawn from the clusters of ``spec``."""
    means = spec.class_means()
    if len(means) != spec.num_classes:
        raise ValueError("need one mean per class")
    flat = means.reshape(len(means), -1)
    gaps = np.linalg.norm(flat[:, None] - flat[None], axis=-1)[np.triu_indices(len(means), 1)]
    if gaps.size and gaps.min() == 0:
        raise ValueError("cluster means must be pairwise distinct")
    shape = tuple(spec.input_shape)
    sigma = (0,) + (spec.smoothness,) * (len(shape) - 1)
    basis_rng = np.random.default_rng([spec.seed, 1])
    basis = []
    for _ in range(spec.n_deform):
        b = gaussian_filter(basis_rng.standard_normal(shape), sigma)
        basis.append(b / np.linalg.norm(b))
    basis = np.stack(basis) if basis else np.zeros((0,) + shape)

    def draw(count, stream):
        rng = np.random.default_rng([spec.seed, stream])
        labels = np.arange(count) % spec.num_classes
        labels = labels[rng.permutation(count)]
        x = means[labels].copy()
        noise = rng.standard_normal(x.shape)
        if len(basis):
            noise += np.tensordot(rng.standard_normal((count, len(basis))) * spec.deform, basis, axes=1)
        x += spec.scale * noise
        x = np.clip(x, 0.0, 1.0)
        if spec.quantize:
            x = np.round(x * 255.0) / 255.0
        return LabeledDataset(x, labels, spec.num_classes, f"synthetic-{stream}")

    train = draw(spec.train_count, 2)
    test = draw(spec.test_count, 3)
    train.name, test.name = "synthetic-train", "synthetic-test"
    return train, test
