"""Dataset ingestion and the sampling helpers the experiments rely on.

Loaders cover the IDX image container (MNIST, KMNIST, FashionMNIST) and the
Forest Cover CSV; both are pure functions of (path, seed).  Pixels are
scaled to [0, 1]; covtype continuous columns are standardized by train-split
moments.  The module also provides bilinear upscaling (half-pixel-center
convention), uniform sampling on Euclidean spheres, Gaussian pair distances
(the sqrt(2n) concentration behind the resolution experiment), and a seeded
synthetic image generator used for offline smoke runs.

The library never touches the network; the CLI's fetch-data command
downloads files using the source table at the bottom.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Flattened points with integer labels and original shape metadata."""

    x: np.ndarray               # (n, d) float64
    y: np.ndarray               # (n,) int64
    n_classes: int
    shape: tuple[int, ...]      # (h, w, c) for images, (d,) for flat data

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("points and labels must align as (n, d) and (n,)")
        if x.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if int(np.prod(self.shape)) != x.shape[1]:
            raise ValueError(f"shape {self.shape} does not flatten to {x.shape[1]}")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def is_image(self) -> bool:
        return len(self.shape) == 3

    def images(self) -> np.ndarray:
        """(n, h, w, c) view of the points; image datasets only."""
        if not self.is_image:
            raise ValueError("dataset has no image shape")
        return self.x.reshape((len(self),) + self.shape)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices], self.n_classes, self.shape)


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------


def _read_be32(fh, path: Path, what: str) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx_images(path) -> np.ndarray:
    """(n, h, w) uint8 pixel array from an IDX image file (big-endian)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_be32(fh, path, "magic")
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}")
        count = _read_be32(fh, path, "count")
        rows = _read_be32(fh, path, "rows")
        cols = _read_be32(fh, path, "cols")
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise ValueError(f"{path}: truncated pixel payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_be32(fh, path, "magic")
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}")
        count = _read_be32(fh, path, "count")
        raw = fh.read(count)
        if len(raw) != count:
            raise ValueError(f"{path}: truncated label payload")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def save_idx_images(path, images: np.ndarray) -> None:
    """Inverse of :func:`load_idx_images`; used for fixtures and validation."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("expected (n, h, w) uint8 images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    """Join an IDX image/label file pair into a Dataset, pixels scaled to [0, 1]."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n, h, w = images.shape
    x = images.reshape(n, h * w).astype(np.float64) / 255.0
    n_classes = int(labels.max()) + 1
    return Dataset(x, labels.astype(np.int64), n_classes, (h, w, 1))


# ---------------------------------------------------------------------------
# Forest Cover CSV
# ---------------------------------------------------------------------------


def load_covtype(
    csv_path,
    seed: int,
    n_total: int = 10000,
    n_train: int = 8000,
) -> tuple[Dataset, Dataset]:
    """Seeded covtype subsample split into (train, val).

    Expects 54 feature columns plus a label column with classes 1..7
    (remapped to 0..6).  Draws ``n_total`` rows uniformly without
    replacement, splits off the first ``n_train`` for training, and
    standardizes continuous columns (those not {0,1}-valued) by the train
    split's mean/std; one-hot columns pass through unchanged.
    """
    if not 0 < n_train < n_total:
        raise ValueError("need 0 < n_train < n_total")
    path = Path(csv_path)
    try:
        table = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from None
    if table.shape[1] != 55:
        raise ValueError(f"{path}: expected 55 columns (54 features + label), got {table.shape[1]}")
    if table.shape[0] < n_total:
        raise ValueError(f"{path}: only {table.shape[0]} rows, need {n_total}")
    labels = table[:, -1].astype(np.int64) - 1
    if labels.min() < 0 or labels.max() > 6:
        raise ValueError(f"{path}: labels outside 1..7")
    features = table[:, :-1]

    rng = np.random.default_rng(seed)
    chosen = rng.choice(table.shape[0], size=n_total, replace=False)
    train_idx, val_idx = chosen[:n_train], chosen[n_train:]

    x_train = features[train_idx].copy()
    x_val = features[val_idx].copy()
    is_onehot = np.array([
        bool(np.all(np.isin(features[chosen, j], (0.0, 1.0))))
        for j in range(features.shape[1])
    ])
    continuous = ~is_onehot
    mean = x_train[:, continuous].mean(axis=0)
    std = x_train[:, continuous].std(axis=0)
    std[std == 0] = 1.0
    x_train[:, continuous] = (x_train[:, continuous] - mean) / std
    x_val[:, continuous] = (x_val[:, continuous] - mean) / std

    d = features.shape[1]
    return (
        Dataset(x_train, labels[train_idx], 7, (d,)),
        Dataset(x_val, labels[val_idx], 7, (d,)),
    )


# ---------------------------------------------------------------------------
# transforms and samplers
# ---------------------------------------------------------------------------


def bilinear_resize_images(images: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Upscale (n, h, w, c) images bilinearly with half-pixel centers.

    Source coordinate for destination index i is (i + 0.5) * old/new - 0.5,
    clamped to the valid range; outputs therefore stay inside each image's
    [min, max].
    """
    n, h, w, c = images.shape
    if new_h < h or new_w < w:
        raise ValueError("bilinear_resize only upscales (new dims >= old)")

    def axis_coords(new, old):
        coords = (np.arange(new) + 0.5) * (old / new) - 0.5
        coords = np.clip(coords, 0.0, old - 1.0)
        low = np.floor(coords).astype(np.int64)
        high = np.minimum(low + 1, old - 1)
        frac = coords - low
        return low, high, frac

    y0, y1, fy = axis_coords(new_h, h)
    x0, x1, fx = axis_coords(new_w, w)
    fy = fy[None, :, None, None]
    fx = fx[None, None, :, None]
    top = images[:, y0][:, :, x0] * (1 - fx) + images[:, y0][:, :, x1] * fx
    bottom = images[:, y1][:, :, x0] * (1 - fx) + images[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


def bilinear_resize(dataset: Dataset, new_h: int, new_w: int) -> Dataset:
    """Bilinearly upscaled copy of an image dataset; labels unchanged."""
    resized = bilinear_resize_images(dataset.images(), new_h, new_w)
    c = dataset.shape[2]
    return Dataset(
        resized.reshape(len(dataset), new_h * new_w * c),
        dataset.y,
        dataset.n_classes,
        (new_h, new_w, c),
    )


def subsample_split(
    dataset: Dataset, n_total: int, n_train: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Seeded uniform subsample without replacement, split into train/val."""
    if not 0 < n_train < n_total <= len(dataset):
        raise ValueError(
            f"need 0 < n_train < n_total <= {len(dataset)}, "
            f"got n_train={n_train}, n_total={n_total}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(dataset), size=n_total, replace=False)
    return dataset.take(chosen[:n_train]), dataset.take(chosen[n_train:])


def sample_sphere(center, radius: float, n: int, seed: int) -> np.ndarray:
    """n points uniform on the Euclidean sphere of given radius around center."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((n, center.size))
    norms = np.linalg.norm(draws, axis=1, keepdims=True)
    return center[None, :] + radius * draws / norms


def gaussian_pair_distances(n_dim: int, n_pairs: int, seed: int) -> np.ndarray:
    """||x - y||_2 for independent standard-normal x, y of dimension n_dim.

    For large n these concentrate as Normal(sqrt(2n), 1), the approximation
    behind the resolution-scaling argument.
    """
    if n_dim < 1:
        raise ValueError("n_dim must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_pairs, n_dim))
    y = rng.standard_normal((n_pairs, n_dim))
    return np.linalg.norm(x - y, axis=1)


# ---------------------------------------------------------------------------
# synthetic images (offline smoke data; not one of the paper's datasets)
# ---------------------------------------------------------------------------


def synthetic_image_dataset(
    n: int,
    h: int = 28,
    w: int = 28,
    n_classes: int = 10,
    seed: int = 0,
    noise: float = 0.25,
) -> Dataset:
    """Seeded smooth-template images for demos and offline pipeline tests.

    Each class gets a fixed smooth template (low-frequency cosine mixture);
    a sample is its template plus pixel noise, clipped to [0, 1].  Not a
    stand-in for any real dataset; exists so the full pipeline can run
    without downloads.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    templates = np.empty((n_classes, h, w))
    for cls in range(n_classes):
        acc = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase_y, phase_x = rng.uniform(0, 2 * np.pi, size=2)
            acc += np.cos(2 * np.pi * fy * yy + phase_y) * np.cos(2 * np.pi * fx * xx + phase_x)
        acc -= acc.min()
        templates[cls] = acc / acc.max()
    labels = rng.integers(0, n_classes, size=n)
    images = templates[labels] + noise * rng.standard_normal((n, h, w))
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images.reshape(n, h * w), labels, n_classes, (h, w, 1))


# ---------------------------------------------------------------------------
# download sources for the CLI fetch-data command
# ---------------------------------------------------------------------------

#: Files per dataset id: (relative target path, url, gzipped).  Official
#: archive checksums are not shipped; fetch-data validates structure and
#: records sha256 of what it downloaded.
DATASET_SOURCES: dict[str, list[tuple[str, str, bool]]] = {
    "mnist": [
        ("mnist/train-images-idx3-ubyte", "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz", True),
        ("mnist/train-labels-idx1-ubyte", "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz", True),
        ("mnist/t10k-images-idx3-ubyte", "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz", True),
        ("mnist/t10k-labels-idx1-ubyte", "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz", True),
    ],
    "kmnist": [
        ("kmnist/train-images-idx3-ubyte", "http://codh.rois.ac.jp/kmnist/dataset/kmnist/train-images-idx3-ubyte.gz", True),
        ("kmnist/train-labels-idx1-ubyte", "http://codh.rois.ac.jp/kmnist/dataset/kmnist/train-labels-idx1-ubyte.gz", True),
        ("kmnist/t10k-images-idx3-ubyte", "http://codh.rois.ac.jp/kmnist/dataset/kmnist/t10k-images-idx3-ubyte.gz", True),
        ("kmnist/t10k-labels-idx1-ubyte", "http://codh.rois.ac.jp/kmnist/dataset/kmnist/t10k-labels-idx1-ubyte.gz", True),
    ],
    "fashion_mnist": [
        ("fashion_mnist/train-images-idx3-ubyte", "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-images-idx3-ubyte.gz", True),
        ("fashion_mnist/train-labels-idx1-ubyte", "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/train-labels-idx1-ubyte.gz", True),
        ("fashion_mnist/t10k-images-idx3-ubyte", "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-images-idx3-ubyte.gz", True),
        ("fashion_mnist/t10k-labels-idx1-ubyte", "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/t10k-labels-idx1-ubyte.gz", True),
    ],
    "covtype": [
        ("covtype/covtype.data", "https://archive.ics.uci.edu/ml/machine-learning-databases/covtype/covtype.data.gz", True),
    ],
}


def image_dataset_paths(data_root, dataset_id: str, split: str = "train") -> tuple[Path, Path]:
    """Expected on-disk (images, labels) paths for an IDX dataset id."""
    prefix = {"train": "train", "test": "t10k"}[split]
    root = Path(data_root) / dataset_id
    return root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte"
