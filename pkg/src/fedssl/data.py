"""Datasets, client partitioning, augmentation and mismatch diagnostics."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Feature matrix ``x`` (n, d), integer labels ``y`` (n,) in [0, N).

    ``image_shape`` is set for data that came from images, so augmentations
    can treat rows as (h, w) grids.
    """

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise DataError(f"bad dataset shapes x={self.x.shape} y={self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError("label out of range")

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes, self.image_shape)


@dataclass
class ClientDataset:
    """One client's data: a labeled part and an unlabeled part.

    Labels of the unlabeled part are kept only for evaluation; training code
    must go through ``unlabeled_x`` and never ``quarantined_labels``.
    """

    client_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    n_classes: int
    image_shape: tuple[int, int] | None = None
    labeled_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unlabeled_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _unlabeled_y: np.ndarray = field(default=None, repr=False)

    @property
    def n_labeled(self) -> int:
        return self.labeled_y.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_x.shape[0]

    def quarantined_labels(self) -> np.ndarray:
        """Ground truth of the unlabeled part. Evaluation only."""
        return self._unlabeled_y

    def with_quarantined_labels(self, labels: np.ndarray) -> "ClientDataset":
        """Copy with replaced hidden labels (used by the quarantine audit)."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != self._unlabeled_y.shape:
            raise DataError("replacement labels have the wrong shape")
        return ClientDataset(
            self.client_id, self.labeled_x, self.labeled_y, self.unlabeled_x, self.n_classes,
            self.image_shape, self.labeled_ids, self.unlabeled_ids, labels,
        )


# ---------------------------------------------------------------------------
# Sources


def class_centers(n_points: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Deterministic points on the sphere of the given radius.

    Rows of a fixed random orthonormal frame when ``n_points <= dim`` (so
    all points are pairwise equidistant), otherwise fixed random directions.
    The frame is dense, so class information is spread over every
    coordinate rather than sitting in one.
    """
    g = np.random.default_rng(12345).standard_normal((dim, max(n_points, dim)))
    if n_points <= dim:
        q, _ = np.linalg.qr(g[:, :dim])
        c = q.T[:n_points]
    else:
        c = g.T[:n_points]
        c = c / np.linalg.norm(c, axis=1, keepdims=True)
    return radius * c


def generate_synthetic(
    n_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    radius: float = 2.0,
    modes_per_class: int = 1,
) -> Dataset:
    """Isotropic Gaussian blobs around :func:`class_centers`, shuffled.

    With ``modes_per_class > 1`` each class is a union of that many blobs
    (blob ``j`` belongs to class ``j % n_classes``), with samples split
    evenly across a class's blobs.
    """
    if n_classes < 2 or dim < 2:
        raise DataError("need at least 2 classes and 2 dimensions")
    if modes_per_class < 1:
        raise DataError("modes_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centers = class_centers(n_classes * modes_per_class, dim, radius)
    y = np.repeat(np.arange(n_classes), per_class)
    mode = np.tile(np.arange(per_class) % modes_per_class, n_classes)
    x = centers[y + n_classes * mode] + spread * rng.standard_normal((y.size, dim))
    order = rng.permutation(y.size)
    return Dataset(x[order], y[order], n_classes)


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1] and flattened row-major; the (rows, cols)
    shape is kept on the returned dataset.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gz(images_path) as f:
        img_raw = f.read()
    with _open_maybe_gz(labels_path) as f:
        lab_raw = f.read()

    if len(img_raw) < 16:
        raise DataError(f"{images_path}: truncated header at byte offset {len(img_raw)}")
    magic, n_img, rows, cols = struct.unpack_from(">IIII", img_raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad magic 0x{magic:08x} at byte offset 0")
    if len(lab_raw) < 8:
        raise DataError(f"{labels_path}: truncated header at byte offset {len(lab_raw)}")
    magic, n_lab = struct.unpack_from(">II", lab_raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad magic 0x{magic:08x} at byte offset 0")
    if n_img != n_lab:
        raise DataError(f"count mismatch: {n_img} images (byte offset 4) vs {n_lab} labels (byte offset 4)")

    need = 16 + n_img * rows * cols
    if len(img_raw) < need:
        raise DataError(f"{images_path}: truncated pixel data at byte offset {len(img_raw)}, expected {need} bytes")
    if len(lab_raw) < 8 + n_lab:
        raise DataError(f"{labels_path}: truncated label data at byte offset {len(lab_raw)}, expected {8 + n_lab} bytes")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{labels_path}: label {labels[i]} out of range for {n_classes} classes at byte offset {8 + i}")
    x = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, labels, n_classes, (rows, cols))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def split_fractions(data: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Shuffle and cut into consecutive pieces (e.g. train/val/test)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    cuts = np.floor(np.cumsum(fractions)[:-1] * len(data)).astype(int)
    return [data.subset(np.sort(part)) for part in np.split(order, cuts)]


# ---------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    dirichlet_alpha: float
    label_ratio: float
    seed: int

    def __post_init__(self):
        if self.n_clients < 1:
            raise DataError("n_clients must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise DataError("dirichlet_alpha must be > 0")
        if not 0 < self.label_ratio <= 1:
            raise DataError("label_ratio must be in (0, 1]")


def dirichlet_partition(labels: np.ndarray, spec: PartitionSpec) -> list[np.ndarray]:
    """Split sample indices over clients, class by class.

    For each class a proportion vector over clients is drawn from
    Dir(alpha * 1_M) and that class's (shuffled) samples are cut accordingly.
    Clients left empty take one sample from the currently largest client.
    """
    labels = np.asarray(labels)
    m = spec.n_clients
    if m > labels.size:
        raise DataError(f"{m} clients but only {labels.size} samples")
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(m)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(m, spec.dirichlet_alpha))
        cuts = np.floor(np.cumsum(props)[:-1] * idx.size).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].append(part)
    parts = [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    for k in range(m):
        if parts[k].size == 0:
            donor = max(range(m), key=lambda j: (parts[j].size, -j))
            parts[k] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
    return [p.astype(np.int64) for p in parts]


def split_labeled_unlabeled(
    data: Dataset,
    indices: np.ndarray,
    label_ratio: float,
    seed: int,
    client_id: int = 0,
) -> ClientDataset:
    """Uniform random labeled/unlabeled split; floor(ratio * n) labeled."""
    if not 0 < label_ratio <= 1:
        raise DataError("label_ratio must be in (0, 1]")
    indices = np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(indices)
    n_lab = int(np.floor(label_ratio * indices.size + 1e-9))
    lab = np.sort(order[:n_lab])
    unl = np.sort(order[n_lab:])
    return ClientDataset(
        client_id=client_id,
        labeled_x=data.x[lab],
        labeled_y=data.y[lab],
        unlabeled_x=data.x[unl],
        n_classes=data.n_classes,
        image_shape=data.image_shape,
        labeled_ids=lab,
        unlabeled_ids=unl,
        _unlabeled_y=data.y[unl],
    )


def build_clients(data: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    parts = dirichlet_partition(data.y, spec)
    return [
        split_labeled_unlabeled(data, idx, spec.label_ratio, seed=[spec.seed, 1, k], client_id=k)
        for k, idx in enumerate(parts)
    ]


def class_histogram(labels: np.ndarray, n_classes: int) -> np.ndarray:
    h = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    return h / h.sum() if h.sum() else h


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mismatch_score(client: ClientDataset) -> float:
    """Total-variation distance between the labeled and hidden-label
    unlabeled class histograms."""
    if client.n_labeled == 0 or client.n_unlabeled == 0:
        raise DataError(f"client {client.client_id}: mismatch needs both subsets non-empty")
    return total_variation(
        class_histogram(client.labeled_y, client.n_classes),
        class_histogram(client.quarantined_labels(), client.n_classes),
    )


def partition_report(clients: Sequence[ClientDataset]) -> list[dict]:
    rows = []
    for c in clients:
        lab = np.bincount(c.labeled_y, minlength=c.n_classes)
        unl = np.bincount(c.quarantined_labels(), minlength=c.n_classes)
        try:
            mm = mismatch_score(c)
        except DataError:
            mm = float("nan")
        rows.append({
            "client": c.client_id,
            "n_labeled": c.n_labeled,
            "n_unlabeled": c.n_unlabeled,
            "labeled_hist": lab.tolist(),
            "unlabeled_hist": unl.tolist(),
            "mismatch": mm,
        })
    return rows


def dump_csv(clients: Sequence[ClientDataset], path) -> Path:
    """Write every client's samples: features, label, split tag, client."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        dim = clients[0].labeled_x.shape[1] if clients else 0
        w.writerow([f"f{i}" for i in range(dim)] + ["label", "split", "client"])
        for c in clients:
            for row, lab in zip(c.labeled_x, c.labeled_y):
                w.writerow([repr(float(v)) for v in row] + [int(lab), "labeled", c.client_id])
            for row, lab in zip(c.unlabeled_x, c.quarantined_labels()):
                w.writerow([repr(float(v)) for v in row] + [int(lab), "unlabeled", c.client_id])
    return path


# ---------------------------------------------------------------------------
# Augmentation


def augment_weak(x: np.ndarray, rng: np.random.Generator, image_shape=None) -> np.ndarray:
    """Shift each image by up to one pixel per axis, or add N(0, 0.01^2)
    noise to generic vectors. Works on one row or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if image_shape is None:
        out = xb + 0.01 * rng.standard_normal(xb.shape)
    else:
        h, w = image_shape
        imgs = xb.reshape(-1, h, w)
        shifts = rng.integers(-1, 2, size=(imgs.shape[0], 2))
        out = np.empty_like(imgs)
        for i, (dy, dx) in enumerate(shifts):
            out[i] = _shift(imgs[i], dy, dx)
        out = np.clip(out.reshape(xb.shape), 0.0, 1.0)
    return out[0] if single else out


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def _img_op(name: str, img: np.ndarray, s: float, sign: float) -> np.ndarray:
    # s in [0, 1]: fraction of the maximum intensity
    if s == 0.0 or name == "identity":
        return img
    if name == "rotate":
        a = np.deg2rad(30.0 * s * sign)
        return _affine(img, np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))
    if name == "shear_x":
        return _affine(img, np.array([[1.0, 0.0], [0.3 * s * sign, 1.0]]))
    if name == "shear_y":
        return _affine(img, np.array([[1.0, 0.3 * s * sign], [0.0, 1.0]]))
    if name == "translate_x":
        return ndimage.shift(img, (0.0, 0.3 * img.shape[1] * s * sign), order=1, mode="constant")
    if name == "translate_y":
        return ndimage.shift(img, (0.3 * img.shape[0] * s * sign, 0.0), order=1, mode="constant")
    if name == "brightness":
        return img * (1.0 + 0.9 * s * sign)
    if name == "contrast":
        m = img.mean()
        return m + (img - m) * (1.0 + 0.9 * s * sign)
    if name == "invert":
        return (1.0 - s) * img + s * (1.0 - img)
    if name == "solarize":
        thr = 1.0 - s
        return np.where(img > thr, 1.0 - img, img)
    raise KeyError(name)


def _vec_op(name: str, v: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    if s == 0.0 or name == "identity":
        return v
    if name == "noise":
        return v + s * rng.standard_normal(v.shape)
    if name == "mask":
        keep = rng.random(v.shape) >= s
        return v * keep
    raise KeyError(name)


IMAGE_OPS = (
    "identity", "rotate", "translate_x", "translate_y", "shear_x", "shear_y",
    "brightness", "contrast", "invert", "solarize",
)
VECTOR_OPS = ("identity", "noise", "mask")


def augment_strong(
    x: np.ndarray,
    rng: np.random.Generator,
    n_ops: int = 1,
    magnitude: float = 10,
    image_shape=None,
    ops: Sequence[str] | None = None,
) -> np.ndarray:
    """RandAugment-style: ``n_ops`` random transforms per sample at
    intensity ``magnitude / 30``. Images are clipped to [0, 1]."""
    if not 0 <= magnitude <= 30:
        raise DataError("magnitude must be in [0, 30]")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    s = magnitude / 30.0
    pool = tuple(ops) if ops is not None else (VECTOR_OPS if image_shape is None else IMAGE_OPS)
    choice = rng.integers(0, len(pool), size=(xb.shape[0], n_ops))
    out = xb.copy()
    if image_shape is None:
        for j in range(n_ops):
            for op_idx, name in enumerate(pool):
                rows = choice[:, j] == op_idx
                if rows.any():
                    out[rows] = _vec_op(name, out[rows], s, rng)
    else:
        h, w = image_shape
        signs = rng.choice((-1.0, 1.0), size=(xb.shape[0], n_ops))
        for i in range(xb.shape[0]):
            img = out[i].reshape(h, w)
            for j, sg in zip(choice[i], signs[i]):
                img = _img_op(pool[j], img, s, sg)
            out[i] = np.clip(img, 0.0, 1.0).ravel()
    return out[0] if single else out
