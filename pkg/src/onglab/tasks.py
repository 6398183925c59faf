"""Datasets and continual-learning task sequences.

A :class:`TaskSequence` pairs one base dataset with per-task input
transforms (pixel permutation, image rotation, or a random rotation of a
synthetic feature space) and a seeded train/validation split shared by all
tasks. Task data is materialized on demand so that long sequences over
full MNIST do not need to be held in memory at once.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, StructuralError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
SIDE = 28


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise StructuralError(
                f"images {self.images.shape} and labels {self.labels.shape} do not pair up"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise StructuralError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {header} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic number 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(shape))
    payload = len(raw) - header
    if payload != expected:
        raise FormatError(
            f"{path}: header promises {expected} data bytes from offset {header}, found {payload}"
        )
    return shape, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an MNIST image/label IDX pair (optionally gzip-compressed)."""
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if n != n_labels:
        raise FormatError(f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"{labels_path}: label value {labels.max()} outside 0..9")
    images = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), split=split)


def write_mnist_idx(dataset_images_u8, labels, images_path, labels_path) -> None:
    """Write raw IDX files; used to build fixtures and desk-scale subsets."""
    imgs = np.asarray(dataset_images_u8, dtype=np.uint8)
    n = imgs.shape[0]
    imgs = imgs.reshape(n, SIDE, SIDE)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, SIDE, SIDE))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


@dataclass(eq=False)
class TaskSpec:
    kind: str  # "permuted" | "rotated" | "synthetic"
    index: int
    seed: int | None = None
    angle_degrees: float | None = None
    permutation: np.ndarray | None = None
    rotation: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "rotated" and not math.isfinite(self.angle_degrees):
            raise StructuralError("rotation angle must be finite")
        if self.permutation is not None:
            p = self.permutation
            if not np.array_equal(np.sort(p), np.arange(p.size)):
                raise StructuralError("permutation is not a bijection")


def rotation_sampler(angle_degrees: float, side: int = SIDE):
    """Bilinear inverse-mapping taps for rotating a ``side x side`` image.

    Returns ``(index, weight)`` arrays of shape ``(4, side*side)``: output
    pixel ``j`` is ``sum_t weight[t, j] * image[index[t, j]]``. Taps that fall
    outside the image carry zero weight. Positive angles rotate
    counter-clockwise as displayed (row 0 at the top).
    """
    theta = math.radians(angle_degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    centre = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    x = cols.ravel() - centre
    y = centre - rows.ravel()
    xs = cos * x + sin * y
    ys = -sin * x + cos * y
    src_c = xs + centre
    src_r = centre - ys
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    index = np.zeros((4, side * side), dtype=np.int64)
    weight = np.zeros((4, side * side))
    taps = [(0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)]
    for t, (dr, dc, w) in enumerate(taps):
        r = (r0 + dr).astype(np.int64)
        c = (c0 + dc).astype(np.int64)
        inside = (r >= 0) & (r < side) & (c >= 0) & (c < side)
        index[t] = np.where(inside, r * side + c, 0)
        weight[t] = np.where(inside, w, 0.0)
    return index, weight


def rotate_images(images: np.ndarray, angle_degrees: float, side: int = SIDE) -> np.ndarray:
    if angle_degrees == 0:
        return np.array(images, dtype=np.float64, copy=True)
    index, weight = rotation_sampler(angle_degrees, side)
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    out = np.zeros_like(images)
    for t in range(4):
        out += images[:, index[t]] * weight[t]
    return np.clip(out, 0.0, 1.0)


def split_indices(n: int, seed, val_fraction: float = 0.1):
    """Shuffle ``range(n)`` by seed; the last ``val_fraction`` is validation."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    return order[: n - n_val], order[n - n_val:]


@dataclass
class TaskSequence:
    base: Dataset
    specs: list[TaskSpec]
    split_seed: int = 0
    val_fraction: float = 0.1
    train_subset: int | None = None
    train_idx: np.ndarray = field(init=False, repr=False)
    val_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.specs:
            raise StructuralError("a task sequence needs at least one task")
        train, val = split_indices(len(self.base), self.split_seed, self.val_fraction)
        if self.train_subset is not None:
            if self.train_subset < 1:
                raise StructuralError("train_subset must be positive")
            train = train[: self.train_subset]
        self.train_idx = np.sort(train)
        self.val_idx = np.sort(val)
        self._samplers = {}

    def __len__(self):
        return len(self.specs)

    @property
    def n_classes(self) -> int:
        return self.base.n_classes

    @property
    def input_dim(self) -> int:
        return self.base.images.shape[1]

    def transform(self, k: int, x: np.ndarray) -> np.ndarray:
        """Apply task ``k``'s input transform (0-based) to raw base rows."""
        spec = self.specs[k]
        if spec.kind == "permuted":
            return x[:, spec.permutation]
        if spec.kind == "rotated":
            return rotate_images(x, spec.angle_degrees)
        if spec.kind == "synthetic":
            return x @ spec.rotation.T
        raise StructuralError(f"unknown task kind {spec.kind!r}")

    def _subset(self, k: int, idx: np.ndarray):
        return self.transform(k, self.base.images[idx]), self.base.labels[idx].copy()

    def train_data(self, k: int):
        return self._subset(k, self.train_idx)

    def validation_data(self, k: int):
        return self._subset(k, self.val_idx)


def make_permuted(base: Dataset, k_tasks: int, master_seed: int = 0, identity_first: bool = False,
                  **split_kwargs) -> TaskSequence:
    if k_tasks < 1:
        raise StructuralError("k_tasks must be at least 1")
    d = base.images.shape[1]
    specs = []
    for i in range(k_tasks):
        if i == 0 and identity_first:
            perm = np.arange(d)
        else:
            perm = np.random.default_rng([master_seed, i]).permutation(d)
        specs.append(TaskSpec("permuted", i, seed=master_seed, permutation=perm))
    split_kwargs.setdefault("split_seed", master_seed)
    return TaskSequence(base, specs, **split_kwargs)


def rotation_schedule(k_tasks: int, step_degrees: float = 10.0) -> list[float]:
    return [step_degrees * i for i in range(k_tasks)]


def make_rotated(base: Dataset, angles_degrees, **split_kwargs) -> TaskSequence:
    angles = [float(a) for a in angles_degrees]
    if not angles:
        raise StructuralError("need at least one rotation angle")
    specs = [TaskSpec("rotated", i, angle_degrees=a) for i, a in enumerate(angles)]
    return TaskSequence(base, specs, **split_kwargs)


def random_rotation(dim: int, seed) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def make_synthetic(n_tasks: int, dims=(10, 3), seed: int = 0, n_per_class: int = 100,
                   separation: float = 6.0, task_seeds=None, **split_kwargs) -> TaskSequence:
    """Gaussian-cluster classification tasks under per-task input rotations.

    ``dims`` is ``(n_inputs, n_classes)``. Task ``k`` rotates the shared
    clusters with an orthogonal matrix drawn from ``task_seeds[k]``
    (default ``(seed, k)``).
    """
    n_inputs, n_classes = int(dims[0]), int(dims[1])
    if not (1 <= n_inputs <= 20 and 2 <= n_classes <= 4):
        raise StructuralError("synthetic tasks support <= 20 inputs and 2..4 classes")
    if n_tasks < 1:
        raise StructuralError("n_tasks must be at least 1")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_classes, n_inputs))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    x = np.concatenate([m + rng.normal(size=(n_per_class, n_inputs)) for m in means])
    y = np.repeat(np.arange(n_classes), n_per_class)
    order = rng.permutation(y.size)
    base = Dataset(x[order], y[order], n_classes=n_classes)
    if task_seeds is None:
        task_seeds = [[seed, k] for k in range(n_tasks)]
    if len(task_seeds) != n_tasks:
        raise StructuralError("task_seeds must have one entry per task")
    specs = [
        TaskSpec("synthetic", k, seed=ts if np.isscalar(ts) else None, rotation=random_rotation(n_inputs, ts))
        for k, ts in enumerate(task_seeds)
    ]
    split_kwargs.setdefault("split_seed", seed)
    return TaskSequence(base, specs, **split_kwargs)
