"""Datasets: CIFAR-10 binary files, seeded synthetic images, splits and batching."""
import os
from dataclasses import dataclass, field, replace

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class Dataset:
    """Raw images in [0, 1] with integer labels and per-channel normalisation stats.

    ``mean``/``std`` are applied on the way out by :func:`batches` so that the
    stored pixels stay exactly representable in the 8-bit file format.
    """

    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    classes: int
    name: str = "dataset"
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes - 1}]")
        if self.mean is None:
            m, s = channel_stats(self.images)
            object.__setattr__(self, "mean", m)
            object.__setattr__(self, "std", s)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def normalized(self, idx=slice(None)):
        x = self.images[idx]
        return ((x - self.mean[:, None, None]) / self.std[:, None, None]).astype(np.float32)

    def subset(self, idx, name=None, keep_stats=True):
        idx = np.asarray(idx)
        kw = {"mean": self.mean, "std": self.std} if keep_stats else {"mean": None, "std": None}
        return replace(self, images=self.images[idx], labels=self.labels[idx], name=name or self.name, **kw)

    def with_stats_from(self, other):
        return replace(self, mean=other.mean, std=other.std)


def channel_stats(images):
    if len(images) == 0:
        c = images.shape[1]
        return np.zeros(c, np.float32), np.ones(c, np.float32)
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


# -- CIFAR-10 binary format ----------------------------------------------
def read_cifar_file(path, classes=10):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} bytes (truncated file?)")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise ValueError(f"{path}: record {bad} has label {labels[bad]} > {classes - 1}")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory, split="train"):
    """Load the CIFAR-10 binary release from ``directory``.

    ``split`` is ``"train"`` (the five data batches) or ``"test"``.  Files that
    are absent are skipped, but at least one must exist.
    """
    names = TRAIN_FILES if split == "train" else (TEST_FILE,)
    paths = [os.path.join(directory, n) for n in names if os.path.exists(os.path.join(directory, n))]
    if not paths:
        raise FileNotFoundError(f"no CIFAR-10 {split} files ({', '.join(names)}) in {directory}")
    parts = [read_cifar_file(p) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10, name=f"cifar10-{split}")


def write_cifar10(dataset, path):
    """Write a dataset (3x32x32, <= 256 classes) as CIFAR-style binary records."""
    if dataset.shape != CIFAR_SHAPE:
        raise ValueError(f"CIFAR records hold {CIFAR_SHAPE} images, got {dataset.shape}")
    if dataset.classes > 256:
        raise ValueError("label must fit in one byte")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    records.tofile(path)


# -- splitting -------------------------------------------------------------
def split_train_val(dataset, frac=0.1, seed=0):
    """Stratified split: ``floor(frac * N_c)`` samples of every class go to validation.

    Both halves carry normalisation statistics computed from the training half.
    """
    if not 0 < frac < 1:
        raise ValueError(f"frac must be in (0, 1), got {frac}")
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        k = int(np.floor(frac * members.size))
        if k < 1:
            raise ValueError(f"class {c} has {members.size} samples; frac={frac} leaves it no validation sample")
        val_idx.append(rng.permutation(members)[:k])
    val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.array([], dtype=np.intp)
    mask = np.ones(len(dataset), dtype=bool)
    mask[val_idx] = False
    train = dataset.subset(np.flatnonzero(mask), f"{dataset.name}-train", keep_stats=False)
    val = dataset.subset(val_idx, f"{dataset.name}-val").with_stats_from(train)
    return train, val


# -- synthetic data --------------------------------------------------------
def synth_dataset(seed=0, classes=4, per_class=100, hw=16, difficulty=0.5, channels=3):
    """Class-conditional Gaussian-blob images.

    Each class owns a random prototype made of a few coloured Gaussian blobs.
    A sample is its prototype with blob centres jittered and pixel noise added,
    both scaled by ``difficulty``; at difficulty 0 every sample equals its
    prototype, so the classes are trivially linearly separable.
    """
    if classes < 1 or per_class < 1 or hw < 2:
        raise ValueError("classes, per_class must be >= 1 and hw >= 2")
    if difficulty < 0:
        raise ValueError(f"difficulty must be >= 0, got {difficulty}")
    rng = np.random.default_rng(seed)
    blobs = 3
    centres = rng.uniform(0.15, 0.85, size=(classes, blobs, 2)) * hw
    colours = rng.uniform(0.2, 1.0, size=(classes, blobs, channels))
    widths = rng.uniform(0.08, 0.2, size=(classes, blobs)) * hw
    grid = np.arange(hw, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    jitter = rng.standard_normal((n, blobs, 2)) * difficulty * 0.15 * hw
    noise = rng.standard_normal((n, channels, hw, hw)) * difficulty * 0.25
    images = np.zeros((n, channels, hw, hw))
    for b in range(blobs):
        cy = centres[labels, b, 0] + jitter[:, b, 0]
        cx = centres[labels, b, 1] + jitter[:, b, 1]
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        bump = np.exp(-d2 / (2 * widths[labels, b][:, None, None] ** 2))
        images += colours[labels, b][:, :, None, None] * bump[:, None]
    images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order].astype(np.int64), classes,
                   name=f"synth-s{seed}-c{classes}-n{per_class}-hw{hw}-d{difficulty:g}")


def parse_data_spec(spec):
    """Parse ``cifar10:<dir>`` or ``synth:key=value,...`` into (kind, options)."""
    kind, _, rest = spec.partition(":")
    if kind == "cifar10":
        if not rest:
            raise ValueError("cifar10 data spec needs a directory: cifar10:<dir>")
        return kind, {"directory": rest}
    if kind == "synth":
        opts = {}
        casts = {"seed": int, "classes": int, "per_class": int, "hw": int, "difficulty": float, "channels": int}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq or key not in casts:
                raise ValueError(f"bad synth option {item!r}; expected key=value with key in {sorted(casts)}")
            try:
                opts[key] = casts[key](value)
            except ValueError:
                raise ValueError(f"synth option {key} expects {casts[key].__name__}, got {value!r}") from None
        return kind, opts
    raise ValueError(f"unknown data source {spec!r}; use cifar10:<dir> or synth:k=v,...")


def load_data(spec):
    kind, opts = parse_data_spec(spec)
    if kind == "cifar10":
        return load_cifar10(opts["directory"])
    return synth_dataset(**opts)


# -- batching -------------------------------------------------------------
def _augment(x, rng, pad=4):
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    return np.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])


def batches(dataset, batch_size, seed=0, epoch=0, shuffle=True, augment=False):
    """Yield normalised ``(x, y)`` mini-batches covering the dataset once.

    The order depends only on ``(seed, epoch)``; the last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        x = dataset.normalized(idx)
        if augment:
            x = _augment(x, rng)
        yield np.ascontiguousarray(x, dtype=np.float32), dataset.labels[idx]
