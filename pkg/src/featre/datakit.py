"""Datasets: loading, preprocessing, and clean reference splits.

Images live as uint8 arrays of shape (N, C, H, W); models consume the
mean-std normalized float view produced by :func:`normalize`. Per-dataset
normalization constants are fixed registry entries, not recomputed from data.

On disk a dataset is ``<root>/<name>/{train,test}.bin`` (raw tensors behind a
small text header) plus ``stats.meta``. Raw MNIST IDX files are ingested when
present; otherwise a deterministic procedural digit set of the same shape is
synthesized so the full pipeline runs without downloads.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kvtext

_BIN_MAGIC = "featre-tensors 1"


@dataclass(frozen=True)
class DatasetStats:
    """Fixed preprocessing constants and geometry for one dataset."""

    name: str
    channel_means: tuple[float, ...]
    channel_stds: tuple[float, ...]
    image_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int

    def __post_init__(self):
        c = self.image_shape[0]
        if len(self.channel_means) != c or len(self.channel_stds) != c:
            raise ValueError(
                f"{self.name}: means/stds length must match {c} channels"
            )
        if any(s <= 0 for s in self.channel_stds):
            raise ValueError(f"{self.name}: channel stds must be strictly positive")
        if not all(0.0 <= m <= 1.0 for m in self.channel_means):
            raise ValueError(f"{self.name}: channel means must lie in [0,1]")


STATS_REGISTRY: dict[str, DatasetStats] = {
    "mnist": DatasetStats("mnist", (0.1307,), (0.3081,), (1, 32, 32), 10),
    "cifar10": DatasetStats(
        "cifar10", (0.4914, 0.4822, 0.4465), (0.2023, 0.1994, 0.2010), (3, 32, 32), 10
    ),
    "gtsrb": DatasetStats(
        "gtsrb", (0.3403, 0.3121, 0.3214), (0.2724, 0.2608, 0.2669), (3, 32, 32), 43
    ),
    "imagenet": DatasetStats(
        "imagenet", (0.4850, 0.4560, 0.4060), (0.2290, 0.2240, 0.2250), (3, 224, 224), 200
    ),
}


def get_stats(name: str) -> DatasetStats:
    try:
        return STATS_REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown dataset {name!r}; known: {sorted(STATS_REGISTRY)}"
        ) from None


@dataclass
class LabeledDataset:
    """uint8 images with integer class labels and per-sample poison flags."""

    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    poisoned_flags: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images ({len(self.images)}) and labels ({len(self.labels)}) disagree on N"
            )
        if self.poisoned_flags is None:
            self.poisoned_flags = np.zeros(len(self.labels), dtype=bool)
        self.poisoned_flags = np.ascontiguousarray(self.poisoned_flags, dtype=bool)
        if len(self.poisoned_flags) != len(self.labels):
            raise ValueError("poisoned_flags length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels.max() if self.labels.max() >= self.num_classes else self.labels.min())
            raise ValueError(f"label {bad} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes, self.poisoned_flags[idx]
        )

    def indices_by_class(self) -> dict[int, np.ndarray]:
        return {
            c: np.nonzero(self.labels == c)[0] for c in range(self.num_classes)
        }


@dataclass
class CleanReferenceSet:
    """A few verified-clean sample indices per class (defender's data)."""

    per_class: dict[int, list[int]]
    samples_per_class: int

    def all_indices(self) -> list[int]:
        out: list[int] = []
        for c in sorted(self.per_class):
            out.extend(self.per_class[c])
        return out

    def class_indices(self, label: int) -> list[int]:
        return list(self.per_class.get(label, []))


# ---------------------------------------------------------------------------
# preprocessing


def normalize(image, stats: DatasetStats) -> torch.Tensor:
    """Map uint8 pixels to the model input space: (x/255 - mean) / std.

    Accepts one image (C,H,W) or a batch (N,C,H,W); returns float32.
    """
    arr = _as_numpy(image)
    _check_image_shape(arr.shape, stats)
    mean = np.asarray(stats.channel_means, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(stats.channel_stds, dtype=np.float32).reshape(-1, 1, 1)
    out = (arr.astype(np.float32) / 255.0 - mean) / std
    return torch.from_numpy(out)


def denormalize(t, stats: DatasetStats) -> np.ndarray:
    """Inverse of :func:`normalize`: round(clip((t*std + mean)*255)) as uint8."""
    arr = _as_numpy(t).astype(np.float64)
    _check_image_shape(arr.shape, stats)
    mean = np.asarray(stats.channel_means, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(stats.channel_stds, dtype=np.float64).reshape(-1, 1, 1)
    raw = (arr * std + mean) * 255.0
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8)


def normalized_bounds(stats: DatasetStats) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel (low, high) of the valid normalized-pixel range."""
    mean = torch.tensor(stats.channel_means, dtype=torch.float32).view(-1, 1, 1)
    std = torch.tensor(stats.channel_stds, dtype=torch.float32).view(-1, 1, 1)
    return (0.0 - mean) / std, (1.0 - mean) / std


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _check_image_shape(shape, stats: DatasetStats) -> None:
    if tuple(shape[-3:]) != stats.image_shape or len(shape) not in (3, 4):
        raise ValueError(
            f"image shape {tuple(shape)} does not match {stats.name} {stats.image_shape}"
        )


# ---------------------------------------------------------------------------
# reference sets


def build_reference_set(
    ds: LabeledDataset, n_per_class: int = 10, seed: int = 0
) -> CleanReferenceSet:
    """Draw up to n_per_class clean samples per class, without replacement."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    per_class: dict[int, list[int]] = {}
    for c in range(ds.num_classes):
        pool = np.nonzero((ds.labels == c) & ~ds.poisoned_flags)[0]
        if len(pool) == 0:
            raise ValueError(f"class {c} has no clean samples to draw from")
        take = min(n_per_class, len(pool))
        chosen = rng.choice(pool, size=take, replace=False)
        per_class[c] = sorted(int(i) for i in chosen)
    return CleanReferenceSet(per_class, n_per_class)


def save_reference_set(path, refset: CleanReferenceSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "index"])
        for c in sorted(refset.per_class):
            for i in refset.per_class[c]:
                writer.writerow([c, i])


def load_reference_set(path) -> CleanReferenceSet:
    per_class: dict[int, list[int]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["class", "index"]:
            raise ValueError(f"{path}: not a reference-set file")
        for row in reader:
            if not row:
                continue
            c, i = int(row[0]), int(row[1])
            per_class.setdefault(c, []).append(i)
    counts = {len(v) for v in per_class.values()}
    n = max(counts) if counts else 0
    return CleanReferenceSet(per_class, n)


# ---------------------------------------------------------------------------
# binary container


def save_dataset_file(path, ds: LabeledDataset) -> None:
    header = kvtext.format_kv(
        {
            "images.dtype": "uint8",
            "images.shape": list(ds.images.shape),
            "labels.dtype": "int64",
            "labels.shape": [len(ds.labels)],
            "flags.dtype": "uint8",
            "flags.shape": [len(ds.labels)],
            "num_classes": ds.num_classes,
        }
    )
    with open(path, "wb") as fh:
        fh.write((_BIN_MAGIC + "\n").encode("ascii"))
        fh.write(header.encode("ascii"))
        fh.write(b"END\n")
        fh.write(ds.images.tobytes())
        fh.write(ds.labels.astype("<i8").tobytes())
        fh.write(ds.poisoned_flags.astype(np.uint8).tobytes())


def load_dataset_file(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", "replace").strip()
        if magic != _BIN_MAGIC:
            raise ValueError(f"{path}: not a dataset container (magic {magic!r})")
        header_lines = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            if line.strip() == b"END":
                break
            header_lines.append(line.decode("ascii"))
        kv = kvtext.parse_kv("".join(header_lines))
        ishape = tuple(kvtext.get_ints(kv, "images.shape"))
        n = kvtext.get_ints(kv, "labels.shape")[0]
        num_classes = kvtext.get_int(kv, "num_classes")
        images = np.frombuffer(fh.read(int(np.prod(ishape))), dtype=np.uint8).reshape(ishape)
        labels = np.frombuffer(fh.read(n * 8), dtype="<i8")
        flags = np.frombuffer(fh.read(n), dtype=np.uint8).astype(bool)
    return LabeledDataset(images.copy(), labels.copy(), num_classes, flags)


def save_dataset_dir(root, name: str, train: LabeledDataset, test: LabeledDataset,
                     stats: DatasetStats) -> Path:
    d = Path(root) / name
    d.mkdir(parents=True, exist_ok=True)
    save_dataset_file(d / "train.bin", train)
    save_dataset_file(d / "test.bin", test)
    kvtext.write_kv(
        d / "stats.meta",
        {
            "name": stats.name,
            "channel_means": list(stats.channel_means),
            "channel_stds": list(stats.channel_stds),
            "image_shape": list(stats.image_shape),
            "num_classes": stats.num_classes,
        },
    )
    return d


def load_dataset_dir(root, name: str) -> tuple[LabeledDataset, LabeledDataset, DatasetStats]:
    d = Path(root) / name
    meta = kvtext.read_kv(d / "stats.meta")
    stats = DatasetStats(
        meta["name"],
        tuple(kvtext.get_floats(meta, "channel_means")),
        tuple(kvtext.get_floats(meta, "channel_stds")),
        tuple(kvtext.get_ints(meta, "image_shape")),
        kvtext.get_int(meta, "num_classes"),
    )
    return load_dataset_file(d / "train.bin"), load_dataset_file(d / "test.bin"), stats


# ---------------------------------------------------------------------------
# ingestion: MNIST IDX archives (pre-downloaded), 28x28 zero-padded to 32x32


def ingest_mnist_idx(raw_dir) -> tuple[LabeledDataset, LabeledDataset]:
    raw = Path(raw_dir)

    def find(stem):
        for suffix in ("", ".gz"):
            p = raw / (stem + suffix)
            if p.exists():
                return p
        raise FileNotFoundError(f"{stem}[.gz] not found under {raw}")

    def read_idx(path):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rb") as fh:
            data = fh.read()
        magic, = struct.unpack(">i", data[:4])
        if magic == 2051:
            n, h, w = struct.unpack(">iii", data[4:16])
            arr = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, h, w)
            return arr
        if magic == 2049:
            n, = struct.unpack(">i", data[4:8])
            return np.frombuffer(data, dtype=np.uint8, offset=8)
        raise ValueError(f"{path}: unknown IDX magic {magic}")

    def to_ds(images28, labels):
        images = np.zeros((len(images28), 1, 32, 32), dtype=np.uint8)
        images[:, 0, 2:30, 2:30] = images28
        return LabeledDataset(images, labels.astype(np.int64), 10)

    train = to_ds(read_idx(find("train-images-idx3-ubyte")), read_idx(find("train-labels-idx1-ubyte")))
    test = to_ds(read_idx(find("t10k-images-idx3-ubyte")), read_idx(find("t10k-labels-idx1-ubyte")))
    return train, test


# ---------------------------------------------------------------------------
# procedural digits (network-free stand-in at MNIST/CIFAR scale)

_DIGIT_ROWS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]


def _glyph(digit: int) -> np.ndarray:
    return np.array([[float(ch) for ch in row] for row in _DIGIT_ROWS[digit]], dtype=np.float32)


def _scaled_glyphs(heights) -> dict[int, dict[int, np.ndarray]]:
    out: dict[int, dict[int, np.ndarray]] = {d: {} for d in range(10)}
    for d in range(10):
        g = torch.from_numpy(_glyph(d))[None, None]
        for h in heights:
            w = max(3, round(h * 5 / 7))
            scaled = torch.nn.functional.interpolate(
                g, size=(h, w), mode="bilinear", align_corners=False
            )[0, 0]
            out[d][h] = scaled.clamp(0, 1).numpy()
    return out


def synth_digits(
    n: int,
    *,
    channels: int = 1,
    size: int = 32,
    num_classes: int = 10,
    seed: int = 0,
) -> LabeledDataset:
    """Deterministic digit images: scaled glyphs with jittered placement,
    intensity/colour variation, and pixel noise."""
    if num_classes > 10:
        raise ValueError("procedural digits cover at most 10 classes")
    rng = np.random.default_rng(seed)
    heights = list(range(14, 25))
    glyphs = _scaled_glyphs(heights)
    images = np.zeros((n, channels, size, size), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        d = int(labels[i])
        h = int(rng.choice(heights))
        glyph = glyphs[d][h]
        gh, gw = glyph.shape
        top = int(rng.integers(0, size - gh + 1))
        left = int(rng.integers(0, size - gw + 1))
        canvas = np.zeros((channels, size, size), dtype=np.float32)
        if channels == 1:
            fg = rng.uniform(0.55, 1.0)
            canvas[0, top:top + gh, left:left + gw] = glyph * fg
        else:
            fg = rng.uniform(0.45, 1.0, size=channels)
            fg[rng.integers(0, channels)] = rng.uniform(0.8, 1.0)  # keep one channel bright
            bg = rng.uniform(0.0, 0.25, size=channels)
            canvas += bg[:, None, None]
            region = canvas[:, top:top + gh, left:left + gw]
            canvas[:, top:top + gh, left:left + gw] = (
                region * (1 - glyph[None]) + fg[:, None, None] * glyph[None]
            )
        canvas += rng.normal(0.0, rng.uniform(0.02, 0.05), size=canvas.shape)
        images[i] = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    return LabeledDataset(images, labels.astype(np.int64), num_classes)


def ensure_dataset(
    root,
    name: str,
    *,
    train_n: int = 6000,
    test_n: int = 1000,
    seed: int = 7,
) -> tuple[LabeledDataset, LabeledDataset, DatasetStats]:
    """Load ``<root>/<name>``, building it first if absent.

    Build order: saved container -> raw MNIST IDX files under <root>/<name>/raw
    (mnist only) -> procedural digits of the dataset's registered shape.
    """
    d = Path(root) / name
    if (d / "train.bin").exists():
        return load_dataset_dir(root, name)
    stats = get_stats(name)
    if name == "mnist" and (d / "raw").exists():
        train, test = ingest_mnist_idx(d / "raw")
    else:
        c, h, w = stats.image_shape
        if h != w or h != 32:
            raise ValueError(f"no data for {name} and no synthesizer at shape {stats.image_shape}")
        train = synth_digits(train_n, channels=c, size=h, num_classes=stats.num_classes, seed=seed)
        test = synth_digits(test_n, channels=c, size=h, num_classes=stats.num_classes, seed=seed + 1)
    save_dataset_dir(root, name, train, test, stats)
    return train, test, stats
