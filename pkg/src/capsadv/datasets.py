"""IDX loaders and the sampling/splitting used by the experiments."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ENV = "CAPSADV_DATA"

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "test"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(self.images[indices], self.labels[indices], self.split)

    def head(self, n: int) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse(path, expected_magic: int):
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(path, len(raw), "file too short for magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, len(raw), f"truncated header, need {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(path, len(raw), f"truncated data, expected {need} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, split: str = "test") -> LabeledDataset:
    """Load an IDX image/label pair (optionally gzip-compressed) into [0, 1] floats."""
    pixels = _parse(images_path, IMAGE_MAGIC)
    labels = _parse(labels_path, LABEL_MAGIC)
    if pixels.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, 4, f"count mismatch: {pixels.shape[0]} images vs {labels.shape[0]} labels")
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels.astype(np.int64), split)


def data_dir(dataset: str = "mnist", root=None) -> Path:
    """Resolve ``<root>/<dataset>``; root defaults to $CAPSADV_DATA, then ./data."""
    root = Path(root or os.environ.get(DATA_ENV, "data"))
    return root / dataset


def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / (name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"missing {name}[.gz] in {directory}")


def load_dataset(dataset: str = "mnist", split: str = "test", root=None) -> LabeledDataset:
    directory = data_dir(dataset, root)
    img, lab = FILES[split]
    return load_idx(_find(directory, img), _find(directory, lab), split)


def sample_attack_set(test: LabeledDataset, n: int, seed: int, num_classes: int = 10):
    """Uniform sample of ``n`` indices without replacement plus random targets != true labels."""
    if n > len(test):
        raise ValueError(f"cannot sample {n} from {len(test)} images")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(test), size=n, replace=False)) if n < len(test) else rng.permutation(len(test))
    true = test.labels[idx]
    # shift by 1..K-1 so the target can never equal the true label
    targets = (true + rng.integers(1, num_classes, size=n)) % num_classes
    return idx, targets


def ten_fold_split(test: LabeledDataset, parts: int = 10) -> list[np.ndarray]:
    """Contiguous index ranges; the first ``len % parts`` folds get one extra image."""
    if len(test) < parts:
        raise ValueError(f"need at least {parts} images, got {len(test)}")
    return [np.asarray(a) for a in np.array_split(np.arange(len(test)), parts)]
