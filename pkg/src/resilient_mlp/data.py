"""Dataset loading, normalization and train/test splitting.

Readers cover delimited text (the UCI tables) and IDX binaries (MNIST).
A small versioned binary cache format round-trips a :class:`Dataset`
bit-exactly.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import Rng

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CACHE_MAGIC = b"RMDS"
CACHE_VERSION = 1

MISSING_TOKENS = {"", "?", "na", "nan", "null"}


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (samples, dims)
    labels: np.ndarray  # int64 class ids
    class_count: int
    name: str = ""
    stats: dict | None = None
    dropped_rows: int = 0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("labels must lie in [0, class_count)")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def targets(self, idx=slice(None), width: int | None = None) -> np.ndarray:
        """One-hot targets; ``width=1`` on a two-class set gives the label column."""
        if width == 1 and self.class_count <= 2:
            return self.labels[idx].astype(np.float64)[:, None]
        if width is not None and width != self.class_count:
            raise DataError(f"{width} outputs cannot encode {self.class_count} classes")
        return one_hot(self.labels[idx], self.class_count)


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass(frozen=True)
class ColumnSchema:
    label_column: int = -1
    delimiter: str = ","
    header_lines: int = 0
    ignore_columns: tuple[int, ...] = ()


def _open_text(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _label_ids(raw_labels: list[str]) -> tuple[np.ndarray, list[str]]:
    uniq = set(raw_labels)
    try:
        names = sorted(uniq, key=float)
    except ValueError:
        names = sorted(uniq)
    index = {name: i for i, name in enumerate(names)}
    return np.array([index[s] for s in raw_labels], dtype=np.int64), names


def load_delimited(path, schema: ColumnSchema = ColumnSchema(), name: str | None = None) -> Dataset:
    """Read a delimited table: numeric features plus one label column.

    Rows with missing values are dropped; rows that do not parse (wrong
    column count, non-numeric feature) are skipped with a warning.  Both are
    counted in ``dropped_rows``.
    """
    rows, raw_labels = [], []
    dropped = 0
    width = None
    with _open_text(path) as f:
        for lineno, line in enumerate(f, start=1):
            if lineno <= schema.header_lines or not line.strip():
                continue
            cells = [c.strip() for c in line.rstrip("\r\n").split(schema.delimiter)]
            if width is None:
                width = len(cells)
            if len(cells) != width:
                log.warning("%s:%d: expected %d columns, got %d; row skipped", path, lineno, width, len(cells))
                dropped += 1
                continue
            label_col = schema.label_column % width
            if any(c.lower() in MISSING_TOKENS for c in cells):
                dropped += 1
                continue
            feats = [c for i, c in enumerate(cells) if i != label_col and i not in schema.ignore_columns]
            try:
                values = [float(c) for c in feats]
            except ValueError:
                log.warning("%s:%d: non-numeric feature; row skipped", path, lineno)
                dropped += 1
                continue
            if not all(np.isfinite(values)):
                log.warning("%s:%d: non-finite feature; row skipped", path, lineno)
                dropped += 1
                continue
            rows.append(values)
            raw_labels.append(cells[label_col])
    if not rows:
        raise DataError(f"{path}: no usable rows ({dropped} skipped)")
    if dropped:
        log.warning("%s: %d rows skipped", path, dropped)
    labels, names = _label_ids(raw_labels)
    return Dataset(
        features=np.array(rows),
        labels=labels,
        class_count=len(names),
        name=name or str(path),
        dropped_rows=dropped,
        class_names=names,
    )


def _read_idx(path, expected_magic: int) -> tuple[list[int], bytes]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    dims = list(struct.unpack_from(f">{ndim}I", blob, 4))
    need = header_len + int(np.prod(dims))
    if len(blob) < need:
        raise IdxFormatError(f"{path}: truncated data at byte offset {len(blob)}, expected {need} bytes")
    return dims, blob[header_len:need]


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """MNIST-style IDX pair; pixels are flattened and scaled to [0, 1]."""
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lab_dims, lab_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise IdxFormatError(f"image count {img_dims[0]} != label count {lab_dims[0]} (byte offset 4)")
    n = img_dims[0]
    pixels = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n, -1)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(
        features=pixels.astype(np.float64) / 255.0,
        labels=labels,
        class_count=10,
        name=name,
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# -- normalization ---------------------------------------------------------


def fit_stats(features: np.ndarray, method: str) -> dict:
    if method == "minmax":
        return {"method": method, "a": features.min(axis=0), "b": features.max(axis=0)}
    if method == "zscore":
        return {"method": method, "a": features.mean(axis=0), "b": features.std(axis=0)}
    raise DataError(f"unknown normalization {method!r}")


def normalize(data: Dataset, method: str = "minmax", stats: dict | None = None) -> Dataset:
    """Apply min-max or z-score scaling; stats default to ``data``'s own.

    Constant (zero-spread) columns are left untouched.
    """
    stats = fit_stats(data.features, method) if stats is None else stats
    a, b = stats["a"], stats["b"]
    if stats["method"] == "minmax":
        center, scale = a, b - a
    else:
        center, scale = a, b
    flat = scale == 0
    if np.any(flat):
        log.warning("%s: %d constant feature(s) left unnormalized", data.name, int(flat.sum()))
    safe = np.where(flat, 1.0, scale)
    out = np.where(flat, data.features, (data.features - center) / safe)
    return replace(data, features=out, stats=stats)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    normalize: str | None = "minmax"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must be in (0, 1)")


def split(data: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, prefix split, normalization fitted on the train side."""
    n = len(data)
    if n < 2:
        raise DataError("need at least two samples to split")
    n_train = int(round(spec.train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DataError(f"train_fraction {spec.train_fraction} leaves an empty side for {n} samples")
    perm = Rng(spec.seed).permutation(n)
    train, test = data.subset(perm[:n_train]), data.subset(perm[n_train:])
    if spec.normalize:
        train = normalize(train, spec.normalize)
        test = normalize(test, spec.normalize, stats=train.stats)
    return train, test


# -- cache -----------------------------------------------------------------
# Layout (little-endian):
#   4s magic "RMDS" | u16 version | u16 name_len | name utf-8
#   u64 samples | u32 dims | u32 class_count
#   f64[samples*dims] features (row-major) | i64[samples] labels


def save_cache(data: Dataset, path) -> None:
    name = data.name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<HH", CACHE_VERSION, len(name)))
        f.write(name)
        f.write(struct.pack("<QII", len(data), data.dims, data.class_count))
        f.write(data.features.astype("<f8").tobytes())
        f.write(data.labels.astype("<i8").tobytes())


def load_cache(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: bad cache magic at byte offset 0")
    version, name_len = struct.unpack_from("<HH", blob, 4)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = 8
    name = blob[off : off + name_len].decode("utf-8")
    off += name_len
    n, d, k = struct.unpack_from("<QII", blob, off)
    off += 16
    need = off + 8 * n * d + 8 * n
    if len(blob) < need:
        raise DataError(f"{path}: truncated cache at byte offset {len(blob)}, expected {need}")
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=off).astype(np.int64)
    return Dataset(features=feats, labels=labels, class_count=k, name=name)
