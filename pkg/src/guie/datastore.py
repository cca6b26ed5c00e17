"""Feature banks, manifests, class statistics, splits and synthetic data.

GUEF feature-bank layout (little-endian)::

    b"GUEF" | u32 version=1 | u32 N | u32 D
    N*D float32, row-major
    N ids, each u16 byte length + UTF-8 bytes

Tensor containers (checkpoints, PCA models) share the magic but use
version 2::

    b"GUEF" | u32 version=2 | u32 n_sections | u32 reserved=0
    per section: u16 name length, UTF-8 name, u8 dtype (0=f64, 1=utf8 text),
                 u8 ndim, ndim*u32 dims, payload
"""

from __future__ import annotations

import csv
import io
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import RngStream, check_finite

MAGIC = b"GUEF"
BANK_VERSION = 1
CONTAINER_VERSION = 2
_HEADER = struct.Struct("<4sIII")
_ID_RE = re.compile(r"^[A-Za-z0-9_./-]+$")


@dataclass
class FeatureBank:
    ids: list[str]
    vectors: np.ndarray  # N x D float64

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"bank vectors must be 2-D, got shape {self.vectors.shape}")
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {self.vectors.shape[0]} vectors")
        if len(set(self.ids)) != len(self.ids):
            dup = next(i for i, n in Counter(self.ids).items() if n > 1)
            raise ValueError(f"duplicate id in bank: {dup!r}")
        check_finite(self.vectors, "bank vectors")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids) -> "FeatureBank":
        pos = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in pos]
        if missing:
            raise ValueError(f"id {missing[0]!r} not in bank")
        rows = [pos[k] for k in ids]
        return FeatureBank(list(ids), self.vectors[rows])


@dataclass
class DatasetManifest:
    ids: list[str]
    classes: list[str]
    verticals: list[str]

    def __post_init__(self):
        if not len(self.ids) == len(self.classes) == len(self.verticals):
            raise ValueError("manifest columns have different lengths")
        if len(set(self.ids)) != len(self.ids):
            dup = next(i for i, n in Counter(self.ids).items() if n > 1)
            raise ValueError(f"duplicate id in manifest: {dup!r}")

    def __len__(self) -> int:
        return len(self.ids)

    def select(self, keep) -> "DatasetManifest":
        keep = list(keep)
        return DatasetManifest(
            [self.ids[i] for i in keep],
            [self.classes[i] for i in keep],
            [self.verticals[i] for i in keep],
        )

    def subset(self, ids) -> "DatasetManifest":
        wanted = set(ids)
        return self.select(i for i, k in enumerate(self.ids) if k in wanted)

    def lookup(self) -> dict[str, tuple[str, str]]:
        return {k: (c, v) for k, c, v in zip(self.ids, self.classes, self.verticals)}


@dataclass
class ClassStats:
    counts: dict[str, int]

    @property
    def n_min(self) -> int:
        return min(self.counts.values())

    @property
    def n_max(self) -> int:
        return max(self.counts.values())

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class Split:
    train_ids: list[str]
    val_ids: list[str]
    seed: int
    val_classes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- bank I/O


def encode_feature_bank(bank: FeatureBank) -> bytes:
    n, d = bank.vectors.shape
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, BANK_VERSION, n, d))
    out.write(np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes())
    for key in bank.ids:
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long for u16 length prefix: {key[:40]!r}...")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
    return out.getvalue()


def decode_feature_bank(buf: bytes, source: str = "<bytes>") -> FeatureBank:
    if len(buf) < _HEADER.size:
        raise ValueError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, n, d = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != BANK_VERSION:
        raise ValueError(f"{source}: unsupported bank version {version} (expected {BANK_VERSION})")
    off = _HEADER.size
    nbytes = 4 * n * d
    if len(buf) < off + nbytes:
        raise ValueError(f"{source}: truncated payload, header says {n}x{d} floats")
    vectors = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += nbytes
    ids = []
    for i in range(n):
        if len(buf) < off + 2:
            raise ValueError(f"{source}: truncated id table at id {i}")
        (length,) = struct.unpack_from("<H", buf, off)
        off += 2
        if len(buf) < off + length:
            raise ValueError(f"{source}: truncated id table at id {i}")
        ids.append(buf[off:off + length].decode("utf-8"))
        off += length
    if off != len(buf):
        raise ValueError(f"{source}: {len(buf) - off} trailing bytes after id table")
    return FeatureBank(ids, vectors.astype(np.float64))


def save_feature_bank(bank: FeatureBank, path) -> None:
    Path(path).write_bytes(encode_feature_bank(bank))


def load_feature_bank(path) -> FeatureBank:
    return decode_feature_bank(Path(path).read_bytes(), str(path))


# ------------------------------------------------------- tensor container


def save_tensors(tensors: dict, path) -> None:
    """Write named float64 arrays and text blobs into a GUEF container."""
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, len(tensors), 0))
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        if isinstance(value, str):
            data = value.encode("utf-8")
            out.write(struct.pack("<BBI", 1, 1, len(data)))
            out.write(data)
            continue
        arr = np.asarray(value, dtype="<f8")
        out.write(struct.pack("<BB", 0, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(out.getvalue())


def load_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    src = str(path)
    if len(buf) < _HEADER.size:
        raise ValueError(f"{src}: truncated header")
    magic, version, count, _ = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"{src}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != CONTAINER_VERSION:
        raise ValueError(f"{src}: not a tensor container (version {version})")
    off = _HEADER.size
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            kind, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = math.prod(dims)
            if kind == 1:
                if off + size > len(buf):
                    raise struct.error("short text section")
                tensors[name] = buf[off:off + size].decode("utf-8")
                off += size
            elif kind == 0:
                if off + 8 * size > len(buf):
                    raise struct.error("short tensor section")
                arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
                tensors[name] = arr.reshape(dims).astype(np.float64)
                off += 8 * size
            else:
                raise ValueError(f"{src}: unknown section kind {kind} for {name!r}")
    except struct.error as exc:
        raise ValueError(f"{src}: truncated container ({exc})") from None
    return tensors


# ------------------------------------------------------------ manifests


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,class,vertical\n")
        for row in zip(manifest.ids, manifest.classes, manifest.verticals):
            fh.write(",".join(row) + "\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header != ["id", "class", "vertical"]:
            raise ValueError(f"{path}: expected header 'id,class,vertical', got {header}")
        ids, classes, verticals = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            if not _ID_RE.match(row[0]):
                raise ValueError(f"{path}:{lineno}: invalid id {row[0]!r}")
            ids.append(row[0])
            classes.append(row[1])
            verticals.append(row[2])
    return DatasetManifest(ids, classes, verticals)


# ----------------------------------------------------- statistics, splits


def class_stats(manifest: DatasetManifest) -> ClassStats:
    if len(manifest) == 0:
        raise ValueError("class_stats on an empty manifest")
    return ClassStats(dict(Counter(manifest.classes)))


def filter_min_samples(manifest: DatasetManifest, min_samples: int = 3) -> DatasetManifest:
    """Drop every class with fewer than ``min_samples`` entries, keeping order."""
    if min_samples < 1:
        raise ValueError(f"min_samples must be >= 1, got {min_samples}")
    counts = Counter(manifest.classes)
    return manifest.select(i for i, c in enumerate(manifest.classes) if counts[c] >= min_samples)


def split_unseen_classes(manifest: DatasetManifest, val_class_fraction: float, seed: int) -> Split:
    """Hold out whole classes for validation.

    ``ceil(fraction * n_classes)`` classes, picked by a seeded shuffle of the
    sorted class labels, go to the validation side.
    """
    if not 0.0 < val_class_fraction < 1.0:
        raise ValueError(f"val_class_fraction must be in (0, 1), got {val_class_fraction}")
    labels = sorted(set(manifest.classes))
    if len(labels) < 2:
        raise ValueError(f"need at least 2 classes to split, got {len(labels)}")
    n_val = math.ceil(val_class_fraction * len(labels))
    n_val = min(n_val, len(labels) - 1)
    order = RngStream(seed).permutation(len(labels))
    val_classes = sorted(labels[i] for i in order[:n_val])
    held = set(val_classes)
    train = [k for k, c in zip(manifest.ids, manifest.classes) if c not in held]
    val = [k for k, c in zip(manifest.ids, manifest.classes) if c in held]
    return Split(train, val, seed, val_classes)


# -------------------------------------------------------- synthetic data


def draw_class_counts(n_classes: int, low: int, high: int, seed: int) -> list[int]:
    """Per-class sample counts drawn uniformly from ``low..high`` inclusive."""
    if not 1 <= low <= high:
        raise ValueError(f"invalid count range {low}..{high}")
    return [int(c) for c in RngStream(seed).integers(low, high + 1, size=n_classes)]


def synth_dataset(n_classes: int, count_law, dim: int, cluster_spread: float, seed: int,
                  n_verticals: int = 4, prefix: str = "s", nuisance_dims: int = 0,
                  nuisance_scale: float = 0.0):
    """Gaussian clusters around random unit-norm class centres.

    ``count_law`` is either one count for every class or a per-class list.
    ``cluster_spread`` is the per-coordinate standard deviation within a
    class. Classes are dealt round-robin into ``n_verticals`` verticals.

    With ``nuisance_dims > 0`` every sample also gets Gaussian noise of
    scale ``nuisance_scale`` inside one random subspace shared by all
    classes, so the within-class covariance is anisotropic.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if not cluster_spread >= 0:
        raise ValueError(f"cluster_spread must be >= 0, got {cluster_spread}")
    if not 1 <= n_verticals:
        raise ValueError(f"n_verticals must be >= 1, got {n_verticals}")
    counts = [int(count_law)] * n_classes if np.isscalar(count_law) else [int(c) for c in count_law]
    if len(counts) != n_classes or min(counts) < 1:
        raise ValueError("count_law must give a positive count for every class")

    if not 0 <= nuisance_dims <= dim:
        raise ValueError(f"nuisance_dims must be in [0, {dim}], got {nuisance_dims}")

    rng = RngStream(seed)
    centers = rng.gaussian((n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    basis = None
    if nuisance_dims:
        basis, _ = np.linalg.qr(rng.gaussian((dim, nuisance_dims)))
    ids, classes, verticals, rows = [], [], [], []
    for c, n in enumerate(counts):
        noise = rng.gaussian((n, dim)) * cluster_spread
        if basis is not None:
            noise += nuisance_scale * rng.gaussian((n, nuisance_dims)) @ basis.T
        rows.append(centers[c] + noise)
        for i in range(n):
            ids.append(f"{prefix}{c:04d}_{i:04d}")
            classes.append(f"{prefix}{c:04d}")
            verticals.append(f"v{c % n_verticals}")
    bank = FeatureBank(ids, np.vstack(rows))
    return bank, DatasetManifest(ids, classes, verticals)


def synth_block_corpus(n_classes: int, per_class: int, dim: int = 256, n_blocks: int = 32,
                       block_size: int = 2, noise: float = 0.5, seed: int = 0,
                       layout_seed: int = 0, n_verticals: int = 4, prefix: str = "b"):
    """Embeddings whose class signal lives in correlated coordinate blocks.

    Each of ``n_blocks`` latent factors loads equally on ``block_size``
    coordinates scattered at random over ``dim``, giving a block-correlated
    covariance with ``n_blocks`` dominant directions that do not line up with
    contiguous coordinate groups. Isotropic noise of scale ``noise`` is added
    on top and rows are L2-normalised. ``layout_seed`` fixes which
    coordinates form each block, so corpora drawn with different ``seed``
    share one covariance structure but not their classes.
    """
    if n_blocks * block_size > dim:
        raise ValueError("n_blocks * block_size exceeds dim")
    coords = RngStream(layout_seed).permutation(dim)[: n_blocks * block_size].reshape(n_blocks, block_size)
    loading = np.zeros((n_blocks, dim))
    for b in range(n_blocks):
        loading[b, coords[b]] = 1.0 / math.sqrt(block_size)
    rng = RngStream(seed)
    centers = rng.gaussian((n_classes, n_blocks))
    ids, classes, verticals, rows = [], [], [], []
    for c in range(n_classes):
        latent = centers[c] + 0.3 * rng.gaussian((per_class, n_blocks))
        x = latent @ loading + noise * rng.gaussian((per_class, dim))
        rows.append(x)
        for i in range(per_class):
            ids.append(f"{prefix}{c:04d}_{i:04d}")
            classes.append(f"{prefix}{c:04d}")
            verticals.append(f"v{c % n_verticals}")
    x = np.vstack(rows)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return FeatureBank(ids, x), DatasetManifest(ids, classes, verticals)
