"""Image -> 64-d unit embedding, plus the text exchange format for embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DuplicateIdError, FormatError, PreconditionError
from .ndiff import Conv2d, Dense, GlobalMaxPool, L2Normalize, Network, ReLU

logger = logging.getLogger(__name__)

EMBED_DIM = 64
IMAGE_SIZES = (64, 256)
EMB_HEADER = f"#MLOC-EMB v1 dim={EMBED_DIM}"
RENORM_TOLERANCE = 1e-3


def build_embedder(seed=0, dtype=np.float32, embed_dim=EMBED_DIM) -> Network:
    """conv(3->8,s2) relu conv(8->16,s2) relu gmp dense(16->64) l2norm."""
    rng = np.random.default_rng(seed)
    return Network([
        Conv2d(3, 8, stride=2, rng=rng, dtype=dtype),
        ReLU(),
        Conv2d(8, 16, stride=2, rng=rng, dtype=dtype),
        ReLU(),
        GlobalMaxPool(),
        Dense(16, embed_dim, rng=rng, dtype=dtype),
        L2Normalize(),
    ])


def build_embedding_head(seed=0, dtype=np.float32, dim=EMBED_DIM) -> Network:
    """dense(64->64) + l2norm, trained on top of externally supplied embeddings."""
    rng = np.random.default_rng(seed)
    return Network([Dense(dim, dim, rng=rng, dtype=dtype), L2Normalize()])


def _as_batch(images, expected_size=None):
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise PreconditionError(f"expected H x W x 3 image(s), got shape {np.shape(images)}")
    if expected_size is not None and x.shape[1:3] != (expected_size, expected_size):
        raise PreconditionError(
            f"expected {expected_size}x{expected_size} image, got {x.shape[1]}x{x.shape[2]}")
    return x.transpose(0, 3, 1, 2)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def embed_images(images, network: Network, expected_size=None) -> np.ndarray:
    """Embed a stack of H x W x 3 images; returns (N, 64) float64 unit rows.

    Images go through a float64 copy of the network one at a time, so each
    row depends only on its own image and the parameters.
    """
    x = _as_batch(images, expected_size)
    if x.shape[0] == 0:
        return np.zeros((0, EMBED_DIM))
    net = network if network.dtype == np.float64 else network.astype(np.float64)
    out = [net.forward(x[i:i + 1].astype(np.float64), retain=False) for i in range(x.shape[0])]
    return _unit(np.concatenate(out))


def embed_image(image, network: Network, expected_size=None) -> np.ndarray:
    if np.ndim(image) != 3:
        raise PreconditionError(f"expected a single H x W x 3 image, got shape {np.shape(image)}")
    return embed_images(image, network, expected_size)[0]


@dataclass
class HeatmapReport:
    positions: np.ndarray       # (C, 2) (row, col) of each channel's max
    variability: np.ndarray     # (H, W) std across channels
    feature_shape: tuple        # (C, H, W)


def heatmap_positions(image, network: Network, expected_size=None) -> HeatmapReport:
    """Argmax positions of the feature map that feeds global max pooling."""
    x = _as_batch(image, expected_size)[:1].astype(np.float64)
    network = network if network.dtype == np.float64 else network.astype(np.float64)
    pool_at = next(i for i, l in enumerate(network.layers) if isinstance(l, GlobalMaxPool))
    feat = Network(network.layers[:pool_at]).forward(x, retain=False)
    positions = GlobalMaxPool.argmax_positions(feat)[0]
    return HeatmapReport(positions, feat[0].std(axis=0), tuple(feat.shape[1:]))


# ------------------------------------------------------------ exchange file


@dataclass
class EmbeddingTable:
    vectors: dict = field(default_factory=dict)   # id -> (64,) float64
    labels: dict = field(default_factory=dict)    # id -> int, 0 = unlabeled
    renormalized: int = 0

    def __len__(self):
        return len(self.vectors)

    def ids(self):
        return list(self.vectors)


def write_embeddings(path, items):
    """``items``: iterable of (id, label_index, vector)."""
    lines = [EMB_HEADER]
    for item_id, label, vec in items:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (EMBED_DIM,):
            raise DimensionError(f"{item_id}: expected {EMBED_DIM} values, got {vec.size}")
        if "," in str(item_id):
            raise FormatError(f"id {item_id!r} contains a comma")
        lines.append(",".join([str(item_id), str(int(label))] + [repr(float(v)) for v in vec]))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot write embeddings: {exc}", path=path) from exc


def ingest_embeddings(path) -> EmbeddingTable:
    """Parse an exchange file; rows off the unit sphere by > 1e-3 are re-normalized."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read embeddings: {exc}", path=path) from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != EMB_HEADER:
        raise FormatError(f"missing header {EMB_HEADER!r}", path=path, line=1)
    table = EmbeddingTable()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise FormatError("malformed row", path=path, line=lineno)
        item_id = parts[0]
        if len(parts) - 2 != EMBED_DIM:
            raise DimensionError(
                f"row {item_id!r} has dimension {len(parts) - 2}, expected {EMBED_DIM}",
                path=path, line=lineno)
        try:
            label = int(parts[1])
            vec = np.array([float(v) for v in parts[2:]], dtype=np.float64)
        except ValueError:
            raise FormatError(f"row {item_id!r}: non-numeric field", path=path, line=lineno) from None
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"row {item_id!r}: non-finite value", path=path, line=lineno)
        if item_id in table.vectors:
            raise DuplicateIdError(f"duplicate id {item_id!r}", path=path, line=lineno)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise FormatError(f"row {item_id!r}: zero vector", path=path, line=lineno)
        if abs(norm - 1.0) > RENORM_TOLERANCE:
            vec = vec / norm
            table.renormalized += 1
        table.vectors[item_id] = vec
        table.labels[item_id] = label
    if table.renormalized:
        logger.warning("%s: re-normalized %d embedding(s)", path, table.renormalized)
    return table
