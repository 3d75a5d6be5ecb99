"""Dataset manifests, image loading, seeded synthetic data and latent export."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .catalog import DEFAULT_CATALOG, OTHER, AnatomicalCatalog
from .embedder import embed_images, write_embeddings
from .errors import DuplicateIdError, FormatError, PreconditionError
from .ndiff import Network
from .sequence import VideoManifest, write_video_manifest

DS_HEADER = "#MLOC-DS v1"
MODALITIES = ("CE", "WCE")
SPLITS = ("support", "eval")


# ------------------------------------------------------------------ manifest


@dataclass(frozen=True)
class ManifestRecord:
    item_id: str
    path: str
    index: int
    modality: str
    split: str


@dataclass
class DatasetManifest:
    """Records plus the directory that relative image paths resolve against.

    Index 0 (Other) is allowed only on eval records; it marks frames from a
    class outside the support set.
    """

    records: list = field(default_factory=list)
    root: Path = Path(".")
    catalog: AnatomicalCatalog = DEFAULT_CATALOG

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.item_id in seen:
                raise DuplicateIdError(f"duplicate id {r.item_id!r}")
            seen.add(r.item_id)
            if r.index not in self.catalog or (r.index == OTHER and r.split == "support"):
                raise PreconditionError(f"{r.item_id}: index {r.index} outside catalog")
            if r.modality not in MODALITIES:
                raise PreconditionError(f"{r.item_id}: unknown modality {r.modality!r}")
            if r.split not in SPLITS:
                raise PreconditionError(f"{r.item_id}: unknown split {r.split!r}")

    def select(self, split=None, modality=None) -> list[ManifestRecord]:
        return [r for r in self.records
                if (split is None or r.split == split) and (modality is None or r.modality == modality)]

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def by_id(self) -> dict:
        return {r.item_id: r for r in self.records}


def parse_manifest(text: str, root=Path("."), path=None) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or lines[0].strip() != DS_HEADER:
        raise FormatError(f"missing header {DS_HEADER!r}", path=path, line=1)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError("expected id,path,anatomical_index,modality,split", path=path, line=lineno)
        try:
            index = int(parts[2])
        except ValueError:
            raise FormatError(f"bad anatomical index {parts[2]!r}", path=path, line=lineno) from None
        records.append(ManifestRecord(parts[0], parts[1], index, parts[3], parts[4]))
    return DatasetManifest(records, Path(root))


def serialize_manifest(manifest: DatasetManifest) -> str:
    lines = [DS_HEADER] + [f"{r.item_id},{r.path},{r.index},{r.modality},{r.split}"
                           for r in manifest.records]
    return "\n".join(lines) + "\n"


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read manifest: {exc}", path=path) from exc
    return parse_manifest(text, root=path.parent, path=path)


def write_manifest(path, manifest: DatasetManifest):
    Path(path).write_text(serialize_manifest(manifest), encoding="utf-8")


# -------------------------------------------------------------------- images


def resize_bilinear(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of an H x W x C array, pixel-center aligned, edge-clamped."""
    out_h, out_w = (size, size) if np.isscalar(size) else size
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    img = image.astype(np.float64)
    top = img[r0][:, c0] * (1 - fc)[None, :, None] + img[r0][:, c1] * fc[None, :, None]
    bot = img[r1][:, c0] * (1 - fc)[None, :, None] + img[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def load_image(path, target_size=None) -> np.ndarray:
    """Read an 8-bit RGB image as H x W x 3 floats in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise FormatError(f"cannot read image: {exc}", path=path) from exc
    if target_size is not None:
        arr = resize_bilinear(arr, target_size)
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image: np.ndarray):
    """Write a [0, 1] float image (or uint8) as binary PPM."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(path, format="PPM")


def load_records(manifest: DatasetManifest, records, target_size=None) -> np.ndarray:
    return np.stack([load_image(manifest.resolve(r), target_size) for r in records])


# ----------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_classes: int = 10
    support_per_class: int = 5
    eval_per_class: int = 24
    image_size: int = 64
    noise: float = 0.1
    unknown_class: bool = False
    unknown_eval: int = 24
    fps: int = 5
    modality: str = "WCE"

    def __post_init__(self):
        if min(self.n_classes, self.support_per_class, self.image_size, self.fps) < 1:
            raise PreconditionError("synthetic counts must be positive")
        if self.eval_per_class < 0 or self.unknown_eval < 0:
            raise PreconditionError("eval counts must be non-negative")
        if not 0.0 <= self.noise <= 1.0:
            raise PreconditionError("noise must lie in [0, 1]")
        if self.n_classes > len(DEFAULT_CATALOG.indices):
            raise PreconditionError("at most 10 synthetic classes")


@dataclass
class SyntheticItem:
    item_id: str
    label: int
    split: str
    image: np.ndarray   # uint8 H x W x 3


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    items: list
    video: list          # eval item ids in anatomical order

    def arrays(self, split, include_unknown=True):
        sel = [it for it in self.items if it.split == split
               and (include_unknown or it.label != OTHER)]
        images = np.stack([it.image.astype(np.float64) / 255.0 for it in sel])
        return images, np.array([it.label for it in sel]), [it.item_id for it in sel]

    def video_arrays(self):
        by_id = {it.item_id: it for it in self.items}
        sel = [by_id[i] for i in self.video]
        images = np.stack([it.image.astype(np.float64) / 255.0 for it in sel])
        return images, np.array([it.label for it in sel]), list(self.video)


def _class_template(spec: SyntheticSpec, k: int, unknown: bool) -> np.ndarray:
    """Noise-free texture of class slot ``k``: base color, stripes, blobs."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919, k]))
    s = spec.image_size
    if unknown:
        base = np.array(colorsys.hsv_to_rgb(rng.random(), 0.08, 0.5))
    else:
        base = np.array(colorsys.hsv_to_rgb(k / spec.n_classes, 0.65, 0.6 + 0.1 * (k % 3)))
    yy, xx = np.mgrid[0:s, 0:s] / s
    freq = 2 + (k % 5) * 1.5
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    img = base + 0.5 * stripes[..., None] * rng.uniform(-0.25, 0.25, 3)
    for _ in range(1 + (3 * k) % 5):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.05, 0.15)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        img = img + mask[..., None] * rng.uniform(-0.3, 0.3, 3)
    return img


def _perturb(template: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma == 0:
        return template.copy()
    s = template.shape[0]
    shift = np.round(rng.uniform(-1, 1, 2) * sigma * s / 2).astype(int)
    img = np.roll(template, tuple(shift), axis=(0, 1))
    img = img * (1 + sigma * rng.normal(0, 0.3))
    img = img + sigma * rng.normal(0, 0.3, 3)
    return img + sigma * rng.normal(0, 0.2, img.shape)


def synthesize(spec: SyntheticSpec) -> SyntheticData:
    """Pure function of ``spec``: identical specs give identical pixels."""
    items, video = [], []
    labels = DEFAULT_CATALOG.indices[:spec.n_classes]
    slots = [(k, label, False) for k, label in enumerate(labels)]
    if spec.unknown_class:
        slots.append((spec.n_classes, OTHER, True))
    for k, label, unknown in slots:
        template = _class_template(spec, k, unknown)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 104729, k]))
        name = "unk" if unknown else f"c{label:02d}"
        if not unknown:
            for j in range(spec.support_per_class):
                items.append(SyntheticItem(f"{name}_s{j:03d}", label, "support",
                                           to_uint8(_perturb(template, spec.noise, rng))))
        n_eval = spec.unknown_eval if unknown else spec.eval_per_class
        for j in range(n_eval):
            item = SyntheticItem(f"{name}_e{j:03d}", label, "eval",
                                 to_uint8(_perturb(template, spec.noise, rng)))
            items.append(item)
            if not unknown:
                video.append(item.item_id)
    return SyntheticData(spec, items, video)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple[DatasetManifest, VideoManifest]:
    """Write images/*.ppm, manifest.txt and video.txt under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    data = synthesize(spec)
    records = []
    for it in data.items:
        rel = f"images/{it.item_id}.ppm"
        save_image(out / rel, it.image)
        records.append(ManifestRecord(it.item_id, rel, it.label, spec.modality, it.split))
    manifest = DatasetManifest(records, out)
    write_manifest(out / "manifest.txt", manifest)
    video = VideoManifest(spec.fps, [(i, f"images/{i}.ppm") for i in data.video])
    write_video_manifest(out / "video.txt", video)
    return manifest, video


# ------------------------------------------------------------------- latents


def export_latents(manifest: DatasetManifest, network: Network, path, records=None, target_size=None):
    """Embed every record and write the embedding exchange file."""
    records = manifest.records if records is None else records
    images = load_records(manifest, records, target_size) if records else np.zeros((0, 1, 1, 3))
    vectors = embed_images(images, network) if records else []
    write_embeddings(path, [(r.item_id, r.index, v) for r, v in zip(records, vectors)])
    return vectors


# -------------------------------------------------------------------- config


def read_config(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment line."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read config: {exc}", path=path) from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError("expected key=value", path=path, line=lineno)
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out
