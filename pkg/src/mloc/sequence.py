"""Video-level localization: 1 s windows, per-window mode, anatomical-order repair."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .catalog import DEFAULT_CATALOG, OTHER, AnatomicalCatalog
from .errors import FormatError, PreconditionError
from .inference import DEFAULT_TAU, FramePrediction, SupportIndex, batch_classify

VID_HEADER = "#MLOC-VID v1"


@dataclass
class VideoManifest:
    fps: int
    frames: list = field(default_factory=list)   # (frame_id, path_or_embedding_id)

    def __post_init__(self):
        if self.fps < 1:
            raise PreconditionError("fps must be >= 1")
        ids = [f for f, _ in self.frames]
        if len(set(ids)) != len(ids):
            raise PreconditionError("frame ids must be unique")

    @property
    def frame_ids(self):
        return [f for f, _ in self.frames]


def read_video_manifest(path) -> VideoManifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(VID_HEADER + " fps="):
        raise FormatError(f"missing header '{VID_HEADER} fps=<n>'", path=path, line=1)
    try:
        fps = int(lines[0].split("fps=", 1)[1])
    except ValueError:
        raise FormatError("bad fps value", path=path, line=1) from None
    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError("expected frame_id,path_or_embedding_id", path=path, line=lineno)
        frames.append((parts[0], parts[1]))
    if not frames:
        raise FormatError("video has no frames", path=path)
    return VideoManifest(fps, frames)


def write_video_manifest(path, manifest: VideoManifest):
    lines = [f"{VID_HEADER} fps={manifest.fps}"] + [f"{f},{p}" for f, p in manifest.frames]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def hop_length(fps: int) -> int:
    return max(1, fps // 2)


def window_frames(n_frames: int, fps: int) -> list[tuple[int, int]]:
    """Inclusive (start, end) windows of ``fps`` frames every ``fps // 2`` frames.

    Enumeration stops at the first window that reaches the last frame, so a
    trailing partial window is kept only when no earlier window covers the end.
    """
    if n_frames < 1:
        raise PreconditionError("n_frames must be >= 1")
    hop = hop_length(fps)
    out, start = [], 0
    while True:
        end = min(start + fps, n_frames) - 1
        out.append((start, end))
        if end == n_frames - 1:
            return out
        start += hop


def window_mode(preds: list[FramePrediction]) -> int:
    """Most frequent label (Other counts). Ties go to the tied location label
    whose frames have the smallest mean winning median, then the smaller index."""
    if not preds:
        raise PreconditionError("empty window")
    counts = Counter(p.label for p in preds)
    top = max(counts.values())
    tied = [label for label, c in counts.items() if c == top]
    if len(tied) == 1:
        return tied[0]
    located = [label for label in tied if label != OTHER]
    if not located:
        return OTHER

    def key(label):
        meds = [p.winning_median for p in preds if p.label == label]
        return (float(np.mean(meds)), label)

    return min(located, key=key)


@dataclass
class WindowPrediction:
    start_frame: int
    end_frame: int
    label: int
    group_avg_distance: float


def group_average(preds: list[FramePrediction], label: int) -> float:
    """Mean distance of the window's frames to the window's class."""
    if label == OTHER:
        return float(np.mean([p.winning_median for p in preds]))
    return float(np.mean([p.per_class_median.get(label, p.winning_median) for p in preds]))


def enforce_anatomical_order(windows: list[WindowPrediction],
                             catalog: AnatomicalCatalog = DEFAULT_CATALOG) -> list[WindowPrediction]:
    """Relabel windows to Other until non-Other labels never go backwards.

    Each pass finds the first adjacent inversion among non-Other windows and
    sends the one with the larger group distance (ties: the later one) to Other.
    """
    out = [WindowPrediction(w.start_frame, w.end_frame, w.label, w.group_avg_distance)
           for w in windows]
    order = {label: rank for rank, label in enumerate(catalog.indices)}
    while True:
        located = [i for i, w in enumerate(out) if w.label != OTHER]
        for i, j in zip(located, located[1:]):
            if order[out[i].label] > order[out[j].label]:
                loser = i if out[i].group_avg_distance > out[j].group_avg_distance else j
                out[loser].label = OTHER
                break
        else:
            return out


def smooth_predictions(frame_preds: list[FramePrediction], fps: int,
                       catalog: AnatomicalCatalog = DEFAULT_CATALOG) -> list[WindowPrediction]:
    """Windowing, per-window mode and order repair over per-frame predictions."""
    windows = []
    for start, end in window_frames(len(frame_preds), fps):
        group = frame_preds[start:end + 1]
        label = window_mode(group)
        windows.append(WindowPrediction(start, end, label, group_average(group, label)))
    return enforce_anatomical_order(windows, catalog)


def frame_labels(windows: list[WindowPrediction], n_frames: int) -> list[int]:
    """Per-frame labels taken from the window whose center is nearest (ties: earlier)."""
    centers = np.array([(w.start_frame + w.end_frame) / 2.0 for w in windows])
    labels = []
    for f in range(n_frames):
        covering = [i for i, w in enumerate(windows) if w.start_frame <= f <= w.end_frame]
        best = min(covering, key=lambda i: (abs(centers[i] - f), i))
        labels.append(windows[best].label)
    return labels


@dataclass
class VideoResult:
    windows: list
    frame_predictions: list
    frame_ids: list


def classify_video(manifest: VideoManifest, index: SupportIndex,
                   resolve: Callable[[str, str], np.ndarray], tau: float = DEFAULT_TAU,
                   catalog: AnatomicalCatalog = DEFAULT_CATALOG) -> VideoResult:
    """Embed or load every frame, classify, then smooth.

    ``resolve(frame_id, ref)`` returns the frame's unit embedding; a KeyError
    or missing file is reported as an error naming the frame.
    """
    embeddings = []
    for frame_id, ref in manifest.frames:
        try:
            embeddings.append(np.asarray(resolve(frame_id, ref), dtype=np.float64))
        except (KeyError, FileNotFoundError, OSError) as exc:
            raise PreconditionError(f"cannot resolve frame {frame_id!r} ({ref}): {exc}") from exc
    preds = batch_classify(np.stack(embeddings), index, tau)
    windows = smooth_predictions(preds, manifest.fps, catalog)
    return VideoResult(windows, preds, manifest.frame_ids)


def write_windows(path, windows, catalog: AnatomicalCatalog = DEFAULT_CATALOG):
    lines = ["#window_start,window_end,label,group_avg_distance"]
    lines += [f"{w.start_frame},{w.end_frame},{catalog.name(w.label)},{w.group_avg_distance!r}"
              for w in windows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_windows(path, catalog: AnatomicalCatalog = DEFAULT_CATALOG) -> list[WindowPrediction]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        s, e, label, dist = line.split(",")
        out.append(WindowPrediction(int(s), int(e), catalog.index(label), float(dist)))
    return out
