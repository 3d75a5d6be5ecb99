"""Open-set single-frame classification by per-class median mapped distance."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import DEFAULT_CATALOG, OTHER, AnatomicalCatalog
from .errors import PreconditionError

DEFAULT_TAU = 0.5


class SupportIndex:
    """Label -> (m, 64) array of support embeddings, labels kept sorted."""

    def __init__(self, members: dict, modality: str = ""):
        if not members:
            raise PreconditionError("support index is empty")
        self.members = {}
        for label in sorted(members):
            arr = np.atleast_2d(np.asarray(members[label], dtype=np.float64))
            if label == OTHER:
                raise PreconditionError("'Other' cannot be a support class")
            if arr.shape[0] == 0:
                raise PreconditionError(f"support class {label} is empty")
            self.members[int(label)] = arr
        self.modality = modality

    @classmethod
    def from_arrays(cls, embeddings, labels, modality=""):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        return cls({int(c): embeddings[labels == c] for c in np.unique(labels)}, modality)

    @property
    def labels(self) -> list[int]:
        return list(self.members)

    def __len__(self):
        return len(self.members)


@dataclass
class FramePrediction:
    label: int
    per_class_median: dict
    winning_median: float


def _distances(queries, members):
    """Mapped distance between every query row and every member row."""
    diff = queries[:, None, :] - members[None, :, :]
    return np.tanh(np.sqrt(np.sum(diff * diff, axis=-1)) / 2.0)


def median_distance(distances) -> float:
    """Median of a 1-d distance list; even counts average the central pair."""
    d = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if d.size == 0:
        raise PreconditionError("median of an empty distance list")
    mid = d.size // 2
    return float(d[mid]) if d.size % 2 else float((d[mid - 1] + d[mid]) / 2.0)


def _decide(medians: dict, tau: float) -> FramePrediction:
    best, best_med = None, np.inf
    for label in sorted(medians):
        if medians[label] < best_med:
            best, best_med = label, medians[label]
    label = best if best_med <= tau else OTHER
    return FramePrediction(label, medians, float(best_med))


def batch_classify(queries, index: SupportIndex, tau: float = DEFAULT_TAU) -> list[FramePrediction]:
    if not 0 < tau < 1:
        raise PreconditionError(f"tau must lie in (0, 1), got {tau}")
    if index is None or len(index) == 0:
        raise PreconditionError("support index is empty")
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        return []
    q = np.atleast_2d(q)
    per_class = {label: _distances(q, m) for label, m in index.members.items()}
    return [_decide({label: median_distance(d[i]) for label, d in per_class.items()}, tau)
            for i in range(q.shape[0])]


def classify_frame(query, index: SupportIndex, tau: float = DEFAULT_TAU) -> FramePrediction:
    return batch_classify(np.atleast_2d(query), index, tau)[0]


def write_predictions(path, frame_ids, predictions, catalog: AnatomicalCatalog = DEFAULT_CATALOG):
    """frame_id,label,winning_median,<median per catalog class> ("nan" if absent)."""
    names = [catalog.name(i) for i in catalog.indices]
    lines = ["#frame_id,label,winning_median," + ",".join(names)]
    for fid, pred in zip(frame_ids, predictions):
        meds = [repr(float(pred.per_class_median[i])) if i in pred.per_class_median else "nan"
                for i in catalog.indices]
        lines.append(",".join([str(fid), catalog.name(pred.label), repr(pred.winning_median)] + meds))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path, catalog: AnatomicalCatalog = DEFAULT_CATALOG):
    """Inverse of write_predictions: returns (frame_ids, predictions)."""
    ids, preds = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        meds = {}
        for i, v in zip(catalog.indices, parts[3:]):
            if v != "nan":
                meds[i] = float(v)
        ids.append(parts[0])
        preds.append(FramePrediction(catalog.index(parts[1]), meds, float(parts[2])))
    return ids, preds
