"""Ordered anatomical location labels.

Labels are plain ints. ``OTHER`` (0) is the open-set sink label and carries no
anatomical position.
"""

from __future__ import annotations

from dataclasses import dataclass

OTHER = 0
OTHER_NAME = "Other"

LOCATIONS = (
    (1, "Esophagus"),
    (2, "Cardia"),
    (3, "Angularis"),
    (4, "Pylorus"),
    (5, "Duodenum"),
    (6, "Jejunum"),
    (7, "Ileum"),
    (8, "Colon"),
    (9, "Rectum"),
    (10, "Anus"),
)


@dataclass(frozen=True)
class AnatomicalCatalog:
    entries: tuple = LOCATIONS

    def __post_init__(self):
        idx = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])) or (idx and idx[0] <= OTHER):
            raise ValueError("catalog indices must be positive and strictly increasing")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]

    def name(self, index: int) -> str:
        if index == OTHER:
            return OTHER_NAME
        for i, n in self.entries:
            if i == index:
                return n
        raise KeyError(index)

    def index(self, label: str | int) -> int:
        """Resolve a name or a numeric string/int to a label index."""
        if isinstance(label, int):
            if label == OTHER or label in self.indices:
                return label
            raise KeyError(label)
        text = label.strip()
        if text == OTHER_NAME:
            return OTHER
        for i, n in self.entries:
            if n == text:
                return i
        if text.isdigit():
            return self.index(int(text))
        raise KeyError(label)

    def __contains__(self, index) -> bool:
        return index == OTHER or index in self.indices

    def subset(self, n: int) -> "AnatomicalCatalog":
        return AnatomicalCatalog(self.entries[:n])


DEFAULT_CATALOG = AnatomicalCatalog()
