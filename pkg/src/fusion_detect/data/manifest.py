"""JSON Lines dataset manifests.

One record per line::

    {"image": "images/0001.png", "boxes": [{"x": 3, "y": 4, "w": 10, "h": 8, "label": "vehicle"}]}

Image paths are relative to the manifest's directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ValidationError

DEFAULT_CLASSES = ("vehicle",)


@dataclass
class LabeledImage:
    image: str
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = list(self.labels)
        if len(self.labels) != len(self.boxes):
            raise ValidationError(f"{self.image}: {len(self.boxes)} boxes but {len(self.labels)} labels")

    def to_json(self) -> dict:
        return {"image": self.image,
                "boxes": [{"x": _num(b[0]), "y": _num(b[1]), "w": _num(b[2]), "h": _num(b[3]),
                           "label": lab} for b, lab in zip(self.boxes, self.labels)]}


def _num(v: float):
    v = float(v)
    return int(v) if v.is_integer() else v


@dataclass
class DatasetManifest:
    records: list[LabeledImage] = field(default_factory=list)
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        seen = set()
        for r in self.records:
            if r.image in seen:
                raise ValidationError(f"duplicate image path in manifest: {r.image}")
            seen.add(r.image)

    def __len__(self) -> int:
        return len(self.records)

    def class_ids(self, record: LabeledImage) -> np.ndarray:
        """1-based class ids (0 is background)."""
        try:
            return np.array([self.class_names.index(lab) + 1 for lab in record.labels], dtype=np.int64)
        except ValueError as exc:
            raise ValidationError(f"{record.image}: unknown label ({exc})") from None

    def image_path(self, record: LabeledImage) -> Path:
        return self.root / record.image

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.class_names, self.root)


def load_manifest(path, class_names: tuple[str, ...] | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
                image = obj["image"]
                raw = obj.get("boxes", [])
                boxes = [[float(b[k]) for k in ("x", "y", "w", "h")] for b in raw]
                labels = [str(b.get("label", DEFAULT_CLASSES[0])) for b in raw]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{where}: malformed record ({exc})") from None
            for b in boxes:
                if not (b[2] > 0 and b[3] > 0):
                    raise ValidationError(f"{where} ({image}): box {b} has non-positive size")
            records.append(LabeledImage(image, np.array(boxes).reshape(-1, 4), labels))
    if class_names is None:
        found = sorted({lab for r in records for lab in r.labels})
        class_names = tuple(found) if found else DEFAULT_CLASSES
    manifest = DatasetManifest(records, class_names, path.parent)
    for r in records:
        manifest.class_ids(r)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.8,
                  seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle, then the first ``round(n * train_fraction)`` records train."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(manifest))
    n_train = int(round(len(manifest) * train_fraction))
    return manifest.subset(order[:n_train]), manifest.subset(order[n_train:])
