"""Dataset manifests: JSON Lines records tying images to labels and provenance.

One record per line. Required: image_path, split. Optional: label_path,
provenance, quality. Unknown fields ride along untouched so external tools
can annotate records without this library dropping their data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

__all__ = ["ManifestRecord", "DatasetManifest", "read_manifest", "write_manifest", "SPLITS", "PROVENANCES"]

SPLITS = ("train", "test")
PROVENANCES = ("manual", "coarse", "auto", "enhanced", "flagged")


@dataclass
class ManifestRecord:
    image_path: str
    split: str
    label_path: str | None = None
    provenance: str = "manual"
    quality: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.image_path:
            raise ValueError("record missing image_path")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        if self.quality is not None and not (0.0 <= self.quality <= 1.0):
            raise ValueError(f"quality must be in [0,1], got {self.quality}")

    def to_json(self) -> dict:
        out = dict(self.extra)
        out["image_path"] = self.image_path
        out["split"] = self.split
        if self.label_path is not None:
            out["label_path"] = self.label_path
        out["provenance"] = self.provenance
        if self.quality is not None:
            out["quality"] = self.quality
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRecord":
        known = {"image_path", "split", "label_path", "provenance", "quality"}
        return cls(
            image_path=obj.get("image_path", ""),
            split=obj.get("split", ""),
            label_path=obj.get("label_path"),
            provenance=obj.get("provenance", "manual"),
            quality=obj.get("quality"),
            extra={k: v for k, v in obj.items() if k not in known},
        )


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        self._check_unique()

    def _check_unique(self):
        seen = set()
        for r in self.records:
            if r.image_path in seen:
                raise ValueError(f"duplicate image_path {r.image_path!r}")
            seen.add(r.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, pred) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if pred(r)])

    def by_image(self) -> dict:
        return {r.image_path: r for r in self.records}


def read_manifest(path: str) -> DatasetManifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not a JSON object")
                records.append(ManifestRecord.from_json(obj))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
    return DatasetManifest(records)


def write_manifest(m: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in m.records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
