"""Line-delimited dataset manifests.

A manifest is a JSON-lines file. An optional first line without an ``id``
carries manifest-level fields (``split``); every other line is one record::

    {"split": "toy"}
    {"id": "0001", "degraded_path": "deg/0001.png", "reference_path": "ref/0001.png"}

Record paths are relative to the directory holding the manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SPLITS = ("uie-air", "uie-ref-train", "t200", "c60", "squid", "color-checker7", "toy")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    id: str
    degraded_path: str | None = None
    reference_path: str | None = None
    template_path: str | None = None
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None}, sort_keys=True)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    split: str = "toy"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate record ids: {dup}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def paired(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.degraded_path and r.reference_path]

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        split = "toy"
        records = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from None
                if "id" not in obj:
                    split = obj.get("split", split)
                    continue
                obj["id"] = str(obj["id"])
                unknown = set(obj) - set(ManifestRecord.__dataclass_fields__)
                if unknown:
                    raise ManifestError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
                records.append(ManifestRecord(**obj))
        return cls(records=records, split=split, root=path.parent)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"split": self.split})] + [r.to_json() for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        return path
