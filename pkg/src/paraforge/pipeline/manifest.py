"""Corpus manifests: CSV with header ``path,split,label,speaker,gender,belt_path``."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError, DataError, FormatError

SPLITS = ("train", "devel", "test")
HEADER = ["path", "split", "label", "speaker", "gender", "belt_path"]
LABELS = {"clear": 0, "mask": 1}
GENDERS = ("f", "m", "unknown")


@dataclass(frozen=True)
class Record:
    path: str
    split: str
    label: str = ""
    speaker: str = ""
    gender: str = "unknown"
    belt_path: str = ""

    @property
    def label_index(self) -> int:
        try:
            return LABELS[self.label]
        except KeyError:
            raise DataError(f"{self.path}: label {self.label!r} is not one of {sorted(LABELS)}") from None


class Manifest:
    """Ordered records plus the directory relative paths are resolved against."""

    def __init__(self, records, root="."):
        self.records = list(records)
        self.root = Path(root)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def speakers(self, split: str | None = None) -> list[str]:
        recs = self.records if split is None else self.split(split)
        return sorted({r.speaker for r in recs})

    def validate(self, task: str = "mask") -> "Manifest":
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise DataError(f"duplicate manifest path {r.path!r}")
            seen.add(r.path)
            if r.split not in SPLITS:
                raise DataError(f"{r.path}: split {r.split!r} not in {SPLITS}")
            if r.gender not in GENDERS:
                raise DataError(f"{r.path}: gender {r.gender!r} not in {GENDERS}")
            if task == "mask":
                r.label_index
            elif task == "breath" and not r.belt_path:
                raise DataError(f"{r.path}: breath records need a belt_path")
        owner = {}
        for r in self.records:
            if owner.setdefault(r.speaker, r.split) != r.split:
                raise DataError(
                    f"speaker {r.speaker!r} appears in both {owner[r.speaker]!r} and {r.split!r} splits")
        for name in SPLITS:
            if not self.split(name):
                raise DataError(f"split {name!r} is empty")
        return self

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for r in self.records:
                w.writerow([getattr(r, f.name) for f in fields(Record)])


def read_manifest(path, task: str | None = None) -> Manifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != HEADER:
            raise FormatError(f"{path}: manifest header must be {','.join(HEADER)}, got {reader.fieldnames}")
        records = [Record(**row) for row in reader]
    m = Manifest(records, path.parent)
    return m.validate(task) if task else m


def check_task(task: str) -> str:
    if task not in ("mask", "breath"):
        raise ConfigError(f"task must be 'mask' or 'breath', got {task!r}")
    return task
