"""Line-delimited JSON manifests; one flat record per example, paths relative to the manifest."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import IngestError

ORIGINAL = "original"
DENOISED = "denoised"


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    mixture: str
    enrollment: str
    target: str
    clean_mix: str
    provenance: str = ORIGINAL
    snr_db_noise: float | None = None
    snr_db_interferer: float | None = None
    seed: int | None = None


KEYS = tuple(f.name for f in fields(ManifestRecord))


@dataclass
class DatasetManifest:
    entries: list[ManifestRecord]
    root: Path = Path(".")
    seed: int | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def path(self, record: ManifestRecord, key: str) -> Path:
        return self.root / getattr(record, key)

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.entries)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestError(path, str(exc)) from exc
        entries = []
        seed = None
        for line in text.splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            entries.append(ManifestRecord(**{k: raw.get(k) for k in KEYS if k in raw}))
            seed = raw.get("seed", seed)
        return cls(entries, path.parent, seed)

    def rebased(self, new_root) -> "DatasetManifest":
        """Same records with paths rewritten relative to ``new_root``."""
        new_root = Path(new_root)
        out = []
        for r in self.entries:
            moved = {
                k: _relpath(self.root / getattr(r, k), new_root)
                for k in ("mixture", "enrollment", "target", "clean_mix")
            }
            out.append(replace(r, **moved))
        return DatasetManifest(out, new_root, self.seed)


def _relpath(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p.resolve(), base.resolve())).as_posix()
