"""Run records: one JSON document per experiment run."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from . import __version__

# fields that legitimately differ between two otherwise identical runs
VOLATILE_FIELDS = ("timestamp", "timing")


@dataclass
class RunRecord:
    config: dict
    losses: list
    initial_loss: float = None
    utility: dict = field(default_factory=dict)
    attacks: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    version: str = __version__
    timestamp: str = None

    def __post_init__(self):
        if self.timestamp is None:
            self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def stable_dict(self):
        d = self.to_dict()
        for key in VOLATILE_FIELDS:
            d.pop(key, None)
        return d

    def run_id(self) -> str:
        return config_hash(self.config)

    def save(self, directory) -> str:
        """Atomically write ``<run_id>.json`` under ``directory``."""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{self.run_id()}.json")
        atomic_write(path, self.to_json())
        return path


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
