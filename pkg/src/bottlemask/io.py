"""On-disk formats: checkpoints and metric logs.

A checkpoint is a directory holding a plain-text ``manifest.txt`` of
``key=value`` lines plus one raw little-endian array file per parameter
under ``params/``, named by the parameter's module path.  Metric logs are
JSON-lines files, one record per line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.txt"
PARAMS_DIR = "params"
FORMAT_TAG = "bottlemask-checkpoint-v1"

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def save_checkpoint(path: Path | str, tensors: dict[str, np.ndarray],
                    config_items: dict[str, str]) -> Path:
    path = Path(path)
    (path / PARAMS_DIR).mkdir(parents=True, exist_ok=True)
    lines = [f"format={FORMAT_TAG}"]
    for key in sorted(config_items):
        lines.append(f"config.{key}={config_items[key]}")
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "f8" if arr.dtype == np.float64 else "f4"
        filename = f"{PARAMS_DIR}/{name}.bin"
        arr.astype(_DTYPES[code]).tofile(path / filename)
        shape = ",".join(str(v) for v in arr.shape)
        lines.append(f"param.{name}={filename};{code};{shape}")
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    tensors: dict[str, np.ndarray] = {}
    config: dict[str, str] = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "format":
            if value != FORMAT_TAG:
                raise ValueError(f"unsupported checkpoint format {value!r}")
        elif key.startswith("config."):
            config[key[len("config."):]] = value
        elif key.startswith("param."):
            name = key[len("param."):]
            filename, code, shape_text = value.split(";")
            shape = tuple(int(v) for v in shape_text.split(",") if v)
            arr = np.fromfile(path / filename, dtype=_DTYPES[code]).reshape(shape)
            tensors[name] = arr
    return tensors, config


class MetricLog:
    """Append-only list of per-step / per-eval records with JSONL round-trip."""

    def __init__(self, records: list[dict] | None = None):
        self.records: list[dict] = list(records or [])

    def append(self, record: dict) -> None:
        self.records.append(record)

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]

    def last_eval(self) -> dict | None:
        evals = self.of_kind("eval")
        return evals[-1] if evals else None

    def save(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "MetricLog":
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return cls(records)

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricLog) and self.records == other.records

    def __len__(self) -> int:
        return len(self.records)
