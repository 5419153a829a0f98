"""Content-addressed artifact store shared by the CLI and the experiment harness.

Layout under the artifact root::

    datasets/<spec_hash>/                  spec.json, manifest.jsonl, images/
    models/<model_key>/                    weights.bin, model.json
    classifiers/<clf_key>/                 clf_*.bin, classifiers.json
    vectors/<model_key>/<vec_key>/         vec_<space>_<target>_<hash>.bin + .json
    experiments/<family>/                  results.jsonl, results.csv, figures
    index.jsonl                            one line per produced artifact

Every key is a hash of the canonical inputs that produced the artifact, so
re-running a command with identical inputs finds the finished artifact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path

from filelock import FileLock

from .concepts import DatasetSpec


def key_of(*parts) -> str:
    payload = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


class MissingArtifact(RuntimeError):
    """An upstream artifact is absent; the message names the command that produces it."""


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # paths
    def dataset_dir(self, spec: DatasetSpec) -> Path:
        return self.root / "datasets" / spec.hash()

    def model_dir(self, model_key: str) -> Path:
        return self.root / "models" / model_key

    def classifier_dir(self, clf_key: str) -> Path:
        return self.root / "classifiers" / clf_key

    def vector_dir(self, model_key: str, vec_key: str) -> Path:
        return self.root / "vectors" / model_key / vec_key

    def experiment_dir(self, family: str) -> Path:
        return self.root / "experiments" / family

    @contextmanager
    def lock(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            yield

    @staticmethod
    def is_complete(path: Path) -> bool:
        return (path / "COMPLETE").exists()

    @staticmethod
    def mark_complete(path: Path) -> None:
        (path / "COMPLETE").write_text("ok\n")

    @staticmethod
    def clear(path: Path) -> None:
        if path.exists():
            shutil.rmtree(path)

    def register(self, kind: str, key: str, path: Path, parents: dict | None = None) -> None:
        entry = {"kind": kind, "key": key, "path": str(path.relative_to(self.root)), "parents": parents or {}}
        with self.lock(self.root / "index.jsonl"):
            existing = self.index()
            if any(e["kind"] == kind and e["key"] == key for e in existing):
                return
            with open(self.root / "index.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def index(self) -> list[dict]:
        path = self.root / "index.jsonl"
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                continue  # torn final line from an interrupted writer
        return out


class ResultsStore:
    """Single-writer results file; records are keyed by ``job_key`` and rewritten atomically."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.path = self.dir / "results.jsonl"

    def load(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    continue
        return out

    def keys(self) -> set[str]:
        return {r["job_key"] for r in self.load()}

    def append(self, record: dict) -> None:
        with FileLock(str(self.path) + ".lock"):
            records = [r for r in self.load() if r["job_key"] != record["job_key"]]
            records.append(record)
            records.sort(key=lambda r: r["job_key"])  # canonical order: a resumed run ends byte-identical
            atomic_write_text(self.path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    def export_csv(self, path: Path | None = None) -> Path:
        path = path or self.dir / "results.csv"
        write_results_csv(self.load(), path)
        return path


FLAT_COLUMNS = ["family", "spec_hash", "model_seed", "method", "target", "y_s", "accuracy", "n", "matched", "ood_class", "verdicts_digest"]


def flatten(record: dict) -> dict:
    row = {k: record.get(k) for k in FLAT_COLUMNS}
    for k, v in sorted((record.get("params") or {}).items()):
        row[f"param_{k}"] = v
    for k, v in sorted((record.get("diagnostics") or {}).items()):
        if k != "loss_history":
            row[f"diag_{k}"] = v
    return row


def write_results_csv(records: list[dict], path: Path) -> None:
    rows = [flatten(r) for r in sorted(records, key=lambda r: r["job_key"])]
    columns = list(FLAT_COLUMNS)
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
