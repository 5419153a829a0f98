"""Consistency checks over an artifact root (``concept-reach verify``)."""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

from .concepts import DatasetSpec
from .diffusion.model import DiffusionModel, IntegrityError
from .evaluator import ClassifierTriple
from .steering import SteeringVector
from .store import ArtifactStore, ResultsStore


def verify_root(root: str | Path, deep: bool = True) -> dict:
    """Walk every artifact and check its hash chain; returns a report with a ``problems`` list."""
    store = ArtifactStore(root)
    problems: list[str] = []
    checked: Counter = Counter()
    dataset_hashes = set()
    model_keys = set()

    for d in sorted((store.root / "datasets").glob("*/")):
        checked["datasets"] += 1
        if not store.is_complete(d):
            problems.append(f"dataset {d.name} is incomplete")
            continue
        meta = json.loads((d / "spec.json").read_text())
        spec = DatasetSpec.from_dict(meta)
        if spec.hash() != d.name or meta.get("spec_hash") != d.name:
            problems.append(f"dataset {d.name}: spec hash mismatch ({spec.hash()})")
        n_records = sum(1 for line in open(d / "manifest.jsonl") if line.strip())
        if n_records != spec.total:
            problems.append(f"dataset {d.name}: {n_records} records but spec counts sum to {spec.total}")
        dataset_hashes.add(d.name)

    for d in sorted((store.root / "models").glob("*/")):
        checked["models"] += 1
        if not store.is_complete(d):
            problems.append(f"model {d.name} is incomplete")
            continue
        meta = json.loads((d / "model.json").read_text())
        if meta.get("dataset_spec_hash") not in dataset_hashes:
            problems.append(f"model {d.name}: dataset {meta.get('dataset_spec_hash')} not in store")
        if deep:
            try:
                DiffusionModel.load(d)
            except IntegrityError as exc:
                problems.append(str(exc))
        model_keys.add(d.name)

    for d in sorted((store.root / "vectors").glob("*/*/")):
        checked["vectors"] += 1
        if d.parent.name not in model_keys:
            problems.append(f"vector {d.name}: model {d.parent.name} not in store")
        if not store.is_complete(d):
            problems.append(f"vector {d.name} is incomplete")
            continue
        for p in d.glob("*.bin"):
            try:
                SteeringVector.load(p)
            except IntegrityError as exc:
                problems.append(str(exc))

    for d in sorted((store.root / "classifiers").glob("*/")):
        checked["classifiers"] += 1
        if not store.is_complete(d):
            problems.append(f"classifiers {d.name} are incomplete")
            continue
        try:
            ClassifierTriple.load(d)
        except IntegrityError as exc:
            problems.append(str(exc))

    for d in sorted((store.root / "experiments").glob("*/")):
        records = ResultsStore(d).load()
        checked["results"] += len(records)
        keys = Counter(r["job_key"] for r in records)
        dupes = [k for k, c in keys.items() if c > 1]
        if dupes:
            problems.append(f"experiment {d.name}: duplicated job keys {dupes[:3]}")
        for r in records:
            if r["spec_hash"] not in dataset_hashes:
                problems.append(f"experiment {d.name}: result {r['job_key']} refers to missing dataset {r['spec_hash']}")
            if r["n"] and abs(r["accuracy"] - r["matched"] / r["n"]) > 1e-12:
                problems.append(f"experiment {d.name}: result {r['job_key']} accuracy != matched / n")

    configs = {p.stem for p in (store.root / "configs").glob("*.yaml")}
    for e in store.index():
        checked["index"] += 1
        if not (store.root / e["path"]).exists():
            problems.append(f"index entry {e['kind']}/{e['key']} points to missing {e['path']}")
        cfg = e.get("parents", {}).get("config")
        if cfg is not None and cfg not in configs:
            problems.append(f"index entry {e['kind']}/{e['key']} refers to unknown config {cfg}")

    return {"ok": not problems, "checked": dict(checked), "problems": problems}
