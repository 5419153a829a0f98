"""Job execution with artifact caching: dataset -> model -> vector -> samples -> verdicts."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

from ..concepts import ConceptTuple, DatasetSpec, baseline_spec, caption_of, classify_ood, enumerate_valid_tuples
from ..config import RunConfig, dump_config
from ..datagen import DatasetManifest, materialize
from ..diffusion.model import DiffusionModel
from ..diffusion.sampling import sample
from ..diffusion.train import train
from ..evaluator import ClassifierTriple, classify_images, label_model_samples, reachability_from_verdicts, train_classifiers
from ..steering import Space, SteeringVector, build_concept_set, optimize_vector, steered_sample
from ..store import ArtifactStore, ResultsStore, key_of

log = logging.getLogger(__name__)

METHODS = ("prompting", "prompt_steering", "h_steering")
METHOD_SPACE = {"prompt_steering": Space.PROMPT, "h_steering": Space.H}


def stable_seed(*parts) -> int:
    return int(hashlib.sha256(json.dumps(parts, default=str).encode()).hexdigest()[:8], 16)


@dataclass
class ReachabilityResult:
    family: str
    spec_hash: str
    model_seed: int
    method: str
    target: str
    y_s: str
    accuracy: float
    n: int
    matched: int
    verdicts: list[str]
    verdicts_digest: str
    ood_class: str
    params: dict = field(default_factory=dict)
    diagnostics: dict | None = None
    job_key: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ReachabilityResult:
        return cls(**d)


class Runner:
    """Produces artifacts on demand under one artifact root; finished work is reused."""

    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.store = ArtifactStore(cfg.root)
        self.force = force
        self._models: dict[str, DiffusionModel] = {}
        self._clfs: ClassifierTriple | None = None
        self._fresh: set[str] = set()
        cfg_path = self.store.root / "configs" / f"{cfg.hash()}.yaml"
        if not cfg_path.exists():
            cfg_path.parent.mkdir(parents=True, exist_ok=True)
            dump_config(cfg, cfg_path)

    def _stale(self, key: str, path) -> bool:
        """True when the artifact must be (re)built; --force rebuilds each artifact once per runner."""
        if self.force and key not in self._fresh:
            self._fresh.add(key)
            return True
        self._fresh.add(key)
        return not self.store.is_complete(path)

    def _register(self, kind: str, key: str, path, **parents) -> None:
        self.store.register(kind, key, path, {"config": self.cfg.hash(), **parents})

    # datasets
    def baseline(self) -> DatasetSpec:
        return baseline_spec(self.cfg.data.target_total, self.cfg.data.rng_seed)

    def ensure_dataset(self, spec: DatasetSpec) -> DatasetManifest:
        out = self.store.dataset_dir(spec)
        with self.store.lock(out):
            if self._stale("dataset:" + spec.hash(), out):
                log.info("materializing dataset %s (%d images)", spec.hash(), spec.total)
                manifest = materialize(spec, out)
                self.store.mark_complete(out)
                self._register("dataset", spec.hash(), out)
                return manifest
        return DatasetManifest.load(out)

    # models
    def model_key(self, spec: DatasetSpec, seed: int) -> str:
        return key_of("model", spec.hash(), seed, self.cfg.train.to_dict())

    def ensure_model(self, spec: DatasetSpec, seed: int) -> tuple[str, DiffusionModel]:
        mkey = self.model_key(spec, seed)
        if mkey in self._models:
            return mkey, self._models[mkey]
        out = self.store.model_dir(mkey)
        with self.store.lock(out):
            if self._stale("model:" + mkey, out):
                manifest = self.ensure_dataset(spec)
                log.info("training model %s (spec %s, seed %d)", mkey, spec.hash(), seed)
                model = train(manifest, self.cfg.train, seed)
                self.store.clear(out)
                model.save(out)
                self.store.mark_complete(out)
                self._register("model", mkey, out, dataset=spec.hash())
        model = DiffusionModel.load(out)
        self._models[mkey] = model
        return mkey, model

    # classifiers
    def classifier_key(self) -> str:
        ev = self.cfg.eval
        return key_of("classifiers", self.baseline().hash(), asdict(self.cfg.classifier), ev.classifier_generated_per_tuple, ev.classifier_model_seeds, self.cfg.train.to_dict())

    def ensure_classifiers(self) -> ClassifierTriple:
        if self._clfs is not None:
            return self._clfs
        ckey = self.classifier_key()
        out = self.store.classifier_dir(ckey)
        with self.store.lock(out):
            if self._stale("classifiers:" + ckey, out):
                self.store.clear(out)
                clfs = self._train_classifiers()
                clfs.save(out)
                self.store.mark_complete(out)
                self._register("classifiers", ckey, out, dataset=self.baseline().hash())
        self._clfs = ClassifierTriple.load(out)
        return self._clfs

    def _train_classifiers(self) -> ClassifierTriple:
        spec = self.baseline()
        manifest = self.ensure_dataset(spec)
        per_tuple = self.cfg.eval.classifier_generated_per_tuple
        if per_tuple == 0:
            return train_classifiers(manifest, cfg=self.cfg.classifier, allow_clean_only=True)
        clean = train_classifiers(manifest, cfg=self.cfg.classifier, allow_clean_only=True)
        generated = []
        seeds = self.cfg.eval.classifier_model_seeds
        for t in enumerate_valid_tuples():
            for j, seed in enumerate(seeds):
                _, model = self.ensure_model(spec, seed)
                n = per_tuple // len(seeds) + (1 if j < per_tuple % len(seeds) else 0)
                imgs = sample(model, caption_of(t), n, stable_seed("clf", seed, t.key()), batch_size=self.cfg.eval.sample_batch)
                generated += label_model_samples(clean, imgs, t)
        return train_classifiers(manifest, generated, cfg=self.cfg.classifier)

    # steering vectors
    def ensure_vector(self, mkey: str, model: DiffusionModel, space: Space, target: ConceptTuple, y_s: str) -> SteeringVector:
        steer = replace(self.cfg.steer, seed=stable_seed("steer", self.cfg.steer.seed, mkey, space.value, target.key(), y_s))
        vkey = key_of("vector", mkey, space.value, target.key(), y_s, asdict(steer), self.cfg.eval.concept_set_size)
        out = self.store.vector_dir(mkey, vkey)
        with self.store.lock(out):
            if self._stale("vector:" + vkey, out):
                self.store.clear(out)
                Z = build_concept_set(target, self.cfg.eval.concept_set_size, seed=stable_seed("Z", target.key()) % 2**31)
                vec = optimize_vector(model, space, y_s, Z, steer)
                vec.save(out, {"model_key": mkey, "z_provenance": Z.provenance})
                self.store.mark_complete(out)
                self._register("vector", vkey, out, model=mkey)
        path = next(p for p in out.iterdir() if p.suffix == ".bin")
        return SteeringVector.load(path)

    # evaluation
    def evaluate(self, family: str, spec: DatasetSpec, seed: int, method: str, target: ConceptTuple, y_s: str, params: dict | None = None, results: ResultsStore | None = None) -> dict:
        """One reachability measurement; cached in ``results`` by job key."""
        params = dict(params or {})
        n = self.cfg.eval.n_samples
        prompt = caption_of(target) if method == "prompting" else y_s
        job_key = key_of(family, spec.hash(), seed, method, target.key(), prompt, params, n, self.cfg.train.to_dict(), asdict(self.cfg.steer), self.classifier_key())
        if results is not None and not (self.force and job_key not in self._fresh):
            for r in results.load():
                if r["job_key"] == job_key:
                    return r
        self._fresh.add(job_key)
        mkey, model = self.ensure_model(spec, seed)
        sample_seed = stable_seed("sample", seed, target.key(), y_s)
        diagnostics = None
        if method == "prompting":
            images = sample(model, prompt, n, sample_seed, batch_size=self.cfg.eval.sample_batch)
        elif method in METHOD_SPACE:
            vec = self.ensure_vector(mkey, model, METHOD_SPACE[method], target, y_s)
            images = steered_sample(model, vec, n, sample_seed, batch_size=self.cfg.eval.sample_batch)
            diagnostics = {k: v for k, v in vec.diagnostics.items() if k != "loss_history"}
            diagnostics["l2_norm"] = vec.l2_norm
        else:
            raise ValueError(f"unknown method {method!r}")
        verdicts = classify_images(self.ensure_classifiers(), images, target)
        vstr = [v.to_str() for v in verdicts]
        matched = sum(v.matched_target for v in verdicts)
        record = ReachabilityResult(
            family=family,
            spec_hash=spec.hash(),
            model_seed=seed,
            method=method,
            target=target.key(),
            y_s=prompt,
            accuracy=reachability_from_verdicts(verdicts),
            n=n,
            matched=matched,
            verdicts=vstr,
            verdicts_digest=hashlib.sha256("\n".join(vstr).encode()).hexdigest()[:16],
            ood_class=classify_ood(target, spec).value,
            params=params,
            diagnostics=diagnostics,
            job_key=job_key,
        ).to_dict()
        if results is not None:
            results.append(record)
        return record
