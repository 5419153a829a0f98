"""Concept classifiers, the two-colour filter and reachability scoring."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .concepts import COLORS, SHAPES, ConceptTuple
from .datagen import DatasetManifest

log = logging.getLogger(__name__)

COLOR_PAIRS: tuple[tuple[str, str], ...] = tuple((a, b) for a in COLORS for b in COLORS if a != b)
COLOR_THRESHOLD = 60
MIN_COLOR_PIXELS = 30
LOW_CONFIDENCE = 0.5


def _to_input(images: np.ndarray) -> torch.Tensor:
    """uint8 NHWC -> float NCHW in [0, 1]; the classifiers train markedly faster on this range."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 255.0


def count_nonblack_colors(img: np.ndarray, threshold: int = COLOR_THRESHOLD, min_pixels: int = MIN_COLOR_PIXELS) -> int:
    """Number of primary colours owning at least ``min_pixels`` coloured pixels.

    A pixel is coloured when its brightest channel exceeds ``threshold``; it is
    attributed to that channel.
    """
    img = np.asarray(img)
    colored = img.max(axis=-1) > threshold
    owners = img.argmax(axis=-1)[colored]
    return int((np.bincount(owners, minlength=3) >= min_pixels).sum())


class ConceptCNN(nn.Module):
    def __init__(self, n_out: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(32 * 16 * 16, 128), nn.ReLU(), nn.Linear(128, n_out))

    def forward(self, x):
        return self.head(self.features(x))


HEADS = {"back_shape": len(SHAPES), "front_shape": len(SHAPES), "color_pair": len(COLOR_PAIRS)}


def labels_of(tuples: list[ConceptTuple]) -> dict[str, np.ndarray]:
    return {
        "back_shape": np.array([SHAPES.index(t.s1) for t in tuples]),
        "front_shape": np.array([SHAPES.index(t.s2) for t in tuples]),
        "color_pair": np.array([COLOR_PAIRS.index((t.c1, t.c2)) for t in tuples]),
    }


@dataclass
class Verdict:
    predicted: ConceptTuple | None  # None when the colour filter rejects the image
    color_count: int
    matched_target: bool
    confidence: float = 1.0

    @property
    def incomplete(self) -> bool:
        return self.predicted is None

    def to_str(self) -> str:
        return "incomplete" if self.predicted is None else self.predicted.key()


@dataclass
class ClassifierTriple:
    nets: dict[str, ConceptCNN]
    provenance: dict = field(default_factory=dict)

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 256) -> tuple[list[ConceptTuple], np.ndarray]:
        """Assembled tuple per image and the lowest max-softmax over the three heads."""
        preds = {k: [] for k in HEADS}
        conf = []
        for s in range(0, len(images), batch_size):
            x = _to_input(images[s : s + batch_size])
            probs = {k: F.softmax(net.eval()(x), dim=1) for k, net in self.nets.items()}
            for k, p in probs.items():
                preds[k].append(p.argmax(1).numpy())
            conf.append(torch.stack([p.max(1).values for p in probs.values()]).min(0).values.numpy())
        preds = {k: np.concatenate(v) for k, v in preds.items()}
        tuples = [
            ConceptTuple(COLOR_PAIRS[cp][0], SHAPES[bs], COLOR_PAIRS[cp][1], SHAPES[fs])
            for bs, fs, cp in zip(preds["back_shape"], preds["front_shape"], preds["color_pair"])
        ]
        return tuples, np.concatenate(conf)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        hashes = {}
        for k, net in self.nets.items():
            path = out / f"clf_{k}.bin"
            torch.save(net.state_dict(), path)
            hashes[k] = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        (out / "classifiers.json").write_text(json.dumps({**self.provenance, "weights_sha256": hashes}, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, in_dir: str | Path) -> ClassifierTriple:
        d = Path(in_dir)
        if not (d / "classifiers.json").exists():
            raise FileNotFoundError(f"no classifiers at {d}; produce them with `concept-reach train-classifiers`")
        meta = json.loads((d / "classifiers.json").read_text())
        hashes = meta.pop("weights_sha256")
        nets = {}
        for k, n in HEADS.items():
            path = d / f"clf_{k}.bin"
            if hashlib.sha256(path.read_bytes()).hexdigest()[:16] != hashes[k]:
                from .diffusion.model import IntegrityError

                raise IntegrityError(f"classifier weights {path} do not match recorded hash")
            net = ConceptCNN(n)
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            nets[k] = net.eval()
        return cls(nets, meta)


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 7
    lr: float = 1e-3
    batch_size: int = 128
    holdout: float = 0.1
    seed: int = 0


def _fit(images: np.ndarray, labels: dict[str, np.ndarray], cfg: ClassifierConfig) -> dict[str, ConceptCNN]:
    torch.manual_seed(cfg.seed)
    nets = {k: ConceptCNN(n) for k, n in HEADS.items()}
    gen = torch.Generator().manual_seed(cfg.seed)
    for k, net in nets.items():
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
        y_all = torch.from_numpy(labels[k]).long()
        net.train()
        for epoch in range(cfg.epochs):
            perm = torch.randperm(len(images), generator=gen)
            total = 0.0
            for s in range(0, len(images), cfg.batch_size):
                idx = perm[s : s + cfg.batch_size]
                loss = F.cross_entropy(net(_to_input(images[idx.numpy()])), y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            log.info("classifier %s epoch %d loss %.4f", k, epoch + 1, total / len(images))
        net.eval()
    return nets


def triple_accuracy(clfs: ClassifierTriple, images: np.ndarray, tuples: list[ConceptTuple]) -> float:
    preds, _ = clfs.predict(images)
    return float(np.mean([p == t for p, t in zip(preds, tuples)]))


def train_classifiers(
    balanced: DatasetManifest | tuple[np.ndarray, list[ConceptTuple]],
    model_samples: list[tuple[np.ndarray, ConceptTuple]] | None = None,
    cfg: ClassifierConfig = ClassifierConfig(),
    allow_clean_only: bool = False,
) -> ClassifierTriple:
    """Train the back-shape, front-shape and colour-pair classifiers.

    Training data is the balanced rendered set plus labelled generated images.
    A fraction ``cfg.holdout`` of the combined set is kept for the reported
    accuracy.
    """
    if isinstance(balanced, DatasetManifest):
        images, tuples = balanced.load_images(), balanced.tuples()
    else:
        images, tuples = balanced
        images = np.asarray(images)
    model_samples = list(model_samples or [])
    if not model_samples and not allow_clean_only:
        raise ValueError("no generated samples given; pass allow_clean_only=True to train on rendered data only")
    for i, (_, t) in enumerate(model_samples):
        if not isinstance(t, ConceptTuple):
            raise ValueError(f"model sample {i} is unlabeled")
    n_clean = len(tuples)
    if model_samples:
        images = np.concatenate([images, np.stack([im for im, _ in model_samples])])
        tuples = list(tuples) + [t for _, t in model_samples]
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(tuples))
    n_hold = int(round(cfg.holdout * len(tuples)))
    hold, fit = order[:n_hold], order[n_hold:]
    fit_tuples = [tuples[i] for i in fit]
    nets = _fit(images[fit], labels_of(fit_tuples), cfg)
    clfs = ClassifierTriple(nets)
    prov = {
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "n_clean": n_clean,
        "n_generated": len(model_samples),
        "clean_only": not model_samples,
    }
    if n_hold:
        hold_tuples = [tuples[i] for i in hold]
        prov["holdout_accuracy"] = triple_accuracy(clfs, images[hold], hold_tuples)
        prov["n_holdout"] = n_hold
    clfs.provenance = prov
    return clfs


def classify_images(clfs: ClassifierTriple, images: np.ndarray, target: ConceptTuple) -> list[Verdict]:
    images = np.asarray(images)
    counts = [count_nonblack_colors(im) for im in images]
    preds, conf = clfs.predict(images) if len(images) else ([], np.zeros(0))
    verdicts = []
    for c, p, cf in zip(counts, preds, conf):
        if c != 2:
            verdicts.append(Verdict(None, c, False, float(cf)))
        else:
            verdicts.append(Verdict(p, c, p == target, float(cf)))
    low = sum(v.confidence < LOW_CONFIDENCE for v in verdicts)
    if low:
        log.info("%d/%d verdicts below confidence %.2f", low, len(verdicts), LOW_CONFIDENCE)
    return verdicts


def classify_image(clfs: ClassifierTriple, img: np.ndarray, target: ConceptTuple) -> Verdict:
    return classify_images(clfs, np.asarray(img)[None], target)[0]


def reachability_from_verdicts(verdicts: list[Verdict]) -> float:
    if not verdicts:
        raise ValueError("reachability needs at least one image")
    return sum(v.matched_target for v in verdicts) / len(verdicts)


def reachability(clfs: ClassifierTriple, images: np.ndarray, target: ConceptTuple) -> float:
    if len(images) == 0:
        raise ValueError("reachability needs at least one image")
    return reachability_from_verdicts(classify_images(clfs, images, target))


def aggregate_over_seeds(per_seed: list[float]) -> dict:
    if not per_seed:
        raise ValueError("need at least one seed")
    return {"mean": float(np.mean(per_seed)), "per_seed": list(per_seed)}


def label_model_samples(clean_clfs: ClassifierTriple, images: np.ndarray, prompt_tuple: ConceptTuple) -> list[tuple[np.ndarray, ConceptTuple]]:
    """Keep generated images whose prompt label passes the colour filter and a clean classifier agrees."""
    verdicts = classify_images(clean_clfs, images, prompt_tuple)
    return [(im, prompt_tuple) for im, v in zip(images, verdicts) if v.matched_target]
