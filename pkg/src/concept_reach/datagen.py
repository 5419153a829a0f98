"""Rendering of two-shape scenes and materialization of dataset specs to disk."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .concepts import ConceptTuple, DatasetSpec, caption_of, enumerate_valid_tuples

IMAGE_SIZE = 64
RGB = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255)}
RASTERIZER_VERSION = "numpy-halfplane-1"
MIN_VISIBLE = 0.45
MAX_ATTEMPTS = 1000

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5  # pixel centres


@dataclass(frozen=True)
class GeometryConfig:
    back_size: tuple[float, float] = (24.0, 32.0)
    front_size: tuple[float, float] = (20.0, 28.0)
    neighborhood: float = 0.6  # disk radius as a fraction of the back size
    min_visible: float = MIN_VISIBLE


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple[float, float]
    size: float


@dataclass(frozen=True)
class SceneGeometry:
    back: ShapeSpec
    front: ShapeSpec
    colors: tuple[str, str]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneGeometry:
        return cls(
            back=ShapeSpec(d["back"]["kind"], tuple(d["back"]["center"]), d["back"]["size"]),
            front=ShapeSpec(d["front"]["kind"], tuple(d["front"]["center"]), d["front"]["size"]),
            colors=tuple(d["colors"]),
        )


class GeometryError(RuntimeError):
    pass


def shape_mask(shape: ShapeSpec) -> np.ndarray:
    """Hard-edged boolean raster; a pixel is inside if its centre is.

    ``size`` is the bounding-box side: circle diameter, square side, and base and
    height of an upward isosceles triangle.
    """
    cx, cy = shape.center
    h = shape.size / 2
    xx, yy = _XX, _YY
    if shape.kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= h * h
    if shape.kind == "square":
        return (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    if shape.kind == "triangle":
        # apex at (cx, cy-h), base from (cx-h, cy+h) to (cx+h, cy+h)
        inside_base = yy <= cy + h
        rel = yy - (cy - h)  # 0 at apex, 2h at base
        return inside_base & (rel >= 0) & (np.abs(xx - cx) <= rel / 2)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def in_frame(shape: ShapeSpec) -> bool:
    cx, cy = shape.center
    h = shape.size / 2
    return h <= cx <= IMAGE_SIZE - h and h <= cy <= IMAGE_SIZE - h


def visible_fraction(g: SceneGeometry) -> float:
    back = shape_mask(g.back)
    n = back.sum()
    if n == 0:
        return 0.0
    return float((back & ~shape_mask(g.front)).sum() / n)


def sample_geometry(t: ConceptTuple, rng: np.random.Generator, cfg: GeometryConfig = GeometryConfig()) -> SceneGeometry:
    for _ in range(MAX_ATTEMPTS):
        bs = rng.uniform(*cfg.back_size)
        fs = rng.uniform(*cfg.front_size)
        bx, by = rng.uniform(bs / 2, IMAGE_SIZE - bs / 2, size=2)
        radius = cfg.neighborhood * bs * np.sqrt(rng.uniform())
        angle = rng.uniform(0, 2 * np.pi)
        fx, fy = bx + radius * np.cos(angle), by + radius * np.sin(angle)
        g = SceneGeometry(
            back=ShapeSpec(t.s1, (float(bx), float(by)), float(bs)),
            front=ShapeSpec(t.s2, (float(fx), float(fy)), float(fs)),
            colors=(t.c1, t.c2),
        )
        if not (in_frame(g.back) and in_frame(g.front)):
            continue
        v = visible_fraction(g)
        if cfg.min_visible <= v < 1.0:
            return g
    raise GeometryError(f"no valid geometry for {t} after {MAX_ATTEMPTS} attempts; check size/neighborhood settings")


def render(g: SceneGeometry) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[shape_mask(g.back)] = RGB[g.colors[0]]
    img[shape_mask(g.front)] = RGB[g.colors[1]]
    return img


def image_rng(seed: int, t: ConceptTuple, index: int) -> np.random.Generator:
    tidx = enumerate_valid_tuples().index(t)
    return np.random.default_rng(np.random.SeedSequence([seed, tidx, index]))


def render_tuple(t: ConceptTuple, index: int, seed: int, cfg: GeometryConfig = GeometryConfig()) -> tuple[np.ndarray, SceneGeometry]:
    g = sample_geometry(t, image_rng(seed, t, index), cfg)
    return render(g), g


def save_png(img: np.ndarray, path: Path) -> None:
    PILImage.fromarray(img, mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


@dataclass
class DatasetManifest:
    records: list[dict]
    spec_hash: str
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def tuples(self) -> list[ConceptTuple]:
        return [ConceptTuple(r["c1"], r["s1"], r["c2"], r["s2"]) for r in self.records]

    def load_images(self) -> np.ndarray:
        """All images as a ``(N, 64, 64, 3)`` uint8 array."""
        if not self.records:
            return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.uint8)
        return np.stack([load_png(self.root / r["file"]) for r in self.records])

    def captions(self) -> list[str]:
        return [r["caption"] for r in self.records]

    @classmethod
    def load(cls, root: str | Path) -> DatasetManifest:
        root = Path(root)
        if (root / "INCOMPLETE").exists():
            raise RuntimeError(f"dataset at {root} is incomplete; rerun gen-data")
        spec = DatasetSpec.from_json((root / "spec.json").read_text())
        with open(root / "manifest.jsonl") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return cls(records=records, spec_hash=spec.hash(), root=root)


def materialize(spec: DatasetSpec, out_dir: str | Path, cfg: GeometryConfig = GeometryConfig()) -> DatasetManifest:
    """Render every image of ``spec`` under ``out_dir`` and write the manifest.

    The directory carries an ``INCOMPLETE`` marker until all files are written.
    """
    out = Path(out_dir)
    if out.exists():
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True)
    marker = out / "INCOMPLETE"
    marker.write_text("materialization in progress\n")

    records = []
    for t, n in spec.counts.items():
        if n == 0:
            continue
        tdir = out / "images" / t.key().replace(":", "_")
        tdir.mkdir()
        caption = caption_of(t, spec.mask)
        for i in range(n):
            img, g = render_tuple(t, i, spec.rng_seed, cfg)
            rel = f"images/{tdir.name}/{i:05d}.png"
            save_png(img, out / rel)
            records.append(
                {
                    "id": f"{t.key()}#{i}",
                    "file": rel,
                    "c1": t.c1,
                    "s1": t.s1,
                    "c2": t.c2,
                    "s2": t.s2,
                    "caption": caption,
                    "geometry": g.to_dict(),
                }
            )

    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    meta = spec.to_dict()
    meta["spec_hash"] = spec.hash()
    meta["rasterizer"] = RASTERIZER_VERSION
    meta["geometry_config"] = asdict(cfg)
    (out / "spec.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    os.remove(marker)
    return DatasetManifest(records=records, spec_hash=spec.hash(), root=out)


def manifest_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(json.dumps(r, sort_keys=True).encode())
    return h.hexdigest()[:16]
