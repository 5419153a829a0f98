import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_reach.concepts import ConceptTuple, SpecificationMask, baseline_spec, enumerate_valid_tuples, parse_caption
from concept_reach.datagen import (
    IMAGE_SIZE,
    RGB,
    DatasetManifest,
    GeometryConfig,
    GeometryError,
    SceneGeometry,
    ShapeSpec,
    in_frame,
    load_png,
    manifest_digest,
    materialize,
    render,
    render_tuple,
    sample_geometry,
    shape_mask,
    visible_fraction,
)
from concept_reach.evaluator import count_nonblack_colors

TUPLES = enumerate_valid_tuples()


def _scene(back, front, colors=("red", "blue")):
    return SceneGeometry(ShapeSpec(*back), ShapeSpec(*front), colors)


def test_visible_fraction_trivial_cases():
    apart = _scene(("circle", (12.0, 12.0), 16.0), ("square", (50.0, 50.0), 16.0))
    assert visible_fraction(apart) == 1.0
    covered = _scene(("circle", (32.0, 32.0), 16.0), ("square", (32.0, 32.0), 30.0))
    assert visible_fraction(covered) == 0.0


def test_concentric_circle_square_oracle():
    # back circle radius 16 with a centred front square of side 16
    g = _scene(("circle", (32.0, 32.0), 32.0), ("square", (32.0, 32.0), 16.0))
    assert visible_fraction(g) == pytest.approx(1 - 256 / (math.pi * 16**2), abs=0.02)
    # back square side 30 with a centred front circle of diameter 20
    g = _scene(("square", (32.0, 32.0), 30.0), ("circle", (32.0, 32.0), 20.0))
    assert visible_fraction(g) == pytest.approx(1 - math.pi * 100 / 900, abs=0.02)


def test_shape_areas_match_analytic():
    for kind, area in (("circle", math.pi * 14**2), ("square", 28.0**2), ("triangle", 28.0**2 / 2)):
        assert shape_mask(ShapeSpec(kind, (32.0, 32.0), 28.0)).sum() == pytest.approx(area, rel=0.04)


def test_render_draws_front_over_back_on_black():
    g = _scene(("square", (30.0, 30.0), 28.0), ("circle", (36.0, 36.0), 20.0), ("green", "blue"))
    img = render(g)
    assert img.shape == (IMAGE_SIZE, IMAGE_SIZE, 3) and img.dtype == np.uint8
    assert tuple(img[36, 36]) == RGB["blue"]
    assert tuple(img[18, 18]) == RGB["green"]
    assert tuple(img[0, 63]) == (0, 0, 0)
    assert np.array_equal(render(g), img)
    colours = {tuple(p) for p in img.reshape(-1, 3)}
    assert colours == {(0, 0, 0), RGB["green"], RGB["blue"]}


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(TUPLES), st.integers(0, 10**6), st.integers(0, 2**31 - 1))
def test_sampled_geometry_invariants(t, index, seed):
    img, g = render_tuple(t, index, seed)
    assert in_frame(g.back) and in_frame(g.front)
    assert 0.45 <= visible_fraction(g) < 1
    assert count_nonblack_colors(img) == 2
    present = {tuple(p) for p in img.reshape(-1, 3)} - {(0, 0, 0)}
    assert present == {RGB[t.c1], RGB[t.c2]}
    assert (g.back.kind, g.front.kind, g.colors) == (t.s1, t.s2, (t.c1, t.c2))


def test_render_tuple_is_deterministic():
    t = TUPLES[7]
    a, ga = render_tuple(t, 3, 11)
    b, gb = render_tuple(t, 3, 11)
    assert ga == gb and np.array_equal(a, b)
    c, _ = render_tuple(t, 4, 11)
    assert not np.array_equal(a, c)


def test_visibility_band_per_back_shape():
    rng = np.random.default_rng(0)
    mins = {}
    for s in ("circle", "triangle", "square"):
        t = ConceptTuple("red", s, "green", "square")
        mins[s] = min(visible_fraction(sample_geometry(t, rng)) for _ in range(300))
    assert all(0.45 <= v < 0.7 for v in mins.values()), mins


def test_infeasible_config_raises():
    t = TUPLES[0]
    with pytest.raises(GeometryError):
        sample_geometry(t, np.random.default_rng(0), GeometryConfig(front_size=(0.0, 0.0)))


def test_geometry_round_trip():
    _, g = render_tuple(TUPLES[3], 0, 0)
    assert SceneGeometry.from_dict(json.loads(json.dumps(g.to_dict()))) == g


def _small_spec(mask=SpecificationMask()):
    spec = baseline_spec(target_total=108, mask=mask)
    return spec


def test_materialize_layout_and_manifest(tmp_path):
    spec = _small_spec(SpecificationMask.without("s2"))
    m = materialize(spec, tmp_path / "d")
    assert len(m) == 108
    assert not (tmp_path / "d" / "INCOMPLETE").exists()
    per_tuple = {}
    for r in m.records:
        t = ConceptTuple(r["c1"], r["s1"], r["c2"], r["s2"])
        per_tuple[t] = per_tuple.get(t, 0) + 1
        assert set(r) == {"id", "file", "c1", "s1", "c2", "s2", "caption", "geometry"}
        partial, mask = parse_caption(r["caption"])
        assert mask == spec.mask and partial == t.restrict(spec.mask)
    assert per_tuple == {t: n for t, n in spec.counts.items() if n}
    meta = json.loads((tmp_path / "d" / "spec.json").read_text())
    assert meta["spec_hash"] == spec.hash() and "rasterizer" in meta
    loaded = DatasetManifest.load(tmp_path / "d")
    assert loaded.spec_hash == spec.hash()
    imgs = loaded.load_images()
    assert imgs.shape == (108, 64, 64, 3)
    assert all(count_nonblack_colors(im) == 2 for im in imgs)


def test_materialize_is_deterministic(tmp_path):
    spec = _small_spec()
    a = materialize(spec, tmp_path / "a")
    b = materialize(spec, tmp_path / "b")
    assert manifest_digest(a) == manifest_digest(b)
    for ra, rb in zip(a.records[::17], b.records[::17]):
        assert np.array_equal(load_png(tmp_path / "a" / ra["file"]), load_png(tmp_path / "b" / rb["file"]))


def test_materialize_empty_spec(tmp_path):
    spec = baseline_spec(target_total=0)
    m = materialize(spec, tmp_path / "e")
    assert len(m) == 0
    assert DatasetManifest.load(tmp_path / "e").load_images().shape == (0, 64, 64, 3)


def test_incomplete_dataset_is_refused(tmp_path):
    materialize(_small_spec(), tmp_path / "d")
    (tmp_path / "d" / "INCOMPLETE").write_text("")
    with pytest.raises(RuntimeError, match="incomplete"):
        DatasetManifest.load(tmp_path / "d")
