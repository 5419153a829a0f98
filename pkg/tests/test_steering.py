import json

import numpy as np
import pytest
import torch

from concept_reach.concepts import ConceptTuple, baseline_spec
from concept_reach.datagen import materialize
from concept_reach.diffusion import IntegrityError, sample, to_model_space
from concept_reach.evaluator import count_nonblack_colors
from concept_reach.steering import (
    ConceptImageSet,
    SteerConfig,
    Space,
    SteeringVector,
    build_concept_set,
    diagnostics_table,
    optimize_vector,
    spearman,
    steered_sample,
    steering_loss,
)

TARGET = ConceptTuple("red", "triangle", "green", "square")
Y_S = "a green triangle behind a red triangle"


def _tiny_set(k=6, seed=0):
    imgs = np.random.default_rng(seed).integers(0, 256, size=(k, 16, 16, 3), dtype=np.uint8)
    return ConceptImageSet(imgs, TARGET, {"rendered": k})


# vectors


def test_shape_discipline():
    with pytest.raises(ValueError):
        SteeringVector(Space.PROMPT, torch.zeros(10, 256), Y_S, TARGET)
    with pytest.raises(ValueError):
        SteeringVector(Space.H, torch.zeros(128, 64), Y_S, TARGET)
    v = SteeringVector(Space.H, torch.ones(128, 8, 8), Y_S, TARGET)
    assert v.l2_norm == pytest.approx(float(np.sqrt(128 * 64)), abs=1e-6)
    assert abs(v.diagnostics["l2_norm"] - float(v.values.double().norm())) < 1e-6


def test_vector_round_trip_and_tamper(tmp_path):
    v = SteeringVector(Space.PROMPT, torch.randn(10, 512), Y_S, TARGET, {"final_loss": 0.5, "steps": 3})
    path = v.save(tmp_path, {"model_key": "abc"})
    assert path.name.startswith("vec_prompt_red-triangle-green-square_") and path.suffix == ".bin"
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["model_key"] == "abc" and meta["y_s"] == Y_S and meta["steps"] == 3
    back = SteeringVector.load(path)
    assert torch.equal(back.values, v.values)
    assert (back.space, back.y_s, back.target) == (v.space, v.y_s, v.target)
    with open(path, "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(IntegrityError):
        SteeringVector.load(path)
    torch.save(v.values + 1, path)
    with pytest.raises(IntegrityError):
        SteeringVector.load(path)


# concept sets


def test_concept_set_is_rendered_with_ground_truth():
    Z = build_concept_set(TARGET, 12, seed=0)
    assert Z.images.shape == (12, 64, 64, 3)
    assert Z.target == TARGET and Z.provenance["rendered"] == 12
    red, green = (255, 0, 0), (0, 255, 0)
    for img in Z.images:
        assert count_nonblack_colors(img) == 2
        assert {tuple(p) for p in img.reshape(-1, 3)} == {(0, 0, 0), red, green}
    with pytest.raises(ValueError):
        build_concept_set(TARGET, 0)


def test_concept_set_from_source_and_shortfall(tmp_path):
    manifest = materialize(baseline_spec(108), tmp_path / "d")
    Z = build_concept_set(TARGET, 2, source=manifest)
    assert len(Z.provenance["from_source"]) == 2 and Z.provenance["rendered"] == 0
    Z = build_concept_set(TARGET, 5, source=manifest)
    assert Z.provenance["rendered"] == 3
    with pytest.raises(ValueError):
        build_concept_set(TARGET, 5, source=manifest, allow_render=False)


def test_concept_set_renders_differ_from_training_renders(tmp_path):
    manifest = materialize(baseline_spec(108), tmp_path / "d")
    train_imgs = {img.tobytes() for img in manifest.load_images()}
    Z = build_concept_set(TARGET, 5)
    assert not any(img.tobytes() in train_imgs for img in Z.images)


# optimization


def test_zero_steps_give_zero_vector_and_prompting(tiny):
    for space in Space:
        v = optimize_vector(tiny, space, Y_S, _tiny_set(), SteerConfig(steps=0))
        assert torch.count_nonzero(v.values) == 0
        assert np.array_equal(steered_sample(tiny, v, 3, seed=2), sample(tiny, Y_S, 3, seed=2))


def test_model_stays_frozen_and_vector_moves(tiny):
    before = tiny.weights_hash()
    for space in Space:
        v = optimize_vector(tiny, space, Y_S, _tiny_set(), SteerConfig(steps=5, batch_size=4, window=2))
        assert v.l2_norm > 0
        assert v.diagnostics["steps"] == 5 and len(v.diagnostics["loss_history"]) == 5
        assert v.diagnostics["trailing_loss"] == pytest.approx(np.mean(v.diagnostics["loss_history"][-2:]))
    assert tiny.weights_hash() == before


def test_optimization_is_deterministic(tiny):
    cfg = SteerConfig(steps=4, batch_size=4, seed=7)
    a = optimize_vector(tiny, Space.H, Y_S, _tiny_set(), cfg)
    b = optimize_vector(tiny, Space.H, Y_S, _tiny_set(), cfg)
    assert torch.equal(a.values, b.values)


def test_loss_decreases_over_optimization(tiny):
    v = optimize_vector(tiny, Space.PROMPT, Y_S, _tiny_set(16), SteerConfig(steps=150, batch_size=16, window=20))
    hist = v.diagnostics["loss_history"]
    assert np.mean(hist[-20:]) <= np.mean(hist[:20])


@pytest.mark.parametrize("space", list(Space))
def test_steering_gradient_matches_finite_differences(tiny64, space):
    model = tiny64
    g = torch.Generator().manual_seed(0)
    x0 = to_model_space(_tiny_set(3).images).double()
    t = torch.tensor([1, 4, 8])
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    base = model.encode([Y_S])[0]
    shape = model.prompt_shape if space is Space.PROMPT else model.h_shape
    vec = (0.1 * torch.randn(shape, generator=g, dtype=torch.float64)).requires_grad_(True)
    (grad,) = torch.autograd.grad(steering_loss(model, space, vec, base, x0, t, eps), vec)
    h = 1e-6
    with torch.no_grad():
        # coordinates with the largest gradient keep the difference above float64 rounding
        for flat in grad.abs().flatten().topk(3).indices.tolist():
            idx = np.unravel_index(flat, shape)
            orig = vec[idx].item()
            vec[idx] = orig + h
            up = steering_loss(model, space, vec, base, x0, t, eps).item()
            vec[idx] = orig - h
            down = steering_loss(model, space, vec, base, x0, t, eps).item()
            vec[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - grad[idx].item()) <= 1e-3 * max(abs(fd), 1e-8), (flat, fd, grad[idx].item())


# diagnostics


def test_diagnostics_table():
    assert diagnostics_table([], []) == []
    vs = [SteeringVector(Space.H, torch.full((4, 2, 2), float(i)), Y_S, TARGET, {"final_loss": 0.1 * i}) for i in range(3)]
    rows = diagnostics_table(vs, [0.9, 0.5, 0.1])
    assert [r["l2_norm"] for r in rows] == [0.0, 4.0, 8.0]
    assert rows[1]["final_loss"] == pytest.approx(0.1) and rows[2]["accuracy"] == 0.1
    assert spearman([r["l2_norm"] for r in rows], [r["accuracy"] for r in rows]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        diagnostics_table(vs, [0.1])


def test_spearman_undefined_cases():
    assert spearman([1.0], [2.0]) is None
    assert spearman([1, 1, 1], [1, 2, 3]) is None
    assert spearman([1, 2, 3], [3, 5, 9]) == pytest.approx(1.0)
