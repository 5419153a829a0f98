import json
import shutil

import pytest

from concept_reach.concepts import ConceptTuple, Factor, apply_removal, baseline_spec
from concept_reach.config import load_config
from concept_reach.harness import (
    FAMILIES,
    Runner,
    chance_level,
    factor_breakdown,
    mean_by,
    plot,
    run_baseline,
    seed_means,
    specified_accuracy,
    trend_test,
)
from concept_reach.harness.experiments import baseline_targets, bias_targets, ood_consistency, plan_baseline, plan_bias, plan_removal, plan_scarcity, plan_underspec
from concept_reach.integrity import verify_root
from concept_reach.store import ResultsStore


def _rec(target, verdicts, method="prompting", seed=0, **params):
    matched = sum(v == target for v in verdicts)
    return {"family": "x", "target": target, "verdicts": verdicts, "accuracy": matched / len(verdicts), "n": len(verdicts), "matched": matched,
            "method": method, "model_seed": seed, "params": params, "job_key": f"{target}{method}{seed}{params}", "diagnostics": None}


# plans


def test_plans_cover_methods_and_grids():
    cfg = load_config(overrides={"root": "unused"})
    runner = Runner.__new__(Runner)
    runner.cfg = cfg
    plan = plan_baseline(runner)
    assert {j[3] for j in plan.jobs} == {"prompting", "prompt_steering", "h_steering"}
    assert {j[4]["distance"] for j in plan.jobs} == {0, 1, 2, 3, 4}
    sc = plan_scarcity(runner)
    assert sorted({j[4]["p"] for j in sc.jobs}) == sorted(cfg.experiment.p_grid)
    # p = 1/3 leaves every concept balanced, so those specs all equal the baseline
    assert len(sc.specs()) == len(cfg.experiment.scarcity_concepts) * (len(cfg.experiment.p_grid) - 1) + 1
    # every job prompt parses under the caption grammar
    for p in (plan_underspec(runner), plan_bias(runner), plan_removal(runner)):
        assert p.jobs


def test_baseline_targets_grouped_by_distance():
    start = ConceptTuple("red", "triangle", "green", "square")
    groups = baseline_targets(start, 3, 0)
    assert groups[0] == [start]
    for d, ts in groups.items():
        assert all(start.hamming(t) == d for t in ts) and len(ts) <= 3
    assert groups == baseline_targets(start, 3, 0)


def test_bias_targets_respect_kinds():
    tie = ((Factor.parse("c1"), "blue"), (Factor.parse("s1"), "circle"))
    kinds = bias_targets(tie, 6, 0)
    for kind, ts in kinds.items():
        assert ts and len(ts) <= 6
        for t in ts:
            assert (t.c1 == "blue", t.s1 == "circle") == ((True, False) if kind == "a_only" else (False, True))
    assert set(kinds) == {"a_only", "b_only"}


# summaries


def test_mean_by_and_seed_means():
    recs = [_rec("a", ["a", "b"], seed=0, p=0.1), _rec("a", ["a", "a"], seed=1, p=0.1), _rec("a", ["b", "b"], seed=0, p=0.0)]
    assert mean_by(recs, "p") == {(0.0,): 0.0, (0.1,): 0.75}
    sm = seed_means(recs, "p")
    assert sm[(0.1,)] == {"mean": 0.75, "per_seed": [0.5, 1.0]}


def test_factor_breakdown_and_specified_accuracy():
    recs = [_rec("red:circle:blue:square", ["red:circle:blue:square", "green:circle:blue:square", "incomplete", "red:circle:blue:circle"])]
    assert factor_breakdown(recs, "c1") == {"X": 0.5, "green": 0.25, "red": 0.25}
    acc, marg = specified_accuracy(recs, ["s1", "c2", "s2"])
    assert acc == pytest.approx(0.5) and marg == {"c1": pytest.approx(0.5)}
    assert factor_breakdown([], "c1") == {}


def test_chance_levels_and_trend():
    assert chance_level("c1") == pytest.approx(0.5) and chance_level("s2") == pytest.approx(1 / 3)
    rho, p = trend_test([1, 2, 3, 4, 5], [0.1, 0.2, 0.2, 0.5, 0.9])
    assert rho > 0.9 and p < 0.05
    assert trend_test([1, 1], [2, 3]) == (None, None)


# plotting


def test_plot_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError, match="unknown family"):
        plot([_rec("a", ["a"])], "nope", tmp_path)
    with pytest.raises(ValueError, match="no results"):
        plot([], "baseline", tmp_path)
    with pytest.raises(ValueError, match="missing"):
        plot([{"family": "x"}], "baseline", tmp_path)
    assert set(FAMILIES) == {"baseline", "scarcity", "underspec", "bias", "removal", "norm_diag"}


# end to end on the tiny baseline


def test_baseline_records_are_consistent(tiny_root):
    recs = tiny_root["records"]
    assert len(recs) == 5 * 3
    spec = baseline_spec(270)
    for r in recs:
        assert r["n"] == 4 == len(r["verdicts"])
        assert r["accuracy"] == pytest.approx(r["matched"] / r["n"])
        assert r["matched"] == sum(v == r["target"] for v in r["verdicts"])
        assert r["spec_hash"] == spec.hash() and r["ood_class"] == "in_distribution"
        assert (r["diagnostics"] is None) == (r["method"] == "prompting")
    assert ood_consistency(recs, {spec.hash(): spec})
    assert ood_consistency([dict(recs[0], ood_class="removed")], {spec.hash(): spec}) is False
    # relabelling the spec under a removal of the record's target changes its class
    removed = apply_removal(spec, ConceptTuple.from_key(recs[0]["target"]))
    assert not ood_consistency([dict(recs[0], spec_hash=removed.hash())], {removed.hash(): removed})


def test_rerun_is_a_no_op(tiny_root):
    results = ResultsStore(tiny_root["root"] / "experiments" / "baseline")
    before = results.path.read_bytes()
    again = run_baseline(Runner(tiny_root["cfg"]))
    assert results.path.read_bytes() == before
    assert [r["job_key"] for r in again] == [r["job_key"] for r in tiny_root["records"]]


def test_resume_after_interruption_is_identical(tiny_root, tmp_path):
    root = tmp_path / "root"
    shutil.copytree(tiny_root["root"], root)
    cfg = load_config(tiny_root["config"], overrides={"root": str(root)})
    results = ResultsStore(root / "experiments" / "baseline")
    complete = results.path.read_bytes()
    recs = results.load()
    # simulate a kill: steering jobs never recorded, their vectors left without COMPLETE markers
    kept = [r for r in recs if r["method"] == "prompting"]
    results.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
    markers = list((root / "vectors").rglob("COMPLETE"))
    assert markers
    for m in markers:
        m.unlink()
    run_baseline(Runner(cfg))
    assert results.path.read_bytes() == complete
    assert all(m.exists() for m in markers)


def test_plots_are_byte_identical(tiny_root, tmp_path):
    recs = ResultsStore(tiny_root["root"] / "experiments" / "baseline").load()
    for fam in ("baseline", "norm_diag"):
        a = plot(recs, fam, tmp_path / "a")
        b = plot(list(reversed(recs)), fam, tmp_path / "b")
        assert [p.name for p in a] == [p.name for p in b]
        for pa, pb in zip(a, b):
            if pa.suffix in (".csv", ".svg"):
                assert pa.read_bytes() == pb.read_bytes(), pa.name
            assert pa.stat().st_size > 0


def test_verify_reports_clean_root(tiny_root):
    report = verify_root(tiny_root["root"])
    assert report["ok"], report["problems"]
