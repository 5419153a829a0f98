"""The six experiment families and the summaries computed from their results."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..concepts import (
    MASK_LADDER,
    ConceptTuple,
    DatasetSpec,
    Factor,
    OodClass,
    apply_bias,
    apply_removal,
    apply_scarcity,
    caption_of,
    classify_ood,
    enumerate_valid_tuples,
    parse_caption,
)
from ..steering import spearman
from ..store import ResultsStore
from .runner import Runner

log = logging.getLogger(__name__)

FAMILIES = ("baseline", "scarcity", "underspec", "bias", "removal", "norm_diag")


@dataclass
class ExperimentPlan:
    """A flat list of jobs: (spec, target, y_s, method, params) evaluated for every seed."""

    family: str
    jobs: list[tuple[DatasetSpec, ConceptTuple, str, str, dict]] = field(default_factory=list)
    seeds: tuple[int, ...] = (0,)
    n_samples: int = 100

    def add(self, spec, target, y_s, method, **params):
        parse_caption(y_s)  # rejects prompts outside the caption grammar
        self.jobs.append((spec, target, y_s, method, params))

    def specs(self) -> list[DatasetSpec]:
        seen = {}
        for spec, *_ in self.jobs:
            seen.setdefault(spec.hash(), spec)
        return list(seen.values())


def _parse_assignment(text: str) -> tuple[Factor, str]:
    name, value = text.split("=")
    return Factor.parse(name.strip()), value.strip()


def baseline_targets(start: ConceptTuple, per_group: int, seed: int) -> dict[int, list[ConceptTuple]]:
    """Targets grouped by how many factors differ from ``start``; up to ``per_group`` each."""
    rng = np.random.default_rng(seed)
    groups: dict[int, list[ConceptTuple]] = defaultdict(list)
    for t in enumerate_valid_tuples():
        groups[start.hamming(t)].append(t)
    out = {}
    for d in sorted(groups):
        members = groups[d]
        pick = rng.choice(len(members), size=min(per_group, len(members)), replace=False)
        out[d] = [members[i] for i in sorted(pick)]
    return out


def random_targets(k: int, seed: int, pool: list[ConceptTuple] | None = None) -> list[ConceptTuple]:
    pool = pool if pool is not None else enumerate_valid_tuples()
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    return [pool[i] for i in sorted(idx)]


def plan_baseline(runner: Runner) -> ExperimentPlan:
    cfg = runner.cfg
    plan = ExperimentPlan("baseline", seeds=cfg.seeds, n_samples=cfg.eval.n_samples)
    spec = runner.baseline()
    y_s = cfg.experiment.baseline_start
    start, _ = parse_caption(y_s)
    start = ConceptTuple(*start)
    for d, targets in baseline_targets(start, cfg.experiment.baseline_targets_per_group, cfg.experiment.target_seed).items():
        for t in targets:
            for method in cfg.experiment.methods:
                plan.add(spec, t, y_s, method, distance=d)
    return plan


def plan_scarcity(runner: Runner) -> ExperimentPlan:
    cfg = runner.cfg
    plan = ExperimentPlan("scarcity", seeds=cfg.seeds, n_samples=cfg.eval.n_samples)
    target = ConceptTuple.from_key(cfg.experiment.scarcity_target)
    base = runner.baseline()
    for concept in cfg.experiment.scarcity_concepts:
        factor, value = _parse_assignment(concept)
        for p in cfg.experiment.p_grid:
            spec = apply_scarcity(base, factor, value, p)
            for method in cfg.experiment.methods:
                plan.add(spec, target, caption_of(target), method, concept=concept, p=p)
    return plan


def plan_underspec(runner: Runner) -> ExperimentPlan:
    cfg = runner.cfg
    plan = ExperimentPlan("underspec", seeds=cfg.seeds, n_samples=cfg.eval.n_samples)
    targets = random_targets(cfg.experiment.underspec_targets, cfg.experiment.target_seed)
    base = runner.baseline()
    for mask in MASK_LADDER:
        spec = base.with_mask(mask)
        for t in targets:
            for method in cfg.experiment.methods:
                common = {"mask": mask.label, "n_specified": mask.n_specified}
                if method == "prompting":
                    plan.add(spec, t, caption_of(t), method, variant="full", **common)
                    continue
                plan.add(spec, t, caption_of(t, mask), method, variant="reduced", **common)
                if cfg.experiment.underspec_full_prompt_variant and mask.n_specified < 4:
                    plan.add(spec, t, caption_of(t), method, variant="full", **common)
    return plan


def bias_targets(tie: tuple[tuple[Factor, str], tuple[Factor, str]], per_kind: int, seed: int) -> dict[str, list[ConceptTuple]]:
    """Targets with only the first tied concept (``a_only``) or only the second (``b_only``)."""
    (fa, va), (fb, vb) = tie
    all_t = enumerate_valid_tuples()
    a_only = [t for t in all_t if t.get(fa) == va and t.get(fb) != vb]
    b_only = [t for t in all_t if t.get(fa) != va and t.get(fb) == vb]
    return {"a_only": random_targets(per_kind, seed, a_only), "b_only": random_targets(per_kind, seed + 1, b_only)}


def plan_bias(runner: Runner) -> ExperimentPlan:
    cfg = runner.cfg
    plan = ExperimentPlan("bias", seeds=cfg.seeds, n_samples=cfg.eval.n_samples)
    base = runner.baseline()
    for tie_text in cfg.experiment.bias_ties:
        a, b = tie_text.split(",")
        tie = (_parse_assignment(a), _parse_assignment(b))
        kinds = bias_targets(tie, cfg.experiment.bias_targets_per_kind, cfg.experiment.target_seed)
        for inj in cfg.experiment.injection_grid:
            spec = apply_bias(base, tie, inj)
            for kind, targets in kinds.items():
                for t in targets:
                    for method in cfg.experiment.methods:
                        plan.add(spec, t, caption_of(t), method, tie=tie_text, injection=inj, kind=kind)
    return plan


def plan_removal(runner: Runner) -> ExperimentPlan:
    cfg = runner.cfg
    plan = ExperimentPlan("removal", seeds=cfg.seeds, n_samples=cfg.eval.n_samples)
    base = runner.baseline()
    for key in cfg.experiment.removal_targets:
        t = ConceptTuple.from_key(key)
        spec = apply_removal(base, t)
        others = random_targets(cfg.experiment.removal_extra_prompts, cfg.experiment.target_seed, [u for u in enumerate_valid_tuples() if u != t])
        prompts = [caption_of(t)] + [caption_of(u) for u in others]
        for method in cfg.experiment.methods:
            if method == "prompting":
                plan.add(spec, t, caption_of(t), method, removed=key)
            else:
                for y_s in prompts:
                    plan.add(spec, t, y_s, method, removed=key)
    return plan


PLANNERS = {
    "baseline": plan_baseline,
    "scarcity": plan_scarcity,
    "underspec": plan_underspec,
    "bias": plan_bias,
    "removal": plan_removal,
}


def run_plan(runner: Runner, plan: ExperimentPlan) -> list[dict]:
    """Evaluate every job for every seed; finished jobs are read back from the results store."""
    results = ResultsStore(runner.store.experiment_dir(plan.family))
    out = []
    total = len(plan.jobs) * len(plan.seeds)
    for seed in plan.seeds:
        for spec, target, y_s, method, params in plan.jobs:
            rec = runner.evaluate(plan.family, spec, seed, method, target, y_s, params, results)
            out.append(rec)
            log.info("[%d/%d] %s seed=%d %s %s acc=%.3f", len(out), total, plan.family, seed, method, target.key(), rec["accuracy"])
    results.export_csv()
    return out


def run_baseline(runner: Runner) -> list[dict]:
    return run_plan(runner, plan_baseline(runner))


def run_scarcity(runner: Runner) -> list[dict]:
    return run_plan(runner, plan_scarcity(runner))


def run_underspec(runner: Runner) -> list[dict]:
    return run_plan(runner, plan_underspec(runner))


def run_bias(runner: Runner) -> list[dict]:
    return run_plan(runner, plan_bias(runner))


def run_removal(runner: Runner) -> list[dict]:
    return run_plan(runner, plan_removal(runner))


def run_norm_diag(runner: Runner) -> dict:
    """Scatter data (loss, norm, accuracy) of the baseline steering vectors, with Spearman correlations."""
    results = run_baseline(runner)
    summary = norm_diag_summary(results)
    out = runner.store.experiment_dir("norm_diag")
    out.mkdir(parents=True, exist_ok=True)
    (out / "norm_diag.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


FAMILY_RUNNERS = {
    "baseline": run_baseline,
    "scarcity": run_scarcity,
    "underspec": run_underspec,
    "bias": run_bias,
    "removal": run_removal,
    "norm_diag": run_norm_diag,
}


# summaries -----------------------------------------------------------------


def mean_by(records: list[dict], *keys: str, value: str = "accuracy") -> dict[tuple, float]:
    """Mean of ``value`` grouped by record fields or ``params`` entries (params win)."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        k = tuple(r["params"].get(key, r.get(key)) for key in keys)
        groups[k].append(r[value])
    return {k: float(np.mean(v)) for k, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}


def seed_means(records: list[dict], *keys: str) -> dict[tuple, dict]:
    """Per-seed mean then mean over seeds, following the four-model protocol."""
    per_seed = mean_by(records, *keys, "model_seed")
    grouped: dict[tuple, list[float]] = defaultdict(list)
    for k, v in per_seed.items():
        grouped[k[:-1]].append(v)
    return {k: {"mean": float(np.mean(v)), "per_seed": v} for k, v in grouped.items()}


def norm_diag_summary(records: list[dict]) -> dict:
    rows = [
        {
            "space": "prompt" if r["method"] == "prompt_steering" else "h",
            "model_seed": r["model_seed"],
            "target": r["target"],
            "final_loss": r["diagnostics"].get("final_loss"),
            "trailing_loss": r["diagnostics"].get("trailing_loss"),
            "l2_norm": r["diagnostics"]["l2_norm"],
            "accuracy": r["accuracy"],
        }
        for r in records
        if r.get("diagnostics")
    ]
    corr = {}
    for space in ("prompt", "h"):
        sub = [r for r in rows if r["space"] == space]
        entry = {
            "pooled_norm": spearman([r["l2_norm"] for r in sub], [r["accuracy"] for r in sub]),
            "pooled_loss": spearman([r["final_loss"] for r in sub], [r["accuracy"] for r in sub]),
            "per_seed_norm": {},
        }
        for seed in sorted({r["model_seed"] for r in sub}):
            s = [r for r in sub if r["model_seed"] == seed]
            entry["per_seed_norm"][str(seed)] = spearman([r["l2_norm"] for r in s], [r["accuracy"] for r in s])
        corr[space] = entry
    return {"rows": rows, "spearman": corr}


def factor_breakdown(records: list[dict], removed_factor: str) -> dict[str, float]:
    """Share of images per generated value of the removed factor.

    Images whose other factors miss the target, or that fail the colour
    filter, go to the catch-all bucket ``X``.
    """
    idx = ["c1", "s1", "c2", "s2"].index(removed_factor)
    counts: dict[str, int] = defaultdict(int)
    total = 0
    for r in records:
        target = r["target"].split(":")
        for v in r["verdicts"]:
            total += 1
            if v == "incomplete":
                counts["X"] += 1
                continue
            pred = v.split(":")
            if any(pred[j] != target[j] for j in range(4) if j != idx):
                counts["X"] += 1
            else:
                counts[pred[idx]] += 1
    return {k: c / total for k, c in sorted(counts.items())} if total else {}


def specified_accuracy(records: list[dict], mask_specified: list[str]) -> tuple[float, dict[str, float]]:
    """Accuracy over the specified factors only, and marginal accuracy per unspecified factor."""
    idx = [["c1", "s1", "c2", "s2"].index(p) for p in mask_specified]
    hit, total = 0, 0
    marg: dict[str, list[int]] = defaultdict(list)
    for r in records:
        target = r["target"].split(":")
        for v in r["verdicts"]:
            total += 1
            if v == "incomplete":
                for j, p in enumerate(["c1", "s1", "c2", "s2"]):
                    if p not in mask_specified:
                        marg[p].append(0)
                continue
            pred = v.split(":")
            hit += all(pred[j] == target[j] for j in idx)
            for j, p in enumerate(["c1", "s1", "c2", "s2"]):
                if p not in mask_specified:
                    marg[p].append(int(pred[j] == target[j]))
    return (hit / total if total else float("nan")), {p: float(np.mean(v)) for p, v in marg.items()}


def chance_level(factor: str) -> float:
    """Chance of guessing a removed factor among valid completions: 1/2 for a colour, 1/3 for a shape."""
    f = Factor.parse(factor)
    return 1 / (len(f.value_set) - 1) if f.kind == "color" else 1 / len(f.value_set)


def trend_test(x, y, alternative: str = "greater") -> tuple[float | None, float | None]:
    """One-sided Spearman trend test; returns (rho, p-value) or (None, None) if undefined."""
    rho = spearman(x, y)
    if rho is None:
        return None, None
    res = stats.spearmanr(x, y, alternative=alternative)
    return float(res.statistic), float(res.pvalue)


def ood_consistency(records: list[dict], specs: dict[str, DatasetSpec]) -> bool:
    return all(
        classify_ood(ConceptTuple.from_key(r["target"]), specs[r["spec_hash"]]).value == r["ood_class"]
        for r in records
        if r["spec_hash"] in specs
    )


__all__ = [
    "FAMILIES",
    "FAMILY_RUNNERS",
    "OodClass",
    "PLANNERS",
    "ExperimentPlan",
    "baseline_targets",
    "bias_targets",
    "chance_level",
    "factor_breakdown",
    "mean_by",
    "norm_diag_summary",
    "ood_consistency",
    "run_baseline",
    "run_bias",
    "run_norm_diag",
    "run_plan",
    "run_removal",
    "run_scarcity",
    "run_underspec",
    "seed_means",
    "specified_accuracy",
    "trend_test",
]
