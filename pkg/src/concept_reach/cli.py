"""Command-line entry point: ``concept-reach <command> [options]``.

Every command is idempotent under one artifact root: finished artifacts are
detected through their COMPLETE markers and skipped unless ``--force``.
Exit codes: 0 success, 2 configuration error, 3 integrity error or missing
upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .concepts import ConceptTuple, DatasetSpec, caption_of
from .config import ConfigError, RunConfig, load_config
from .datagen import load_png, save_png
from .diffusion.model import DiffusionModel, IntegrityError
from .diffusion.sampling import sample
from .evaluator import ClassifierTriple, classify_images, reachability_from_verdicts
from .harness import FAMILIES, FAMILY_RUNNERS, Runner, plot
from .integrity import verify_root
from .steering import Space, SteeringVector
from .store import MissingArtifact, ResultsStore, atomic_write_text

log = logging.getLogger("concept_reach")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY = 0, 2, 3


def _config(args) -> RunConfig:
    overrides: dict = {}
    if args.root is not None:
        overrides["root"] = args.root
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return load_config(args.config, args.profile, overrides)


def _spec(runner: Runner, spec_file: str | None) -> DatasetSpec:
    if spec_file is None:
        return runner.baseline()
    try:
        return DatasetSpec.from_json(Path(spec_file).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read dataset spec {spec_file}: {exc}") from exc


def _target(key: str) -> ConceptTuple:
    try:
        return ConceptTuple.from_key(key)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad target {key!r}; expected c1:s1:c2:s2, e.g. red:circle:blue:square") from exc


def _spec_flag(spec_file: str | None) -> str:
    return f" --spec-file {spec_file}" if spec_file else ""


def _require_dataset(runner: Runner, spec: DatasetSpec, spec_file: str | None) -> None:
    if not runner.store.is_complete(runner.store.dataset_dir(spec)):
        raise MissingArtifact(f"dataset {spec.hash()} not found under {runner.store.root}; run `concept-reach gen-data{_spec_flag(spec_file)}` first")


def _require_model(runner: Runner, spec: DatasetSpec, seed: int, spec_file: str | None) -> tuple[str, DiffusionModel]:
    mkey = runner.model_key(spec, seed)
    if not runner.store.is_complete(runner.store.model_dir(mkey)):
        raise MissingArtifact(f"model for dataset {spec.hash()} seed {seed} not found; run `concept-reach train --seed {seed}{_spec_flag(spec_file)}` first")
    return runner.ensure_model(spec, seed)


def _require_classifiers(runner: Runner) -> ClassifierTriple:
    if not runner.store.is_complete(runner.store.classifier_dir(runner.classifier_key())):
        raise MissingArtifact("classifiers not found; run `concept-reach train-classifiers` first")
    return runner.ensure_classifiers()


def _model_seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    spec = _spec(runner, args.spec_file)
    runner.ensure_dataset(spec)
    print(runner.store.dataset_dir(spec))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    spec = _spec(runner, args.spec_file)
    _require_dataset(runner, spec, args.spec_file)
    for seed in cfg.seeds:
        mkey, _ = runner.ensure_model(spec, seed)
        print(runner.store.model_dir(mkey))
    return EXIT_OK


def cmd_train_classifiers(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    spec = runner.baseline()
    _require_dataset(runner, spec, None)
    if cfg.eval.classifier_generated_per_tuple > 0:
        for seed in cfg.eval.classifier_model_seeds:
            _require_model(runner, spec, seed, None)
    runner.ensure_classifiers()
    print(runner.store.classifier_dir(runner.classifier_key()))
    return EXIT_OK


def cmd_steer(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    spec = _spec(runner, args.spec_file)
    target = _target(args.target)
    mkey, model = _require_model(runner, spec, _model_seed(args, cfg), args.spec_file)
    vec = runner.ensure_vector(mkey, model, Space(args.space), target, args.y_s)
    print(json.dumps({"l2_norm": vec.l2_norm, **{k: v for k, v in vec.diagnostics.items() if k != "loss_history"}}, sort_keys=True))
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    spec = _spec(runner, args.spec_file)
    out = Path(args.out)
    if runner.store.is_complete(out) and not args.force:
        log.info("%s already complete; nothing to do", out)
        print(out)
        return EXIT_OK
    _, model = _require_model(runner, spec, _model_seed(args, cfg), args.spec_file)
    vec = None
    if args.vector is not None:
        try:
            vec = SteeringVector.load(args.vector)
        except FileNotFoundError as exc:
            raise MissingArtifact(f"vector {args.vector} not found; run `concept-reach steer` first") from exc
        try:
            vec.check_compatible(model)
        except ValueError as exc:
            raise IntegrityError(str(exc)) from exc
    prompt = args.prompt if vec is None else vec.y_s
    images = sample(model, prompt, args.n, args.sample_seed, intervention=vec, batch_size=cfg.eval.sample_batch)
    runner.store.clear(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_png(img, out / f"{i:05d}.png")
    meta = {"prompt": prompt, "n": args.n, "seed": args.sample_seed, "model": runner.model_key(spec, _model_seed(args, cfg)), "vector": vec.content_hash() if vec else None}
    atomic_write_text(out / "sample.json", json.dumps(meta, indent=1, sort_keys=True))
    runner.store.mark_complete(out)
    print(out)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    target = _target(args.target)
    files = sorted(Path(args.images).glob("*.png"))
    if not files:
        raise MissingArtifact(f"no PNG images in {args.images}; run `concept-reach sample` first")
    clfs = _require_classifiers(runner)
    images = np.stack([load_png(p) for p in files])
    verdicts = classify_images(clfs, images, target)
    record = {
        "target": target.key(),
        "caption": caption_of(target),
        "n": len(verdicts),
        "matched": sum(v.matched_target for v in verdicts),
        "accuracy": reachability_from_verdicts(verdicts),
        "verdicts": [v.to_str() for v in verdicts],
    }
    atomic_write_text(Path(args.images) / f"eval_{target.key().replace(':', '_')}.json", json.dumps(record, indent=1, sort_keys=True))
    print(json.dumps({k: record[k] for k in ("target", "n", "matched", "accuracy")}, sort_keys=True))
    return EXIT_OK


def cmd_experiment(args, cfg: RunConfig) -> int:
    runner = Runner(cfg, force=args.force)
    FAMILY_RUNNERS[args.family](runner)
    _plot_family(runner, args.family, None)
    return EXIT_OK


def _plot_family(runner: Runner, family: str, out: str | None) -> list[Path]:
    # norm_diag is drawn from the baseline records
    source = "baseline" if family == "norm_diag" else family
    records = ResultsStore(runner.store.experiment_dir(source)).load()
    if not records:
        raise MissingArtifact(f"no {source} results under {runner.store.root}; run `concept-reach experiment {source}` first")
    out_dir = Path(out) if out else runner.store.experiment_dir(family) / "figures"
    paths = plot(records, family, out_dir)
    for p in paths:
        print(p)
    return paths


def cmd_plot(args, cfg: RunConfig) -> int:
    _plot_family(Runner(cfg), args.family, args.out)
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    report = verify_root(cfg.root, deep=not args.shallow)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK if report["ok"] else EXIT_INTEGRITY


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-classifiers": cmd_train_classifiers,
    "steer": cmd_steer,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "verify": cmd_verify,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--profile", choices=["paper", "smoke"], help="hyperparameter profile (default: paper)")
    common.add_argument("--seed", type=int, help="model seed; restricts multi-seed commands to this seed")
    common.add_argument("--root", help="artifact root (default: $CONCEPT_REACH_ROOT or ./runs)")
    common.add_argument("--force", action="store_true", help="rebuild artifacts even when complete")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="concept-reach", description="Concept reachability experiments on a synthetic two-shape dataset.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a dataset")
    p.add_argument("--spec-file", help="JSON dataset spec (default: the balanced baseline)")

    p = sub.add_parser("train", parents=[common], help="train diffusion model(s) on a dataset")
    p.add_argument("--spec-file")

    sub.add_parser("train-classifiers", parents=[common], help="train the evaluation classifiers")

    p = sub.add_parser("steer", parents=[common], help="optimize a steering vector")
    p.add_argument("--spec-file")
    p.add_argument("--space", choices=[s.value for s in Space], required=True)
    p.add_argument("--target", required=True, help="target tuple c1:s1:c2:s2")
    p.add_argument("--y-s", required=True, help="starting prompt")

    p = sub.add_parser("sample", parents=[common], help="sample images into a directory")
    p.add_argument("--spec-file")
    p.add_argument("--prompt", help="conditioning prompt (ignored with --vector, which carries its own)")
    p.add_argument("--vector", help="steering vector .bin file")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score a directory of images against a target")
    p.add_argument("--images", required=True)
    p.add_argument("--target", required=True)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment family and draw its figures")
    p.add_argument("family", choices=FAMILIES)

    p = sub.add_parser("plot", parents=[common], help="redraw figures from stored results")
    p.add_argument("family", choices=FAMILIES)
    p.add_argument("--out", help="output directory (default: experiments/<family>/figures)")

    p = sub.add_parser("verify", parents=[common], help="check every artifact's hash chain")
    p.add_argument("--shallow", action="store_true", help="skip re-hashing weight files")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    if args.command == "sample" and args.prompt is None and args.vector is None:
        print("error: sample needs --prompt or --vector", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrityError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
