import os

import pytest
import torch

from concept_reach.diffusion import ArchConfig, DiffusionModel, NoiseSchedule

TINY_ARCH = ArchConfig(block_out_channels=(8, 16, 16, 32), norm_num_groups=4, attention_head_dim=4, sample_size=16)


def tiny_model(seed: int = 0, T: int = 8, dtype=torch.float32) -> DiffusionModel:
    model = DiffusionModel.create(TINY_ARCH, NoiseSchedule.linear(T), seed=seed)
    model.denoiser.to(dtype).requires_grad_(False).eval()
    return model


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def tiny64():
    return tiny_model(dtype=torch.float64)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("CONCEPT_REACH_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; enable with --runslow or CONCEPT_REACH_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY_RUN = {
    "seeds": [0],
    "data": {"target_total": 270},
    "train": {"epochs": 1, "T": 10, "batch_size": 32, "arch": {"block_out_channels": [8, 16, 16, 32], "norm_num_groups": 4, "attention_head_dim": 4}},
    "steer": {"steps": 3, "batch_size": 4, "window": 2},
    "classifier": {"epochs": 1},
    "eval": {"n_samples": 4, "concept_set_size": 8, "sample_batch": 4, "classifier_generated_per_tuple": 0},
    "experiment": {"baseline_targets_per_group": 1, "injection_grid": [0, 10, 50, 100]},
}


def write_tiny_config(path, root) -> str:
    import yaml

    path.write_text(yaml.safe_dump({"root": str(root), **TINY_RUN}))
    return str(path)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """An artifact root holding the tiny baseline family: dataset, model, classifiers, vectors, results."""
    from concept_reach.config import load_config
    from concept_reach.harness import Runner, run_baseline

    base = tmp_path_factory.mktemp("tiny_run")
    cfg_path = write_tiny_config(base / "tiny.yaml", base / "root")
    cfg = load_config(cfg_path)
    records = run_baseline(Runner(cfg))
    return {"config": cfg_path, "cfg": cfg, "root": base / "root", "records": records}


# acceptance reporting: one PASS / FAIL / NOT RUN line per criterion, printed after the run


@pytest.fixture
def criterion(request):
    lines = request.config.__dict__.setdefault("_criteria", {})

    def report(number: int, status: str, detail: str = "") -> None:
        lines[number] = f"criterion {number:>2}: {status}" + (f"  {detail}" if detail else "")
        print(lines[number])

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_criteria")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
