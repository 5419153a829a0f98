import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_reach.concepts import baseline_spec
from concept_reach.config import PROFILES, ConfigError, RunConfig, dump_config, load_config
from concept_reach.store import ArtifactStore, ResultsStore, atomic_write_text, flatten, key_of, write_results_csv


def _record(key, acc=0.5, **params):
    return {
        "family": "baseline",
        "spec_hash": "s",
        "model_seed": 0,
        "method": "prompting",
        "target": "red:circle:green:square",
        "y_s": "a red circle behind a green square",
        "accuracy": acc,
        "n": 2,
        "matched": int(acc * 2),
        "ood_class": "in_distribution",
        "verdicts_digest": "d",
        "verdicts": [],
        "params": params,
        "diagnostics": None,
        "job_key": key,
    }


# keys and atomic writes


def test_key_of_is_stable_and_order_sensitive():
    assert key_of("a", {"x": 1, "y": 2}) == key_of("a", {"y": 2, "x": 1})
    assert key_of("a", 1) != key_of(1, "a")
    assert len(key_of("a")) == 16


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    atomic_write_text(p, "one")
    atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]


# artifact store


def test_artifact_store_markers_and_index(tmp_path):
    store = ArtifactStore(tmp_path)
    spec = baseline_spec(54)
    d = store.dataset_dir(spec)
    assert d.name == spec.hash()
    assert not store.is_complete(d)
    d.mkdir(parents=True)
    store.mark_complete(d)
    assert store.is_complete(d)
    store.register("dataset", spec.hash(), d, {"config": "c"})
    store.register("dataset", spec.hash(), d, {"config": "c"})
    assert store.index() == [{"kind": "dataset", "key": spec.hash(), "path": f"datasets/{spec.hash()}", "parents": {"config": "c"}}]
    store.clear(d)
    assert not d.exists()
    with open(tmp_path / "index.jsonl", "a") as fh:
        fh.write('{"kind": "mod')
    assert len(store.index()) == 1


# results store


def test_results_store_keyed_by_job(tmp_path):
    rs = ResultsStore(tmp_path)
    assert rs.load() == []
    rs.append(_record("b", 0.5))
    rs.append(_record("a", 1.0))
    rs.append(_record("b", 0.0))
    recs = rs.load()
    assert sorted(r["job_key"] for r in recs) == ["a", "b"]
    assert {r["job_key"]: r["accuracy"] for r in recs} == {"a": 1.0, "b": 0.0}
    assert rs.keys() == {"a", "b"}


def test_results_store_tolerates_torn_line(tmp_path):
    rs = ResultsStore(tmp_path)
    rs.append(_record("a"))
    with open(rs.path, "a") as fh:
        fh.write('{"job_key": "b", "acc')
    assert [r["job_key"] for r in rs.load()] == ["a"]


def test_csv_export_is_deterministic(tmp_path):
    recs = [_record("b", 0.5, p=0.1), _record("a", 1.0, p=0.2)]
    write_results_csv(recs, tmp_path / "x.csv")
    write_results_csv(list(reversed(recs)), tmp_path / "y.csv")
    assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0].split(",")[-1] == "param_p"
    assert flatten(_record("a", diagnostics=None))["accuracy"] == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.floats(0, 1)), max_size=12))
def test_results_last_write_wins(tmp_path_factory, writes):
    rs = ResultsStore(tmp_path_factory.mktemp("rs"))
    expected = {}
    for key, acc in writes:
        rs.append(_record(key, acc))
        expected[key] = acc
    assert {r["job_key"]: r["accuracy"] for r in rs.load()} == expected


# configuration


def test_paper_profile_defaults():
    cfg = load_config()
    assert cfg.profile == "paper"
    assert cfg.seeds == (0, 1, 2, 3)
    assert cfg.data.target_total == 54000
    assert (cfg.train.epochs, cfg.train.lr, cfg.train.gamma, cfg.train.T) == (70, 1e-3, 0.98, 1000)
    assert (cfg.steer.steps, cfg.steer.lr) == (5000, 0.02)
    assert (cfg.classifier.epochs, cfg.classifier.lr) == (7, 1e-3)
    assert cfg.eval.n_samples == 100
    assert cfg.experiment.p_grid == (1 / 3, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.0)
    assert cfg.experiment.injection_grid == (0, 10, 50, 100, 500, 1000)


def test_smoke_profile():
    cfg = load_config(profile="smoke")
    assert cfg.seeds == (0,) and cfg.data.target_total == 2700 and cfg.train.epochs == 5 and cfg.eval.n_samples == 50
    assert set(PROFILES) == {"paper", "smoke"}


def test_unknown_keys_and_profiles_rejected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    with pytest.raises(ConfigError, match="epochz"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(profile="huge")
    with pytest.raises(ConfigError):
        load_config(overrides={"bogus": 1})
    with pytest.raises(ConfigError, match="injection_grid"):
        load_config(overrides={"data": {"target_total": 270}})
    with pytest.raises(ConfigError, match="p_grid"):
        load_config(overrides={"experiment": {"p_grid": [0.5]}})
    broken = tmp_path / "broken.yaml"
    broken.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_precedence_profile_env_file_flags(tmp_path, monkeypatch):
    monkeypatch.setenv("CONCEPT_REACH_ROOT", str(tmp_path / "env"))
    assert load_config().root == str(tmp_path / "env")
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"root": str(tmp_path / "file"), "train": {"epochs": 9}}))
    cfg = load_config(f, profile="smoke")
    assert cfg.root == str(tmp_path / "file") and cfg.train.epochs == 9 and cfg.data.target_total == 2700
    cfg = load_config(f, profile="smoke", overrides={"root": "flag", "seeds": [7]})
    assert cfg.root == "flag" and cfg.seeds == (7,)


def test_config_dump_round_trip(tmp_path):
    cfg = load_config(profile="smoke", overrides={"train": {"arch": {"block_out_channels": [8, 16, 16, 32]}}})
    dump_config(cfg, tmp_path / "c.yaml")
    stored = yaml.safe_load((tmp_path / "c.yaml").read_text())
    # every default is materialized in the stored document
    assert stored["train"]["arch"]["norm_num_groups"] == 8 and "p_grid" in stored["experiment"]
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash()
    assert RunConfig().hash() != cfg.hash()
