import json

import numpy as np
import pytest

from rfmia import classifiers, cli, experiments as ex, nn, signal
from rfmia.rng import stage_seed, stream

SMALL1 = {
    "scenario": {"target_train": 400, "target_test": 200, "surrogate_train": 200,
                 "surrogate_test": 200, "mia_member": 200, "mia_nonmember": 200},
    "target": {"epochs": 3}, "surrogate": {"epochs": 3}, "mia": {"epochs": 3},
    "noisy": {"levels": [0.0, 0.1, 0.9], "per_level_count": 3},
}
SMALL2 = {
    "scenario": {"set_size": 200, "subset_size": 100},
    "target": {"epochs": 5}, "mia": {"epochs": 5}, "shadow": {"epochs": 5},
    "solver": {"max_iters": 20},
}


def _cfg(experiment, tmp_path, seed=3, name="run"):
    small = SMALL1 if experiment.startswith("setting1") else SMALL2
    return ex.ExperimentConfig(experiment, seed, small, str(tmp_path / name))


@pytest.fixture(scope="module")
def defense_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("def")
    cfg = ex.ExperimentConfig("setting2-defense", 3, SMALL2, str(d / "run"))
    return cfg, ex.run_experiment(cfg)


# ---------------------------------------------------------------- rng

def test_stage_streams_independent():
    assert stage_seed(1, "a") != stage_seed(1, "b")
    assert stage_seed(1, "a") != stage_seed(2, "a")
    assert stream(5, "x").random() == stream(5, "x").random()


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        ex.ExperimentConfig("setting3", 1)
    with pytest.raises(ValueError):
        ex.ExperimentConfig("setting2-mia", None)
    with pytest.raises(ValueError):
        ex.ExperimentConfig("setting2-mia", 1, {"optimizer": {}})


def test_digest_depends_on_overrides():
    a = ex.ExperimentConfig("setting2-mia", 1)
    b = ex.ExperimentConfig("setting2-mia", 1, {"mia": {"epochs": 1}})
    assert a.digest() != b.digest()
    assert a.digest() == ex.ExperimentConfig("setting2-mia", 1).digest()


def test_default_run_dir_uses_env(monkeypatch, tmp_path):
    monkeypatch.setenv(ex.OUT_ENV, str(tmp_path))
    assert ex.ExperimentConfig("setting1-weak", 4).run_dir() == tmp_path / "setting1-weak-seed4"


def test_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"experiment": "setting1-noisy", "seed": 9,
                                "overrides": {"mia": {"epochs": 2}}}))
    cfg = ex.ExperimentConfig.from_file(path, seed=11)
    assert cfg.seed == 11 and cfg.train_config("mia").epochs == 2


def test_training_seeds_are_stage_scoped():
    cfg = ex.ExperimentConfig("setting1-strong", 1)
    assert cfg.train_config("target").seed != cfg.train_config("surrogate").seed
    assert cfg.train_config("target").weight_decay == 1e-2


# ---------------------------------------------------------------- runs

def test_setting1_run_layout(tmp_path):
    cfg = _cfg("setting1-noisy", tmp_path)
    report = ex.run_experiment(cfg)
    d = cfg.run_dir()
    for name in ("dataset.csv", "scenario.json", "config.json", "report.json", "timing.json",
                 "models/target.json", "models/surrogate.json", "models/mia.json",
                 "noisy_average.csv", "noisy_maximum.csv"):
        assert (d / name).exists(), name
    lines = (d / "noisy_maximum.csv").read_text().splitlines()
    assert lines[0] == "level,aggregate,nonmember_acc,member_acc" and len(lines) == 4
    assert lines[1].split(",")[1] == "maximum"
    assert set(report["metrics"]) >= {"target_accuracy", "surrogate_accuracy",
                                      "paired_agreement", "mia_accuracy"}
    assert ex.WALL_CLOCK not in report


def test_reports_row_normalised(defense_run):
    _, report = defense_run

    def walk(node):
        if isinstance(node, dict):
            if "matrix" in node and "row_labels" in node:
                assert np.allclose(np.sum(node["matrix"], axis=1), 1.0, atol=1e-9)
            for v in node.values():
                walk(v)

    walk(report)


def test_run_is_deterministic(tmp_path):
    a = ex.run_experiment(_cfg("setting2-mia", tmp_path, name="a"))
    b = ex.run_experiment(_cfg("setting2-mia", tmp_path, name="b"))
    assert a == b
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_stagewise_cli_matches_run(tmp_path):
    whole = ex.run_experiment(_cfg("setting1-strong", tmp_path, name="whole"))
    cfg = _cfg("setting1-strong", tmp_path, name="staged")
    for stage in ex.PIPELINES["setting1-strong"]:
        # a fresh Run per stage forces every input to be reloaded from disk
        ex.run_stage(cfg, stage)
    staged = ex.assemble_report(ex.Run(cfg))
    assert staged == whole


def test_solver_overrides_do_not_touch_earlier_stages(tmp_path):
    a = _cfg("setting2-defense", tmp_path, name="a")
    b = ex.ExperimentConfig("setting2-defense", 3, {**SMALL2, "solver": {"max_iters": 5}},
                            str(tmp_path / "b"))
    for cfg in (a, b):
        for stage in ("synth", "train-target", "attack"):
            ex.run_stage(cfg, stage)
    for f in ("dataset.csv", "models/target.json", "models/shadow.json", "reports/attack.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_report_recomputable_from_artifacts(defense_run):
    cfg, report = defense_run
    d = cfg.run_dir()
    scen = signal.scenario_config(json.loads((d / "scenario.json").read_text()))
    ds = signal.read_csv(d / "dataset.csv", scen, cfg.seed)
    tgt = classifiers.TargetClassifier(nn.load(d / "models/target.json"), np.array([]))
    acc = classifiers.evaluate(tgt, ds.view("B", signal.PROVIDER)).accuracy
    assert acc == report["metrics"]["target_accuracy"]
    released = np.loadtxt(d / "defended_scores.csv", delimiter=",")
    raw = np.vstack([tgt.scores(ds.view(s, signal.PROVIDER).X) for s in ("A", "D_nm")])
    samples = json.loads((d / "defense_samples.json").read_text())
    conv = np.array([p["converged"] for p in samples])
    assert np.array_equal(np.argmax(released, 1)[conv], np.argmax(raw, 1)[conv])
    assert conv.mean() == report["metrics"]["convergence_rate"]


def test_defense_report_fields(defense_run):
    _, report = defense_run
    d = report["stages"]["defend"]
    assert d["argmax_violations"] == 0
    assert d["argmax_preserved_converged"] == 1.0
    assert set(d) >= {"shadow_before", "shadow_after", "mia_before", "mia_after"}


def test_stage_failure_is_labelled_and_keeps_artifacts(tmp_path, monkeypatch):
    cfg = _cfg("setting2-mia", tmp_path)
    ex.run_stage(cfg, "synth")

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(classifiers, "train_target", boom)
    with pytest.raises(ex.StageError) as err:
        ex.run_stage(cfg, "train-target")
    assert err.value.stage == "train-target"
    assert (cfg.run_dir() / "dataset.csv").exists()


def test_missing_artifacts(tmp_path):
    cfg = _cfg("setting2-mia", tmp_path)
    with pytest.raises(ex.MissingArtifactError):
        ex.run_stage(cfg, "train-target")
    with pytest.raises(ex.MissingArtifactError):
        ex.load_report(tmp_path / "empty")


def test_stage_not_in_recipe(tmp_path):
    with pytest.raises(ValueError):
        ex.run_stage(_cfg("setting2-mia", tmp_path), "defend")


def test_run_seeds_summary(tmp_path):
    cfg = _cfg("setting2-mia", tmp_path, name="multi")
    out = ex.run_seeds(cfg, 2)
    assert out["seeds"] == [3, 4]
    s = out["summary"]["target_accuracy"]
    assert s["mean"] == pytest.approx(np.mean(s["values"]))
    assert s["std"] == pytest.approx(np.std(s["values"], ddof=1))
    assert (tmp_path / "multi" / "summary.json").exists()


# ---------------------------------------------------------------- checks and CLI

def test_noisy_trend_checks_on_paper_like_tables():
    levels = [0.0, 0.1, 0.3, 0.9]
    tables = {
        "maximum": [{"level": l, "nonmember_acc": 0.9 - l / 2, "member_acc": 1.0 if l else 0.85}
                    for l in levels],
        "average": [{"level": l, "nonmember_acc": 0.5, "member_acc": 0.85 - l / 5} for l in levels],
    }
    assert all(ok for _, ok, _ in ex.noisy_trend_checks(tables))
    tables["maximum"][1]["member_acc"] = 0.99
    assert [ok for _, ok, _ in ex.noisy_trend_checks(tables)] == [False, True, True]


def test_check_run_thresholds():
    report = {"experiment": "setting2-defense", "metrics": {
        "target_accuracy": 0.9, "mia_accuracy_defended": 0.61, "shadow_accuracy_defended": 0.6,
        "argmax_preserved_converged": 1.0, "convergence_rate": 0.97}}
    results = {name: ok for name, ok, _ in ex.check_run(report)}
    assert results["defended MIA accuracy <= 0.60"] is False
    assert results["convergence rate >= 0.95"] is True


def test_cli_report_exit_codes(defense_run, tmp_path, capsys):
    cfg, report = defense_run
    expected = 0 if all(ok for _, ok, _ in ex.check_run(report)) else 1
    assert cli.main(["report", str(cfg.run_dir())]) == expected
    out = capsys.readouterr().out
    assert "adversary MIA under defense" in out
    assert cli.main(["report", str(tmp_path / "nothing")]) == 2


def test_report_is_pure_function_of_disk(defense_run, capsys):
    cfg, _ = defense_run
    cli.main(["report", str(cfg.run_dir())])
    first = capsys.readouterr().out
    cli.main(["report", str(cfg.run_dir())])
    assert capsys.readouterr().out == first


def test_cli_stage_commands(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"experiment": "setting2-mia", "seed": 2, "overrides": SMALL2}))
    out = tmp_path / "cli"
    for cmd in ("synth", "train-target", "attack"):
        assert cli.main([cmd, "--config", str(conf), "--out", str(out)]) == 0
    assert (out / "reports" / "attack.json").exists()
    assert cli.main(["defend", "--config", str(conf), "--out", str(out)]) == 2


def test_cli_run_with_seeds(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"experiment": "setting2-mia", "seed": 0, "overrides": SMALL2}))
    assert cli.main(["run", "--config", str(conf), "--seeds", "2", "--out", str(tmp_path / "m")]) == 0
    assert "+/-" in capsys.readouterr().out


def test_cli_requires_experiment(capsys):
    with pytest.raises(SystemExit):
        cli.main(["run"])
