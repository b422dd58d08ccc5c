from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from medcoder.cli import main
from medcoder.pipeline import COMMANDS
from medcoder.synthetic import default_generator_config

STAGE_OUTPUT = {
    "gen-synthetic": "corpus",
    "ingest": "data",
    "train-text": "text",
    "train-ranker": "ranker",
    "train-tabular": "tabular",
    "tune-ensemble": "ensemble",
    "predict": "predictions",
    "explain": "evidence",
    "evaluate": "reports",
    "report": "reports",
}


def fast_config(n_admissions: int = 80) -> dict:
    gen = default_generator_config(n_admissions=n_admissions).to_dict()
    return {
        "output_dir": "run",
        "seed": 0,
        "generator": gen,
        "text": {"epochs": 2, "embedding_dim": 16, "feature_maps": 8},
        "ranker": {"epochs": 2, "hidden_units": 8, "char_filters": 4, "word_embedding_dim": 8,
                   "char_embedding_dim": 8},
        "explain": {"max_admissions": 3, "surrogate": {"samples": 50}},
    }


def write_config(directory: Path, cfg: dict) -> Path:
    path = directory / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def snapshot(root: Path) -> dict[str, tuple[int, int]]:
    return {str(p.relative_to(root)): (p.stat().st_mtime_ns, p.stat().st_size)
            for p in root.rglob("*") if p.is_file()}


def changed(before: dict, after: dict) -> set[str]:
    return {k for k, v in after.items() if before.get(k) != v} | (set(before) - set(after))


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """Every command in order, with the files each one touched."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root, fast_config())
    touched, codes = {}, {}
    for command in COMMANDS:
        before = snapshot(root)
        codes[command] = main([command, "--config", str(config)])
        touched[command] = changed(before, snapshot(root))
    return root, config, codes, touched


def test_every_command_succeeds(full_run):
    _, _, codes, _ = full_run
    assert codes == {c: 0 for c in COMMANDS}


@pytest.mark.parametrize("command", COMMANDS)
def test_outputs_stay_under_declared_directory(full_run, command):
    _, _, _, touched = full_run
    prefix = f"run/{STAGE_OUTPUT[command]}/"
    assert touched[command], f"{command} wrote nothing"
    assert all(path.startswith(prefix) for path in touched[command]), touched[command]


def test_artifacts_carry_schema_version(full_run):
    root = full_run[0]
    pred = json.loads((root / "run/predictions/test.jsonl").read_text().splitlines()[0])
    assert pred["schema_version"] == 1
    assert json.loads((root / "run/reports/metrics.json").read_text())["schema_version"] == 1
    assert json.loads((root / "run/ensemble/validation.json").read_text())["schema_version"] == 1


def test_evaluate_prints_table(full_run, capsys):
    root, config, _, _ = full_run
    assert main(["evaluate", "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert "AUC" in out and "F1" in out


def _copy_run(full_run, tmp_path) -> Path:
    root, _, _, _ = full_run
    shutil.copytree(root / "run", tmp_path / "run")
    return write_config(tmp_path, fast_config())


def test_predict_without_tabular_reallocates(full_run, tmp_path, capsys):
    config = _copy_run(full_run, tmp_path)
    shutil.rmtree(tmp_path / "run" / "tabular")
    capsys.readouterr()
    assert main(["predict", "--config", str(config)]) == 0
    err = capsys.readouterr().err
    assert "reallocating weight" in err and "tabular" in err
    line = json.loads((tmp_path / "run/predictions/test.jsonl").read_text().splitlines()[0])
    assert line["predictors"]["tabular"] == 0.0
    assert abs(sum(line["predictors"].values()) - 1.0) <= 1e-9


def test_evaluate_width_mismatch_names_catalog(full_run, tmp_path, capsys):
    config = _copy_run(full_run, tmp_path)
    path = tmp_path / "run/predictions/test.jsonl"
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    for line in lines:
        line["probabilities"].popitem()
    path.write_text("".join(json.dumps(x) + "\n" for x in lines))
    capsys.readouterr()
    assert main(["evaluate", "--config", str(config)]) == 3
    assert "data/catalog.json" in capsys.readouterr().err


def test_unknown_command_is_usage_error(tmp_path):
    config = write_config(tmp_path, fast_config())
    with pytest.raises(SystemExit) as exc:
        main(["train-everything", "--config", str(config)])
    assert exc.value.code == 2


@pytest.mark.parametrize("body", ["{not json", json.dumps({"bogus_key": 1}),
                                  json.dumps({"predict_split": "dev"})])
def test_bad_config_is_usage_error(tmp_path, body):
    (tmp_path / "config.json").write_text(body)
    assert main(["ingest", "--config", str(tmp_path / "config.json")]) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert main(["ingest", "--config", str(tmp_path / "absent.json")]) == 2


def test_missing_upstream_is_dependency_error(tmp_path, capsys):
    config = write_config(tmp_path, fast_config())
    assert main(["train-text", "--config", str(config)]) == 3
    assert "medcoder ingest" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_missing_table_is_data_error(tmp_path):
    config = write_config(tmp_path, fast_config(n_admissions=20))
    assert main(["gen-synthetic", "--config", str(config)]) == 0
    (tmp_path / "run/corpus/LABELS.csv").unlink()
    assert main(["ingest", "--config", str(config)]) == 4


def test_seed_and_out_overrides(tmp_path):
    config = write_config(tmp_path, fast_config(n_admissions=20))
    assert main(["gen-synthetic", "--config", str(config), "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["gen-synthetic", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    a = (tmp_path / "a/corpus/NOTEEVENTS.csv").read_text()
    b = (tmp_path / "b/corpus/NOTEEVENTS.csv").read_text()
    assert a != b
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize("level,visible", [("WARNING", False), ("INFO", True), ("debug", True)])
def test_log_level_from_environment(tmp_path, monkeypatch, capsys, level, visible):
    monkeypatch.setenv("MEDCODER_LOG_LEVEL", level)
    config = write_config(tmp_path, fast_config(n_admissions=20))
    assert main(["gen-synthetic", "--config", str(config)]) == 0
    assert ("synthetic admissions" in capsys.readouterr().err) == visible
