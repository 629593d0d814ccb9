import json

import pytest

from tpckit.cli import main
from tpckit.config import SEARCH_SPACE, ExperimentConfig, load_config

TINY_FLAGS = ["--n-layers", "2", "--temp-channels", "3", "--point-channels", "2", "--epochs", "1",
              "--batch-size", "16"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n-patients", "40", "--seed", "2", "--out", str(root / "raw")]) == 0
    assert main(["preprocess", "--input", str(root / "raw"), "--seed", "2", "--out", str(root / "proc")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    runs = workdir / "runs"
    assert main(["train", "--data", str(workdir / "proc"), "--out", str(runs), "--seeds", "0", "1",
                 "--model", "tpc", *TINY_FLAGS]) == 0
    assert main(["train", "--data", str(workdir / "proc"), "--out", str(runs), "--seeds", "0", "1",
                 "--model", "median"]) == 0
    return runs


def test_synth_writes_raw_files(workdir):
    names = {p.name for p in (workdir / "raw").iterdir()}
    assert {"events.csv", "flat.csv", "diagnoses.csv", "outcomes.csv", "features.csv", "summary.json"} <= names
    summary = json.loads((workdir / "raw" / "summary.json").read_text())
    assert summary["n_patients"] == 40 and summary["seed"] == 2


def test_preprocess_writes_manifest(workdir):
    manifest = json.loads((workdir / "proc" / "manifest.json").read_text())
    assert manifest["fit_count"] == 1 and len(manifest["dataset_hash"]) == 16


def test_existing_output_needs_force(workdir, capsys):
    assert main(["synth", "--n-patients", "5", "--out", str(workdir / "raw")]) == 1
    assert "--force" in capsys.readouterr().err
    other = workdir / "raw2"
    assert main(["synth", "--n-patients", "5", "--out", str(other)]) == 0
    assert main(["synth", "--n-patients", "6", "--out", str(other), "--force"]) == 0


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n-patients", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--model", "gru"])
    assert exc.value.code == 2


def test_missing_inputs_exit_1(tmp_path, capsys):
    assert main(["preprocess", "--input", str(tmp_path / "none"), "--out", str(tmp_path / "p")]) == 1
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 1
    assert main(["evaluate", str(tmp_path)]) == 1


def test_train_layout(trained):
    run = trained / "tpc_full_msle" / "seed1"
    assert {"model.ckpt", "predictions.csv", "run.json", "metrics.json"} <= {p.name for p in run.iterdir()}
    assert (trained / "tpc_full_msle" / "experiment.json").exists()
    manifest = json.loads((run / "run.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["model"]["n_layers"] == 2


def test_rerun_without_force_is_refused(workdir, trained):
    code = main(["train", "--data", str(workdir / "proc"), "--out", str(trained), "--seeds", "0",
                 "--model", "median"])
    assert code == 1


def test_evaluate_prints_each_run(trained, capsys):
    assert main(["evaluate", str(trained / "median_msle")]) == 0
    out = capsys.readouterr().out
    assert out.count("Kappa 0.00") == 2
    assert (trained / "median_msle" / "aggregate.json").exists()


def test_compare_with_itself(trained, capsys, tmp_path):
    d = str(trained / "tpc_full_msle")
    assert main(["compare", d, d, "--out", str(tmp_path / "cmp")]) == 0
    out = capsys.readouterr().out
    assert "msle   p = 1 " in out
    res = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert all(t["p"] == 1.0 for t in res["tests"].values())


def test_compare_median_against_tpc(trained, capsys):
    assert main(["compare", str(trained / "tpc_full_msle"), str(trained / "median_msle"), "--student"]) == 0
    lines = capsys.readouterr().out.splitlines()
    median_row = next(l for l in lines if l.startswith("median_msle"))
    assert median_row.split()[6].startswith("0.00±0.00")


def test_compare_refuses_mixed_datasets(trained, tmp_path):
    other = tmp_path / "other"
    (other / "seed0").mkdir(parents=True)
    for name in ("predictions.csv", "run.json"):
        (other / "seed0" / name).write_text((trained / "median_msle" / "seed0" / name).read_text())
    manifest = json.loads((other / "seed0" / "run.json").read_text())
    manifest["dataset_hash"] = "deadbeef"
    (other / "seed0" / "run.json").write_text(json.dumps(manifest))
    assert main(["compare", str(trained / "median_msle"), str(other)]) == 1


def test_ablate(workdir, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(workdir / "proc"), "--out", str(out), "--seeds", "0", "1",
                 "--variants", "full", "no_skip", *TINY_FLAGS]) == 0
    table = (out / "ablation.txt").read_text().splitlines()
    assert table[2].startswith("full") and table[3].startswith("no_skip")
    assert (out / "tpc_no_skip_msle" / "seed1" / "metrics.json").exists()


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"n_patients": 50, "model": {"kind": "tpc", "n_layers": 3}, "epochs": 4}))
    cfg = load_config(path, epochs=2, **{"model.temp_channels": 5})
    assert cfg.n_patients == 50 and cfg.epochs == 2
    assert cfg.model["n_layers"] == 3 and cfg.model["temp_channels"] == 5
    assert cfg.train_kwargs() == {"lr": 0.00226, "batch_size": 32, "epochs": 2}
    switched = load_config(path, model={"kind": "lstm"})
    assert switched.model["kind"] == "lstm" and switched.model["hidden"] == 128
    cfg.save(tmp_path / "saved.json")
    assert load_config(tmp_path / "saved.json").to_json() == cfg.to_json()


def test_config_rejects_bad_values(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n_patient": 5}))
    with pytest.raises(ValueError):
        load_config(path)
    with pytest.raises(ValueError):
        load_config(loss="mae")
    with pytest.raises(ValueError):
        ExperimentConfig(variants=["wide"])
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[])


def test_search_space_ranges():
    assert SEARCH_SPACE["tpc_layers"][:2] == [1, 12]
    assert SEARCH_SPACE["lr"][:2] == [0.0001, 0.01]
