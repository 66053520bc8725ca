import io
import json
import subprocess
import sys

import pytest

from emtcycle import cli
from emtcycle.compensator import EnsembleModel
from emtcycle.geometry import load_datasets
from emtcycle.presets import default_grid


@pytest.fixture(scope="module")
def preset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--preset", "table1", "--out", str(out), "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_model(preset_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "ens.json"
    code = cli.main(["train", "--data", str(preset_dir), "--out", str(path),
                     "--epochs", "0", "--members", "2"])
    assert code == 0
    return path


def run_compensate(model, text, monkeypatch, capsys, *extra):
    monkeypatch.setattr(sys, "stdin", io.StringIO(text))
    code = cli.main(["compensate", "--model", str(model), *extra])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_simulate_preset(preset_dir, capsys):
    ds = load_datasets(preset_dir)
    assert len(ds) == 9
    assert [d.role for d in ds].count("evaluation") == 3
    assert (preset_dir / "grid.json").exists()


def test_simulate_is_deterministic(preset_dir, tmp_path):
    assert cli.main(["simulate", "--preset", "table1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "datasets.csv").read_bytes() == (preset_dir / "datasets.csv").read_bytes()


def test_simulate_zero_severity_spec(tmp_path, capsys):
    spec = {"env_id": "flat", "severity_scale": 0.0,
            "board_center": list(default_grid().center), "role": "evaluation"}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    assert cli.main(["simulate", "--spec", str(path), "--out", str(tmp_path / "o")]) == 0
    line = capsys.readouterr().out.strip()
    assert line.split()[0] == "flat" and "rmse 0.000 mm" in line


def test_simulate_bad_spec(tmp_path, capsys):
    path = tmp_path / "spec.json"
    path.write_text("{not json")
    assert cli.main(["simulate", "--spec", str(path), "--out", str(tmp_path / "o")]) == 2
    path.write_text(json.dumps({"env_id": "x", "severity_scale": -1.0}))
    assert cli.main(["simulate", "--spec", str(path), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x", "--out", "y", "--mode", "other"])
    assert exc.value.code == 1


def test_missing_data_dir(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out",
                     str(tmp_path / "m.json"), "--epochs", "0", "--members", "2"]) == 2


def test_train_writes_ensemble(tiny_model):
    ens = EnsembleModel.load(tiny_model)
    assert len(ens.members) == 2 and ens.finetune is not None
    assert [m.seed for m in ens.members] == [0, 1]


def test_train_vanilla_mode(preset_dir, tmp_path, capsys):
    path = tmp_path / "v.json"
    assert cli.main(["train", "--data", str(preset_dir), "--out", str(path), "--epochs", "1",
                     "--members", "2", "--mode", "vanilla-gan", "--no-fine-tune"]) == 0
    doc = json.loads(path.read_text())
    assert doc["finetune"] is None
    assert {m["mode"] for m in doc["members"]} == {"vanilla_gan"}


def test_evaluate_raw_without_model(preset_dir, tmp_path, capsys):
    out = tmp_path / "rep"
    assert cli.main(["evaluate", "--data", str(preset_dir), "--stage", "raw",
                     "--out", str(out), "--csv"]) == 0
    text = capsys.readouterr().out
    assert "carm_7cm" in text and "RMSE [mm]" in text
    rep = json.loads((out / "report.json").read_text())
    assert {r["env_id"] for r in rep["rows"]} == {"carm_7cm", "carm_9cm", "carm_12cm"}
    assert (out / "report_rows.csv").exists()


def test_evaluate_needs_model_for_trained_stage(preset_dir, tmp_path, capsys):
    assert cli.main(["evaluate", "--data", str(preset_dir), "--stage", "cyclegan",
                     "--out", str(tmp_path)]) == 2


def test_evaluate_with_model(preset_dir, tiny_model, tmp_path, capsys):
    out = tmp_path / "rep"
    assert cli.main(["evaluate", "--data", str(preset_dir), "--model", str(tiny_model),
                     "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["sigma_pred"]["cyclegan_ft"] > 0
    assert "consistency_cyclegan" in rep["metrics"]


def test_compensate_empty_input(tiny_model, monkeypatch, capsys):
    assert run_compensate(tiny_model, "", monkeypatch, capsys) == (0, "", "")


def test_compensate_passthrough_and_stateless(tiny_model, monkeypatch, capsys):
    a = "3.25,-7.5,9.6,0.4,1.0,2.0,3.0\n"
    b = "10.0,12.0,0.0,0.2,0.0,0.0,0.0\n"
    code, out, err = run_compensate(tiny_model, a + b + a, monkeypatch, capsys)
    assert code == 0 and err == ""
    lines = out.splitlines()
    assert len(lines) == 3 and lines[0] == lines[2]
    vals = [float(v) for v in lines[0].split(",")]
    assert len(vals) == 9
    assert vals[0] == 3.25 and vals[1] == -7.5
    alone = run_compensate(tiny_model, b, monkeypatch, capsys)[1]
    assert alone.strip() == lines[1]


def test_compensate_bad_lines_continue(tiny_model, monkeypatch, capsys):
    code, out, err = run_compensate(tiny_model, "1,2,3\n1,2,3,0,0,0,0\nfoo\n", monkeypatch, capsys)
    assert code == 0
    assert len(out.splitlines()) == 1
    assert "line 1" in err and "line 3" in err


def test_compensate_fine_tune_flag(tiny_model, monkeypatch, capsys):
    line = "3.0,4.0,9.6,0.4,0.0,0.0,0.0\n"
    off = run_compensate(tiny_model, line, monkeypatch, capsys)[1]
    on = run_compensate(tiny_model, line, monkeypatch, capsys, "--fine-tune")[1]
    assert on != off
    # the linear stage moves positions only, never the reported spread
    assert on.split(",")[-2:] == off.split(",")[-2:]


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert args.seed == 7


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "emtcycle.cli", "train", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "--lambda-comp" in res.stdout and "default: 200" in res.stdout
    res = subprocess.run([sys.executable, "-m", "emtcycle.cli", "bogus"],
                         capture_output=True, text=True)
    assert res.returncode == 1
