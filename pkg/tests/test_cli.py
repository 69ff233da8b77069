import json
import subprocess
import sys
from importlib import resources

import jsonschema
import pytest

from cheapnet.cli import DEFAULTS, ConfigError, main, resolve_config

DATA = "synth:classes=2,per_class=10,hw=6,difficulty=0.5"
TRAIN = ["train", "--arch", "resnet8", "--kind", "shift", "--data", DATA, "--batch", "8", "-q",
         "--deterministic"]


def schema(name):
    return json.loads(resources.files("cheapnet.schemas").joinpath(name).read_text())


@pytest.fixture(scope="module")
def od_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("od")
    assert main(TRAIN + ["--scheme", "od", "--branches", "2", "--epochs", "2", "-o", str(out)]) == 0
    return out


def test_analyze_table(capsys):
    assert main(["analyze", "resnet56"]) == 0
    out = capsys.readouterr().out
    assert "resnet56" in out and "FLOPs" in out


def test_analyze_json_validates(tmp_path, capsys):
    assert main(["analyze", "wrn40_1", "--json", "--per-layer", "-o", str(tmp_path / "r.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    jsonschema.validate(printed, schema("cost_report.schema.json"))
    assert json.loads((tmp_path / "r.json").read_text()) == printed


def test_transform_then_compare_shift_rates(tmp_path, capsys):
    path = tmp_path / "shift.json"
    assert main(["transform", "resnet56", "--kind", "shift", "-o", str(path)]) == 0
    jsonschema.validate(json.loads(path.read_text()), schema("arch.schema.json"))
    capsys.readouterr()
    assert main(["analyze", str(path), "--compare", "resnet56", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["compare"]["cr"] == pytest.approx(8.5, abs=0.3)
    assert doc["compare"]["sr"] == pytest.approx(8.2, abs=0.3)


def test_transform_group_on_densenet_is_config_error(tmp_path, capsys):
    code = main(["transform", "densenet40_12", "--kind", "group", "--groups", "16", "-o",
                 str(tmp_path / "x.json")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_unknown_arch_is_config_error(capsys):
    assert main(["analyze", "no-such-net"]) == 2


def test_train_outputs(od_run):
    names = {p.name for p in od_run.iterdir()}
    assert {"metrics.csv", "student0.ckpt", "student1.ckpt", "teacher_head.ckpt", "arch.json",
            "summary.json"} <= names
    rows = (od_run / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("epoch,lr,loss,s0_train_loss")
    summary = json.loads((od_run / "summary.json").read_text())
    jsonschema.validate(summary, schema("summary.schema.json"))
    jsonschema.validate(json.loads((od_run / "arch.json").read_text()), schema("arch.schema.json"))
    assert summary["scheme"] == "od" and summary["epochs"] == 2


def test_rerun_gives_byte_identical_metrics(od_run, tmp_path):
    assert main(TRAIN + ["--scheme", "od", "--branches", "2", "--epochs", "2", "-o", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (od_run / "metrics.csv").read_bytes()


def test_eval_is_deterministic(od_run, capsys):
    argv = ["eval", "--arch", str(od_run / "arch.json"), "--checkpoint", str(od_run / "student0.ckpt"),
            "--data", DATA]
    assert main(argv) == 0 and main(argv) == 0
    first, second = capsys.readouterr().out.split()
    assert first == second and 0 <= float(first) <= 100


def test_eval_matches_logged_val_error(od_run, capsys):
    assert main(["eval", "--arch", str(od_run / "arch.json"), "--checkpoint",
                 str(od_run / "student1.ckpt"), "--data", DATA]) == 0
    summary = json.loads((od_run / "summary.json").read_text())
    assert float(capsys.readouterr().out) == pytest.approx(summary["final_val_errors"][1], abs=0.005)


def test_eval_test_split_needs_cifar(od_run):
    assert main(["eval", "--arch", str(od_run / "arch.json"), "--checkpoint",
                 str(od_run / "student0.ckpt"), "--data", DATA, "--split", "test"]) == 2


def test_eval_mismatched_checkpoint(od_run):
    assert main(["eval", "--arch", "resnet20", "--checkpoint", str(od_run / "student0.ckpt"),
                 "--data", DATA]) == 2


def test_dk_without_teacher_is_config_error(tmp_path, capsys):
    assert main(TRAIN + ["--scheme", "dk", "--epochs", "1", "-o", str(tmp_path)]) == 2
    assert "teacher" in capsys.readouterr().err


def test_dk_with_teacher_checkpoint(od_run, tmp_path):
    assert main(TRAIN + ["--scheme", "dk", "--epochs", "1", "--teacher", str(od_run / "student0.ckpt"),
                         "--teacher-arch", str(od_run / "arch.json"),
                         "-o", str(tmp_path)]) == 0


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"arch": "resnet8", "epochs": 7, "temperature": 2.0}))
    flat = resolve_config(str(path), {"epochs": 3, "seed": None})
    assert flat["epochs"] == 3            # flag beats file
    assert flat["temperature"] == 2.0     # file beats default
    assert flat["seed"] == DEFAULTS["seed"]


@pytest.mark.parametrize("doc,match", [({"arch": "resnet8", "epoch": 1}, "unknown"), ([1], "object"),
                                       ({"epochs": 1}, "architecture")])
def test_config_errors(tmp_path, doc, match):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match=match):
        resolve_config(str(path), {})


def test_invalid_values_exit_2(tmp_path):
    assert main(TRAIN + ["--epochs", "0", "-o", str(tmp_path)]) == 2
    assert main(TRAIN + ["--data", "synth:classes=2,per_class=2,hw=6", "-o", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_exits_3(tmp_path):
    assert main(TRAIN + ["--scheme", "scratch", "--epochs", "2", "--lr", "1e30", "-o", str(tmp_path)]) == 3


def test_sweep_writes_grid(tmp_path):
    argv = ["sweep", "--arch", "resnet8", "--kind", "shift", "--data", DATA, "--epochs", "1", "--batch", "8",
            "--temperatures", "1", "4", "--branch-counts", "1", "2", "-o", str(tmp_path)]
    assert main(argv) == 0
    rows = (tmp_path / "grid.csv").read_text().splitlines()
    assert len(rows) == 5
    assert (tmp_path / "t4_m2" / "metrics.csv").exists()


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "cheapnet.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "cheapnet" in proc.stdout
