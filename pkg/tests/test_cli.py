import configparser
import json

import pytest

from advpriv import cli
from advpriv.data import load_csv

TINY = """[data]
n_rows = 300
holdout_rows = 500
[hyperparams]
hidden = 8
disc_hidden = 8
epochs = 1
epochs_per = 1
cv_folds = 2
[protocol]
seeds = 0
calibrate = train
[attack]
calibrate = train
[crosstest]
calibrate = train
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    return cfg, tmp_path / "run"


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_default_config_round_trips(tmp_path, capsys):
    assert run("default-config") == 0
    p = tmp_path / "d.ini"
    p.write_text(capsys.readouterr().out)
    assert cli.load_config(p) == cli.ExperimentConfig()


def test_config_overrides_defaults(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[hyperparams]\nepochs = 4\n[protocol]\nseeds = 3, 5\nrecall_band = 0.7, 0.9\n[model]\nkinds = base adv\n")
    cfg = cli.load_config(p)
    assert cfg.hp.epochs == 4 and cfg.seeds == (3, 5) and cfg.hp.recall_band == (0.7, 0.9)
    assert cfg.kinds == ("base", "adv") and cfg.hp.lr == 0.0008


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\nx = 1\n",
        "[hyperparams]\nepoch = 4\n",
        "[hyperparams]\nepochs = many\n",
        "[hyperparams]\ndropout = 1.5\n",
        "[fgsm]\nepsilon = -1\n",
        "[model]\nkinds = base cnn\n",
        "[protocol]\nrecall_band = 0.7\n",
        "[protocol]\ncalibrate = never\n",
        "not an ini file",
    ],
)
def test_bad_config_exits_2(tmp_path, text, capsys):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    assert run("train", "--config", p, "--out", tmp_path / "o") == 2
    assert "Error" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert run("train", "--config", tmp_path / "absent.ini") == 2


def test_gen_data_prevalences_and_determinism(tiny, tmp_path):
    cfg, out = tiny
    assert run("gen-data", "--config", cfg, "--out", out) == 0
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "again") == 0
    train, test = load_csv(out / "data/train.csv"), load_csv(out / "data/test.csv")
    assert len(train) + len(test) == 300 and train.labels.sum() + test.labels.sum() == 150
    puh = load_csv(out / "data/holdout_PUH.csv")
    assert len(puh) == 500 and puh.labels.sum() == 26  # round(0.052 * 500)
    for name in ("train", "test", "holdout_UHB", "holdout_BH", "holdout_PUH"):
        a = (out / f"data/{name}.csv").read_bytes()
        assert a == (tmp_path / f"again/data/{name}.csv").read_bytes()
    echo = json.loads((out / "data/spec.json").read_text())
    assert echo["holdouts"]["UHB"]["prevalence_target"] == 0.0148


def test_train_without_data_exits_3(tiny):
    cfg, out = tiny
    assert run("train", "--config", cfg, "--out", out) == 3


def test_crosstest_needs_adv_before_training(tiny, capsys):
    cfg, out = tiny
    run("gen-data", "--config", cfg, "--out", out)
    assert run("train", "--config", cfg, "--out", out, "--model-kind", "base") == 0
    assert run("crosstest", "--config", cfg, "--out", out) == 3
    assert "adv model" in capsys.readouterr().err
    assert not (out / "manifests/crosstest.json").exists()


def test_full_tiny_pipeline(tiny, capsys):
    cfg, out = tiny
    run("gen-data", "--config", cfg, "--out", out)
    assert run("train", "--config", cfg, "--out", out) == 0
    head = (out / "reports/train.csv").read_text().splitlines()[0]
    assert head.endswith("Recall,Precision,F1-Score,Accuracy,Specificity,PPV,NPV,AUC,Threshold")

    assert run("attack", "--config", cfg, "--out", out) == 0
    assert (out / "reports/attack_baselines.csv").read_text().startswith("Protected attribute,TRAIN,TEST\n")
    atk = (out / "reports/attack_raw_features.csv").read_text().splitlines()
    assert atk[0] == "Predicted Attribute,Recall,Precision,F1-Score,Accuracy,Specificity,PPV,NPV,AUC"

    assert run("crosstest", "--config", cfg, "--out", out) == 0
    rows = (out / "reports/crosstest.csv").read_text().splitlines()
    assert rows[0].startswith("Cross-test,Model,") and len(rows) == 13

    assert run("external", "--config", cfg, "--out", out) == 0
    m = json.loads((out / "manifests/external.json").read_text())
    assert all(r["threshold_used"] == r["manifest_threshold"] for r in m["runs"])

    capsys.readouterr()
    assert run("report", "--out", out) == 0
    assert "Cross-test" in capsys.readouterr().out


def test_tampered_model_exits_4(tiny):
    cfg, out = tiny
    run("gen-data", "--config", cfg, "--out", out)
    run("train", "--config", cfg, "--out", out, "--model-kind", "base")
    model = out / "models/base_seed0.model"
    raw = bytearray(model.read_bytes())
    raw[-1] ^= 0xFF
    model.write_bytes(bytes(raw))
    assert run("external", "--config", cfg, "--out", out, "--model-kind", "base") == 4


def test_changed_input_exits_4(tiny):
    cfg, out = tiny
    run("gen-data", "--config", cfg, "--out", out)
    run("train", "--config", cfg, "--out", out, "--model-kind", "base")
    with open(out / "data/test.csv", "a") as fh:
        fh.write("\n")
    assert run("train", "--manifest", out / "manifests/train.json", "--out", out / "b") == 4


def test_report_compare_detects_difference(tiny, tmp_path):
    cfg, out = tiny
    run("gen-data", "--config", cfg, "--out", out)
    run("train", "--config", cfg, "--out", out, "--model-kind", "base")
    a = json.loads((out / "manifests/train.json").read_text())
    a["aggregate"]["base"]["auc"] = -1.0
    (tmp_path / "edited.json").write_text(json.dumps(a))
    assert run("report", "--compare", out / "manifests/train.json", out / "manifests/train.json") == 0
    assert run("report", "--compare", out / "manifests/train.json", tmp_path / "edited.json") == 4


def test_report_on_empty_directory_exits_3(tmp_path):
    assert run("report", "--out", tmp_path) == 3


def test_default_config_is_valid_ini(capsys):
    run("default-config")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(capsys.readouterr().out)
    assert set(cp.sections()) == set(cli._SECTIONS)
