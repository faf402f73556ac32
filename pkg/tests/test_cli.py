import json

import numpy as np
import pytest

from cirsurrogate.cli import run
from cirsurrogate.config import ConfigError, PipelineConfig, load_config, save_config
from cirsurrogate.net import TrainConfig
from conftest import dump


def err_line(capsys):
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


def test_no_arguments_prints_usage(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert run(["generate", "--out", "x", "--bogus", "1"]) == 2


def test_missing_required_flag():
    assert run(["predict", "--model", "m"]) == 2


def test_missing_dataset_is_json_error(tmp_path, capsys):
    assert run(["fit-codec", "--dataset", str(tmp_path / "nope")]) == 1
    assert set(err_line(capsys)) == {"error", "message"}


def test_bad_fractions(tmp_path, capsys):
    assert run(["split", "--dataset", str(tmp_path), "--fractions", "a,b"]) == 1
    assert "fractions" in err_line(capsys)["message"]


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(n=42, seed=3, train=TrainConfig(epochs=9, E=2))
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert load_config(None) == PipelineConfig()


def test_unknown_config_key(tmp_path, capsys):
    bad = {**PipelineConfig().to_dict(), "learning_rate": 1.0}
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)
    path = dump(bad, tmp_path / "bad.json")
    assert run(["generate", "--config", str(path), "--out", str(tmp_path / "d")]) == 1
    assert err_line(capsys)["error"] == "ConfigError"


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """Stage-by-stage run of a small configuration."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    save_config(PipelineConfig(n=30, seed=1, train=TrainConfig(epochs=8, E=1, batch_size=16)), cfg)
    ds = root / "ds"
    c = ["--config", str(cfg)]
    assert run(["generate", *c, "--out", str(ds)]) == 0
    assert run(["split", *c, "--dataset", str(ds)]) == 0
    assert run(["fit-codec", *c, "--dataset", str(ds)]) == 0
    assert run(["train", *c, "--dataset", str(ds), "--out", str(root / "m.bundle")]) == 0
    return root, cfg, ds


def test_stages_write_artifacts(staged, capsys):
    root, cfg, ds = staged
    for name in ("manifest.json", "all.bin", "train.bin", "codec.bin", "features.json", "fit.json", "run.jsonl"):
        assert (ds / name).exists(), name
    stages = [json.loads(ln)["stage"] for ln in (ds / "run.jsonl").read_text().splitlines()]
    assert stages == ["generate", "split", "fit-codec", "train"]
    assert run(["eval", "--model", str(root / "m.bundle"), "--dataset", str(ds), "--out", str(root / "rep")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {"n", "excluded", "p50", "p90", "p95"} <= set(out)
    assert (root / "rep" / "correlations.csv").exists()


def test_predict_writes_csv(staged, tmp_path, mid_params):
    root, _, _ = staged
    p = dump(mid_params.to_dict(), tmp_path / "p.json")
    assert run(["predict", "--model", str(root / "m.bundle"), "--params", str(p), "--out", str(tmp_path / "h.csv")]) == 0
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "t,h" and len(lines) == 501
    h = np.array([float(ln.split(",")[1]) for ln in lines[1:]])
    assert np.all(h >= 0)


def test_predict_out_of_domain_warns(staged, tmp_path, mid_params, capsys):
    root, _, _ = staged
    p = dump({**mid_params.to_dict(), "v_bar": 5e-3}, tmp_path / "p.json")
    assert run(["predict", "--model", str(root / "m.bundle"), "--params", str(p), "--out", str(tmp_path / "h.csv")]) == 0
    line = err_line(capsys)
    assert line["warning"] == "out_of_domain" and "v_bar" in line["message"]
    assert (tmp_path / "h.csv").exists()


def test_invalid_params_rejected(staged, tmp_path, mid_params, capsys):
    root, _, _ = staged
    p = dump({**mid_params.to_dict(), "D": -1.0}, tmp_path / "p.json")
    assert run(["predict", "--model", str(root / "m.bundle"), "--params", str(p), "--out", str(tmp_path / "h.csv")]) == 1
    assert err_line(capsys)["error"] == "ParameterError"


def test_train_refuses_stale_fit(staged, tmp_path, capsys):
    import shutil

    root, cfg, ds = staged
    copy = tmp_path / "ds"
    shutil.copytree(ds, copy)
    assert run(["split", "--config", str(cfg), "--dataset", str(copy), "--seed", "99"]) == 0
    capsys.readouterr()
    assert run(["train", "--config", str(cfg), "--dataset", str(copy), "--out", str(tmp_path / "m.bundle")]) == 1
    assert err_line(capsys)["error"] == "HashMismatch"
