import json

import jsonschema
import pytest

from pathkernel.cli import main
from pathkernel.experiments import BUILTINS, ConfigError, config_schema, resolve_config, run_experiment, verify

QUICK_RANKGAP = {"experiment": "relu-rankgap", "optimizer": {"steps": 300}, "record_stride": 100}
QUICK_MC = {"experiment": "domingos-sgd",
            "params": {"etas": [0.2, 0.1, 0.05], "T": 0.4, "n_seeds": 70}}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_list_has_builtins(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for name in ("circle-sgd", "ellipse", "sine", "square-wave", "relu-rankgap", "weak-order", "domingos-sgd",
                 "domingos-sgdm", "domingos-rmsprop", "domingos-adam", "cosine-schedule", "diffusion-toy"):
        assert name in out
    assert len(BUILTINS) >= 8


def test_describe(capsys):
    assert main(["describe", "circle-sgd"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["name"] == "circle-sgd" and 0 < d["budget_minutes"] <= 15
    assert d["default_config"]["dataset"]["kind"] == "circle_disk"


def test_describe_unknown_lists_names(capsys):
    assert main(["describe", "nope"]) == 2
    assert "relu-rankgap" in capsys.readouterr().err


def test_every_default_config_validates():
    schema = config_schema()
    for name, b in BUILTINS.items():
        cfg = resolve_config({"experiment": name})
        jsonschema.validate(cfg, schema)
        assert b.budget_minutes <= 15


def test_schema_verb(capsys):
    assert main(["schema"]) == 0
    assert "record_stride" in json.loads(capsys.readouterr().out)["properties"]


@pytest.mark.parametrize("over,field", [
    ({"optimizer": {"eta": -1.0}}, "optimizer/eta"),
    ({"params": {"bogus": 1}}, "params"),
    ({"model": {"activations": ["softplus"]}}, "model/activations/0"),
    ({"record_stride": 0}, "record_stride"),
])
def test_config_errors_name_field(over, field):
    with pytest.raises(ConfigError, match=field):
        resolve_config({**QUICK_RANKGAP, **over})


def test_config_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, {"experiment": "relu-rankgap", "optimizer": {"eta": 0}})
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "optimizer/eta" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 2


def test_run_verify_and_tamper(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(_write(tmp_path, QUICK_RANKGAP)), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["optimizer"]["steps"] == 300
    assert man["derived"]["steps"] == 300 and "timestamp" not in json.dumps(man)
    assert all(man["checks"].values())
    assert main(["verify", str(out)]) == 0
    f = out / "baseline" / "rank_gap.csv"
    f.write_text(f.read_text() + "\n")
    assert main(["verify", str(out)]) == 4


def test_rerun_is_byte_identical_across_threads(tmp_path):
    a = run_experiment(QUICK_MC, tmp_path / "a", threads=1)
    b = run_experiment(QUICK_MC, tmp_path / "b", threads=2)
    c = run_experiment(QUICK_MC, tmp_path / "a", threads=1)  # overwrite a previous run
    assert a.status == b.status == c.status == 0
    assert a.manifest["artifacts"] == b.manifest["artifacts"] == c.manifest["artifacts"]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_seed_override(tmp_path):
    a = run_experiment(QUICK_RANKGAP, tmp_path / "a")
    b = run_experiment(QUICK_RANKGAP, tmp_path / "b", seed_override=5)
    assert b.manifest["config"]["seed"] == 5
    assert a.manifest["artifacts"]["baseline/trajectory.pktraj"] != b.manifest["artifacts"]["baseline/trajectory.pktraj"]


def test_divergence_exit_code_and_sentinel(tmp_path):
    cfg = _write(tmp_path, {"experiment": "relu-rankgap", "optimizer": {"eta": 1e6, "steps": 50}})
    out = tmp_path / "div"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 3
    assert (out / "FAILED").exists() and not (out / "manifest.json").exists()
    assert main(["verify", str(out)]) == 4


def test_refuses_foreign_directory(tmp_path):
    out = tmp_path / "mine"
    out.mkdir()
    (out / "keep.txt").write_text("data")
    assert run_experiment(QUICK_RANKGAP, out).status == 2
    assert (out / "keep.txt").exists()


def test_verify_without_manifest(tmp_path):
    ok, problems = verify(tmp_path)
    assert not ok and problems
