import json

import numpy as np
import pytest
import yaml

from nang import cli
from nang.errors import ConfigError, TrainingDivergedError
from nang.graph import load_dataset, read_predictions

FAST_CONFIG = {
    "synthetic": {"blocks": 3, "nodes_per_block": 12, "p_in": 0.4, "p_out": 0.02, "attr_dim": 9},
    "train": {"max_iter": 2, "hidden_dim": 8, "latent_dim": 4, "struct_dim": 4},
    "protocol": {"repeats": 1, "epochs": 5},
    "ks": [3],
}


def run(argv, capsys):
    """Invoke the CLI; return (exit code, parsed stdout json or None, stderr)."""
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(FAST_CONFIG))
    return path


# --- config parsing ---------------------------------------------------------------------


def test_dataset_only_config_gets_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("dataset: data/cora\n")
    cfg = cli.parse_config(path)
    assert cfg.dataset == str(tmp_path / "data" / "cora")
    t = cfg.train
    assert (t.lr, t.dropout, t.max_iter, t.latent_dim) == (0.005, 0.5, 1000, 64)
    assert (t.lambda_c, t.gen_steps, t.disc_steps) == (10.0, 2, 1)


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("lamda_c: 3\n")
    with pytest.raises(ConfigError) as info:
        cli.parse_config(path)
    assert info.value.key == "lamda_c"
    with pytest.raises(ConfigError) as info:
        cli.config_from_dict({"train": {"lamda_c": 3}})
    assert info.value.key == "train.lamda_c"


def test_lambda_below_one_rejected():
    with pytest.raises(ConfigError) as info:
        cli.config_from_dict({"train": {"lambda_c": 0.5}})
    assert info.value.key == "train.lambda_c"
    with pytest.raises(ConfigError):
        cli.config_from_dict({"lambda_c_grid": [1, 0.5]})


def test_type_mismatch_and_unknown_names():
    with pytest.raises(ConfigError) as info:
        cli.config_from_dict({"train": {"max_iter": "many"}})
    assert info.value.key == "train.max_iter"
    with pytest.raises(ConfigError):
        cli.config_from_dict({"methods": ["nang", "deepwalk"]})
    with pytest.raises(ConfigError):
        cli.config_from_dict({"settings": ["Y"]})
    with pytest.raises(ConfigError):
        cli.config_from_dict({"method_overrides": {"vae": {"lr": "fast"}}})


def test_top_level_training_shortcut():
    assert cli.config_from_dict({"lambda_c": 20}).train.lambda_c == 20.0
    with pytest.raises(ConfigError):
        cli.config_from_dict({"lambda_c": 20, "train": {"lambda_c": 5}})


# --- commands ---------------------------------------------------------------------------


def test_synth_then_neighaggre_all_is_deterministic(tmp_path, capsys):
    code, out, _ = run(["synth", "--out", str(tmp_path / "runs"), "--seed", "3"], capsys)
    assert code == 0
    data = out["dataset"]
    assert load_dataset(data).n_nodes == 180
    reports = []
    for _ in range(2):
        code, out, _ = run(["all", "--dataset", data, "--method", "neighaggre", "--setting", "profiling",
                            "--out", str(tmp_path / "runs")], capsys)
        assert code == 0
        reports.append((tmp_path / out["run_dir"] / "reports.csv").read_bytes())
    assert reports[0] == reports[1]
    assert b'"seed": 3' not in reports[0] and b'"seed": 0' in reports[0]


def test_run_directories_never_collide(tmp_path):
    a = cli.make_run_dir(tmp_path, "all")
    b = cli.make_run_dir(tmp_path, "all")
    assert a != b and a.exists() and b.exists()


def test_train_generate_evaluate_chain(tmp_path, config_file, capsys):
    base = ["--config", str(config_file), "--out", str(tmp_path / "runs"), "--method", "nang,vae,gcn,neighaggre"]
    code, out, _ = run(["train"] + base, capsys)
    assert code == 0 and out["checkpoints"] == ["gcn", "nang", "vae"]
    train_dir = out["run_dir"]
    code, out, _ = run(["generate", "--from", train_dir] + base, capsys)
    assert code == 0
    gen_dir = out["run_dir"]
    ids, attrs = read_predictions(f"{gen_dir}/predictions/nang.txt", 36)
    assert attrs.is_categorical and attrs.n_features == 9 and len(ids) == len(set(ids)) > 0
    code, out, _ = run(["evaluate", "--from", gen_dir] + base, capsys)
    assert code == 0 and out["reports"] > 0
    # every artifact carries the config echo
    echo = json.loads(open(f"{gen_dir}/config.json").read())
    assert echo["seed"] == 0 and echo["command"] == "generate"
    assert open(f"{gen_dir}/predictions/nang.txt").readline().startswith("# config ")


def test_generate_from_checkpoint_matches_direct_generation(tmp_path, config_file, capsys):
    base = ["--config", str(config_file), "--out", str(tmp_path / "runs"), "--method", "nang"]
    _, trained, _ = run(["train"] + base, capsys)
    _, direct, _ = run(["generate"] + base, capsys)
    _, reloaded, _ = run(["generate", "--from", trained["run_dir"]] + base, capsys)
    a = np.load(f"{direct['run_dir']}/predictions/nang.npz")["scores"]
    b = np.load(f"{reloaded['run_dir']}/predictions/nang.npz")["scores"]
    np.testing.assert_array_equal(a, b)


def test_sweep_lambda_grid(tmp_path, config_file, capsys):
    code, out, _ = run(["sweep", "--config", str(config_file), "--out", str(tmp_path / "runs"),
                        "--method", "nang", "--setting", "profiling", "--lambda-c", "1,2,3,5,10,20,50"], capsys)
    assert code == 0 and out["report_sets"] == 7
    dirs = sorted(p.name for p in (tmp_path / out["run_dir"]).iterdir() if p.is_dir())
    assert len(dirs) == 7 and all(d.startswith("lambda_c=") for d in dirs)


def test_sweep_observed_ratio(tmp_path, config_file, capsys):
    code, out, _ = run(["sweep", "--config", str(config_file), "--out", str(tmp_path / "runs"),
                        "--method", "neighaggre", "--setting", "profiling",
                        "--observed-ratio", "0.1,0.2,0.3,0.4"], capsys)
    assert code == 0 and out["report_sets"] == 4


# --- errors -------------------------------------------------------------------------------


def test_usage_error_exit_code(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1 and json.loads(err)["error"] == "UsageError"


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("lamda_c: 3\n")
    code, _, err = run(["all", "--config", str(path)], capsys)
    assert code == 1
    assert "lamda_c" in json.loads(err)["message"]
    code, _, _ = run(["all", "--lambda-c", "0.5", "--out", str(tmp_path)], capsys)
    assert code == 1


def test_data_error_exit_code(tmp_path, capsys):
    code, _, err = run(["all", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["error"] == "LoadError"


def test_unsupported_setting_is_data_error(tmp_path, config_file, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "meta").write_text("nodes 3\nfeatures 1\nkind real\n")
    (bad / "edges").write_text("0 1\n")
    (bad / "attrs").write_text("0 0 0.5\n")
    code, _, err = run(["all", "--dataset", str(bad), "--setting", "profiling", "--method", "neighaggre",
                        "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["error"] == "UnsupportedSettingError"


def test_divergence_exit_code(tmp_path, config_file, capsys, monkeypatch):
    def boom(bundle, config, callback=None):
        raise TrainingDivergedError("generator loss is not finite", 4)

    monkeypatch.setattr("nang.evaluation.train_nang", boom)
    code, _, err = run(["all", "--config", str(config_file), "--method", "nang", "--out", str(tmp_path)], capsys)
    payload = json.loads(err)
    assert code == 3 and payload["exit_code"] == 3 and "round 4" in payload["message"]
