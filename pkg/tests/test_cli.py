import json

import pytest

from derog.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--kind", "motif", "--shift", "concept", "--seed", "3",
                 "--out", str(out), "--sizes", "32,8,8,8"]) == 0
    return out


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"lr": 0.01, "hidden": 8, "num_layers": 2, "epochs": 2, "batch_size": 16}))
    return path


def test_gen_data_writes_splits_and_manifest(data_dir):
    for name in ("train", "id_val", "ood_val", "ood_test"):
        assert (data_dir / f"{name}.jsonl").is_file()
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 32, "id_val": 8, "ood_val": 8, "ood_test": 8}
    assert manifest["class_count"] == 3 and manifest["seed"] == 3


def test_gen_data_is_reproducible(data_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--shift", "concept", "--seed", 3, "--out", tmp_path, "--sizes", "32,8,8,8")
    assert code == 0
    assert (tmp_path / "train.jsonl").read_bytes() == (data_dir / "train.jsonl").read_bytes()


def test_gen_data_rejects_bad_shift(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--shift", "label", "--out", tmp_path)
    assert code == 1 and err.startswith("error:")


def test_train_then_eval(data_dir, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--config", config_file, "--data", data_dir, "--out", out,
                          "--ablate", "without_grl")
    assert code == 0 and stdout.startswith("ood_test accuracy ")
    for name in ("history.jsonl", "checkpoint.json", "last_checkpoint.json", "config.json"):
        assert (out / name).is_file()
    echo = json.loads((out / "config.json").read_text())
    assert echo["ablations"] == ["without_grl"] and echo["epochs"] == 2
    assert len((out / "history.jsonl").read_text().splitlines()) == 2
    code, stdout, _ = run(capsys, "eval", "--checkpoint", out / "checkpoint.json", "--data", data_dir / "ood_test.jsonl")
    assert code == 0
    score = float(stdout.strip())
    assert 0.0 <= score <= 1.0 and stdout.strip() == f"{score:.4f}"


def test_train_flags_override_config_and_echo_reruns_identically(data_dir, config_file, tmp_path, capsys):
    a = tmp_path / "a"
    assert run(capsys, "train", "--config", config_file, "--data", data_dir, "--out", a,
               "--epochs", 1, "--seed", 5)[0] == 0
    echo = json.loads((a / "config.json").read_text())
    assert echo["epochs"] == 1 and echo["seed"] == 5
    b = tmp_path / "b"
    assert run(capsys, "train", "--config", a / "config.json", "--out", b)[0] == 0
    assert (a / "history.jsonl").read_bytes() == (b / "history.jsonl").read_bytes()


def test_eval_roc_auc_needs_binary_labels(data_dir, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    run(capsys, "train", "--config", config_file, "--data", data_dir, "--out", out, "--epochs", 0)
    code, _, err = run(capsys, "eval", "--checkpoint", out / "checkpoint.json",
                       "--data", data_dir / "ood_test.jsonl", "--metric", "roc_auc")
    assert code == 1 and "binary" in err


def test_train_error_exit_codes(data_dir, config_file, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", config_file, "--out", tmp_path / "x")
    assert code == 1 and "no dataset" in err
    code, _, err = run(capsys, "train", "--config", config_file, "--data", tmp_path, "--out", tmp_path / "x")
    assert code == 2 and "missing split file" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    code, _, err = run(capsys, "train", "--config", bad, "--data", data_dir, "--out", tmp_path / "x")
    assert code == 1 and "unknown config" in err
    code, _, _ = run(capsys, "train", "--config", config_file, "--data", data_dir, "--out", tmp_path / "x",
                     "--ablate", "without_sense")
    assert code == 1


def test_unknown_command_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 1


@pytest.mark.parametrize("seed", [0, 1])
def test_gradcheck_command(seed, capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", seed)
    assert code == 0 and out.rstrip().endswith("all blocks pass")
    assert "grad_reverse" in out and "full_v2_loss" in out
