import hashlib
import json

import numpy as np
import pytest

from hds_impute import cli, data, ntcn, training

SMALL_NET = ["--rank", "3", "--channels", "2,2", "--kernels", "2,2", "--hidden", "4"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def synth_file(tmp_path):
    path = tmp_path / "d.coo"
    assert cli.main(["synth", "--dims", "6,6,8", "--rank", "2", "--density", "0.5",
                     "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture
def trained(tmp_path, synth_file):
    out = tmp_path / "run"
    rc = cli.main(["train", str(synth_file), "--out-dir", str(out), "--epochs", "4", "--deterministic",
                   *SMALL_NET])
    assert rc == 0
    return out


def test_synth_full_sized_file(tmp_path):
    out = tmp_path / "s.coo"
    assert cli.main(["synth", "--dims", "24,24,90", "--density", "0.1", "--rank", "3", "--seed", "7",
                     "--out", str(out)]) == 0
    assert len(data.load_coo(out)) == 5184
    first = digest(out)
    assert cli.main(["synth", "--dims", "24,24,90", "--density", "0.1", "--rank", "3", "--seed", "7",
                     "--out", str(out)]) == 0
    assert digest(out) == first
    truth = data.load_coo(tmp_path / "s.coo.truth")
    assert len(truth) == 24 * 24 * 90


@pytest.mark.parametrize("argv", [
    ["synth", "--density", "0"],
    ["synth", "--dims", "2,2"],
    ["synth", "--dims", "a,b,c"],
])
def test_synth_usage_errors(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path / "x.coo")]) == 2


def test_train_writes_three_artifacts(trained):
    assert sorted(p.name for p in trained.iterdir()) == ["checkpoint.json", "manifest.json", "trainlog.jsonl"]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["pipeline"]["split"] == [1.0, 2.0, 7.0]
    assert manifest["settings"]["epochs"] == 4


def test_train_baseline_at_rank_10(tmp_path, synth_file):
    out = tmp_path / "tk"
    assert cli.main(["train", str(synth_file), "--out-dir", str(out), "--model", "tucker", "--rank", "10",
                     "--epochs", "3", "--split", "1:2:7"]) == 0
    params = training.load_checkpoint(out / "checkpoint.json")
    assert params.kind == "tucker" and params["G"].shape == (10, 10, 10)


def test_config_file_precedence(tmp_path, synth_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "lr": 0.5, "model": "cp", "rank": 2}))
    out = tmp_path / "r"
    assert cli.main(["train", str(synth_file), "--out-dir", str(out), "--config", str(cfg),
                     "--lr", "0.01"]) == 0
    settings = json.loads((out / "manifest.json").read_text())["settings"]
    assert settings["epochs"] == 2 and settings["lr"] == 0.01 and settings["model"] == "cp"
    assert settings["batch_size"] == cli.DEFAULTS["batch_size"]


def test_config_file_unknown_key(tmp_path, synth_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epoch": 2}))
    assert cli.main(["train", str(synth_file), "--out-dir", str(tmp_path / "r"), "--config", str(cfg)]) == 2


def test_train_bad_data(tmp_path):
    bad = tmp_path / "bad.coo"
    bad.write_text("2,2,2\n0,0,0,1.0\n0,0,x,2.0\n")
    assert cli.main(["train", str(bad), "--out-dir", str(tmp_path / "r")]) == 2
    assert cli.main(["train", str(tmp_path / "missing.coo"), "--out-dir", str(tmp_path / "r")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, synth_file, capsys):
    rc = cli.main(["train", str(synth_file), "--out-dir", str(tmp_path / "r"), "--model", "cp",
                   "--optimizer", "sgd", "--lr", "1e6", "--rank", "2", "--batch-size", "1000"])
    assert rc == 3
    assert "epoch" in capsys.readouterr().err


def test_eval_is_repeatable_and_counts_test_part(trained, synth_file, capsys):
    ck = str(trained / "checkpoint.json")
    assert cli.main(["eval", ck, str(synth_file), "--part", "test"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["eval", ck, str(synth_file), "--part", "test"]) == 0
    assert capsys.readouterr().out == first
    doc = json.loads(first.strip().splitlines()[-1])
    n = len(data.load_coo(synth_file))
    assert doc["count"] == data.split_sizes(n, (1, 2, 7))[2]


def test_eval_dims_mismatch(trained, tmp_path):
    other = tmp_path / "o.coo"
    cli.main(["synth", "--dims", "5,5,5", "--density", "0.5", "--out", str(other)])
    assert cli.main(["eval", str(trained / "checkpoint.json"), str(other)]) == 2


def test_eval_without_manifest_uses_checkpoint_record(trained, synth_file, capsys):
    ck = trained / "checkpoint.json"
    cli.main(["eval", str(ck), str(synth_file)])
    with_manifest = capsys.readouterr().out
    (trained / "manifest.json").unlink()
    assert cli.main(["eval", str(ck), str(synth_file)]) == 0
    assert capsys.readouterr().out == with_manifest


def test_eval_on_train_part_after_overfitting(tmp_path):
    obs = data.synthesize(data.SynthSpec(dims=(20, 20, 20), rank=3, density=100 / 8000,
                                         nonlinearity="squash", seed=0))
    path = tmp_path / "o.coo"
    data.save_coo(obs, path)
    out = tmp_path / "r"
    assert cli.main(["train", str(path), "--out-dir", str(out), "--split", "98:1:1", "--rank", "4",
                     "--channels", "4,4", "--kernels", "2,2", "--hidden", "8", "--lr", "0.01",
                     "--batch-size", "100", "--lambda", "0", "--early-stop-tol", "0",
                     "--epochs", "1500"]) == 0
    ck = training.load_checkpoint(out / "checkpoint.json")
    sp = data.split(data.preprocess_sigmoid(obs), (98, 1, 1), 0)
    assert training.evaluate(ck, sp.train).rmse < 1e-2


def test_impute_full_and_missing_only(tmp_path):
    tiny = tmp_path / "t.coo"
    cli.main(["synth", "--dims", "2,2,2", "--density", "0.5", "--out", str(tiny)])
    run = tmp_path / "r"
    assert cli.main(["train", str(tiny), "--out-dir", str(run), "--epochs", "2", "--split", "1:1:2",
                     "--rank", "2", "--channels", "1,1", "--kernels", "2,1", "--hidden", "1"]) == 0
    ck = str(run / "checkpoint.json")
    full = tmp_path / "full.coo"
    assert cli.main(["impute", ck, "--out", str(full)]) == 0
    lines = [x for x in full.read_text().splitlines()[1:]]
    assert len(lines) == 8
    values = data.load_coo(full).values
    assert np.all((values > 0) & (values < 1))

    missing = tmp_path / "miss.coo"
    assert cli.main(["impute", ck, "--out", str(missing), "--missing-only", "--data", str(tiny)]) == 0
    assert len(data.load_coo(missing)) == 8 - len(data.load_coo(tiny))
    assert cli.main(["impute", ck, "--out", str(missing), "--missing-only"]) == 2


def test_impute_raw_scale_inverts_sigmoid(trained, tmp_path):
    ck = str(trained / "checkpoint.json")
    cli.main(["impute", ck, "--out", str(tmp_path / "t.coo")])
    cli.main(["impute", ck, "--out", str(tmp_path / "r.coo"), "--scale", "raw"])
    t, r = data.load_coo(tmp_path / "t.coo").values, data.load_coo(tmp_path / "r.coo").values
    assert np.allclose(data.sigmoid(r), t, atol=1e-12)


def test_gradcheck_pass_and_report(capsys):
    assert cli.main(["gradcheck", "--seeds", "2", "--rank10-seeds", "0"]) == 0
    out = capsys.readouterr().out
    for group in ("A", "B", "C", "W1", "W2", "W3", "W4", "b3", "b_o"):
        assert group in out.splitlines()[0].split()
    assert out.strip().endswith("PASS")


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    real = ntcn.backward

    def corrupted(*args, **kwargs):
        grads = real(*args, **kwargs)
        grads["W1"] = -grads["W1"]
        return grads

    monkeypatch.setattr(ntcn, "backward", corrupted)
    assert cli.main(["gradcheck", "--seeds", "1", "--rank10-seeds", "0"]) == 1
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_thread_env_var(monkeypatch, trained, synth_file):
    monkeypatch.setenv("HDS_IMPUTE_THREADS", "1")
    assert cli.main(["eval", str(trained / "checkpoint.json"), str(synth_file)]) == 0
