import json
import math

import numpy as np
import pytest

from hds_impute import baselines, data, ntcn, training
from hds_impute.data import ObservationSet, SynthSpec
from hds_impute.params import Params


def scalar_params(theta):
    return Params("cp", (1, 1, 1), {}, {"w": np.array([theta], dtype=np.float64)})


# ----------------------------------------------------------------- optimizers

def test_sgd_examples():
    p = training.sgd_step(scalar_params(1.0), {"w": np.array([0.5])}, 0.1)
    assert p["w"][0] == pytest.approx(0.95, abs=1e-15)
    assert training.sgd_step(scalar_params(1.0), {"w": np.array([0.0])}, 0.1)["w"][0] == 1.0
    half = scalar_params(1.0)
    for _ in range(2):
        training.sgd_step(half, {"w": np.array([0.5])}, 0.05)
    assert half["w"][0] == pytest.approx(0.95, abs=1e-15)


@pytest.mark.parametrize("g", [1e-3, 0.3, 250.0])
def test_adam_first_step_has_size_lr(g):
    state, p = training.adam_step(training.AdamState(), scalar_params(0.0), {"w": np.array([g])}, lr=0.01)
    assert p["w"][0] == pytest.approx(-0.01, rel=1e-3)


def test_adam_zero_gradient_keeps_params():
    state, p = training.AdamState(), scalar_params(2.0)
    for _ in range(5):
        training.adam_step(state, p, {"w": np.array([0.0])})
    assert p["w"][0] == 2.0


def test_adam_two_step_hand_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    state, p = training.AdamState(), scalar_params(1.0)
    theta, m, v = 1.0, 0.0, 0.0
    for step, g in enumerate([0.5, -0.2], start=1):
        training.adam_step(state, p, {"w": np.array([g])}, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**step)) / (math.sqrt(v / (1 - b2**step)) + eps)
    assert state.step == 2
    assert p["w"][0] == pytest.approx(theta, rel=1e-14)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        training.Optimizer("rmsprop")
    with pytest.raises(ValueError):
        training.Optimizer("sgd", lr=0.0)


# ----------------------------------------------------------------- config

def test_config_defaults_depend_on_model():
    assert (training.TrainConfig().optimizer, training.TrainConfig().lr) == ("adam", 1e-3)
    tc = training.TrainConfig(model="cp")
    assert (tc.optimizer, tc.lr) == ("sgd", 0.05)


@pytest.mark.parametrize("kwargs", [
    {"model": "mlp"}, {"optimizer": "lbfgs"}, {"lr": -1.0}, {"batch_size": 0},
    {"lam": -1.0}, {"loss": "cauchy"}, {"model": "cp", "loss": "cauchy", "cauchy_scale": 0.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        training.TrainConfig(**kwargs)


def test_config_dict_roundtrip():
    tc = training.TrainConfig(model="tucker", loss="cauchy", val_patience=4)
    assert training.TrainConfig.from_dict(json.loads(json.dumps(tc.to_dict()))) == tc


# ----------------------------------------------------------------- metrics and stopping

def test_metric_examples():
    assert training.metrics([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)
    assert training.metrics([1.0, -1.0], [0.0, 0.0]) == (1.0, 1.0)
    rmse, mae = training.metrics([0.0, 2.0], [0.0, 0.0])
    assert mae == 1.0 and rmse == pytest.approx(1.41421356, abs=1e-8)


def test_evaluate_empty_set():
    params = baselines.init_cp(2, (2, 2, 2))
    with pytest.raises(ValueError):
        training.evaluate(params, ObservationSet.from_entries((2, 2, 2), []))


def test_early_stop_example():
    stop = training.EarlyStopping(1e-5)
    assert not stop.update(0.5)
    assert stop.update(0.4999995)


def test_early_stop_never_fires_on_the_first_epoch():
    assert not training.EarlyStopping(1.0).update(0.0)


# ----------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def small_split():
    obs = data.preprocess_sigmoid(data.synthesize(SynthSpec(dims=(6, 6, 8), rank=2, density=0.5, seed=1)))
    return data.split(obs, (6, 2, 2), seed=1)


def small_ntcn(dims, seed=0):
    return ntcn.init(ntcn.NtcnConfig(rank=3, c1=2, c2=2, k1=2, k2=2, h1=4, seed=seed), dims)


def test_train_returns_best_validation_snapshot(small_split):
    params = small_ntcn(small_split.train.dims)
    best, log = training.train(params, small_split, training.TrainConfig(epochs=8, early_stop_tol=0))
    assert len(log) == 8 and log.stop_reason == "max-epochs"
    vals = [r["val_rmse"] for r in log.records]
    assert log.best_epoch == int(np.argmin(vals)) + 1
    assert training.evaluate(best, small_split.validation).rmse == min(vals)


def test_train_does_not_mutate_input(small_split):
    params = small_ntcn(small_split.train.dims)
    before = params.copy()
    training.train(params, small_split, training.TrainConfig(epochs=2))
    assert params.equals(before)


def test_validation_patience(small_split):
    params = baselines.init_cp(2, small_split.train.dims)
    cfg = training.TrainConfig(model="cp", lr=1e-9, epochs=50, early_stop_tol=0, val_patience=3)
    _, log = training.train(params, small_split, cfg)
    assert log.stop_reason == "validation-patience" and len(log) < 50


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(small_split):
    params = baselines.init_cp(2, small_split.train.dims)
    for k in "ABC":
        params[k][:] = 3.0
    cfg = training.TrainConfig(model="cp", optimizer="sgd", lr=50.0, epochs=50, batch_size=1000)
    with pytest.raises(training.TrainingDiverged) as info:
        training.train(params, small_split, cfg)
    assert info.value.epoch >= 1 and str(info.value.epoch) in str(info.value)


def test_model_config_mismatch(small_split):
    with pytest.raises(ValueError):
        training.train(baselines.init_cp(2, small_split.train.dims), small_split, training.TrainConfig())


def test_trainlog_jsonl(small_split, tmp_path):
    path = tmp_path / "log.jsonl"
    cfg = training.TrainConfig(model="tucker", epochs=3, early_stop_tol=0, deterministic=True)
    training.train(baselines.init_tucker(2, small_split.train.dims), small_split, cfg, log_path=path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [r["epoch"] for r in lines[:-1]] == [1, 2, 3]
    assert all("wall_time" not in r for r in lines[:-1])
    assert lines[-1]["summary"] and lines[-1]["config"]["model"] == "tucker"


def test_baseline_predictions_are_clipped_for_scoring():
    params = baselines.init_cp(1, (1, 1, 1))
    for k in "ABC":
        params[k][:] = 10.0
    assert training.predict(params, [0], [0], [0])[0] == 1.0
    assert training.predict(params, [0], [0], [0], clip=False)[0] > 1.0


def test_objective_is_summed_loss_plus_l2(small_split):
    params = baselines.init_cp(2, small_split.train.dims)
    cfg = training.TrainConfig(model="cp", lam=0.1)
    obs = small_split.train
    r = obs.values - baselines.cp_predict(params, obs.s, obs.p, obs.t)
    expected = 0.5 * np.sum(r * r) + 0.1 * params.sq_norm()
    assert training.training_objective(params, obs, cfg) == pytest.approx(expected, rel=1e-12)


# ----------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("kind", training.MODEL_KINDS)
def test_checkpoint_roundtrip(kind, tmp_path, small_split):
    dims = small_split.train.dims
    params = small_ntcn(dims, seed=3) if kind == "ntcn" else training.init_model(kind, dims, rank=3, seed=3)
    path = tmp_path / "ck.json"
    training.save_checkpoint(params, path, extra={"note": 1})
    back, extra = training.load_checkpoint(path, with_extra=True)
    assert back.equals(params) and type(back) is type(params) and extra == {"note": 1}
    assert training.evaluate(back, small_split.test) == training.evaluate(params, small_split.test)


def test_checkpoint_errors(tmp_path):
    params = baselines.init_cp(2, (2, 2, 2))
    path = tmp_path / "ck.json"
    training.save_checkpoint(params, path)
    text = path.read_text()

    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(training.CheckpointFormatError):
        training.load_checkpoint(tmp_path / "trunc.json")

    doc = json.loads(text)
    doc["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(training.CheckpointVersionError):
        training.load_checkpoint(tmp_path / "v.json")

    doc = json.loads(text)
    doc["params"]["A"] = {"shape": [3, 2], "values": [0.0] * 6}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(training.CheckpointShapeError):
        training.load_checkpoint(tmp_path / "s.json")
