"""Optimizers, the training loop with early stopping, metrics, and checkpoints."""

from __future__ import annotations

import json
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, ntcn
from .data import ObservationSet, SplitSet
from .params import Params

CHECKPOINT_VERSION = 1
MODEL_KINDS = ("ntcn", "tucker", "cp")
PARAM_CLASSES = {"ntcn": ntcn.NtcnParams, "tucker": baselines.TuckerParams, "cp": baselines.CpParams}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training objective became {value} at epoch {epoch}")
        self.epoch = epoch


# --------------------------------------------------------------------------- optimizers

def sgd_step(params: Params, grads: dict[str, np.ndarray], lr: float) -> Params:
    for k, g in grads.items():
        params.tensors[k] -= lr * g
    return params


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[AdamState, Params]:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params.tensors[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state, params


class Optimizer:
    def __init__(self, name: str = "adam", lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {name!r}")
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.name, self.lr, self.beta1, self.beta2, self.eps = name, lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> None:
        if self.name == "sgd":
            sgd_step(params, grads, self.lr)
        else:
            adam_step(self.state, params, grads, self.lr, self.beta1, self.beta2, self.eps)


# --------------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    model: str = "ntcn"
    optimizer: str | None = None  # None: adam for ntcn, sgd for the baselines
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 64
    epochs: int = 1000
    early_stop_tol: float = 1e-5
    lam: float = 1e-5
    loss: str = "squared"
    cauchy_scale: float = 1.0
    seed: int = 0
    deterministic: bool = False
    val_patience: int | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.optimizer is None:
            self.optimizer = "adam" if self.model == "ntcn" else "sgd"
        if self.lr is None:
            self.lr = 1e-3 if self.optimizer == "adam" else 0.05
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.early_stop_tol < 0 or self.lam < 0:
            raise ValueError("early_stop_tol and lam must be nonnegative")
        if self.loss not in baselines.LOSS_KINDS:
            raise ValueError(f"loss must be one of {baselines.LOSS_KINDS}")
        if self.loss == "cauchy" and self.model == "ntcn":
            raise ValueError("the Cauchy loss is only available for the factorization baselines")
        if not self.cauchy_scale > 0:
            raise ValueError("cauchy_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------- model dispatch

def predict(params: Params, s, p, t, clip: bool | None = None) -> np.ndarray:
    """Predictions for aligned index arrays.

    Baseline outputs are unbounded; ``clip`` (default on for baselines) clamps
    them to [0, 1], the range of preprocessed targets.
    """
    if params.kind == "ntcn":
        return ntcn.predict(params, s, p, t)
    out = np.atleast_1d(baselines.predict(params, s, p, t)).astype(np.float64)
    if clip is None or clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def loss_and_grads(params: Params, s, p, t, y, config: TrainConfig):
    """Mean data loss over the batch and the gradient of (mean data loss + L2 term)."""
    if params.kind == "ntcn":
        trace = ntcn.forward(params, s, p, t)
        r = y - trace.y_hat
        return 0.5 * float(np.mean(r * r)), ntcn.backward(trace, params, y, config.lam, reduce="mean")
    return baselines.factor_gradients(params, s, p, t, y, config.lam, config.loss,
                                      config.cauchy_scale, reduce="mean")


def training_objective(params: Params, obs: ObservationSet, config: TrainConfig) -> float:
    """Per-cell loss summed over ``obs`` plus lam times the squared norm of every parameter."""
    y_hat = predict(params, obs.s, obs.p, obs.t, clip=False)
    r = obs.values - y_hat
    data = float(np.sum(baselines.residual_loss(r, config.loss, config.cauchy_scale)))
    return data + config.lam * params.sq_norm()


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mae: float
    count: int
    scale: str = "transformed"

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        return (f"{'metric':<8}{'value':>14}\n"
                f"{'RMSE':<8}{self.rmse:>14.6f}\n{'MAE':<8}{self.mae:>14.6f}\n"
                f"{'count':<8}{self.count:>14d}\n{'scale':<8}{self.scale:>14}")


def metrics(y, y_hat) -> tuple[float, float]:
    """(RMSE, MAE) of predictions against targets."""
    r = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    return math.sqrt(float(np.mean(r * r))), float(np.mean(np.abs(r)))


def evaluate(params: Params, obs: ObservationSet, scale: str = "transformed") -> EvalReport:
    if len(obs) == 0:
        raise ValueError("cannot evaluate on an empty observation set")
    rmse, mae = metrics(obs.values, predict(params, obs.s, obs.p, obs.t))
    return EvalReport(rmse, mae, len(obs), scale)


# --------------------------------------------------------------------------- early stopping

class EarlyStopping:
    """Signals a stop once two consecutive epoch objectives differ by less than ``tol``."""

    def __init__(self, tol: float):
        self.tol = tol
        self.previous: float | None = None

    def update(self, value: float) -> bool:
        prev, self.previous = self.previous, value
        return prev is not None and abs(value - prev) < self.tol


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    stop_reason: str = "max-epochs"
    best_epoch: int = 0
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def objectives(self) -> list[float]:
        return [r["objective"] for r in self.records]

    def to_jsonl(self, path, include_time: bool = True) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                rec = rec if include_time else {k: v for k, v in rec.items() if k != "wall_time"}
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"summary": True, "stop_reason": self.stop_reason,
                                 "best_epoch": self.best_epoch, "config": self.config}) + "\n")


def _thread_limit(config: TrainConfig):
    if not config.deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(1)


def train(params: Params, split: SplitSet, config: TrainConfig, log_path=None,
          verbose: bool = False) -> tuple[Params, TrainLog]:
    """Minibatch training on ``split.train`` with early stopping.

    Each epoch shuffles the training cells, takes one optimizer step per batch,
    then records the training objective and validation metrics. Training stops
    when two consecutive objectives differ by less than ``early_stop_tol`` or
    after ``epochs`` epochs. Returns the parameters with the best validation
    RMSE (the last ones when the validation part is empty); ``params`` itself
    is left untouched.
    """
    train_set, val_set = split.train, split.validation
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if params.kind != config.model:
        raise ValueError(f"config is for {config.model!r} but params are {params.kind!r}")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config.optimizer, config.lr, config.beta1, config.beta2, config.eps_adam)
    stopper = EarlyStopping(config.early_stop_tol)
    log = TrainLog(config=config.to_dict())
    best, best_rmse, since_best = params.copy(), math.inf, 0
    n = len(train_set)
    s_all, p_all, t_all, y_all = train_set.s, train_set.p, train_set.t, train_set.values

    with _thread_limit(config):
        start = time.perf_counter()
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            for i in range(0, n, config.batch_size):
                rows = order[i:i + config.batch_size]
                _, grads = loss_and_grads(params, s_all[rows], p_all[rows], t_all[rows], y_all[rows], config)
                opt.step(params, grads)

            objective = training_objective(params, train_set, config)
            if not math.isfinite(objective):
                raise TrainingDiverged(epoch, objective)
            record = {"epoch": epoch, "objective": objective}
            if len(val_set):
                rep = evaluate(params, val_set)
                record["val_rmse"], record["val_mae"] = rep.rmse, rep.mae
                if rep.rmse < best_rmse:
                    best, best_rmse, since_best, log.best_epoch = params.copy(), rep.rmse, 0, epoch
                else:
                    since_best += 1
            record["wall_time"] = time.perf_counter() - start
            log.records.append(record)
            if verbose:
                print(json.dumps(record))

            if stopper.update(objective):
                log.stop_reason = "early-stop"
                break
            if config.val_patience is not None and since_best >= config.val_patience:
                log.stop_reason = "validation-patience"
                break

    if not len(val_set):
        best, log.best_epoch = params, len(log.records)
    if log_path is not None:
        log.to_jsonl(log_path, include_time=not config.deterministic)
    return best, log


# --------------------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def checkpoint_document(params: Params, extra: dict | None = None) -> dict:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model": params.kind,
        "config": params.config,
        "dims": list(params.dims),
        "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in params.tensors.items()},
    }
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(params: Params, path, extra: dict | None = None) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(checkpoint_document(params, extra), indent=1))


def _expected_shapes(kind: str, config: dict, dims) -> dict[str, tuple]:
    if kind == "ntcn":
        return {k: v.shape for k, v in ntcn.init(ntcn.NtcnConfig.from_dict(config), dims).tensors.items()}
    if kind == "tucker":
        return {k: v.shape for k, v in baselines.init_tucker(config["rank"], dims).tensors.items()}
    return {k: v.shape for k, v in baselines.init_cp(config["rank"], dims).tensors.items()}


def load_checkpoint(path, with_extra: bool = False):
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: not a valid checkpoint document ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointFormatError(f"{path}: missing format_version")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {doc['format_version']}, expected {CHECKPOINT_VERSION}")
    try:
        kind, config, dims, raw = doc["model"], doc["config"], tuple(doc["dims"]), doc["params"]
        if kind not in MODEL_KINDS:
            raise CheckpointFormatError(f"{path}: unknown model kind {kind!r}")
        tensors = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in raw.items()}
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({exc})") from None
    expected = _expected_shapes(kind, config, dims)
    if set(expected) != set(tensors):
        raise CheckpointShapeError(f"{path}: parameter names {sorted(tensors)} != {sorted(expected)}")
    for k, shape in expected.items():
        if tensors[k].shape != tuple(shape):
            raise CheckpointShapeError(f"{path}: {k} has shape {tensors[k].shape}, expected {tuple(shape)}")
    params = PARAM_CLASSES[kind](kind, dims, config, tensors)
    return (params, doc.get("extra", {})) if with_extra else params


def init_model(kind: str, dims, rank=10, seed: int = 0, **ntcn_kwargs) -> Params:
    if kind == "ntcn":
        return ntcn.init(ntcn.NtcnConfig(rank=rank, seed=seed, **ntcn_kwargs), dims)
    if kind == "tucker":
        return baselines.init_tucker(rank, dims, seed)
    if kind == "cp":
        return baselines.init_cp(rank, dims, seed)
    raise ValueError(f"unknown model kind {kind!r}")
