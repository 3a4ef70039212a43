"""Command-line entry point: ``hds-impute {synth,train,eval,impute,gradcheck}``.

Exit codes: 0 success, 1 verification failure, 2 usage or data error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, data, gradcheck, ntcn, training

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

# Built-in defaults for every resolvable setting; a --config JSON file and then
# command-line flags override them in that order.
DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    "preprocess": "sigmoid",
    "split": "1:2:7",
    "model": "ntcn",
    "rank": 10,
    "channels": "8,16",
    "kernels": "6,5",
    "hidden": 32,
    "lambda": 1e-5,
    "optimizer": None,
    "lr": None,
    "batch_size": 64,
    "epochs": 1000,
    "early_stop_tol": 1e-5,
    "loss": "squared",
    "cauchy_scale": 1.0,
    "val_patience": None,
}


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("run settings (defaults < --config file < flags)")
    g.add_argument("--config", metavar="PATH", help="JSON document whose keys mirror these flag names")
    g.add_argument("--seed", type=int, default=S, help="seed for initialization, split and shuffling (default 0)")
    g.add_argument("--deterministic", action="store_true", default=S,
                   help="single-threaded BLAS and no wall-clock fields in outputs")
    g.add_argument("--preprocess", choices=["sigmoid", "minmax"], default=S,
                   help="value transform applied before training (default sigmoid)")
    g.add_argument("--split", metavar="R1:R2:R3", default=S,
                   help="train:validation:test ratio (default 1:2:7)")
    g.add_argument("--model", choices=list(training.MODEL_KINDS), default=S, help="model kind (default ntcn)")
    g.add_argument("--rank", type=int, default=S, help="embedding / factor rank (default 10)")
    g.add_argument("--channels", metavar="C1,C2", default=S, help="conv channel counts (default 8,16)")
    g.add_argument("--kernels", metavar="K1,K2", default=S, help="conv kernel sizes (default 6,5)")
    g.add_argument("--hidden", type=int, default=S, help="MLP hidden width (default 32)")
    g.add_argument("--lambda", dest="lambda", type=float, default=S, help="L2 coefficient (default 1e-5)")
    g.add_argument("--optimizer", choices=["sgd", "adam"], default=S,
                   help="default adam for ntcn, sgd for tucker/cp")
    g.add_argument("--lr", type=float, default=S, help="learning rate (default 1e-3 adam, 0.05 sgd)")
    g.add_argument("--batch-size", dest="batch_size", type=int, default=S,
                   help="cells per optimizer step; 1 gives per-cell updates (default 64)")
    g.add_argument("--epochs", type=int, default=S, help="maximum epochs (default 1000)")
    g.add_argument("--early-stop-tol", dest="early_stop_tol", type=float, default=S,
                   help="stop when consecutive epoch objectives differ by less (default 1e-5)")
    g.add_argument("--loss", choices=["squared", "cauchy"], default=S,
                   help="baseline loss (default squared)")
    g.add_argument("--cauchy-scale", dest="cauchy_scale", type=float, default=S,
                   help="Cauchy loss scale (default 1.0)")
    g.add_argument("--val-patience", dest="val_patience", type=int, default=S,
                   help="also stop after this many epochs without validation improvement (default off)")


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_cfg)
    for key in DEFAULTS:
        if key in vars(args):
            settings[key] = vars(args)[key]
    return settings


def _pair(text, name):
    try:
        a, b = (int(x) for x in str(text).split(","))
    except ValueError:
        raise UsageError(f"--{name} must look like A,B, got {text!r}") from None
    return a, b


def build_configs(settings: dict, dims) -> tuple[training.TrainConfig, training.Params]:
    try:
        tc = training.TrainConfig(
            model=settings["model"], optimizer=settings["optimizer"], lr=settings["lr"],
            batch_size=settings["batch_size"], epochs=settings["epochs"],
            early_stop_tol=settings["early_stop_tol"], lam=settings["lambda"], loss=settings["loss"],
            cauchy_scale=settings["cauchy_scale"], seed=settings["seed"],
            deterministic=bool(settings["deterministic"]), val_patience=settings["val_patience"],
        )
        if tc.model == "ntcn":
            c1, c2 = _pair(settings["channels"], "channels")
            k1, k2 = _pair(settings["kernels"], "kernels")
            cfg = ntcn.NtcnConfig(rank=settings["rank"], c1=c1, c2=c2, k1=k1, k2=k2,
                                  h1=settings["hidden"], seed=settings["seed"])
            params = ntcn.init(cfg, dims)
        else:
            params = training.init_model(tc.model, dims, rank=settings["rank"], seed=settings["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return tc, params


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _thread_cap():
    n = os.environ.get("HDS_IMPUTE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


# --------------------------------------------------------------------------- pipeline pieces

def prepare(obs: data.ObservationSet, preprocess: str):
    """Apply the value transform; returns (transformed set, record needed to invert it)."""
    if preprocess == "sigmoid":
        return data.preprocess_sigmoid(obs), {"kind": "sigmoid"}
    if preprocess == "minmax":
        out, scale = data.preprocess_minmax(obs)
        return out, {"kind": "minmax", "lo": scale.lo, "hi": scale.hi, "degenerate": scale.degenerate}
    raise UsageError(f"unknown preprocessing {preprocess!r}")


def invert_transform(values: np.ndarray, record: dict) -> np.ndarray:
    if record["kind"] == "sigmoid":
        v = np.clip(values, 1e-15, 1 - 1e-15)
        return np.log(v) - np.log1p(-v)
    return data.MinMaxScale(record["lo"], record["hi"], record.get("degenerate", False)).invert(values)


def _load_data(path) -> data.ObservationSet:
    try:
        return data.load_coo(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:  # CooParseError and ValidationError
        raise UsageError(f"bad data file {path}: {exc}") from None


def _load_checkpoint(path):
    try:
        return training.load_checkpoint(path, with_extra=True)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    except training.CheckpointError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    try:
        spec = data.SynthSpec(dims=_dims(args.dims), rank=args.rank, density=args.density,
                              noise_std=args.noise, nonlinearity=args.nonlinearity, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = data.synthesize_with_truth(spec)
    out = Path(args.out)
    data.save_coo(res.observed, out)
    truth_path = Path(args.truth) if args.truth else out.with_name(out.name + ".truth")
    data.save_coo(data.ObservationSet.from_dense(res.truth), truth_path,
                  header_comment="noise-free ground truth for every cell")
    print(f"wrote {len(res.observed)} entries to {out} and ground truth to {truth_path}")
    return EXIT_OK


def _dims(text):
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--dims must look like S,P,T, got {text!r}") from None
    if len(dims) != 3:
        raise UsageError(f"--dims needs three values, got {text!r}")
    return dims


def cmd_train(args) -> int:
    settings = resolve_settings(args)
    raw = _load_data(args.data)
    try:
        ratio = data.parse_ratio(settings["split"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    obs, transform = prepare(raw, settings["preprocess"])
    try:
        split = data.split(obs, ratio, settings["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tc, params = build_configs(settings, obs.dims)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "checkpoint.json", "trainlog": out / "trainlog.jsonl",
             "manifest": out / "manifest.json"}
    try:
        best, log = training.train(params, split, tc, log_path=paths["trainlog"], verbose=args.verbose)
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    pipeline = {"preprocess": settings["preprocess"], "transform": transform, "split": list(ratio),
                "seed": settings["seed"], "data_sha256": sha256(args.data)}
    training.save_checkpoint(best, paths["checkpoint"], extra={"pipeline": pipeline, "train": tc.to_dict()})
    manifest = {
        "tool": "hds-impute",
        "version": __version__,
        "settings": settings,
        "train_config": tc.to_dict(),
        "model_config": best.config,
        "pipeline": pipeline,
        "inputs": {"data": {"path": str(args.data), "sha256": pipeline["data_sha256"]}},
        "artifacts": {k: str(v) for k, v in paths.items()},
        "stop_reason": log.stop_reason,
        "epochs_run": len(log),
        "best_epoch": log.best_epoch,
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    report = training.evaluate(best, split.validation) if len(split.validation) else None
    print(f"trained {tc.model} for {len(log)} epochs ({log.stop_reason}); best epoch {log.best_epoch}")
    if report:
        print(f"validation RMSE {report.rmse:.6f} MAE {report.mae:.6f} over {report.count} cells")
    print(f"artifacts in {out}")
    return EXIT_OK


def _pipeline(args, extra) -> dict:
    manifest = Path(args.manifest) if args.manifest else Path(args.checkpoint).with_name("manifest.json")
    if manifest.exists():
        try:
            return json.loads(manifest.read_text())["pipeline"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise UsageError(f"bad manifest {manifest}: {exc}") from None
    if "pipeline" in extra:
        return extra["pipeline"]
    raise UsageError("no manifest found and checkpoint carries no pipeline record")


def cmd_eval(args) -> int:
    params, extra = _load_checkpoint(args.checkpoint)
    pipe = _pipeline(args, extra)
    raw = _load_data(args.data)
    if tuple(raw.dims) != tuple(params.dims):
        raise UsageError(f"data dims {raw.dims} do not match checkpoint dims {tuple(params.dims)}")
    if pipe.get("data_sha256") not in (None, sha256(args.data)):
        print(f"warning: {args.data} is not the file this checkpoint was trained on; "
              "the recomputed split will not match the training split", file=sys.stderr)
    obs, _ = prepare(raw, pipe["preprocess"])
    split = data.split(obs, pipe["split"], pipe["seed"])
    part = split.part(args.part)
    if len(part) == 0:
        raise UsageError(f"the {args.part} part is empty")
    report = training.evaluate(params, part)
    print(f"{params.kind} on {args.part} part")
    print(report.table())
    doc = dict(report.to_dict(), part=args.part, model=params.kind)
    print(json.dumps(doc, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_impute(args) -> int:
    params, extra = _load_checkpoint(args.checkpoint)
    dims = tuple(params.dims)
    dense = training.predict(params, *np.indices(dims).reshape(3, -1)).reshape(dims)
    if args.scale == "raw":
        dense = invert_transform(dense, _pipeline(args, extra)["transform"])
    mask = np.ones(dims, dtype=bool)
    if args.missing_only:
        if not args.data:
            raise UsageError("--missing-only needs --data with the observed cells")
        observed = _load_data(args.data)
        if tuple(observed.dims) != dims:
            raise UsageError(f"data dims {observed.dims} do not match checkpoint dims {dims}")
        mask = observed.missing_mask()
    index = np.argwhere(mask)
    out = data.ObservationSet(dims, index, dense[mask])
    data.save_coo(out, args.out)
    print(f"wrote {len(out)} imputed cells to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(tiny_seeds=range(args.seeds), rank10_seeds=range(args.rank10_seeds),
                                  lam=args.lam)
    print(gradcheck.format_report(results, args.tol))
    ok = all(r.passed(args.tol) for r in results)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hds-impute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic Tucker-structured COO file plus ground truth")
    p.add_argument("--dims", default="24,24,90", help="|S|,|P|,|T| (default 24,24,90)")
    p.add_argument("--rank", type=int, default=3, help="ground-truth Tucker rank (default 3)")
    p.add_argument("--density", type=float, default=0.1, help="observed fraction in (0, 1] (default 0.1)")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std (default 0)")
    p.add_argument("--nonlinearity", choices=["none", "squash"], default="none",
                   help="squash applies tanh to the Tucker sum (default none)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth.coo", help="observed-cell output (default synth.coo)")
    p.add_argument("--truth", help="ground-truth sidecar path (default <out>.truth)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="preprocess, split and train; writes checkpoint, log and manifest")
    p.add_argument("data", help="COO input file")
    p.add_argument("--out-dir", default="run", help="artifact directory (default ./run)")
    p.add_argument("--verbose", action="store_true", help="print one JSON record per epoch")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one part of the recomputed split")
    p.add_argument("checkpoint")
    p.add_argument("data", help="the COO file the checkpoint was trained on")
    p.add_argument("--part", choices=["train", "validation", "test"], default="test")
    p.add_argument("--manifest", help="run manifest (default: manifest.json next to the checkpoint)")
    p.add_argument("--json", help="also write the report document here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("impute", help="write predictions for every cell (or only unobserved ones)")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="COO output path")
    p.add_argument("--missing-only", action="store_true", help="only cells absent from --data")
    p.add_argument("--data", help="observed COO file, needed with --missing-only")
    p.add_argument("--scale", choices=["transformed", "raw"], default="transformed",
                   help="raw undoes the training value transform (default transformed)")
    p.add_argument("--manifest", help="run manifest, needed for --scale raw if not next to the checkpoint")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full NTCN backward pass")
    p.add_argument("--seeds", type=int, default=5, help="seeds at the tiny config (default 5)")
    p.add_argument("--rank10-seeds", type=int, default=1, help="seeds at rank 10, k=6,5 (default 1)")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3, help="L2 coefficient in the checked loss")
    p.add_argument("--tol", type=float, default=gradcheck.TOLERANCE, help="max relative error (default 1e-5)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_cap():
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
