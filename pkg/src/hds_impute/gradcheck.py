"""Central finite-difference checks of the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ntcn
from .params import Params

STEP = 1e-5
TOLERANCE = 1e-5


def numerical_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), taken as 0 when both gradients vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def random_ntcn_params(config: ntcn.NtcnConfig, dims, seed: int) -> ntcn.NtcnParams:
    """Params with every entry (biases included) drawn away from zero.

    The stock initialization puts embeddings near 0 and biases at 0, where the
    standardization denominator is dominated by eps and ReLUs sit on their kink;
    neither is a representative point for checking derivatives.
    """
    params = ntcn.init(config, dims)
    rng = np.random.default_rng(10_000 + seed)
    _randomize(params, rng)
    return params


def _randomize(params, rng):
    for k, v in params.tensors.items():
        if k in ntcn.EMBEDDINGS:
            params[k] = rng.uniform(-1.0, 1.0, size=v.shape)
        else:
            bound = max(np.abs(v).max(), 0.3)
            params[k] = rng.uniform(-bound, bound, size=v.shape)


def live_point(config: ntcn.NtcnConfig, dims, seed: int, margin: float = 1e-3,
               min_grad: float = 1e-5, max_tries: int = 1000):
    """Random params and a cell whose forward pass keeps every ReLU layer partly active.

    A dead layer zeroes the whole upstream gradient and makes the check vacuous;
    pre-activations within ``margin`` of 0 are avoided so finite differences do
    not straddle a kink. Points where the output barely depends on one of the
    three embedding rows (d y_hat / d row below ``min_grad``) are skipped too:
    there the central-difference round-off floor, about 1e-12, is no longer
    small against the gradient itself.
    """
    rng = np.random.default_rng(10_000 + seed)
    params = ntcn.init(config, dims)
    for _ in range(max_tries):
        _randomize(params, rng)
        s, p, t = (int(rng.integers(d)) for d in dims)
        tr = ntcn.forward(params, s, p, t)
        pre = (tr.z1, tr.z2, tr.z3)
        if not (all((z > 0).any() for z in pre) and min(np.abs(z).min() for z in pre) > margin):
            continue
        # unit upstream: gradient of y_hat itself
        g = ntcn.backward(tr, params, tr.y_hat - 1.0, 0.0)
        rows = (g["A"][s], g["B"][p], g["C"][t])
        if min(np.linalg.norm(r) for r in rows) > min_grad:
            return params, (s, p, t)
    raise RuntimeError(f"no live point found for seed {seed}")


@dataclass
class GradcheckResult:
    label: str
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_error < tol


def check_ntcn(params: ntcn.NtcnParams, s: int, p: int, t: int, y: float, lam: float,
               label: str = "", step: float = STEP) -> GradcheckResult:
    """Compare ``ntcn.backward`` against central differences of ``ntcn.loss`` for one cell."""
    trace = ntcn.forward(params, s, p, t)
    analytic = ntcn.backward(trace, params, y, lam)

    def f():
        return ntcn.loss(ntcn.forward(params, s, p, t).y_hat, y, params, lam)

    result = GradcheckResult(label)
    for name, value in params.tensors.items():
        numeric = numerical_grad(f, value, step)
        result.errors[name] = relative_error(analytic[name], numeric)
    return result


def check_model(params: Params, loss_and_grad, label: str = "", step: float = STEP) -> GradcheckResult:
    """Generic check for any ``loss_and_grad(params) -> (loss, grads)`` closure."""
    _, analytic = loss_and_grad(params)
    result = GradcheckResult(label)
    for name, value in params.tensors.items():
        numeric = numerical_grad(lambda: loss_and_grad(params)[0], value, step)
        result.errors[name] = relative_error(analytic[name], numeric)
    return result


def run_suite(tiny_seeds=range(5), rank10_seeds=range(1), lam: float = 1e-3,
              tiny_dims=(3, 4, 5), rank10_dims=(2, 2, 2)) -> list[GradcheckResult]:
    """Full-model checks at the tiny config for several seeds and at the rank-10 configuration."""
    results = []
    for label, config, dims, seeds in (
        ("tiny", ntcn.TINY, tiny_dims, tiny_seeds),
        ("rank10", ntcn.RANK10, rank10_dims, rank10_seeds),
    ):
        for seed in seeds:
            params, (s, p, t) = live_point(config, dims, seed)
            y = float(np.random.default_rng(seed).uniform())
            results.append(check_ntcn(params, s, p, t, y, lam, label=f"{label}/seed={seed}"))
    return results


def format_report(results: list[GradcheckResult], tol: float = TOLERANCE) -> str:
    groups = sorted({k for r in results for k in r.errors})
    lines = [f"{'run':<16}" + "".join(f"{g:>11}" for g in groups) + "   status"]
    for r in results:
        cells = "".join(f"{r.errors.get(g, float('nan')):>11.2e}" for g in groups)
        lines.append(f"{r.label:<16}{cells}   {'PASS' if r.passed(tol) else 'FAIL'}")
    worst = {g: max(r.errors.get(g, 0.0) for r in results) for g in groups}
    lines.append(f"{'max':<16}" + "".join(f"{worst[g]:>11.2e}" for g in groups))
    return "\n".join(lines)
