"""Tucker and CP factorization baselines trained by gradient descent.

Both predict the raw multilinear form with no output nonlinearity. The CP model
is the diagonal-core special case of Tucker.
"""

from __future__ import annotations

import numpy as np

from .params import Params

LOSS_KINDS = ("squared", "cauchy")


class TuckerParams(Params):
    pass


class CpParams(Params):
    pass


def _ranks(rank):
    return tuple(int(r) for r in rank) if isinstance(rank, (tuple, list)) else (int(rank),) * 3


def init_tucker(rank, dims, seed: int = 0, init_bound: float = 0.004) -> TuckerParams:
    """Factors and core from U(0, init_bound)."""
    N, M, K = _ranks(rank)
    rng = np.random.default_rng(seed)
    t = {
        "A": rng.uniform(0.0, init_bound, size=(dims[0], N)),
        "B": rng.uniform(0.0, init_bound, size=(dims[1], M)),
        "C": rng.uniform(0.0, init_bound, size=(dims[2], K)),
        "G": rng.uniform(0.0, init_bound, size=(N, M, K)),
    }
    cfg = {"rank": list((N, M, K)), "seed": seed, "init_bound": init_bound}
    return TuckerParams("tucker", tuple(dims), cfg, t)


def init_cp(rank: int, dims, seed: int = 0, init_bound: float = 0.004) -> CpParams:
    rng = np.random.default_rng(seed)
    t = {name: rng.uniform(0.0, init_bound, size=(d, rank)) for name, d in zip("ABC", dims)}
    return CpParams("cp", tuple(dims), {"rank": int(rank), "seed": seed, "init_bound": init_bound}, t)


def tucker_predict(params: TuckerParams, s, p, t) -> np.ndarray:
    """sum_{n,m,k} g[n,m,k] a[s,n] b[p,m] c[t,k] for each requested cell."""
    scalar = np.ndim(s) == 0
    s, p, t = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (s, p, t))
    params.check_index(s, p, t)
    a, b, c = params["A"][s], params["B"][p], params["C"][t]
    # same contraction order as factor_gradients, so zero residuals are exactly zero
    gbc = np.einsum("nmk,im,ik->in", params["G"], b, c, optimize=True)
    out = np.sum(a * gbc, axis=1)
    return out[0] if scalar else out


def cp_predict(params: CpParams, s, p, t) -> np.ndarray:
    """sum_r a[s,r] b[p,r] c[t,r] for each requested cell."""
    scalar = np.ndim(s) == 0
    s, p, t = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (s, p, t))
    params.check_index(s, p, t)
    out = np.sum(params["A"][s] * params["B"][p] * params["C"][t], axis=1)
    return out[0] if scalar else out


def cp_as_tucker(params: CpParams) -> TuckerParams:
    """Embed a CP model as Tucker with a unit superdiagonal core."""
    r = params.config["rank"]
    core = np.zeros((r, r, r))
    core[np.arange(r), np.arange(r), np.arange(r)] = 1.0
    t = {"A": params["A"].copy(), "B": params["B"].copy(), "C": params["C"].copy(), "G": core}
    return TuckerParams("tucker", params.dims, {"rank": [r] * 3, "seed": params.config.get("seed", 0)}, t)


def predict(params: Params, s, p, t) -> np.ndarray:
    if params.kind == "tucker":
        return tucker_predict(params, s, p, t)
    if params.kind == "cp":
        return cp_predict(params, s, p, t)
    raise ValueError(f"not a baseline model: {params.kind!r}")


def residual_loss(r, loss_kind: str = "squared", gamma: float = 1.0):
    """Per-cell loss of residual r = y - y_hat."""
    r = np.asarray(r, dtype=np.float64)
    if loss_kind == "squared":
        return 0.5 * r * r
    if loss_kind == "cauchy":
        if not gamma > 0:
            raise ValueError(f"Cauchy scale must be positive, got {gamma}")
        return 0.5 * np.log1p((r / gamma) ** 2)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def residual_loss_grad(r, loss_kind: str = "squared", gamma: float = 1.0):
    """d loss / d y_hat (note the sign: y_hat = y - r)."""
    r = np.asarray(r, dtype=np.float64)
    if loss_kind == "squared":
        return -r
    if loss_kind == "cauchy":
        if not gamma > 0:
            raise ValueError(f"Cauchy scale must be positive, got {gamma}")
        return -r / (gamma * gamma + r * r)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def factor_gradients(params: Params, s, p, t, y, lam: float, loss_kind: str = "squared",
                     gamma: float = 1.0, reduce: str = "sum") -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradient over the given cells.

    Returns ``(data_loss, grads)``. The L2 term adds ``2 * lam * theta`` only to
    factor rows touched by the batch (each row once) and, for Tucker, to the core.
    ``reduce="mean"`` averages the data term over the batch.
    """
    s, p, t = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (s, p, t))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    params.check_index(s, p, t)
    a, b, c = params["A"][s], params["B"][p], params["C"][t]
    if params.kind == "tucker":
        G = params["G"]
        gbc = np.einsum("nmk,im,ik->in", G, b, c, optimize=True)
        y_hat = np.sum(a * gbc, axis=1)
    else:
        y_hat = np.sum(a * b * c, axis=1)
    r = y - y_hat
    scale = 1.0 / len(y) if reduce == "mean" else 1.0
    data_loss = float(np.sum(residual_loss(r, loss_kind, gamma))) * scale
    g = residual_loss_grad(r, loss_kind, gamma) * scale

    grads = params.zeros_like()
    if params.kind == "tucker":
        ga = g[:, None] * gbc
        gb = g[:, None] * np.einsum("nmk,in,ik->im", G, a, c, optimize=True)
        gc = g[:, None] * np.einsum("nmk,in,im->ik", G, a, b, optimize=True)
        grads["G"] = np.einsum("i,in,im,ik->nmk", g, a, b, c, optimize=True)
    else:
        ga, gb, gc = g[:, None] * b * c, g[:, None] * a * c, g[:, None] * a * b
    np.add.at(grads["A"], s, ga)
    np.add.at(grads["B"], p, gb)
    np.add.at(grads["C"], t, gc)

    if lam:
        for name, rows in (("A", s), ("B", p), ("C", t)):
            u = np.unique(rows)
            grads[name][u] += 2.0 * lam * params[name][u]
        if "G" in grads:
            grads["G"] += 2.0 * lam * params["G"]
    return data_loss, grads
