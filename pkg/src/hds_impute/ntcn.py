"""Neural Tucker convolutional network.

Per observed cell (s, p, t): look up the three embedding rows, take their outer
product, standardize it, run two valid 3D convolutions with ReLU, flatten, and
map through a two-layer MLP with a sigmoid output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor_ops as ops
from .params import Params

EMBEDDINGS = ("A", "B", "C")


@dataclass(frozen=True)
class NtcnConfig:
    rank: int | tuple[int, int, int] = 10
    c1: int = 8
    c2: int = 16
    k1: int = 6
    k2: int = 5
    h1: int = 32
    init_bound: float = 0.004
    conv_bias: bool = True
    eps: float = ops.EPS_STANDARDIZE
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.rank, (tuple, list)) and len(self.rank) != 3:
            raise ValueError(f"rank must be an int or three ints, got {self.rank!r}")
        ranks = self.ranks
        if min(ranks) < 1 or min(self.c1, self.c2, self.h1) < 1:
            raise ValueError("ranks, channel counts and hidden width must be positive")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("kernel sizes must be positive")
        for axis, r in enumerate(ranks):
            if r < self.k1:
                raise ValueError(f"embedding axis {axis}: rank {r} smaller than k1={self.k1}")
            if r - self.k1 + 1 < self.k2:
                raise ValueError(
                    f"embedding axis {axis}: first conv output {r - self.k1 + 1} smaller than k2={self.k2}"
                )

    @property
    def ranks(self) -> tuple[int, int, int]:
        if isinstance(self.rank, (tuple, list)):
            return tuple(int(r) for r in self.rank)
        return (int(self.rank),) * 3

    @property
    def conv1_shape(self) -> tuple[int, int, int]:
        return tuple(r - self.k1 + 1 for r in self.ranks)

    @property
    def conv2_shape(self) -> tuple[int, int, int]:
        return tuple(d - self.k2 + 1 for d in self.conv1_shape)

    @property
    def c_in(self) -> int:
        return self.c2 * int(np.prod(self.conv2_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rank"] = list(self.ranks) if isinstance(self.rank, (tuple, list)) else int(self.rank)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NtcnConfig":
        d = dict(d)
        if isinstance(d.get("rank"), list):
            d["rank"] = tuple(d["rank"])
        return cls(**d)


# Settings used throughout the tests: rank 2, a 2^3 kernel then a 1^3 kernel,
# one channel and one hidden unit.
TINY = NtcnConfig(rank=2, c1=1, c2=1, k1=2, k2=1, h1=1)
# The full-size network: rank-10 embeddings, a 6^3 then a 5^3 kernel (10 -> 5 -> 1).
RANK10 = NtcnConfig(rank=10, k1=6, k2=5)


class NtcnParams(Params):
    @property
    def cfg(self) -> NtcnConfig:
        return NtcnConfig.from_dict(self.config)


def _glorot(rng, shape, fan_in, fan_out):
    u = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-u, u, size=shape)


def init(config: NtcnConfig, dims) -> NtcnParams:
    """Embeddings from U(0, init_bound); conv/MLP weights fan-balanced uniform; biases zero."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    rng = np.random.default_rng(config.seed)
    N, M, K = config.ranks
    c1, c2, k1, k2, h1 = config.c1, config.c2, config.k1, config.k2, config.h1
    t = {
        "A": rng.uniform(0.0, config.init_bound, size=(dims[0], N)),
        "B": rng.uniform(0.0, config.init_bound, size=(dims[1], M)),
        "C": rng.uniform(0.0, config.init_bound, size=(dims[2], K)),
        "W1": _glorot(rng, (c1, 1, k1, k1, k1), k1**3, c1 * k1**3),
        "W2": _glorot(rng, (c2, c1, k2, k2, k2), c1 * k2**3, c2 * k2**3),
        "W3": _glorot(rng, (h1, config.c_in), config.c_in, h1),
        "b3": np.zeros(h1),
        "W4": _glorot(rng, (1, h1), h1, 1),
        "b_o": np.zeros(1),
    }
    if config.conv_bias:
        t["bias1"] = np.zeros(c1)
        t["bias2"] = np.zeros(c2)
    return NtcnParams("ntcn", dims, config.to_dict(), t)


@dataclass
class ForwardTrace:
    s: np.ndarray
    p: np.ndarray
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    x: np.ndarray  # outer product, (B, N, M, K)
    x_mean: np.ndarray
    x_std: np.ndarray
    x_norm: np.ndarray  # standardized, (B, 1, N, M, K)
    z1: np.ndarray  # conv1 pre-activation
    h1: np.ndarray
    z2: np.ndarray
    h2_map: np.ndarray
    h2: np.ndarray  # flattened conv features
    z3: np.ndarray
    h3: np.ndarray
    logit: np.ndarray
    y_hat: np.ndarray


def forward(params: NtcnParams, s, p, t) -> ForwardTrace:
    """Run the network on one cell or on aligned index arrays.

    Scalar indices are promoted to a batch of one; ``trace.y_hat`` always has
    shape (batch,).
    """
    s, p, t = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (s, p, t))
    params.check_index(s, p, t)
    cfg = params.config
    eps = cfg.get("eps", ops.EPS_STANDARDIZE)
    a, b, c = params["A"][s], params["B"][p], params["C"][t]
    x = ops.outer3(a, b, c)
    x_norm, mu, sd = ops.standardize(x, eps)
    x_norm = x_norm[:, None]
    z1 = ops.conv3d_valid(x_norm, params["W1"], params.tensors.get("bias1"))
    h1 = ops.relu(z1)
    z2 = ops.conv3d_valid(h1, params["W2"], params.tensors.get("bias2"))
    h2_map = ops.relu(z2)
    h2 = ops.flatten(h2_map)
    z3 = ops.affine(h2, params["W3"], params["b3"])
    h3 = ops.relu(z3)
    logit = ops.affine(h3, params["W4"], params["b_o"])[:, 0]
    y_hat = ops.sigmoid(logit)
    return ForwardTrace(s, p, t, a, b, c, x, mu, sd, x_norm, z1, h1, z2, h2_map, h2, z3, h3, logit, y_hat)


def predict(params: NtcnParams, s, p, t, chunk: int = 256) -> np.ndarray:
    s, p, t = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (s, p, t))
    out = np.empty(len(s))
    for i in range(0, len(s), chunk):
        out[i:i + chunk] = forward(params, s[i:i + chunk], p[i:i + chunk], t[i:i + chunk]).y_hat
    return out


def loss(y_hat, y, params: Params, lam: float) -> float:
    """Half squared error summed over the given cells plus lam times the squared parameter norm."""
    r = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    return 0.5 * float(np.sum(r * r)) + lam * params.sq_norm()


def backward(trace: ForwardTrace, params: NtcnParams, y, lam: float, reduce: str = "sum") -> dict[str, np.ndarray]:
    """Gradient of ``loss`` with respect to every tensor in ``params``.

    With ``reduce="mean"`` the data term is averaged over the batch instead of
    summed; the regularizer contributes ``2 * lam * theta`` to every entry either way.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    cfg = params.config
    eps = cfg.get("eps", ops.EPS_STANDARDIZE)
    n = len(trace.y_hat)
    g_yhat = trace.y_hat - y
    if reduce == "mean":
        g_yhat = g_yhat / n
    grads = params.zeros_like()

    g_logit = ops.sigmoid_backward(trace.y_hat, g_yhat)[:, None]
    g_h3, grads["W4"], grads["b_o"] = ops.affine_backward(trace.h3, params["W4"], g_logit)
    g_z3 = ops.relu_backward(trace.z3, g_h3)
    g_h2, grads["W3"], grads["b3"] = ops.affine_backward(trace.h2, params["W3"], g_z3)
    g_z2 = ops.relu_backward(trace.z2, g_h2.reshape(trace.z2.shape))
    g_h1, grads["W2"], gb2 = ops.conv3d_backward(trace.h1, params["W2"], g_z2)
    g_z1 = ops.relu_backward(trace.z1, g_h1)
    g_xn, grads["W1"], gb1 = ops.conv3d_backward(trace.x_norm, params["W1"], g_z1)
    if "bias1" in grads:
        grads["bias1"], grads["bias2"] = gb1, gb2
    g_x = ops.standardize_backward(trace.x, trace.x_mean, trace.x_std, g_xn[:, 0], eps)
    ga, gb, gc = ops.outer3_backward(trace.a, trace.b, trace.c, g_x)
    # fixed sample order keeps the scatter-add deterministic
    np.add.at(grads["A"], trace.s, ga)
    np.add.at(grads["B"], trace.p, gb)
    np.add.at(grads["C"], trace.t, gc)

    if lam:
        for k, v in params.tensors.items():
            grads[k] += 2.0 * lam * v
    return grads


def impute_full(params: NtcnParams, dims=None, observed=None) -> np.ndarray:
    """Dense prediction for every cell; optionally copy observed values over predictions."""
    dims = tuple(dims) if dims is not None else tuple(params.dims)
    if dims != tuple(params.dims):
        raise ValueError(f"dims {dims} do not match parameter dims {params.dims}")
    idx = np.indices(dims).reshape(3, -1)
    out = predict(params, *idx).reshape(dims)
    if observed is not None:
        out[observed.s, observed.p, observed.t] = observed.values
    return out
