"""Sparse 3-mode observation sets: COO ingestion, preprocessing, splitting, synthesis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class CooParseError(ValueError):
    """A line of a COO text file could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ValidationError(ValueError):
    """Observation set violates an index or uniqueness invariant."""


@dataclass(frozen=True)
class ObservationSet:
    """Observed cells of a |S| x |P| x |T| tensor, stored as COO.

    ``index`` is an (n, 3) int64 array of (station, indicator, time) triples and
    ``values`` the matching observations. Both arrays are made read-only.
    """

    dims: tuple[int, int, int]
    index: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValidationError(f"dims must be three positive integers, got {self.dims}")
        index = np.array(self.index, dtype=np.int64).reshape(-1, 3)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(index) != len(values):
            raise ValidationError(f"{len(index)} index triples but {len(values)} values")
        for axis, name in enumerate("spt"):
            col = index[:, axis]
            bad = np.flatnonzero((col < 0) | (col >= dims[axis]))
            if bad.size:
                i = bad[0]
                raise ValidationError(
                    f"entry {i}: {name}={col[i]} out of range [0, {dims[axis]})"
                )
        flat = np.ravel_multi_index(index.T, dims) if len(index) else np.empty(0, np.int64)
        uniq, counts = np.unique(flat, return_counts=True)
        if uniq.size != flat.size:
            dup = np.unravel_index(uniq[counts > 1][0], dims)
            raise ValidationError(f"duplicate triple {tuple(int(d) for d in dup)}")
        index.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def s(self) -> np.ndarray:
        return self.index[:, 0]

    @property
    def p(self) -> np.ndarray:
        return self.index[:, 1]

    @property
    def t(self) -> np.ndarray:
        return self.index[:, 2]

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def entries(self) -> Iterator[tuple[int, int, int, float]]:
        for (s, p, t), y in zip(self.index.tolist(), self.values.tolist()):
            yield s, p, t, y

    def with_values(self, values: np.ndarray) -> "ObservationSet":
        return ObservationSet(self.dims, self.index, values)

    def subset(self, rows: np.ndarray) -> "ObservationSet":
        return ObservationSet(self.dims, self.index[rows], self.values[rows])

    def missing_mask(self) -> np.ndarray:
        """Boolean dense mask, True on unobserved cells."""
        mask = np.ones(self.dims, dtype=bool)
        mask[self.s, self.p, self.t] = False
        return mask

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full(self.dims, fill, dtype=np.float64)
        out[self.s, self.p, self.t] = self.values
        return out

    @classmethod
    def from_entries(cls, dims, entries: Sequence[tuple[int, int, int, float]]) -> "ObservationSet":
        entries = list(entries)
        index = np.array([e[:3] for e in entries], dtype=np.int64).reshape(-1, 3)
        values = np.array([e[3] for e in entries], dtype=np.float64)
        return cls(tuple(dims), index, values)

    @classmethod
    def from_dense(cls, tensor: np.ndarray) -> "ObservationSet":
        """All cells of a dense 3-way array (NaN cells are skipped)."""
        tensor = np.asarray(tensor, dtype=np.float64)
        index = np.argwhere(~np.isnan(tensor))
        return cls(tensor.shape, index, tensor[tuple(index.T)])


def format_value(y: float) -> str:
    # shortest round-trip digits, never exponent notation
    return np.format_float_positional(y, unique=True, trim="0")


def save_coo(obs: ObservationSet, path, header_comment: str | None = None) -> None:
    lines = []
    if header_comment:
        lines.extend(f"# {c}" for c in header_comment.splitlines())
    lines.append(",".join(str(d) for d in obs.dims))
    for s, p, t, y in obs.entries():
        lines.append(f"{s},{p},{t},{format_value(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="latin-1")


def load_coo(path) -> ObservationSet:
    """Read a COO text file: a ``|S|,|P|,|T|`` header then ``s,p,t,y`` lines."""
    dims = None
    index, values = [], []
    with open(path, encoding="latin-1") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [f.strip() for f in line.split(",")]
            if dims is None:
                if len(parts) != 3:
                    raise CooParseError(lineno, f"header needs 3 fields, got {len(parts)}")
                try:
                    dims = tuple(int(f) for f in parts)
                except ValueError:
                    raise CooParseError(lineno, f"non-integer header {line!r}") from None
                if min(dims) < 1:
                    raise CooParseError(lineno, f"dims must be positive, got {dims}")
                continue
            if len(parts) != 4:
                raise CooParseError(lineno, f"expected 's,p,t,y', got {len(parts)} fields")
            try:
                s, p, t = (int(f) for f in parts[:3])
            except ValueError:
                raise CooParseError(lineno, f"non-integer index in {line!r}") from None
            try:
                y = float(parts[3])
            except ValueError:
                raise CooParseError(lineno, f"non-numeric value {parts[3]!r}") from None
            if not np.isfinite(y):
                raise CooParseError(lineno, f"non-finite value {parts[3]!r}")
            for name, v, d in zip("spt", (s, p, t), dims):
                if not 0 <= v < d:
                    raise ValidationError(f"line {lineno}: {name}={v} out of range [0, {d})")
            index.append((s, p, t))
            values.append(y)
    if dims is None:
        raise CooParseError(0, "missing header line")
    try:
        return ObservationSet(dims, np.array(index, dtype=np.int64).reshape(-1, 3), values)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def preprocess_sigmoid(obs: ObservationSet) -> ObservationSet:
    return obs.with_values(sigmoid(obs.values))


@dataclass(frozen=True)
class MinMaxScale:
    lo: float
    hi: float
    degenerate: bool = False

    def apply(self, y):
        if self.degenerate:
            return np.zeros_like(np.asarray(y, dtype=np.float64))
        return (np.asarray(y, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def invert(self, z):
        if self.degenerate:
            return np.full_like(np.asarray(z, dtype=np.float64), self.lo)
        return np.asarray(z, dtype=np.float64) * (self.hi - self.lo) + self.lo


def preprocess_minmax(obs: ObservationSet) -> tuple[ObservationSet, MinMaxScale]:
    if len(obs) == 0:
        raise ValueError("cannot min-max scale an empty observation set")
    lo, hi = float(obs.values.min()), float(obs.values.max())
    scale = MinMaxScale(lo, hi, degenerate=not hi > lo)
    if scale.degenerate:
        warnings.warn("constant observations: min-max scaling maps every value to 0")
    return obs.with_values(scale.apply(obs.values)), scale


@dataclass(frozen=True)
class SplitSet:
    train: ObservationSet
    validation: ObservationSet
    test: ObservationSet
    seed: int

    def part(self, name: str) -> ObservationSet:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


def split_sizes(n: int, ratio: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier part."""
    ratio = [float(r) for r in ratio]
    if any(not r > 0 for r in ratio):
        raise ValueError(f"split ratios must all be positive, got {ratio}")
    if n < len(ratio):
        raise ValueError(f"cannot split {n} entries into {len(ratio)} parts")
    quotas = [n * r / sum(ratio) for r in ratio]
    sizes = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(obs: ObservationSet, ratio: Sequence[float] = (1, 2, 7), seed: int = 0) -> SplitSet:
    """Seeded random train/validation/test partition of the observed entries."""
    if len(ratio) != 3:
        raise ValueError("ratio needs exactly three parts")
    sizes = split_sizes(len(obs), ratio)
    perm = np.random.default_rng(seed).permutation(len(obs))
    bounds = np.cumsum([0] + sizes)
    parts = [obs.subset(np.sort(perm[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]
    return SplitSet(*parts, seed=seed)


def parse_ratio(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"ratio must look like r1:r2:r3, got {text!r}")
    ratio = tuple(float(p) for p in parts)
    if any(not r > 0 for r in ratio):
        raise ValueError(f"split ratios must all be positive, got {text!r}")
    return ratio


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (24, 24, 90)
    rank: int = 3
    density: float = 0.1
    noise_std: float = 0.0
    nonlinearity: str = "none"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if not 0 < self.density <= 1:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.density * np.prod(self.dims) < 1:
            raise ValueError("density too low: fewer than one observed cell")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.nonlinearity not in ("none", "squash"):
            raise ValueError(f"nonlinearity must be 'none' or 'squash', got {self.nonlinearity!r}")

    @property
    def n_observed(self) -> int:
        return max(1, int(round(self.density * int(np.prod(self.dims)))))


@dataclass
class SynthResult:
    observed: ObservationSet
    truth: np.ndarray
    core: np.ndarray
    factors: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)


def synthesize_with_truth(spec: SynthSpec) -> SynthResult:
    """Sample a random Tucker tensor and observe a uniform subset of its cells.

    The returned ``truth`` is the full tensor after the optional tanh squash
    and before noise, so it can serve as an imputation oracle.
    """
    rng = np.random.default_rng(spec.seed)
    r = spec.rank
    factors = tuple(rng.uniform(-1.0, 1.0, size=(d, r)) for d in spec.dims)
    core = rng.uniform(-0.5, 0.5, size=(r, r, r))
    truth = np.einsum("nmk,sn,pm,tk->spt", core, *factors)
    if spec.nonlinearity == "squash":
        truth = np.tanh(truth)
    flat = np.sort(rng.choice(truth.size, size=spec.n_observed, replace=False))
    index = np.stack(np.unravel_index(flat, spec.dims), axis=1)
    values = truth.reshape(-1)[flat]
    if spec.noise_std > 0:
        values = values + rng.normal(0.0, spec.noise_std, size=values.shape)
    return SynthResult(ObservationSet(spec.dims, index, values), truth, core, factors)


def synthesize(spec: SynthSpec) -> ObservationSet:
    return synthesize_with_truth(spec).observed
