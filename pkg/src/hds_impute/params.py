"""Named-array parameter containers shared by all model kinds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Params:
    """Learnable arrays of one model, keyed by name, plus the metadata to rebuild it.

    Optimizers only touch ``tensors``; ``config`` is a plain dict of the model's
    hyperparameters and ``dims`` the (|S|, |P|, |T|) cardinalities.
    """

    kind: str
    dims: tuple[int, int, int]
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def copy(self) -> "Params":
        return type(self)(self.kind, tuple(self.dims), dict(self.config),
                          {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def sq_norm(self) -> float:
        """Sum of squares over every learnable entry."""
        return float(sum(np.vdot(v, v) for v in self.tensors.values()))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_index(self, s, p, t) -> None:
        for name, v, d in zip("spt", (s, p, t), self.dims):
            v = np.asarray(v)
            if v.size and (v.min() < 0 or v.max() >= d):
                raise IndexError(f"{name} index out of range [0, {d})")

    def equals(self, other: "Params") -> bool:
        return (
            self.kind == other.kind
            and tuple(self.dims) == tuple(other.dims)
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
        )
