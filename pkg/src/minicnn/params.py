"""Named parameter tensors plus the optimizer state that travels with them."""
from __future__ import annotations

from fnmatch import fnmatchcase

import numpy as np


class ParamStore:
    """Mapping ``name -> float64 array`` with per-parameter momentum buffers.

    Names follow ``<node id>.w`` / ``<node id>.b``.
    """

    def __init__(self, tensors=None, velocity=None, spec_hash: bytes | None = None):
        self.tensors: dict[str, np.ndarray] = dict(tensors or {})
        self.velocity: dict[str, np.ndarray] = dict(velocity or {})
        self.spec_hash = spec_hash

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, pattern: str = "*") -> list[str]:
        return [n for n in self.tensors if fnmatchcase(n, pattern)]

    @property
    def num_params(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            self.spec_hash,
        )

    def equal(self, other: "ParamStore") -> bool:
        """Bit-exact equality of tensors and optimizer state."""
        def same(a, b):
            return a.keys() == b.keys() and all(
                a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
            )

        return same(self.tensors, other.tensors) and same(self.velocity, other.velocity)

    def __repr__(self):
        return f"ParamStore({len(self.tensors)} tensors, {self.num_params} values)"
