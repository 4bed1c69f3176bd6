"""Named parameter tree with a two-way branch partition.

Every trainable tensor of the model lives in one :class:`ParamTree` under a
unique hierarchical name. The top-level prefix decides the branch tag:
``und.*`` is the understanding branch, ``gen.*`` the generation branch.
The training pipeline freezes whole branches by tag.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

UNDERSTANDING = "understanding"
GENERATION = "generation"
ARTIFACT = "artifact"  # codec / probe weights: trained once, never branch-scheduled

_PREFIX_TAGS = {
    "und": UNDERSTANDING,
    "gen": GENERATION,
    "codec": ARTIFACT,
    "probe": ARTIFACT,
}


def branch_of(name: str) -> str:
    prefix = name.split(".", 1)[0]
    if prefix not in _PREFIX_TAGS:
        raise KeyError(f"parameter {name!r} has no branch prefix (und./gen.)")
    return _PREFIX_TAGS[prefix]


class ParamTree:
    """Ordered map from hierarchical name to parameter Tensor."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        branch_of(name)  # validate the prefix eagerly
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tag(self, name: str) -> str:
        if name not in self._entries:
            raise KeyError(name)
        return branch_of(name)

    def names_tagged(self, tag: str) -> list[str]:
        return [n for n in self._entries if branch_of(n) == tag]

    def set_value(self, name: str, data: np.ndarray) -> None:
        t = self._entries[name]
        data = np.asarray(data, dtype=np.float64)
        if data.shape != t.data.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {data.shape} vs {t.data.shape}"
            )
        t.data = data.copy()

    def zero_grads(self, names=None) -> None:
        for n in names if names is not None else self._entries:
            self._entries[n].zero_grad()

    def clear_grads(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._entries) - set(values)
            extra = set(values) - set(self._entries)
            if missing or extra:
                raise KeyError(f"checkpoint mismatch: missing={sorted(missing)!r} extra={sorted(extra)!r}")
        for n, v in values.items():
            if n in self._entries:
                self.set_value(n, v)


class Initializer:
    """Deterministic parameter initializer bound to one RNG stream."""

    def __init__(self, rng: np.random.Generator, scale: float = 0.02):
        self.rng = rng
        self.scale = scale

    def normal(self, tree: ParamTree, name: str, shape) -> Tensor:
        return tree.register(name, self.rng.normal(0.0, self.scale, size=shape))

    def zeros(self, tree: ParamTree, name: str, shape) -> Tensor:
        return tree.register(name, np.zeros(shape))

    def ones(self, tree: ParamTree, name: str, shape) -> Tensor:
        return tree.register(name, np.ones(shape))
