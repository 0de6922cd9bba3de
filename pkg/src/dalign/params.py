"""Named, seeded parameter storage and the Adam optimizer."""

from __future__ import annotations

import zlib
from collections.abc import Iterator

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Named map from parameter path to trainable :class:`Tensor`.

    Each parameter draws from its own generator seeded by ``(seed, crc32(name))``,
    so initial values do not depend on construction order.
    """

    def __init__(self, seed: int = 0, double: bool = False):
        self.rng_seed = int(seed)
        self.dtype = np.float64 if double else np.float32
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode())])

    def create(self, name: str, shape, init: str = "uniform", fan_in: int | None = None, value=None) -> Tensor:
        """Register a new parameter.

        ``init`` is one of ``uniform`` (U(-a, a), a = 1/sqrt(fan_in)),
        ``zeros``, ``ones``, ``constant`` (fills ``value``) or ``array``
        (copies ``value``).
        """
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            a = 1.0 / np.sqrt(fan_in)
            data = self._rng(name).uniform(-a, a, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "constant":
            data = np.full(shape, float(value))
        elif init == "array":
            data = np.asarray(value, dtype=np.float64)
            if data.shape != shape:
                raise ValueError(f"{name}: array init shape {data.shape} != {shape}")
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data.astype(self.dtype), requires_grad=True)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load(self, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays into the store; returns the names loaded."""
        loaded = []
        for name, arr in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            p = self._params[name]
            if p.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
            loaded.append(name)
        if strict:
            missing = set(self._params) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")
        return loaded


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.dtype)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    grads = [p.grad for _, p in store.items() if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads]))) if grads else 0.0
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
