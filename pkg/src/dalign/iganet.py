"""Inter-frame gated aggregation of refined S-QS into the next T-QS."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor


def gate(b: Tensor, u: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Single-channel gate ``sigmoid(conv3x3([b, u]))``, shape ``[1, H, W]``."""
    if b.shape != u.shape:
        raise ValueError(f"gate: shape mismatch {b.shape} vs {u.shape}")
    if kernel.shape[0] != 1:
        raise ValueError("gate kernel must have one output channel")
    return T.sigmoid(T.conv2d(T.concat([b, u], axis=0), kernel, bias))


def blend(g: Tensor, b: Tensor, u: Tensor) -> Tensor:
    """``g * b + (1 - g) * u`` with the gate broadcast over channels."""
    if b.shape != u.shape or g.shape != (1, *b.shape[1:]):
        raise ValueError(f"blend: incompatible shapes gate {g.shape}, b {b.shape}, u {u.shape}")
    return T.add(T.mul(g, b), T.mul(T.sub(1.0, g), u))


def fuse_frames(blended: list[Tensor], kernel: Tensor, bias: Tensor) -> Tensor:
    """Concatenate blended maps in recency order (t-1 first) and apply a 3x3 conv."""
    if not blended:
        raise ValueError("fuse_frames: no support frames")
    return T.conv2d(T.concat(blended, axis=0), kernel, bias)


class IGANet:
    """Gate and fusion convolutions shared across scales."""

    def __init__(self, store: ParameterStore, prefix: str, channels: int, n_support: int,
                 gate_bias: float = 0.0, fuse_init: str = "uniform"):
        self.n_support = n_support
        self.gate_kernel = store.create(f"{prefix}.gate.kernel", (1, 2 * channels, 3, 3))
        self.gate_bias = store.create(f"{prefix}.gate.bias", (1,), init="constant", value=gate_bias)
        shape = (channels, n_support * channels, 3, 3)
        if fuse_init == "average":
            # center tap averages the blended maps; small seeded noise elsewhere
            init = np.zeros(shape)
            for k in range(n_support):
                init[np.arange(channels), k * channels + np.arange(channels), 1, 1] = 1.0 / n_support
            noise = np.random.default_rng([store.rng_seed, 7919]).uniform(-1, 1, shape)
            init += noise * 0.1 / np.sqrt(n_support * channels * 9)
            self.fuse_kernel = store.create(f"{prefix}.fuse.kernel", shape, init="array", value=init)
            self.fuse_bias = store.create(f"{prefix}.fuse.bias", (channels,), init="zeros")
        elif fuse_init == "uniform":
            self.fuse_kernel = store.create(f"{prefix}.fuse.kernel", shape)
            self.fuse_bias = store.create(f"{prefix}.fuse.bias", (channels,), fan_in=n_support * channels * 9)
        else:
            raise ValueError(f"unknown fuse_init {fuse_init!r}")

    def gates(self, b: list[Tensor], u_list: list[list[Tensor]]) -> list[list[Tensor]]:
        return [[gate(bs, us, self.gate_kernel, self.gate_bias) for bs, us in zip(b, u)] for u in u_list]

    def __call__(self, b: list[Tensor], u_list: list[list[Tensor]]) -> list[Tensor]:
        """Next-layer T-QS from T-QS ``b`` and the refined S-QS pyramids (t-1 first)."""
        if len(u_list) != self.n_support:
            raise ValueError(f"IGANet expects {self.n_support} support pyramids, got {len(u_list)}")
        out = []
        for s, bs in enumerate(b):
            blended = [blend(gate(bs, u[s], self.gate_kernel, self.gate_bias), bs, u[s]) for u in u_list]
            out.append(fuse_frames(blended, self.fuse_kernel, self.fuse_bias))
        return out
