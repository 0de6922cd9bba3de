"""Feature pyramid motion extraction: temporal context from a T-QS/S-QS pyramid pair."""

from __future__ import annotations

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor


def motion_encode(b: Tensor, u: Tensor, kernel: Tensor) -> Tensor:
    """Bias-free 3x3 convolution of the feature difference ``b - u``."""
    if b.shape != u.shape:
        raise ValueError(f"motion_encode: shape mismatch {b.shape} vs {u.shape}")
    return T.conv2d(T.sub(b, u), kernel)


def pyramid_resample(m: Tensor, size: tuple[int, int]) -> Tensor:
    return T.resize_bilinear(m, size)


def fuse_scales(maps: list[Tensor], kernel: Tensor) -> Tensor:
    """Concatenate maps (scale order) on channels, then a bias-free 1x1 conv."""
    if not maps:
        raise ValueError("fuse_scales: missing scales")
    if kernel.shape[1] != sum(m.shape[0] for m in maps):
        raise ValueError(f"fuse_scales: kernel expects {kernel.shape[1]} channels, got {len(maps)} maps")
    return T.conv2d(T.concat(maps, axis=0), kernel)


class FPMNet:
    """One motion conv shared by all scales, one fusion 1x1 conv per output scale."""

    def __init__(self, store: ParameterStore, prefix: str, channels: int, n_scales: int):
        self.n_scales = n_scales
        self.motion = store.create(f"{prefix}.motion", (channels, channels, 3, 3))
        self.fuse = [
            store.create(f"{prefix}.fuse{s}", (channels, n_scales * channels, 1, 1)) for s in range(n_scales)
        ]

    def __call__(self, b: list[Tensor], u: list[Tensor]) -> list[Tensor]:
        if len(b) != self.n_scales or len(u) != self.n_scales:
            raise ValueError("FPMNet: pyramid depth mismatch")
        motion = [motion_encode(bs, us, self.motion) for bs, us in zip(b, u)]
        out = []
        for s2, target in enumerate(b):
            size = target.shape[1:]
            out.append(fuse_scales([pyramid_resample(m, size) for m in motion], self.fuse[s2]))
        return out
