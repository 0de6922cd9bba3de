"""Dual-query co-attention: L alternating alignment/aggregation layers."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .idanet import IDANet
from .iganet import IGANet
from .params import ParameterStore
from .tensor import Tensor

# Ablation wiring: how support queries are refined before aggregation.
ALIGN_FULL = "full"  # deformable alignment guided by temporal context
ALIGN_NO_MOTION = "no_motion"  # T-QS drives offsets/weights instead of the context
ALIGN_NONE = "none"  # support queries pass through unaligned
ALIGN_MODES = (ALIGN_FULL, ALIGN_NO_MOTION, ALIGN_NONE)


@dataclass
class DualQueryState:
    layer: int
    target: list[Tensor]
    support: list[list[Tensor]] = field(default_factory=list)  # t-1 first


def _check_congruent(pyramids: list[list[Tensor]]) -> None:
    ref = [p.shape for p in pyramids[0]]
    for p in pyramids[1:]:
        if [m.shape for m in p] != ref:
            raise ValueError("feature pyramids are not shape-congruent")


def init_queries(pyramids: list[list[Tensor]]) -> DualQueryState:
    """``pyramids[k]`` is the pyramid of frame ``t - k``."""
    if not pyramids:
        raise ValueError("init_queries needs at least the target pyramid")
    _check_congruent(pyramids)
    return DualQueryState(0, list(pyramids[0]), [list(p) for p in pyramids[1:]])


def final_features(state: DualQueryState) -> Tensor:
    """Resize every T-QS scale to scale-1 resolution and concatenate channels."""
    size = state.target[0].shape[1:]
    return T.concat([T.resize_bilinear(m, size) for m in state.target], axis=0)


class DUCANet:
    """Layer-specific (unshared) IDANet/IGANet pairs."""

    def __init__(self, store: ParameterStore, channels: int, n_scales: int, n_frames: int, n_layers: int,
                 heads: int = 8, n_points: int = 4, dropout: float = 0.1, align_mode: str = ALIGN_FULL,
                 prefix: str = "ducanet", offset_init: str = "zeros", gate_bias: float = 0.0,
                 fuse_init: str = "uniform"):
        if align_mode not in ALIGN_MODES:
            raise ValueError(f"unknown align mode {align_mode!r}")
        self.n_frames = n_frames
        self.n_layers = n_layers
        self.align_mode = align_mode
        self.align_calls = 0
        self.layers: list[tuple[IDANet | None, IGANet]] = []
        if n_frames > 1:
            for l in range(n_layers):
                ida = None
                if align_mode != ALIGN_NONE:
                    ida = IDANet(store, f"{prefix}.layer{l}.idanet", channels, n_scales, heads, n_points, dropout,
                                 offset_init=offset_init)
                iga = IGANet(store, f"{prefix}.layer{l}.iganet", channels, n_frames - 1, gate_bias, fuse_init)
                self.layers.append((ida, iga))

    def run_layer(self, state: DualQueryState, training: bool = False, rng=None) -> DualQueryState:
        if state.layer >= self.n_layers:
            raise ValueError(f"state already at layer {state.layer} of {self.n_layers}")
        if not state.support:
            return DualQueryState(state.layer + 1, state.target, [])
        ida, iga = self.layers[state.layer]
        if ida is None:
            support = state.support
        else:
            use_motion = self.align_mode == ALIGN_FULL
            support = []
            for u in state.support:
                self.align_calls += 1
                support.append(ida(u, state.target, use_motion, training, rng))
        return DualQueryState(state.layer + 1, iga(state.target, support), support)

    def __call__(self, pyramids: list[list[Tensor]], training: bool = False, rng=None) -> Tensor:
        state = init_queries(pyramids[: self.n_frames])
        for _ in range(self.n_layers):
            state = self.run_layer(state, training, rng)
        return final_features(state)
