"""Inter-frame deformable alignment of S-QS toward T-QS.

Feature pyramids are lists of ``[D, H_s, W_s]`` maps. Internally all scales
are flattened into one token matrix of shape ``[Q, D]`` (scale-major, then
row-major positions), since every step except the sampling itself is
position-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fpmnet import FPMNet
from .params import ParameterStore
from .tensor import Tensor


def to_tokens(pyramid: list[Tensor]) -> Tensor:
    return T.concat([T.transpose(T.reshape(m, (m.shape[0], -1)), (1, 0)) for m in pyramid], axis=0)


def from_tokens(tokens: Tensor, shapes: list[tuple[int, int]]) -> list[Tensor]:
    out, start = [], 0
    d = tokens.shape[1]
    for h, w in shapes:
        part = T.getitem(tokens, slice(start, start + h * w))
        out.append(T.reshape(T.transpose(part, (1, 0)), (d, h, w)))
        start += h * w
    return out


def reference_points(shapes: list[tuple[int, int]]) -> np.ndarray:
    """Normalized ``(x, y)`` cell centers in ``[0, 1]^2`` for every token."""
    refs = []
    for h, w in shapes:
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        refs.append(np.column_stack([(cols.ravel() + 0.5) / w, (rows.ravel() + 0.5) / h]))
    return np.concatenate(refs, axis=0)


def rescale_reference(ref: np.ndarray, shapes: list[tuple[int, int]]) -> np.ndarray:
    """Map normalized reference points to sampling coordinates of every scale.

    Returns ``[Q, 1, S, 1, 2]``; a cell center maps onto the integer
    coordinate of the cell containing it.
    """
    sizes = np.array([[w, h] for h, w in shapes], dtype=np.float64)  # (S, 2) as (x, y)
    base = ref[:, None, :] * sizes[None] - 0.5
    return base[:, None, :, None, :]


@dataclass
class SamplingField:
    offsets: Tensor  # [Q, heads, S, J, 2] in cells of the sampled scale
    weights: Tensor  # [Q, heads, S, J]


def project_values(u: list[Tensor], weight: Tensor, heads: int) -> list[Tensor]:
    """Per-scale ``[H_s * W_s, heads, D']`` value tensors; rows of ``weight`` are stacked per head."""
    d = u[0].shape[0]
    if d % heads:
        raise ValueError(f"channel count {d} not divisible by {heads} heads")
    out = []
    for m in u:
        tok = T.transpose(T.reshape(m, (d, -1)), (1, 0))
        out.append(T.reshape(T.linear(tok, weight), (tok.shape[0], heads, d // heads)))
    return out


def predict_offsets_weights(context: Tensor, offset_weight: Tensor, attn_weight: Tensor, heads: int,
                            n_scales: int, n_points: int) -> SamplingField:
    """Offsets and softmax-normalized attention weights from context tokens ``[Q, D]``."""
    q = context.shape[0]
    if offset_weight.shape[0] != heads * n_scales * n_points * 2 or attn_weight.shape[0] != heads * n_scales * n_points:
        raise ValueError("predict_offsets_weights: projection shapes do not match heads/scales/points")
    offsets = T.reshape(T.linear(context, offset_weight), (q, heads, n_scales, n_points, 2))
    logits = T.reshape(T.linear(context, attn_weight), (q, heads, n_scales * n_points))
    weights = T.reshape(T.softmax(logits, axis=-1), (q, heads, n_scales, n_points))
    return SamplingField(offsets, weights)


def deform_attend(values: list[Tensor], shapes: list[tuple[int, int]], field: SamplingField,
                  ref: np.ndarray, out_weight: Tensor) -> Tensor:
    """Attention values ``z`` for every reference token, ``[Q, D]``."""
    base = rescale_reference(ref, shapes).astype(field.offsets.dtype)
    locations = T.add(field.offsets, Tensor(base))
    sampled = T.deform_sample(values, shapes, locations, field.weights)  # [Q, heads, D']
    q = sampled.shape[0]
    return T.linear(T.reshape(sampled, (q, -1)), out_weight)


class FFN:
    def __init__(self, store: ParameterStore, prefix: str, channels: int, hidden: int):
        self.w1 = store.create(f"{prefix}.w1", (hidden, channels))
        self.b1 = store.create(f"{prefix}.b1", (hidden,), fan_in=channels)
        self.w2 = store.create(f"{prefix}.w2", (channels, hidden))
        self.b2 = store.create(f"{prefix}.b2", (channels,), fan_in=hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.relu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


def refine_squery(z: Tensor, u_tokens: Tensor, ln_gain: Tensor, ln_shift: Tensor, ffn: FFN,
                  dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """``FFN(LN(dropout(z) + U))`` applied to every token."""
    return ffn(T.layer_norm(T.add(T.dropout(z, dropout, training, rng), u_tokens), ln_gain, ln_shift))


class IDANet:
    def __init__(self, store: ParameterStore, prefix: str, channels: int, n_scales: int, heads: int = 8,
                 n_points: int = 4, dropout: float = 0.1, ffn_hidden: int | None = None,
                 offset_init: str = "zeros"):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.n_scales = n_scales
        self.heads = heads
        self.n_points = n_points
        self.dropout = dropout
        self.fpm = FPMNet(store, f"{prefix}.fpm", channels, n_scales)
        self.value = store.create(f"{prefix}.value", (channels, channels))
        sj = n_scales * n_points
        self.offset = store.create(f"{prefix}.offset", (heads * sj * 2, channels), init=offset_init, fan_in=channels)
        self.attn = store.create(f"{prefix}.attn", (heads * sj, channels), init=offset_init, fan_in=channels)
        self.out = store.create(f"{prefix}.out", (channels, channels))
        self.ln_gain = store.create(f"{prefix}.ln.gain", (channels,), init="ones")
        self.ln_shift = store.create(f"{prefix}.ln.shift", (channels,), init="zeros")
        self.ffn = FFN(store, f"{prefix}.ffn", channels, ffn_hidden or 2 * channels)

    def context(self, u: list[Tensor], b: list[Tensor], use_motion: bool = True) -> list[Tensor]:
        """Temporal context from FPMNet, or the raw T-QS when ``use_motion`` is off."""
        return self.fpm(b, u) if use_motion else b

    def field(self, context: list[Tensor]) -> SamplingField:
        return predict_offsets_weights(to_tokens(context), self.offset, self.attn, self.heads, self.n_scales,
                                       self.n_points)

    def __call__(self, u: list[Tensor], b: list[Tensor], use_motion: bool = True, training: bool = False,
                 rng=None) -> list[Tensor]:
        """Return the refined S-QS pyramid."""
        if len(u) != self.n_scales or any(x.shape != y.shape for x, y in zip(u, b)):
            raise ValueError("IDANet: S-QS and T-QS pyramids are not congruent")
        shapes = [tuple(m.shape[1:]) for m in u]
        values = project_values(u, self.value, self.heads)
        field = self.field(self.context(u, b, use_motion))
        z = deform_attend(values, shapes, field, reference_points(shapes), self.out)
        refined = refine_squery(z, to_tokens(u), self.ln_gain, self.ln_shift, self.ffn, self.dropout, training, rng)
        return from_tokens(refined, shapes)
