"""One random toy instance per call for each alignment/aggregation formula.

Every check returns the max absolute difference between the library and the
loop oracle. Instances use 2 scales, grids up to 8x8, at most 2 heads and at
most 4 sampling points.
"""

from __future__ import annotations

import numpy as np

import oracles
from dalign import tensor as T
from dalign.fpmnet import FPMNet, fuse_scales, motion_encode
from dalign.idanet import FFN, SamplingField, deform_attend, predict_offsets_weights, project_values, \
    reference_points, refine_squery, to_tokens
from dalign.iganet import blend, fuse_frames, gate
from dalign.params import ParameterStore


def _shapes(rng):
    h, w = rng.integers(2, 9, size=2)
    return [(int(h), int(w)), (int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1)))]


def _dims(rng):
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 4))
    return heads, d, int(rng.integers(1, 5))


def _t(a):
    return T.tensor(a, double=True)


def _pyr(rng, d, shapes):
    return [rng.normal(size=(d, h, w)) for h, w in shapes]


def check_motion_encode(rng):
    d = int(rng.integers(1, 4))
    h, w = _shapes(rng)[0]
    b, u = rng.normal(size=(2, d, h, w))
    k = rng.normal(size=(d, d, 3, 3))
    got = motion_encode(_t(b), _t(u), _t(k)).data
    return np.max(np.abs(got - oracles.motion_encode(b, u, k)))


def check_temporal_context(rng):
    d = int(rng.integers(1, 4))
    shapes = _shapes(rng)
    store = ParameterStore(int(rng.integers(1 << 30)), double=True)
    net = FPMNet(store, "f", d, 2)
    b, u = _pyr(rng, d, shapes), _pyr(rng, d, shapes)
    got = net([_t(x) for x in b], [_t(x) for x in u])
    k = store["f.motion"].data
    motion = [oracles.motion_encode(bs, us, k) for bs, us in zip(b, u)]
    err = 0.0
    for s2, (h, w) in enumerate(shapes):
        maps = [m if m.shape[1:] == (h, w) else oracles.resize(m, (h, w)) for m in motion]
        want = oracles.fuse_scales(maps, store[f"f.fuse{s2}"].data)
        err = max(err, np.max(np.abs(got[s2].data - want)))
    return err


def check_fuse_scales(rng):
    d = int(rng.integers(1, 4))
    h, w = _shapes(rng)[0]
    maps = [rng.normal(size=(d, h, w)) for _ in range(2)]
    k = rng.normal(size=(d, 2 * d, 1, 1))
    got = fuse_scales([_t(m) for m in maps], _t(k)).data
    return np.max(np.abs(got - oracles.fuse_scales(maps, k)))


def check_project_values(rng):
    heads, d, _ = _dims(rng)
    shapes = _shapes(rng)
    u = _pyr(rng, d, shapes)
    wv = rng.normal(size=(d, d))
    got = project_values([_t(x) for x in u], _t(wv), heads)
    want = oracles.project_values(u, wv, heads)
    return max(np.max(np.abs(g.data - w)) for g, w in zip(got, want))


def check_offsets_weights(rng):
    heads, d, j = _dims(rng)
    shapes = _shapes(rng)
    ctx = _pyr(rng, d, shapes)
    w_off = rng.normal(size=(heads * 2 * j * 2, d))
    w_att = rng.normal(size=(heads * 2 * j, d))
    tokens = to_tokens([_t(x) for x in ctx])
    field = predict_offsets_weights(tokens, _t(w_off), _t(w_att), heads, 2, j)
    off, att = oracles.offsets_weights(tokens.data, w_off, w_att, heads, 2, j)
    return max(np.max(np.abs(field.offsets.data - off)), np.max(np.abs(field.weights.data - att)))


def check_deform_attend(rng):
    heads, d, j = _dims(rng)
    shapes = _shapes(rng)
    q = sum(h * w for h, w in shapes)
    dh = d // heads
    values = [rng.normal(size=(h * w, heads, dh)) for h, w in shapes]
    offsets = rng.normal(scale=1.5, size=(q, heads, 2, j, 2))
    weights = rng.dirichlet(np.ones(2 * j), size=(q, heads)).reshape(q, heads, 2, j)
    w_out = rng.normal(size=(d, d))
    field = SamplingField(_t(offsets), _t(weights))
    got = deform_attend([_t(v) for v in values], shapes, field, reference_points(shapes), _t(w_out)).data
    return np.max(np.abs(got - oracles.deform_attend(values, shapes, offsets, weights, w_out)))


def check_refine(rng):
    _, d, _ = _dims(rng)
    shapes = _shapes(rng)
    q = sum(h * w for h, w in shapes)
    z, u = rng.normal(size=(2, q, d))
    store = ParameterStore(int(rng.integers(1 << 30)), double=True)
    ffn = FFN(store, "ffn", d, 2 * d)
    gain, shift = rng.normal(size=(2, d))
    got = refine_squery(_t(z), _t(u), _t(gain), _t(shift), ffn, dropout=0.1, training=False).data
    want = oracles.refine(z, u, gain, shift, ffn.w1.data, ffn.b1.data, ffn.w2.data, ffn.b2.data)
    return np.max(np.abs(got - want))


def check_blend(rng):
    d = int(rng.integers(1, 4))
    h, w = _shapes(rng)[0]
    b, u = rng.normal(size=(2, d, h, w))
    g = rng.uniform(size=(1, h, w))
    got = blend(_t(g), _t(b), _t(u)).data
    return np.max(np.abs(got - oracles.blend(g, b, u)))


def check_gate(rng):
    d = int(rng.integers(1, 4))
    h, w = _shapes(rng)[0]
    b, u = rng.normal(size=(2, d, h, w))
    k = rng.normal(size=(1, 2 * d, 3, 3))
    bias = rng.normal(size=(1,))
    got = gate(_t(b), _t(u), _t(k), _t(bias)).data
    return np.max(np.abs(got - oracles.gate(b, u, k, bias)))


def check_fuse_frames(rng):
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, 4))
    h, w = _shapes(rng)[0]
    maps = [rng.normal(size=(d, h, w)) for _ in range(n)]
    k = rng.normal(size=(d, n * d, 3, 3))
    bias = rng.normal(size=(d,))
    got = fuse_frames([_t(m) for m in maps], _t(k), _t(bias)).data
    return np.max(np.abs(got - oracles.fuse_frames(maps, k, bias)))


CHECKS = {
    "motion_encode": check_motion_encode,
    "temporal_context": check_temporal_context,
    "fuse_scales": check_fuse_scales,
    "project_values": check_project_values,
    "offsets_and_weights": check_offsets_weights,
    "deform_attend": check_deform_attend,
    "refine_squery": check_refine,
    "blend": check_blend,
    "gate": check_gate,
    "fuse_frames": check_fuse_frames,
}


def max_error(name: str, n: int = 100, seed: int = 0) -> float:
    check = CHECKS[name]
    return max(float(check(np.random.default_rng([seed, k]))) for k in range(n))
