"""Finite-difference suite over every differentiable op and the composite modules.

Each registered case builds a scalar function of float64 inputs; the scalar
is a fixed random projection of the op output so every output entry matters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..ducanet import DUCANet
from ..fpmnet import FPMNet
from ..head import DetectionHead, OutputGrid, compute_loss, encode_targets
from ..idanet import IDANet
from ..iganet import IGANet
from ..params import ParameterStore
from ..pointcloud import BoxSet
from ..tensor import Tensor
from .fdcheck import check_gradients

TOLERANCE = 1e-4
Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _t(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return T.tensor(data, requires_grad=True, double=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda y: T.sum(T.mul(y, r))


def _simple(op: Callable[..., Tensor], *shapes, **ranges) -> Case:
    def case(rng):
        inputs = [_t(rng, *s, **ranges) for s in shapes]
        proj = _project(op(*inputs), rng)
        return (lambda: proj(op(*inputs))), inputs
    return case


def _pyramid(rng, channels: int, shapes) -> list[Tensor]:
    return [_t(rng, channels, h, w) for h, w in shapes]


def _params(store: ParameterStore) -> list[Tensor]:
    return [p for _, p in store.items()]


def _flatten(maps: list[Tensor]) -> Tensor:
    return T.concat([T.reshape(m, (-1,)) for m in maps], axis=0)


TOY_SHAPES = [(6, 6), (3, 3)]


def _case_idanet(use_motion: bool, training: bool) -> Case:
    def case(rng):
        store = ParameterStore(int(rng.integers(1 << 30)), double=True)
        net = IDANet(store, "ida", 4, 2, heads=2, n_points=2, dropout=0.1, offset_init="uniform")
        u, b = _pyramid(rng, 4, TOY_SHAPES), _pyramid(rng, 4, TOY_SHAPES)

        def run():
            # a fresh generator per call keeps the dropout mask fixed
            return _flatten(net(u, b, use_motion, training, np.random.default_rng(5)))

        proj = _project(run(), rng)
        return (lambda: proj(run())), [*u, *b, *_params(store)]
    return case


def _case_fpmnet(rng):
    store = ParameterStore(int(rng.integers(1 << 30)), double=True)
    net = FPMNet(store, "fpm", 3, 2)
    u, b = _pyramid(rng, 3, TOY_SHAPES), _pyramid(rng, 3, TOY_SHAPES)
    proj = _project(_flatten(net(b, u)), rng)
    return (lambda: proj(_flatten(net(b, u)))), [*u, *b, *_params(store)]


def _case_iganet(rng):
    store = ParameterStore(int(rng.integers(1 << 30)), double=True)
    net = IGANet(store, "iga", 3, 2)
    b = _pyramid(rng, 3, TOY_SHAPES)
    us = [_pyramid(rng, 3, TOY_SHAPES) for _ in range(2)]
    proj = _project(_flatten(net(b, us)), rng)
    return (lambda: proj(_flatten(net(b, us)))), [*b, *us[0], *us[1], *_params(store)]


def _case_ducanet(rng):
    store = ParameterStore(int(rng.integers(1 << 30)), double=True)
    net = DUCANet(store, 4, 2, n_frames=3, n_layers=3, heads=2, n_points=2, dropout=0.1, offset_init="uniform")
    pyramids = [_pyramid(rng, 4, TOY_SHAPES) for _ in range(3)]

    def run():
        return net(pyramids, training=True, rng=np.random.default_rng(5))

    proj = _project(run(), rng)
    return (lambda: proj(run())), [t for p in pyramids for t in p] + _params(store)


def _case_head_loss(rng):
    store = ParameterStore(int(rng.integers(1 << 30)), double=True)
    head = DetectionHead(store, 4, 3, hidden=4)
    grid = OutputGrid(-3.0, -3.0, 1.0, 6, 6)
    boxes = BoxSet(np.array([[0.3, -1.2, 0.8, 4.0, 1.8, 1.5, 0.4, 0, 0], [-2.1, 1.7, 0.9, 0.8, 0.7, 1.7, -2.0, 0, 0]],
                            np.float32), np.array([0, 1], np.uint32), np.array([0, 1], np.uint32))
    targets = encode_targets(boxes, grid, 3)
    x = _t(rng, 4, 6, 6)
    return (lambda: compute_loss(head(x), targets)[0]), [x, *_params(store)]


def _case_segment_max(rng):
    x = _t(rng, 9, 4)
    starts = np.array([0, 2, 3, 7])
    proj = _project(T.segment_max(x, starts), rng)
    return (lambda: proj(T.segment_max(x, starts))), [x]


def _case_scatter(rng):
    x = _t(rng, 4, 3)
    idx = np.array([5, 0, 2, 7])
    proj = _project(T.scatter_rows(x, idx, 9), rng)
    return (lambda: proj(T.scatter_rows(x, idx, 9))), [x]


def _case_deform(rng):
    heads, d, shapes = 2, 3, [(4, 5), (2, 3)]
    values = [_t(rng, h * w, heads, d) for h, w in shapes]
    loc = _t(rng, 7, heads, 2, 3, 2, low=-1.3, high=4.7)
    wts = _t(rng, 7, heads, 2, 3)
    proj = _project(T.deform_sample(values, shapes, loc, wts), rng)
    return (lambda: proj(T.deform_sample(values, shapes, loc, wts))), [*values, loc, wts]


def _case_bilinear(rng):
    x = _t(rng, 3, 5, 6)
    pts = _t(rng, 11, 2, low=-1.5, high=6.5)
    proj = _project(T.bilinear_sample(x, pts), rng)
    return (lambda: proj(T.bilinear_sample(x, pts))), [x, pts]


def _case_dropout(rng):
    x = _t(rng, 5, 4)

    def run():
        return T.dropout(x, 0.3, True, np.random.default_rng(3))

    proj = _project(run(), rng)
    return (lambda: proj(run())), [x]


def _case_concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    proj = _project(T.concat([a, b], axis=0), rng)
    return (lambda: proj(T.concat([a, b], axis=0))), [a, b]


# nonzero offsets keep |x| away from the kink at zero
def _away_from_zero(rng, *shape):
    v = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return T.tensor(v, requires_grad=True, double=True)


def _case_relu(rng):
    x = _away_from_zero(rng, 4, 5)
    proj = _project(T.relu(x), rng)
    return (lambda: proj(T.relu(x))), [x]


def _case_abs(rng):
    x = _away_from_zero(rng, 4, 5)
    proj = _project(T.abs(x), rng)
    return (lambda: proj(T.abs(x))), [x]


OP_CASES: dict[str, Case] = {
    "add": _simple(T.add, (3, 4), (4,)),
    "sub": _simple(T.sub, (3, 1), (3, 4)),
    "mul": _simple(T.mul, (2, 3, 4), (3, 1)),
    "neg": _simple(T.neg, (3, 4)),
    "matmul": _simple(T.matmul, (3, 4), (4, 5)),
    "linear": _simple(T.linear, (5, 4), (3, 4), (3,)),
    "sum": _simple(lambda x: T.sum(x, axis=1, keepdims=True), (3, 4, 2)),
    "mean": _simple(lambda x: T.mean(x, axis=(0, 2)), (3, 4, 2)),
    "reshape": _simple(lambda x: T.reshape(x, (4, 6)), (2, 3, 4)),
    "transpose": _simple(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "concat": _case_concat,
    "getitem": _simple(lambda x: T.getitem(x, (slice(None), np.array([0, 2, 2]), np.array([1, 0, 1]))), (3, 3, 2)),
    "sigmoid": _simple(T.sigmoid, (3, 4)),
    "relu": _case_relu,
    "exp": _simple(T.exp, (3, 4)),
    "log_sigmoid": _simple(T.log_sigmoid, (3, 4)),
    "abs": _case_abs,
    "softmax": _simple(lambda x: T.softmax(x, axis=-1), (3, 5)),
    "layer_norm": _simple(lambda x, g, s: T.layer_norm(x, g, s), (4, 6), (6,), (6,)),
    "dropout": _case_dropout,
    "conv2d": _simple(T.conv2d, (3, 6, 6), (4, 3, 3, 3), (4,)),
    "resize_bilinear": _simple(lambda x: T.resize_bilinear(x, (3, 5)), (2, 6, 6)),
    "bilinear_sample": _case_bilinear,
    "deform_sample": _case_deform,
    "segment_max": _case_segment_max,
    "scatter_rows": _case_scatter,
}

MODULE_CASES: dict[str, Case] = {
    "conv2d_stride2": _simple(lambda x, k, b: T.conv2d(x, k, b, stride=2), (3, 6, 6), (4, 3, 3, 3), (4,)),
    "fpmnet": _case_fpmnet,
    "idanet_align": _case_idanet(True, True),
    "idanet_align_no_motion": _case_idanet(False, False),
    "iganet": _case_iganet,
    "ducanet_L3_N3": _case_ducanet,
    "head_loss": _case_head_loss,
}


def registry() -> dict[str, Case]:
    return {**OP_CASES, **MODULE_CASES}


@dataclass
class GradCheckRow:
    name: str
    max_rel_error: float
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_tsv(self) -> str:
        lines = ["op\tmax_rel_error\tn_checked\tstatus"]
        for r in self.rows:
            lines.append(f"{r.name}\t{r.max_rel_error:.3e}\t{r.n_checked}\t{'pass' if r.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def run_gradcheck(seed: int = 0, cases: dict[str, Case] | None = None,
                  max_per_input: int | None = 24) -> GradCheckReport:
    cases = registry() if cases is None else cases
    rows = []
    for k, (name, case) in enumerate(cases.items()):
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        fn, inputs = case(rng)
        res = check_gradients(fn, inputs, max_per_input=max_per_input, rng=rng)
        rows.append(GradCheckRow(name, res.max_rel_error, res.n_checked, time.perf_counter() - start))
    return GradCheckReport(rows)
