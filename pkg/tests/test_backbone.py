import numpy as np
import pytest

from dalign import tensor as T
from dalign.backbone import BEVBackbone, GridConfig, MultiScaleBackbone, PillarEncoder, cell_of, pillarize
from dalign.params import ParameterStore


def pts(*rows):
    a = np.zeros((len(rows), 5), np.float32)
    a[:, : len(rows[0])] = rows
    return a


def test_cell_of_floor_division():
    grid = GridConfig(x_range=(0.0, 1.6), y_range=(0.0, 1.6), cell=0.2)
    col, row = cell_of(np.array([[0.1, 0.3]]), grid)
    assert (col[0], row[0]) == (0, 1)


def test_cell_of_matches_loop():
    grid = GridConfig()
    rng = np.random.default_rng(0)
    xy = rng.uniform(-25.6, 25.6, size=(500, 2))
    col, row = cell_of(xy, grid)
    for (x, y), c, r in zip(xy, col, row):
        assert c == int((x + 25.6) // 0.4) and r == int((y + 25.6) // 0.4)


def test_out_of_range_points_dropped():
    grid = GridConfig(x_range=(0.0, 1.6), y_range=(0.0, 1.6), cell=0.2)
    p = pillarize(pts([0.1, 0.1, 0.0], [5.0, 0.1, 0.0], [0.1, -0.1, 0.0], [0.1, 0.1, 9.0]), grid)
    assert p.n_pillars == 1 and len(p.points) == 1


def test_keep_first_truncation():
    grid = GridConfig(x_range=(0.0, 1.6), y_range=(0.0, 1.6), cell=0.2, max_points_per_pillar=2)
    p = pillarize(pts([0.1, 0.1, 1.0], [1.1, 1.1, 0.0], [0.15, 0.1, 2.0], [0.12, 0.1, 3.0]), grid)
    assert p.n_pillars == 2
    first = p.points[p.point_pillar == 0]
    np.testing.assert_array_equal(first[:, 2], [1.0, 2.0])
    np.testing.assert_array_equal(p.starts, [0, 2])


def test_max_pillars_limit():
    grid = GridConfig(x_range=(0.0, 1.6), y_range=(0.0, 1.6), cell=0.2, max_pillars=2)
    p = pillarize(pts([0.1, 0.1, 0.0], [0.5, 0.1, 0.0], [0.9, 0.1, 0.0]), grid)
    assert p.n_pillars == 2
    np.testing.assert_array_equal(p.cells, [0, 2])


def test_grid_validation():
    with pytest.raises(ValueError):
        GridConfig(x_range=(0.0, 1.0), cell=0.3).validate()
    with pytest.raises(ValueError):
        GridConfig(x_range=(1.0, 1.0)).validate()
    with pytest.raises(ValueError):
        GridConfig(x_range=(0.0, 2.4), y_range=(0.0, 2.4), cell=0.4).validate(n_scales=2)


def test_encoder_max_pool_example():
    grid = GridConfig(x_range=(0.0, 1.6), y_range=(0.0, 1.6), cell=0.4, max_points_per_pillar=4)
    store = ParameterStore(0, double=True)
    enc = PillarEncoder(store, "pfn", 2)
    # weights pick x and y directly so per-point channels are the raw coordinates
    enc.weight.data[:] = 0
    enc.weight.data[0, 0] = 1.0
    enc.weight.data[1, 1] = 1.0
    enc.bias.data[:] = 0
    p = pillarize(pts([0.1, 0.35, 0.0], [0.3, 0.2, 0.0]), grid)
    bev = enc(p).data
    np.testing.assert_allclose(bev[:, 0, 0], [0.3, 0.35], rtol=1e-6)
    assert np.count_nonzero(bev.sum(axis=0)) == 1


def test_empty_frame_gives_zero_map():
    grid = GridConfig(x_range=(0.0, 3.2), y_range=(0.0, 3.2), cell=0.4)
    enc = PillarEncoder(ParameterStore(0), "pfn", 4)
    bev = enc(pillarize(np.zeros((0, 5), np.float32), grid))
    assert bev.shape == (4, 8, 8) and not bev.data.any()


def test_scatter_positions_match_pillar_cells():
    grid = GridConfig(x_range=(-3.2, 3.2), y_range=(-3.2, 3.2), cell=0.4)
    rng = np.random.default_rng(1)
    raw = np.column_stack([rng.uniform(-4, 4, size=(300, 2)), rng.uniform(-1, 2, 300), rng.uniform(size=(300, 2))])
    p = pillarize(raw.astype(np.float32), grid)
    store = ParameterStore(2)
    enc = PillarEncoder(store, "pfn", 3)
    enc.bias.data[:] = 5.0  # every pillar produces a strictly positive column
    bev = enc(p).data
    occupied = set()
    for x, y, z in raw[:, :3]:
        c, r = int(np.floor((x + 3.2) / 0.4)), int(np.floor((y + 3.2) / 0.4))
        if 0 <= c < 16 and 0 <= r < 16 and -3 <= z < 5:
            occupied.add(r * 16 + c)
    nonzero = set(np.flatnonzero(bev.reshape(3, -1).any(axis=0)))
    assert nonzero == occupied == set(p.cells.tolist())


def test_encoder_permutation_invariant_within_pillar():
    grid = GridConfig(x_range=(0.0, 3.2), y_range=(0.0, 3.2), cell=0.4)
    rng = np.random.default_rng(3)
    raw = np.column_stack([rng.uniform(0, 3.2, size=(60, 2)), rng.uniform(0, 2, 60), rng.uniform(size=(60, 2))])
    enc = PillarEncoder(ParameterStore(4, double=True), "pfn", 4)
    a = enc(pillarize(raw, grid)).data
    b = enc(pillarize(raw[rng.permutation(60)], grid)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pyramid_shapes():
    store = ParameterStore(0)
    net = MultiScaleBackbone(store, "bb", 4, 3)
    out = net(T.tensor(np.random.default_rng(0).normal(size=(4, 32, 32))))
    assert [m.shape for m in out] == [(4, 16, 16), (4, 8, 8), (4, 4, 4)]
    single = MultiScaleBackbone(ParameterStore(0), "bb", 4, 1)(T.tensor(np.zeros((4, 8, 8))))
    assert len(single) == 1 and single[0].shape == (4, 4, 4)
    with pytest.raises(ValueError):
        net(T.tensor(np.zeros((4, 12, 12))))


def test_zero_input_interior_constant():
    net = MultiScaleBackbone(ParameterStore(5, double=True), "bb", 3, 2)
    out = net(T.tensor(np.zeros((3, 32, 32)), double=True))
    interior = out[0].data[:, 3:-3, 3:-3]
    np.testing.assert_allclose(interior, interior[:, :1, :1] * np.ones_like(interior), atol=1e-12)


def test_backbone_deterministic_and_default_shape():
    grid = GridConfig()
    raw = np.random.default_rng(6).uniform(-20, 20, size=(200, 5)).astype(np.float32)
    raw[:, 2] = 0.5
    a = BEVBackbone(ParameterStore(1), grid, 8, 3)(raw)
    b = BEVBackbone(ParameterStore(1), grid, 8, 3)(raw)
    assert [m.shape for m in a] == [(8, 64, 64), (8, 32, 32), (8, 16, 16)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
