import itertools
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridnav.cloud import Frame, PointCloud
from hybridnav.mapping import (
    HybridNode, LocalMap, Mode, PlanningGrid, annotate_modes, astar_plan, extract_waypoint, mode_runs,
    path_cost,
)

G, A = Mode.GROUND, Mode.AIR


def odom(points):
    return PointCloud(np.asarray(points, float), Frame.ODOMETRY)


# -- local map -------------------------------------------------------------------

def test_insert_single_and_shared_voxel():
    m = LocalMap(resolution=0.2)
    m.insert_cloud(odom([[0.05, 0.05, 0.05]]))
    assert m.occupied == {(0, 0, 0)}
    m.insert_cloud(odom([[0.1, 0.1, 0.1], [0.15, 0.02, 0.19]]))
    assert len(m.occupied) == 1


def test_insert_wall_matches_quantisation():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(0, 4, 3000), np.full(3000, 1.03), rng.uniform(0, 2, 3000)])
    m = LocalMap(resolution=0.2).insert_cloud(odom(pts))
    expected = {(math.floor(x / 0.2), math.floor(y / 0.2), math.floor(z / 0.2)) for x, y, z in pts}
    assert m.occupied == expected


def test_insert_rejects_body_frame():
    with pytest.raises(ValueError):
        LocalMap().insert_cloud(PointCloud([[0, 0, 0]], Frame.BODY))


def test_prune_and_reset():
    m = LocalMap(resolution=0.2, retain_radius=1.0)
    m.insert_cloud(odom([[0.1, 0.1, 0.1], [2.1, 0.1, 0.1]]))
    m.prune_radius((0.1, 0.1, 0.1))
    assert m.occupied == {(0, 0, 0)}
    before = set(m.occupied)
    assert m.prune_radius((0.1, 0.1, 0.1)).occupied == before
    assert m.reset().occupied == set()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_prune_bounds_distance_and_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    m = LocalMap(resolution=0.25, retain_radius=2.0).insert_cloud(odom(rng.uniform(-5, 5, (300, 3))))
    center = rng.uniform(-2, 2, 3)
    m.prune_radius(center)
    if m.occupied:
        d = np.linalg.norm(m.voxel_center(list(m.occupied)) - center, axis=1)
        assert d.max() <= 2.0
    once = set(m.occupied)
    assert m.prune_radius(center).occupied == once


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_insert_prune_insert_order_insensitive(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 0, (50, 3))
    b = rng.uniform(0.01, 1, (50, 3))
    m1 = LocalMap(retain_radius=5).insert_cloud(odom(a)).prune_radius((0, 0, 0)).insert_cloud(odom(b))
    m2 = LocalMap(retain_radius=5).insert_cloud(odom(b)).prune_radius((0, 0, 0)).insert_cloud(odom(a))
    assert m1.occupied == m2.occupied


def test_map_dump_round_trip():
    m = LocalMap(resolution=0.2).insert_cloud(odom([[0.1, 0.5, -0.3], [1.0, 1.0, 1.0]]))
    text = m.dumps()
    assert text.splitlines()[0] == "mapv1 0.2"
    assert LocalMap.loads(text).occupied == m.occupied


# -- graph search -------------------------------------------------------------------

def dijkstra_oracle(grid, start, goal, res, cost, factor):
    """Build the two-mode graph directly from its definition and run networkx Dijkstra."""
    g = nx.DiGraph()
    i0, i1 = grid.i_range
    j0, j1 = grid.j_range
    nodes = []
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            if (i, j) not in grid.ground_blocked and (i, j, 0) not in grid.occupied:
                nodes.append((i, j, 0, G))
            for k in range(1, grid.k_max + 1):
                if (i, j, k) not in grid.occupied:
                    nodes.append((i, j, k, A))
    node_set = set(nodes)
    for n in nodes:
        i, j, k, mode = n
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            m = (i + di, j + dj, k + dk, mode)
            if m in node_set:
                g.add_edge(n, m, weight=res * cost[mode])
        swap = (i, j, 1, A) if mode is G else ((i, j, 0, G) if k == 1 else None)
        if swap in node_set:
            g.add_edge(n, swap, weight=factor * res * cost[swap[3]])
    s, t = tuple(start), tuple(goal)
    if s not in g or t not in g:
        return None
    try:
        return nx.dijkstra_path_length(g, s, t)
    except nx.NetworkXNoPath:
        return None


def random_grid(rng, n=20, density=0.3):
    occ = set()
    for i, j in itertools.product(range(n), range(n)):
        if rng.random() < density:
            occ.add((i, j, 0))
        if rng.random() < density * 0.5:
            occ.add((i, j, 1))
    blocked = {(i, j) for i, j in itertools.product(range(n), range(n)) if rng.random() < 0.1}
    return PlanningGrid(frozenset(occ), (0, n - 1), (0, n - 1), 1, frozenset(blocked))


def random_free_node(rng, grid, n=20):
    while True:
        mode = G if rng.random() < 0.7 else A
        node = HybridNode(int(rng.integers(n)), int(rng.integers(n)), 0 if mode is G else 1, mode)
        if grid.free(node):
            return node


def test_astar_matches_dijkstra_on_random_grids():
    rng = np.random.default_rng(20)
    cost = {G: 1.0, A: 5.0}
    reachable = 0
    for _ in range(200):
        grid = random_grid(rng)
        s, t = random_free_node(rng, grid), random_free_node(rng, grid)
        got = astar_plan(grid, s, t, 0.2, cost, 0.5)
        want = dijkstra_oracle(grid, s, t, 0.2, cost, 0.5)
        if want is None:
            assert got is None
            continue
        reachable += 1
        path, total = got
        assert total == pytest.approx(want, abs=1e-9)
        assert path_cost(path, 0.2, cost, 0.5) == pytest.approx(total, abs=1e-9)
        assert path[0] == s and path[-1] == t
    assert reachable > 100


def test_straight_ground_line():
    grid = PlanningGrid(frozenset(), (0, 4), (0, 4), 1)
    path, total = astar_plan(grid, HybridNode(0, 2, 0, G), HybridNode(4, 2, 0, G), resolution=1.0)
    assert len(path) - 1 == 4 and total == 4.0
    assert all(n.mode is G for n in path)


def wall_grid(n=7, wall_i=3):
    # full-height on the ground layer, open above
    blocked = frozenset((wall_i, j) for j in range(n))
    return PlanningGrid(frozenset(), (0, n - 1), (0, n - 1), 1, blocked)


def test_wall_forces_fly_over():
    grid = wall_grid()
    s, t = HybridNode(1, 3, 0, G), HybridNode(5, 3, 0, G)
    path, total = astar_plan(grid, s, t, resolution=1.0)
    assert total == pytest.approx(dijkstra_oracle(grid, s, t, 1.0, {G: 1, A: 5}, 0.5))
    air_steps = [(a, b) for a, b in zip(path, path[1:]) if a.mode is A and b.mode is A]
    assert air_steps and path_cost(path, 1.0) == total
    # flying segment priced at five times the ground rate
    assert total == pytest.approx(2.5 + 5 * len(air_steps) + 0.5 + (len(path) - 3 - len(air_steps)))


def test_short_detour_preferred_to_flying():
    # a single blocked cell: rolling around it (4 steps) beats taking off over it
    grid = PlanningGrid(frozenset(), (0, 4), (0, 4), 1, frozenset({(2, 2)}))
    path, total = astar_plan(grid, HybridNode(1, 2, 0, G), HybridNode(3, 2, 0, G), resolution=1.0)
    assert all(n.mode is G for n in path) and total == 4.0


def test_unreachable_goal():
    grid = PlanningGrid(frozenset({(2, j, 1) for j in range(5)}), (0, 4), (0, 4), 1,
                        frozenset((2, j) for j in range(5)))
    assert astar_plan(grid, HybridNode(0, 0, 0, G), HybridNode(4, 4, 0, G)) is None
    assert astar_plan(grid, HybridNode(2, 0, 0, G), HybridNode(4, 4, 0, G)) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 20))
def test_scaling_mode_costs_keeps_optimum(seed, scale):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, n=10)
    s, t = random_free_node(rng, grid, 10), random_free_node(rng, grid, 10)
    base = astar_plan(grid, s, t, 0.2, {G: 1.0, A: 5.0})
    scaled = astar_plan(grid, s, t, 0.2, {G: scale, A: 5.0 * scale})
    assert (base is None) == (scaled is None)
    if base is not None:
        assert scaled[1] == pytest.approx(scale * base[1], rel=1e-9)
        # the scaled optimum is also optimal at the original prices
        assert path_cost(scaled[0], 0.2, {G: 1.0, A: 5.0}) == pytest.approx(base[1], rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 4))
def test_equal_costs_never_detour_through_air(i0, j0, i1, j1):
    grid = PlanningGrid(frozenset(), (0, 4), (0, 4), 2)
    path, total = astar_plan(grid, HybridNode(i0, j0, 0, G), HybridNode(i1, j1, 0, G), 1.0, {G: 1.0, A: 1.0})
    assert total == abs(i1 - i0) + abs(j1 - j0)


# -- waypoint and annotation ----------------------------------------------------------

def test_extract_waypoint():
    path = [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]
    np.testing.assert_allclose(extract_waypoint(path, 1.0), (1, 0, 0))
    np.testing.assert_allclose(extract_waypoint(path, 10.0), (3, 0, 0))
    np.testing.assert_allclose(extract_waypoint(path, 0.0), (0, 0, 0))
    np.testing.assert_allclose(extract_waypoint([(0, 0, 0), (0, 3, 0)], 1.0), (0, 1, 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10))
def test_waypoint_arc_length(seed, d):
    pts = np.cumsum(np.random.default_rng(seed).normal(size=(6, 3)), axis=0)
    total = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    wp = np.array(extract_waypoint(pts, d))
    if d >= total:
        np.testing.assert_allclose(wp, pts[-1])
    else:
        assert np.linalg.norm(wp - pts[0]) <= d + 1e-9


def test_annotate_all_ground():
    path = [HybridNode(i, 0, 0, G) for i in range(4)]
    ann = annotate_modes(path)
    assert [a.transition for a in ann] == [False] * 4
    assert [m for m, _ in mode_runs(ann)] == [G]


def test_roll_fly_roll_scenario():
    # roll to a barrier, fly over it, roll on to the goal
    lmap = LocalMap(resolution=0.5)
    grid = PlanningGrid(frozenset(), (0, 10), (0, 0), 1, frozenset({(5, 0)}))
    path, _ = astar_plan(grid, HybridNode(0, 0, 0, G), HybridNode(10, 0, 0, G), 0.5)
    ann = annotate_modes(path, lmap)
    assert [m for m, _ in mode_runs(ann)] == [G, A, G]
    assert sum(a.transition for a in ann) == 2
    assert ann[0].point == pytest.approx((0.25, 0.25, 0.25))
