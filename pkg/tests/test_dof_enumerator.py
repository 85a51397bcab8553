import time
from collections import defaultdict
from functools import reduce

import pytest

from scripts.comm_fabric import Fabric, run_on_ranks
from scripts.constraint_builder import anchored, close, dof_anchors, identity_constraints, merge, view_constraints
from scripts.dof_enumerator import (
    SENTINEL,
    STAGE_GHOSTS,
    STAGE_GHOSTS_AGAIN,
    NumberCache,
    build_views,
    cell_layout,
    exchange_active_fe_indices,
    ownership_of,
    run_distribution,
    unification_classes,
)
from scripts.errors import MissingActiveFeIndexError, SentinelIndexError, StrayGhostDataError
from scripts.mesh_forest import EntityKey, EntityKind, l_shaped_forest
from scripts.sequential_oracle import naive_enumerate, unification_events, unified_enumerate
from scripts.wire_format import encode_cell_records
from tests.conftest import anchor_map, contiguous_owners, random_hp_mesh, scattered_owners, smoothed_hp_mesh


def test_fig1_on_two_ranks(fig1, collection):
    forest, active_fe = fig1
    left, right = forest.leaves
    run = run_distribution(Fabric(2), forest, {left: 0, right: 1}, active_fe, collection)
    assert run.n_global == 31
    assert [d.numbers.n_owned for d in run.results] == [9, 22]


def test_fig2_on_two_ranks(fig2, collection):
    forest, active_fe = fig2
    run = run_distribution(Fabric(2), forest, dict(zip(forest.leaves, [0, 0, 1, 1])), active_fe, collection)
    assert run.n_global == 57
    assert [d.numbers.n_owned for d in run.results] == [29, 28]

    center = EntityKey.vertex((1 << 29, 1 << 29))
    for view, fe, result in zip(run.views, run.active_fe, run.results):
        for cell in view.relevant:
            assert result.store.entity_dofs(center, fe[cell]) == (3,)


@pytest.mark.parametrize('fixture', ['fig1', 'fig2'])
def test_single_rank_matches_sequential_numbering(request, fixture, collection):
    forest, active_fe = request.getfixturevalue(fixture)
    run = run_distribution(Fabric(1), forest, {c: 0 for c in forest.leaves}, active_fe, collection)
    oracle, n_dofs = unified_enumerate(forest, active_fe, collection)
    assert run.n_global == n_dofs
    store = run.results[0].store
    for cell in forest.leaves:
        assert store.cell_dofs(cell, active_fe[cell]) == oracle.cell_dofs(cell, active_fe[cell])


def test_single_rank_matches_sequential_numbering_on_adapted_mesh(collection):
    forest, active_fe = random_hp_mesh(11, collection)
    run = run_distribution(Fabric(1), forest, {c: 0 for c in forest.leaves}, active_fe, collection)
    oracle, n_dofs = unified_enumerate(forest, active_fe, collection)
    assert run.n_global == n_dofs
    for cell in forest.leaves:
        assert run.results[0].store.cell_dofs(cell, active_fe[cell]) == oracle.cell_dofs(cell, active_fe[cell])


SWEEP_RANKS = (1, 2, 3, 5, 8)


def _closed_constraints(run, collection):
    anchors, parts = {}, []
    for view, active_fe, result in zip(run.views, run.active_fe, run.results):
        anchors.update(dof_anchors(result.store, view.relevant, active_fe, collection, view.tree_origins))
        parts.append(view_constraints(view, active_fe, collection, result.store))
    generated = merge(*(p.hp + p.hanging for p in parts))
    assert all(c.row_sum == 1 for c in generated)
    closed = close(generated)
    slaves = {c.slave for c in closed}
    assert not any(m in slaves for c in closed for m, _ in c.masters)
    return anchored(closed, anchors)


@pytest.mark.parametrize('seed', range(20))
def test_smoothed_meshes_number_identically_on_any_rank_count(seed, collection):
    forest, active_fe = smoothed_hp_mesh(seed, collection)
    oracle, n_dofs = unified_enumerate(forest, active_fe, collection)
    _, n_naive = naive_enumerate(forest, active_fe, collection)
    assert n_naive - n_dofs == unification_events(forest, active_fe, collection)
    assert identity_constraints(oracle, forest.leaves, active_fe, collection, forest.tree_origins) == []

    partitions = [(ranks, contiguous_owners(forest, ranks)) for ranks in SWEEP_RANKS]
    partitions.append((5, scattered_owners(forest, 5, seed)))
    reference = None
    for ranks, owners in partitions:
        run = run_distribution(Fabric(ranks), forest, owners, active_fe, collection)
        assert run.n_global == n_dofs
        assert sorted(anchor_map(run, collection).values()) == list(range(n_dofs))
        for view, fe, result in zip(run.views, run.active_fe, run.results):
            assert not any(result.store.has_sentinel(c, fe[c]) for c in view.relevant)
        # the second ghost round only resends what was incomplete in the first
        assert run.traffic[STAGE_GHOSTS_AGAIN] <= run.traffic[STAGE_GHOSTS]
        constraints = _closed_constraints(run, collection)
        if reference is None:
            reference = constraints
        assert constraints == reference


def test_owned_ranges_tile_the_index_space(collection):
    forest, active_fe = random_hp_mesh(5, collection)
    ranks = 4
    run = run_distribution(Fabric(ranks), forest, contiguous_owners(forest, ranks), active_fe, collection)
    ranges = [run.results[p].numbers.owned_range() for p in range(ranks)]
    assert ranges[0].start == 0 and ranges[-1].stop == run.n_global
    assert all(a.stop == b.start for a, b in zip(ranges, ranges[1:]))
    for p, result in enumerate(run.results):
        assert all(i != SENTINEL for i in result.numbers.relevant)
        owned = {i for i in result.numbers.relevant if ownership_of(i, result.numbers) == p}
        assert owned == set(ranges[p])


def _expected_owner(forest, owners, active_fe, collection, run):
    """Per (entity, index): lowest rank among adjacent cells carrying the dominating element."""
    incidence = defaultdict(list)
    for cell in forest.leaves:
        for entity in cell_layout(cell, forest.tree_origins):
            incidence[entity].append(cell)
    carriers = defaultdict(set)
    for result in run.results:
        for (entity, fe), array in result.store.items():
            for index in array:
                carriers[entity, index].add(fe)
    expected = {}
    for (entity, index), fes in carriers.items():
        dominating = reduce(collection.dominating_index, fes)
        expected[index] = min(owners[c] for c in incidence[entity] if active_fe[c] == dominating)
    return expected


@pytest.mark.parametrize('seed, ranks', [(6, 3), (7, 5), (9, 8)])
def test_owner_is_lowest_rank_with_the_dominating_element(seed, ranks, collection):
    forest, active_fe = random_hp_mesh(seed, collection)
    owners = scattered_owners(forest, ranks, seed)
    run = run_distribution(Fabric(ranks), forest, owners, active_fe, collection)
    expected = _expected_owner(forest, owners, active_fe, collection, run)
    assert len(expected) == run.n_global
    for result in run.results:
        for index in result.numbers.relevant:
            assert ownership_of(index, result.numbers) == expected[index]


def test_fig2_central_vertex_belongs_to_the_lower_q2_cell(fig2, collection):
    forest, active_fe = fig2
    owners = dict(zip(forest.leaves, [0, 0, 1, 1]))
    run = run_distribution(Fabric(2), forest, owners, active_fe, collection)
    expected = _expected_owner(forest, owners, active_fe, collection, run)
    assert expected[3] == 0
    assert all(ownership_of(3, result.numbers) == 0 for result in run.results)
    assert all(ownership_of(i, run.results[1].numbers) == expected[i] for i in range(run.n_global))


def test_enumeration_time_grows_linearly_with_cells(collection):
    timings = []
    for level in (3, 4, 5):
        forest = l_shaped_forest(level)
        active_fe = {c: collection.index_of_degree(2 + i % 4) for i, c in enumerate(forest.leaves)}
        owners = contiguous_owners(forest, 2)
        best = float('inf')
        for _ in range(2):
            started = time.perf_counter()
            run_distribution(Fabric(2), forest, owners, active_fe, collection)
            best = min(best, time.perf_counter() - started)
        timings.append(best)
    # each level quadruples the cells: at most 2.5x per doubling
    for smaller, larger in zip(timings, timings[1:]):
        assert larger <= 2.5 ** 2 * smaller


def test_single_rank_sends_nothing(fig2, collection):
    forest, active_fe = fig2
    run = run_distribution(Fabric(1), forest, {c: 0 for c in forest.leaves}, active_fe, collection)
    assert set(run.traffic.values()) == {0}


def test_ghost_exchange_traffic_is_recorded(fig2, collection):
    forest, active_fe = fig2
    run = run_distribution(Fabric(2), forest, dict(zip(forest.leaves, [0, 0, 1, 1])), active_fe, collection)
    assert run.traffic['fe:exchange'] > 0
    assert run.traffic['dofs:ghost-exchange'] > 0


def test_number_cache_skips_empty_ranks():
    numbers = NumberCache(0, (3, 0, 2), frozenset())
    assert numbers.starts == (0, 3, 3)
    assert numbers.n_global == 5
    assert numbers.owned_range(1) == range(3, 3)
    assert numbers.owner_of_index(2) == 0
    assert numbers.owner_of_index(3) == 2
    with pytest.raises(SentinelIndexError):
        numbers.owner_of_index(SENTINEL)
    with pytest.raises(ValueError):
        numbers.owner_of_index(5)


def test_unification_classes_on_shared_edge(collection):
    q2, q4 = collection.index_of_degree(2), collection.index_of_degree(4)
    assert unification_classes(EntityKind.EDGE, (q2, q4), collection) == [[(q2, 0), (q4, 1)], [(q4, 0)], [(q4, 2)]]
    assert unification_classes(EntityKind.VERTEX, (q2, q4), collection) == [[(q2, 0), (q4, 0)]]
    assert len(unification_classes(EntityKind.INTERIOR, (q4,), collection)) == 9


def test_missing_active_fe_index(fig2, collection):
    forest, _ = fig2
    view = build_views(forest, {c: 0 for c in forest.leaves}, 1)[0]
    with pytest.raises(MissingActiveFeIndexError):
        run_on_ranks(1, lambda comm: exchange_active_fe_indices(view, {}, comm))


class _ForgingComm:
    rank = 0
    size = 2

    def __init__(self, cell):
        self.cell = cell

    def neighbor_exchange(self, payloads, stage):
        return {1: encode_cell_records([(self.cell, (0,))])}


def test_stray_ghost_data_is_rejected(fig2, collection):
    forest, active_fe = fig2
    view = build_views(forest, dict(zip(forest.leaves, [0, 0, 1, 1])), 2)[0]
    owned_fe = {c: active_fe[c] for c in view.owned}
    with pytest.raises(StrayGhostDataError, match="stray ghost data"):
        exchange_active_fe_indices(view, owned_fe, _ForgingComm(forest.leaves[0]))
