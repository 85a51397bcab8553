import math

import numpy as np
import pytest

from scripts.comm_fabric import Fabric
from scripts.dof_enumerator import build_views
from scripts.errors import TransferError
from scripts.hp_adaptation import (
    CellEstimate,
    Decision,
    ExactSolution,
    MarkingPolicy,
    apply_decisions,
    corner_distance,
    decode_nodal_payload,
    encode_nodal_payload,
    gather_and_mark,
    indicator,
    mark_and_decide,
    smooth_degrees,
)
from scripts.mesh_forest import CellKey, Forest, l_shaped_forest
from tests.conftest import contiguous_owners, scattered_owners, with_degrees


def test_exact_solution_on_the_l_shape():
    u = ExactSolution()
    assert u(0.0, 1.0) == pytest.approx(math.sqrt(3) / 2)
    assert u(-1.0, 0.0) == pytest.approx(math.sqrt(3) / 2)
    assert u(0.0, -1.0) == pytest.approx(0.0, abs=1e-12)
    assert u.gradient_norm(0.0) == math.inf


def test_indicator_is_largest_at_the_reentrant_corner():
    forest = l_shaped_forest(1)
    origins = forest.tree_origins
    etas = {c: indicator(c, origins) for c in forest.leaves}
    corner_cells = [c for c in forest.leaves if corner_distance(c, origins) == 0]
    assert len(corner_cells) == 3
    assert all(etas[c] == math.inf for c in corner_cells)
    assert all(math.isfinite(etas[c]) for c in forest.leaves if c not in corner_cells)


def _estimates(n, degree=3):
    return [
        CellEstimate(CellKey(0, 7, (i << 23, 0)), float(n - i), float(i), 7, degree)
        for i in range(n)
    ]


def test_marking_fixed_fractions(collection):
    estimates = _estimates(100)
    decisions = mark_and_decide(estimates, collection)
    values = list(decisions.values())
    assert values.count(Decision.REFINE_H) == 3
    assert values.count(Decision.REFINE_P) == 27
    assert values.count(Decision.COARSEN_H) == 1
    assert values.count(Decision.COARSEN_P) == 2
    assert decisions[estimates[0].cell] is Decision.REFINE_H
    assert decisions[estimates[-1].cell] is Decision.COARSEN_P


def test_marking_prefers_h_at_the_degree_limit(collection):
    decisions = mark_and_decide(_estimates(10, degree=7), collection)
    assert list(decisions.values()).count(Decision.REFINE_H) == 3
    assert list(decisions.values()).count(Decision.REFINE_P) == 0


def test_marking_policy_validation():
    with pytest.raises(ValueError):
        MarkingPolicy(refine_fraction=1.5)
    with pytest.raises(ValueError):
        MarkingPolicy(refine_fraction=0.8, coarsen_fraction=0.3)


def test_apply_decisions_carries_degrees_and_owners(collection):
    forest = l_shaped_forest(0)
    active_fe = {c: collection.index_of_degree(2) for c in forest.leaves}
    owners = dict(zip(forest.leaves, [0, 1, 1]))
    lower, upper_left, upper_right = forest.leaves
    decisions = {lower: Decision.REFINE_H, upper_right: Decision.REFINE_P}
    adapted, new_fe, new_owners = apply_decisions(forest, active_fe, owners, decisions, collection)
    assert len(adapted.leaves) == 6
    assert all(new_fe[c] == collection.index_of_degree(2) and new_owners[c] == 0 for c in lower.children())
    assert new_fe[upper_right] == collection.index_of_degree(3)
    assert new_owners[upper_left] == 1


def test_apply_decisions_coarsening_takes_the_highest_child_degree(collection):
    forest = Forest.uniform(((0, 0),), level=1)
    active_fe = with_degrees(forest, collection, [2, 3, 5, 2])
    owners = dict(zip(forest.leaves, [2, 0, 0, 1]))
    decisions = {c: Decision.COARSEN_H for c in forest.leaves}
    adapted, new_fe, new_owners = apply_decisions(forest, active_fe, owners, decisions, collection)
    (root,) = adapted.leaves
    assert collection.degree(new_fe[root]) == 5
    assert new_owners[root] == 2


def _smoothed(forest, active_fe, owners, ranks, collection):
    views = build_views(forest, owners, ranks)

    def program(comm):
        view = views[comm.rank]
        return smooth_degrees(comm, view, {c: active_fe[c] for c in view.owned}, collection)

    merged = {}
    for part in Fabric(ranks).run(program):
        merged.update(part)
    return merged


def test_smoothing_limits_neighbor_jumps_independently_of_ranks(collection):
    forest = Forest.uniform(((0, 0),), level=2)
    degrees = [2] * 16
    degrees[0] = 7
    active_fe = with_degrees(forest, collection, degrees)
    single = _smoothed(forest, active_fe, {c: 0 for c in forest.leaves}, 1, collection)
    for ranks, owners in ((3, contiguous_owners(forest, 3)), (4, scattered_owners(forest, 4, 0))):
        assert _smoothed(forest, active_fe, owners, ranks, collection) == single
    for cell in forest.leaves:
        for group in forest.adjacency[cell].edges:
            for other in group:
                assert abs(collection.degree(single[cell]) - collection.degree(single[other])) <= 1
    assert collection.degree(single[forest.leaves[0]]) == 7
    assert min(collection.degree(fe) for fe in single.values()) >= 2


def test_smoothing_only_raises(collection):
    forest = Forest.uniform(((0, 0),), level=1)
    active_fe = with_degrees(forest, collection, [2, 5, 5, 2])
    smoothed = _smoothed(forest, active_fe, {c: 0 for c in forest.leaves}, 1, collection)
    assert [collection.degree(smoothed[c]) for c in forest.leaves] == [4, 5, 5, 4]


def test_marking_does_not_depend_on_ranks(collection):
    forest = l_shaped_forest(2)
    active_fe = {c: collection.index_of_degree(2) for c in forest.leaves}

    def decide(ranks, owners):
        views = build_views(forest, owners, ranks)
        merged = {}
        parts = Fabric(ranks).run(lambda comm: gather_and_mark(comm, views[comm.rank], active_fe, collection))
        for part in parts:
            merged.update(part)
        return merged

    single = decide(1, {c: 0 for c in forest.leaves})
    assert len(single) == len(forest.leaves)
    assert decide(4, contiguous_owners(forest, 4)) == single


def test_nodal_payload_layout(collection):
    forest = l_shaped_forest(0)
    cell = forest.leaves[2]
    fe = collection.index_of_degree(3)
    payload = encode_nodal_payload(cell, fe, collection, forest.tree_origins)
    assert len(payload) == 4 + 16 * 8
    decoded_fe, values = decode_nodal_payload(payload, collection)
    assert decoded_fe == fe
    assert values.shape == (4, 4)
    assert values[0, 0] == 0.0
    assert np.all(values >= 0)
    with pytest.raises(TransferError):
        decode_nodal_payload(payload[:-8], collection)
    with pytest.raises(TransferError):
        decode_nodal_payload(b'\x00', collection)
