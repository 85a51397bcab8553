from fractions import Fraction

import pytest

from scripts.element_collection import ElementCollection, LagrangeElement
from scripts.errors import UnknownElementError
from scripts.mesh_forest import EntityKind


def test_dof_counts_per_entity():
    q4 = LagrangeElement(4)
    assert (q4.dofs_per_vertex, q4.dofs_per_edge, q4.dofs_per_interior) == (1, 3, 9)
    assert q4.dofs_per_cell == 25
    assert q4.name == 'Q4'
    assert q4.edge_support_points == (Fraction(1, 4), Fraction(1, 2), Fraction(3, 4))


def test_degree_out_of_range_is_rejected():
    with pytest.raises(ValueError):
        LagrangeElement(13)
    with pytest.raises(ValueError):
        ElementCollection([3, 2])


def test_lookup_by_index_and_degree(collection):
    assert collection.degree(2) == 4
    assert collection.index_of_degree(7) == 5
    assert collection.dofs_per_entity(0, EntityKind.EDGE) == 1
    assert collection.dofs_per_entity(0, EntityKind.INTERIOR) == 1
    with pytest.raises(UnknownElementError):
        collection[6]
    with pytest.raises(UnknownElementError):
        collection.index_of_degree(9)


@pytest.mark.parametrize('a, b, expected', [
    (2, 4, {(0, 1)}),
    (2, 3, set()),
    (3, 6, {(0, 1), (1, 3)}),
    (4, 4, {(0, 0), (1, 1), (2, 2)}),
])
def test_unification_pairs_match_coincident_points(collection, a, b, expected):
    pairs = collection.unification_pairs(collection.index_of_degree(a), collection.index_of_degree(b))
    assert pairs == frozenset(expected)


def test_dominating_index_is_the_lower_degree(collection):
    assert collection.dominating_index(3, 1) == 1
    assert collection.dominating_index(1, 3) == 1


def test_index_at_least_caps_at_the_ends(collection):
    assert collection.index_at_least(1) == 0
    assert collection.index_at_least(4) == 2
    assert collection.index_at_least(9) == 5
