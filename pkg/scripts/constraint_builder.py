"""
Constraints between DoFs that enumeration leaves independent.

- hp edges: a regular edge with two degrees; the high side is interpolated from the low side's trace
- hanging edges: a coarse edge against two fine edges; fine DoFs and spare coarse edge DoFs
  interpolate the degree-k* coarse trace
- identities: coincident nodal functionals that were numbered separately (naive scheme)

All coefficients are exact rationals. Stores only need entity_dofs(entity, fe, cell).
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Hashable, Iterable, Iterator, List, Mapping, NamedTuple, Protocol, Sequence, Tuple

from scripts.element_collection import ElementCollection
from scripts.errors import CircularConstraintError, NotHangingError
from scripts.mesh_forest import OPPOSITE_EDGE, CellKey, EntityKey, HangingEdge, LocalView, entities_of
from scripts.sequential_oracle import Anchor, cell_anchors

logger = logging.getLogger(__name__)


class DofStore(Protocol):
    def entity_dofs(self, entity, fe: int, cell: CellKey = None) -> Tuple[int, ...]: ...


@dataclass(frozen=True)
class Constraint:
    slave: int
    masters: Tuple[Tuple[int, Fraction], ...]

    def __post_init__(self):
        if any(m == self.slave for m, _ in self.masters):
            raise CircularConstraintError([self.slave, self.slave])

    @classmethod
    def build(cls, slave: int, terms: Iterable[Tuple[int, Fraction]]) -> 'Constraint':
        """Combine repeated masters and drop zero coefficients."""
        combined: Dict[int, Fraction] = defaultdict(Fraction)
        for master, coefficient in terms:
            combined[master] += coefficient
        return cls(slave, tuple(sorted((m, c) for m, c in combined.items() if c != 0)))

    @property
    def row_sum(self) -> Fraction:
        return sum((c for _, c in self.masters), Fraction(0))

    @property
    def is_identity(self) -> bool:
        return len(self.masters) == 1 and self.masters[0][1] == 1


def lagrange_basis(nodes: Sequence[Fraction], x: Fraction) -> Tuple[Fraction, ...]:
    """Values at x of the 1D Lagrange polynomials on the given distinct nodes."""
    values = []
    for i, xi in enumerate(nodes):
        value = Fraction(1)
        for j, xj in enumerate(nodes):
            if i != j:
                value *= (x - xj) / (xi - xj)
        values.append(value)
    return tuple(values)


def _interpolate(slave: int, x: Fraction, masters: Sequence[int], nodes: Sequence[Fraction]) -> Constraint:
    return Constraint.build(slave, zip(masters, lagrange_basis(nodes, x)))


def hp_edge_constraints(edge: EntityKey, side_a: Tuple[CellKey, int], side_b: Tuple[CellKey, int],
                        collection: ElementCollection, store: DofStore) -> List[Constraint]:
    """High-degree edge DoFs not coinciding with a low-degree node, in terms of the low-degree trace."""
    if collection.degree(side_a[1]) == collection.degree(side_b[1]):
        return []
    (low_cell, low_fe), (high_cell, high_fe) = sorted([side_a, side_b], key=lambda s: collection.degree(s[1]))
    low, high = collection[low_fe], collection[high_fe]
    v0, v1 = (EntityKey.vertex(p) for p in edge.endpoints)

    masters = (
        list(store.entity_dofs(v0, low_fe, low_cell))
        + list(store.entity_dofs(v1, low_fe, low_cell))
        + list(store.entity_dofs(edge, low_fe, low_cell))
    )
    nodes = low.trace_nodes()
    low_points = set(nodes)
    constraints = []
    for slave, x in zip(store.entity_dofs(edge, high_fe, high_cell), high.edge_support_points):
        if x in low_points:
            continue
        constraints.append(_interpolate(slave, x, masters, nodes))
    return constraints


def hanging_master_slots(coarse_degree: int, master_degree: int) -> Tuple[int, ...]:
    """Coarse edge slots used as interior interpolation nodes for a degree-k* trace."""
    return tuple(
        math.floor(Fraction(j * coarse_degree, master_degree) + Fraction(1, 2)) - 1
        for j in range(1, master_degree)
    )


def hanging_edge_constraints(hanging: HangingEdge, active_fe: Mapping[CellKey, int], collection: ElementCollection,
                             store: DofStore, tree_origins) -> List[Constraint]:
    coarse, edge, fine = hanging.coarse, hanging.edge, hanging.fine
    if len(fine) != 2 or any(f.level != coarse.level + 1 for f in fine):
        raise NotHangingError(f"{coarse} edge {edge} is not a 2:1 interface")
    coarse_edge = entities_of(coarse, tree_origins).edges[edge]
    fine_edges = tuple(entities_of(f, tree_origins).edges[OPPOSITE_EDGE[edge]] for f in fine)
    if fine_edges[0].endpoints[0] != coarse_edge.endpoints[0] or fine_edges[1].endpoints[1] != coarse_edge.endpoints[1]:
        raise NotHangingError(f"fine edges {fine_edges} do not split {coarse_edge}")

    fe_c = active_fe[coarse]
    k_c = collection.degree(fe_c)
    k_star = min(k_c, *(collection.degree(active_fe[f]) for f in fine))
    slots = hanging_master_slots(k_c, k_star)
    coarse_edge_dofs = store.entity_dofs(coarse_edge, fe_c, coarse)
    v0, v1 = (EntityKey.vertex(p) for p in coarse_edge.endpoints)
    masters = (
        list(store.entity_dofs(v0, fe_c, coarse))
        + list(store.entity_dofs(v1, fe_c, coarse))
        + [coarse_edge_dofs[s] for s in slots]
    )
    nodes = (Fraction(0), Fraction(1)) + tuple(Fraction(s + 1, k_c) for s in slots)
    master_set = set(masters)

    half = Fraction(1, 2)
    candidates: Dict[int, Fraction] = {}
    for part, (cell, fine_edge) in enumerate(zip(fine, fine_edges)):
        fe = active_fe[cell]
        offset = half * part
        a, b = (EntityKey.vertex(p) for p in fine_edge.endpoints)
        for vertex, x in ((a, offset), (b, offset + half)):
            for index in store.entity_dofs(vertex, fe, cell):
                candidates.setdefault(index, x)
        points = collection[fe].edge_support_points
        for index, x in zip(store.entity_dofs(fine_edge, fe, cell), points):
            candidates.setdefault(index, offset + half * x)

    # coarse edge DoFs outside the master slots follow the degree-k* trace too
    used = set(slots)
    for slot, index in enumerate(coarse_edge_dofs):
        if slot not in used:
            candidates.setdefault(index, Fraction(slot + 1, k_c))

    return [
        _interpolate(index, x, masters, nodes)
        for index, x in sorted(candidates.items())
        if index not in master_set
    ]


def _indexed_anchors(store: DofStore, cells: Iterable[CellKey], active_fe: Mapping[CellKey, int],
                     collection: ElementCollection, tree_origins) -> Iterator[Tuple[int, Anchor]]:
    for cell in cells:
        fe = active_fe[cell]
        per_entity: Dict[Hashable, List[Anchor]] = defaultdict(list)
        for entity, anchor in cell_anchors(cell, fe, collection, tree_origins):
            per_entity[entity].append(anchor)
        for entity, entity_anchors in per_entity.items():
            yield from zip(store.entity_dofs(entity, fe, cell), entity_anchors)


def dof_anchors(store: DofStore, cells: Iterable[CellKey], active_fe: Mapping[CellKey, int],
                collection: ElementCollection, tree_origins) -> Dict[int, Anchor]:
    """Partition-independent position of every DoF index found on the given cells."""
    anchors: Dict[int, Anchor] = {}
    for index, anchor in _indexed_anchors(store, cells, active_fe, collection, tree_origins):
        anchors.setdefault(index, anchor)
    return anchors


def identity_constraints(store: DofStore, cells: Iterable[CellKey], active_fe: Mapping[CellKey, int],
                         collection: ElementCollection, tree_origins) -> List[Constraint]:
    """Identities between distinct indices that sit on the same nodal functional."""
    by_anchor: Dict[Anchor, set] = defaultdict(set)
    for index, anchor in _indexed_anchors(store, cells, active_fe, collection, tree_origins):
        by_anchor[anchor].add(index)

    constraints = []
    for indices in by_anchor.values():
        if len(indices) < 2:
            continue
        representative, *others = sorted(indices)
        constraints.extend(Constraint(other, ((representative, Fraction(1)),)) for other in others)
    return sorted(constraints, key=lambda c: c.slave)


def identity_constraints_naive(store, forest, active_fe: Mapping[CellKey, int], collection: ElementCollection) -> List[Constraint]:
    return identity_constraints(store, forest.leaves, active_fe, collection, forest.tree_origins)


def close(constraints: Iterable[Constraint]) -> List[Constraint]:
    """Substitute slaves appearing as masters until none is left."""
    by_slave = {c.slave: c for c in constraints}
    resolved: Dict[int, Constraint] = {}

    def resolve(slave: int, chain: List[int]) -> Constraint:
        done = resolved.get(slave)
        if done is not None:
            return done
        if slave in chain:
            raise CircularConstraintError(chain[chain.index(slave):] + [slave])
        chain.append(slave)
        terms = []
        for master, coefficient in by_slave[slave].masters:
            if master in by_slave:
                terms.extend((m, coefficient * c) for m, c in resolve(master, chain).masters)
            else:
                terms.append((master, coefficient))
        chain.pop()
        resolved[slave] = Constraint.build(slave, terms)
        return resolved[slave]

    for slave in sorted(by_slave):
        resolve(slave, [])
    return [resolved[s] for s in sorted(resolved)]


def merge(*groups: Iterable[Constraint]) -> List[Constraint]:
    """Union by slave; the first constraint seen for a slave wins."""
    by_slave: Dict[int, Constraint] = {}
    for group in groups:
        for constraint in group:
            by_slave.setdefault(constraint.slave, constraint)
    return [by_slave[s] for s in sorted(by_slave)]


def format_rational(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


def format_constraints(constraints: Iterable[Constraint]) -> str:
    lines = [
        f"{c.slave} = " + " + ".join(f"{format_rational(coef)}*{m}" for m, coef in c.masters)
        for c in sorted(constraints, key=lambda c: c.slave)
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def write_constraints(path: Path, constraints: Iterable[Constraint]):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(format_constraints(constraints))


class ViewConstraints(NamedTuple):
    hp: List[Constraint]
    hanging: List[Constraint]


def view_constraints(view: LocalView, active_fe: Mapping[CellKey, int], collection: ElementCollection,
                     store: DofStore) -> ViewConstraints:
    """hp and hanging constraints on the interfaces this rank's owned cells touch."""
    hp = []
    for regular in view.regular_edges:
        edge = view.entities_of(regular.cell).edges[regular.edge]
        hp.extend(hp_edge_constraints(
            edge,
            (regular.cell, active_fe[regular.cell]),
            (regular.neighbor, active_fe[regular.neighbor]),
            collection,
            store,
        ))
    hanging = []
    for interface in view.hanging_edges:
        hanging.extend(hanging_edge_constraints(interface, active_fe, collection, store, view.tree_origins))
    logger.debug("rank %d: %d hp and %d hanging constraint rows", view.rank, len(hp), len(hanging))
    return ViewConstraints(merge(hp), merge(hanging))


def anchored(constraints: Iterable[Constraint], anchors: Mapping[int, Anchor]) -> FrozenSet:
    """Constraints rewritten on DoF positions so different numberings can be compared."""
    return frozenset(
        (anchors[c.slave], frozenset((anchors[m], coef) for m, coef in c.masters))
        for c in constraints
    )


def count_by_kind(parts: Sequence[ViewConstraints]) -> Tuple[int, int]:
    hp = merge(*(p.hp for p in parts))
    hanging = merge(*(p.hanging for p in parts))
    return len(hp), len(hanging)
