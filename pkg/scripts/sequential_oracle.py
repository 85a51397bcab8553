"""
Single-rank reference enumerations.

naive_enumerate numbers every cell on its own; unified_enumerate gives one index to
every nodal functional, identified by where it sits (vertex, edge plus rational
position, or cell interior slot). Neither shares code paths with dof_enumerator.
"""

import logging
from collections import defaultdict
from typing import Dict, Hashable, List, Mapping, Optional, Tuple

from scripts.element_collection import ElementCollection
from scripts.mesh_forest import CellKey, Forest, entities_of

logger = logging.getLogger(__name__)

Anchor = Tuple[Hashable, ...]


def cell_anchors(cell: CellKey, fe: int, collection: ElementCollection, tree_origins) -> List[Tuple[Hashable, Anchor]]:
    """(entity, anchor) for each DoF of a cell in cell DoF order."""
    element = collection[fe]
    ents = entities_of(cell, tree_origins)
    anchors = [(v, (v,)) for v in ents.vertices]
    for edge in ents.edges:
        anchors.extend((edge, (edge, point)) for point in element.edge_support_points)
    anchors.extend((cell, (cell, slot)) for slot in range(element.dofs_per_interior))
    return anchors


class NaiveStore:
    """Independent per-cell numbering: index lists per cell, no sharing."""

    def __init__(self, collection: ElementCollection, tree_origins):
        self.collection = collection
        self.tree_origins = tuple(tree_origins)
        self.cells: Dict[CellKey, List[int]] = {}
        self._entities: Dict[CellKey, Dict[Hashable, List[int]]] = {}

    def add_cell(self, cell: CellKey, fe: int, first: int) -> int:
        anchors = cell_anchors(cell, fe, self.collection, self.tree_origins)
        indices = list(range(first, first + len(anchors)))
        self.cells[cell] = indices
        per_entity: Dict[Hashable, List[int]] = defaultdict(list)
        for (entity, _), index in zip(anchors, indices):
            per_entity[entity].append(index)
        self._entities[cell] = dict(per_entity)
        return first + len(indices)

    def entity_dofs(self, entity, fe: int, cell: Optional[CellKey] = None) -> Tuple[int, ...]:
        if cell is None:
            raise ValueError("naive DoFs are per cell; pass the cell")
        return tuple(self._entities[cell].get(entity, ()))

    def cell_dofs(self, cell: CellKey, fe: int) -> List[int]:
        return list(self.cells[cell])


class UnifiedStore:
    """Shared numbering: one index per anchor."""

    def __init__(self, collection: ElementCollection, tree_origins):
        self.collection = collection
        self.tree_origins = tuple(tree_origins)
        self.index_of: Dict[Anchor, int] = {}
        self._entity_anchors: Dict[Tuple[Hashable, int], Tuple[Anchor, ...]] = {}

    def add_cell(self, cell: CellKey, fe: int):
        ents = entities_of(cell, self.tree_origins)
        per_entity: Dict[Hashable, List[Anchor]] = {e: [] for e in ents.vertices + ents.edges + (cell,)}
        for entity, anchor in cell_anchors(cell, fe, self.collection, self.tree_origins):
            if anchor not in self.index_of:
                self.index_of[anchor] = len(self.index_of)
            per_entity[entity].append(anchor)
        for entity, anchors in per_entity.items():
            self._entity_anchors[(entity, fe)] = tuple(anchors)

    def entity_dofs(self, entity, fe: int, cell: Optional[CellKey] = None) -> Tuple[int, ...]:
        return tuple(self.index_of[a] for a in self._entity_anchors[(entity, fe)])

    def cell_dofs(self, cell: CellKey, fe: int) -> List[int]:
        return [self.index_of[a] for _, a in cell_anchors(cell, fe, self.collection, self.tree_origins)]

    @property
    def n_dofs(self) -> int:
        return len(self.index_of)


def naive_enumerate(forest: Forest, active_fe: Mapping[CellKey, int], collection: ElementCollection) -> Tuple[NaiveStore, int]:
    store = NaiveStore(collection, forest.tree_origins)
    total = 0
    for cell in forest.leaves:
        total = store.add_cell(cell, active_fe[cell], total)
    logger.debug("naive enumeration: %d DoFs on %d cells", total, len(forest.leaves))
    return store, total


def unified_enumerate(forest: Forest, active_fe: Mapping[CellKey, int], collection: ElementCollection) -> Tuple[UnifiedStore, int]:
    store = UnifiedStore(collection, forest.tree_origins)
    for cell in forest.leaves:
        store.add_cell(cell, active_fe[cell])
    logger.debug("unified enumeration: %d DoFs on %d cells", store.n_dofs, len(forest.leaves))
    return store, store.n_dofs


def unification_events(forest: Forest, active_fe: Mapping[CellKey, int], collection: ElementCollection) -> int:
    """Naive DoFs that coincide with an earlier one, counted by brute force over anchors."""
    seen = defaultdict(int)
    for cell in forest.leaves:
        for _, anchor in cell_anchors(cell, active_fe[cell], collection, forest.tree_origins):
            seen[anchor] += 1
    return sum(count - 1 for count in seen.values())

