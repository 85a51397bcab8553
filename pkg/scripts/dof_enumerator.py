"""
Parallel hp DoF enumeration.

Every rank runs distribute_dofs on its LocalView. The stages are:

  0  allocate one sentinel array per (entity, active FE index) on relevant cells
  1  number owned cells in Morton order, skipping arrays that are already set
  2  tie-break: give up arrays shared with an equal-FE ghost of a lower rank
  3  unify coincident DoFs per entity; the dominating FE's lowest rank keeps them
  4  compact surviving indices and shift them by the exclusive scan of n_p
  5  send the DoF lists of owned cells to every rank that has them as ghosts
  6  fill remaining sentinels on owned entities from the unified partners
  7  resend the cells that still had sentinels in stage 5

Afterwards every relevant cell carries valid indices and the owned ranges tile [0, N).
"""

import bisect
import logging
from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Dict, Hashable, Iterator, List, Mapping, NamedTuple, Optional, Set, Tuple, Union

from scripts.comm_fabric import Communicator, Fabric
from scripts.element_collection import ElementCollection
from scripts.errors import (
    EnumerationError,
    IncompleteGhostClosureError,
    MissingActiveFeIndexError,
    SentinelIndexError,
    StrayGhostDataError,
)
from scripts.mesh_forest import CellKey, EntityKey, EntityKind, Forest, LocalView, build_local_view, entities_of
from scripts.wire_format import decode_cell_records, encode_cell_records

logger = logging.getLogger(__name__)

SENTINEL = 2 ** 64 - 1

ActiveFeMap = Dict[CellKey, int]
Entity = Union[EntityKey, CellKey]

STAGE_FE_EXCHANGE = 'fe:exchange'
STAGE_EXSCAN = 'dofs:exscan'
STAGE_COUNTS = 'dofs:counts'
STAGE_GHOSTS = 'dofs:ghost-exchange'
STAGE_GHOSTS_AGAIN = 'dofs:ghost-exchange-2'


def entity_kind(entity: Entity) -> EntityKind:
    if isinstance(entity, CellKey):
        return EntityKind.INTERIOR
    return entity.kind


def cell_layout(cell: CellKey, tree_origins) -> Tuple[Entity, ...]:
    """Entities of a cell in DoF order: 4 vertices, edges left/right/bottom/top, interior."""
    ents = entities_of(cell, tree_origins)
    return ents.vertices + ents.edges + (ents.interior,)


class EntityDofStore:
    """DoF index arrays keyed by (entity, active FE index)."""

    def __init__(self, collection: ElementCollection, tree_origins):
        self.collection = collection
        self.tree_origins = tuple(tree_origins)
        self._arrays: Dict[Tuple[Hashable, int], List[int]] = {}
        self._layouts: Dict[CellKey, Tuple[Entity, ...]] = {}

    def __len__(self) -> int:
        return len(self._arrays)

    def __contains__(self, key) -> bool:
        return key in self._arrays

    def layout(self, cell: CellKey) -> Tuple[Entity, ...]:
        entities = self._layouts.get(cell)
        if entities is None:
            entities = self._layouts[cell] = cell_layout(cell, self.tree_origins)
        return entities

    def allocate(self, cell: CellKey, fe: int):
        for entity in self.layout(cell):
            key = (entity, fe)
            if key not in self._arrays:
                count = self.collection.dofs_per_entity(fe, entity_kind(entity))
                self._arrays[key] = [SENTINEL] * count

    def array(self, entity: Entity, fe: int) -> List[int]:
        return self._arrays[(entity, fe)]

    def entity_dofs(self, entity: Entity, fe: int, cell: Optional[CellKey] = None) -> Tuple[int, ...]:
        return tuple(self._arrays[(entity, fe)])

    def arrays_of(self, cell: CellKey, fe: int) -> Iterator[List[int]]:
        for entity in self.layout(cell):
            yield self._arrays[(entity, fe)]

    def cell_dofs(self, cell: CellKey, fe: int) -> List[int]:
        return [index for array in self.arrays_of(cell, fe) for index in array]

    def has_sentinel(self, cell: CellKey, fe: int) -> bool:
        return any(SENTINEL in array for array in self.arrays_of(cell, fe))

    def items(self):
        return self._arrays.items()


@dataclass(frozen=True)
class NumberCache:
    rank: int
    counts: Tuple[int, ...]
    relevant: frozenset = field(repr=False)

    @cached_property
    def starts(self) -> Tuple[int, ...]:
        starts, total = [], 0
        for n in self.counts:
            starts.append(total)
            total += n
        return tuple(starts)

    @property
    def n_global(self) -> int:
        return sum(self.counts)

    @property
    def n_owned(self) -> int:
        return self.counts[self.rank]

    def owned_range(self, q: Optional[int] = None) -> range:
        q = self.rank if q is None else q
        start = self.starts[q]
        return range(start, start + self.counts[q])

    def owner_of_index(self, index: int) -> int:
        if index == SENTINEL:
            raise SentinelIndexError()
        if not 0 <= index < self.n_global:
            raise ValueError(f"DoF index {index} outside [0, {self.n_global})")
        # last rank whose range starts at or before index; empty ranks share the next start
        return bisect.bisect_right(self.starts, index) - 1


class Distribution(NamedTuple):
    store: EntityDofStore
    numbers: NumberCache


def ownership_of(index: int, numbers: NumberCache) -> int:
    """Rank owning a DoF index: the one whose contiguous range contains it."""
    return numbers.owner_of_index(index)


def exchange_active_fe_indices(view: LocalView, owned_fe: Mapping[CellKey, int], comm: Communicator,
                               stage: str = STAGE_FE_EXCHANGE) -> ActiveFeMap:
    for cell in view.owned:
        if cell not in owned_fe:
            raise MissingActiveFeIndexError(cell)
    active_fe = {cell: owned_fe[cell] for cell in view.owned}

    outgoing = {q: [] for q in view.neighbor_ranks}
    for cell, ranks in view.ghost_targets.items():
        for q in ranks:
            outgoing[q].append((cell, (active_fe[cell],)))
    payloads = {q: encode_cell_records(records) for q, records in outgoing.items()}

    received = comm.neighbor_exchange(payloads, stage)
    for sender, data in sorted(received.items()):
        for cell, values in decode_cell_records(data):
            if view.ghosts.get(cell) != sender:
                raise StrayGhostDataError(view.rank, sender, cell)
            active_fe[cell] = values[0]

    for cell in view.ghosts:
        if cell not in active_fe:
            raise MissingActiveFeIndexError(cell)
    return active_fe


class _Enumeration:
    """Per-rank working state of one distribute_dofs call."""

    def __init__(self, view: LocalView, active_fe: Mapping[CellKey, int], collection: ElementCollection):
        self.view = view
        self.active_fe = active_fe
        self.collection = collection
        self.store = EntityDofStore(collection, view.tree_origins)
        # relevant cells adjacent to each entity, in Morton order
        self.incidence: Dict[Entity, List[CellKey]] = {}
        self.owned_entities: List[Entity] = []
        self._classes: Dict[Tuple[EntityKind, Tuple[int, ...]], List[List[Tuple[int, int]]]] = {}

    # stage 0
    def allocate(self):
        for cell in self.view.relevant:
            if cell not in self.active_fe:
                raise MissingActiveFeIndexError(cell)
            self.store.allocate(cell, self.active_fe[cell])
            for entity in self.store.layout(cell):
                self.incidence.setdefault(entity, []).append(cell)
        # each entity once, in first-touch order over owned cells
        seen = set()
        for cell in self.view.owned:
            for entity in self.store.layout(cell):
                if entity not in seen:
                    seen.add(entity)
                    self.owned_entities.append(entity)

    # stage 1
    def enumerate_owned(self) -> int:
        next_index = 0
        for cell in self.view.owned:
            for array in self.store.arrays_of(cell, self.active_fe[cell]):
                # an array is filled whole or not at all
                if array and array[0] == SENTINEL:
                    for slot in range(len(array)):
                        array[slot] = next_index
                        next_index += 1
        return next_index

    # stage 2
    def tie_break(self) -> int:
        rank = self.view.rank
        invalidated = 0
        # a lower-rank ghost carrying the same FE takes the tie
        for entity in self.owned_entities:
            lower = {
                self.active_fe[c]
                for c in self.incidence[entity]
                if c in self.view.ghosts and self.view.ghosts[c] < rank
            }
            for fe in lower:
                if (entity, fe) not in self.store:
                    continue
                array = self.store.array(entity, fe)
                # only arrays numbered on this rank are reset
                if self._present_on_owned(entity, fe) and array and array[0] != SENTINEL:
                    array[:] = [SENTINEL] * len(array)
                    invalidated += 1
        return invalidated

    def _present_on_owned(self, entity: Entity, fe: int) -> bool:
        return any(self.view.is_owned(c) and self.active_fe[c] == fe for c in self.incidence[entity])

    def fes_on(self, entity: Entity) -> Tuple[int, ...]:
        return tuple(sorted({self.active_fe[c] for c in self.incidence[entity]}))

    def classes(self, entity: Entity) -> List[List[Tuple[int, int]]]:
        """Groups of (fe, slot) on one entity that denote the same nodal functional."""
        kind = entity_kind(entity)
        fes = self.fes_on(entity)
        key = (kind, fes)
        cached = self._classes.get(key)
        if cached is None:
            cached = self._classes[key] = unification_classes(kind, fes, self.collection)
        return cached

    def class_owner(self, entity: Entity, members: List[Tuple[int, int]]) -> int:
        dominating = reduce(self.collection.dominating_index, {fe for fe, _ in members})
        return min(self.view.owner_of(c) for c in self.incidence[entity] if self.active_fe[c] == dominating)

    # stage 3
    def unify(self):
        rank = self.view.rank
        for entity in self.owned_entities:
            for members in self.classes(entity):
                local = [(fe, slot) for fe, slot in members if self._present_on_owned(entity, fe)]
                if not local:
                    continue
                # somebody else numbers this class
                if self.class_owner(entity, members) != rank:
                    for fe, slot in local:
                        self.store.array(entity, fe)[slot] = SENTINEL
                    continue
                if len(local) == 1:
                    continue
                valid = [self.store.array(entity, fe)[slot] for fe, slot in local]
                valid = [i for i in valid if i != SENTINEL]
                if not valid:
                    raise EnumerationError(f"rank {rank} owns a DoF class on {entity} without any index")
                # Keep the lowest index
                keep = min(valid)
                for fe, slot in local:
                    self.store.array(entity, fe)[slot] = keep

    # stage 4
    def renumber(self, comm: Communicator) -> int:
        valid = set()
        for entity in self.owned_entities:
            for fe in self.fes_on(entity):
                if self._present_on_owned(entity, fe):
                    valid.update(i for i in self.store.array(entity, fe) if i != SENTINEL)
        # indices still valid here are exactly the ones this rank owns
        n_owned = len(valid)
        shift = comm.exscan_sum(n_owned, STAGE_EXSCAN)
        # old local indices keep their relative order
        mapping = {old: shift + new for new, old in enumerate(sorted(valid))}
        for entity in self.owned_entities:
            for fe in self.fes_on(entity):
                if self._present_on_owned(entity, fe):
                    array = self.store.array(entity, fe)
                    array[:] = [mapping.get(i, SENTINEL) for i in array]
        return n_owned

    # stages 5 and 7
    def ghost_exchange(self, comm: Communicator, stage: str, only: Optional[Set[CellKey]] = None) -> Set[CellKey]:
        """Send owned ghost-layer cells; return the sent cells that still held sentinels."""
        outgoing = {q: [] for q in self.view.neighbor_ranks}
        incomplete = set()
        for cell, ranks in self.view.ghost_targets.items():
            if only is not None and cell not in only:
                continue
            fe = self.active_fe[cell]
            dofs = self.store.cell_dofs(cell, fe)
            # the second round only resends these
            if SENTINEL in dofs:
                incomplete.add(cell)
            for q in ranks:
                outgoing[q].append((cell, dofs))
        payloads = {q: encode_cell_records(records) for q, records in outgoing.items()}

        received = comm.neighbor_exchange(payloads, stage)
        for sender, data in sorted(received.items()):
            for cell, indices in decode_cell_records(data):
                # only the owner may send a cell
                if self.view.ghosts.get(cell) != sender:
                    raise StrayGhostDataError(self.view.rank, sender, cell)
                self._fill(cell, indices)
        return incomplete

    def _fill(self, cell: CellKey, indices: List[int]):
        fe = self.active_fe[cell]
        position = 0
        for array in self.store.arrays_of(cell, fe):
            for slot in range(len(array)):
                value = indices[position]
                position += 1
                # never overwrite a known index
                if value != SENTINEL and array[slot] == SENTINEL:
                    array[slot] = value
        if position != len(indices):
            raise EnumerationError(f"ghost record for {cell} has {len(indices)} indices, expected {position}")

    # stage 6
    def merge_interfaces(self):
        for entity in self.owned_entities:
            for members in self.classes(entity):
                if len(members) == 1:
                    continue
                values = {self.store.array(entity, fe)[slot] for fe, slot in members}
                values.discard(SENTINEL)
                if not values:
                    # nothing known yet, the second exchange will bring it
                    continue
                if len(values) > 1:
                    raise EnumerationError(f"conflicting indices {sorted(values)} on {entity}")
                (value,) = values
                for fe, slot in members:
                    self.store.array(entity, fe)[slot] = value

    def incomplete_cells(self) -> List[CellKey]:
        return [c for c in self.view.relevant if self.store.has_sentinel(c, self.active_fe[c])]

    def relevant_indices(self) -> frozenset:
        found = set()
        for cell in self.view.relevant:
            found.update(self.store.cell_dofs(cell, self.active_fe[cell]))
        return frozenset(found)


def unification_classes(kind: EntityKind, fes: Tuple[int, ...], collection: ElementCollection) -> List[List[Tuple[int, int]]]:
    members = [
        (fe, slot)
        for fe in fes
        for slot in range(collection.dofs_per_entity(fe, kind))
    ]
    parent = {m: m for m in members}

    def find(m):
        while parent[m] != m:
            parent[m] = parent[parent[m]]
            m = parent[m]
        return m

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    if kind is EntityKind.VERTEX:
        for fe in fes[1:]:
            union((fes[0], 0), (fe, 0))
    elif kind is EntityKind.EDGE:
        for i, fe_a in enumerate(fes):
            for fe_b in fes[i + 1:]:
                for slot_a, slot_b in collection.unification_pairs(fe_a, fe_b):
                    union((fe_a, slot_a), (fe_b, slot_b))

    groups: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for m in members:
        groups.setdefault(find(m), []).append(m)
    return [sorted(g) for _, g in sorted(groups.items())]


def distribute_dofs(view: LocalView, active_fe: Mapping[CellKey, int], collection: ElementCollection,
                    comm: Communicator) -> Distribution:
    work = _Enumeration(view, active_fe, collection)
    work.allocate()
    local = work.enumerate_owned()
    dropped = work.tie_break()
    work.unify()
    n_owned = work.renumber(comm)
    logger.debug("rank %d: %d stage-1 indices, %d arrays tie-broken, %d owned", view.rank, local, dropped, n_owned)

    incomplete = work.ghost_exchange(comm, STAGE_GHOSTS)
    work.merge_interfaces()
    work.ghost_exchange(comm, STAGE_GHOSTS_AGAIN, only=incomplete)

    missing = work.incomplete_cells()
    if missing:
        raise IncompleteGhostClosureError(view.rank, missing)

    counts = tuple(comm.allgather(n_owned, STAGE_COUNTS))
    numbers = NumberCache(view.rank, counts, work.relevant_indices())
    return Distribution(work.store, numbers)


class DistributionRun(NamedTuple):
    views: List[LocalView]
    active_fe: List[ActiveFeMap]
    results: List[Distribution]
    traffic: Dict[str, int]

    @property
    def n_global(self) -> int:
        return self.results[0].numbers.n_global


def _distribute_on_rank(comm: Communicator, views: List[LocalView], active_fe: Mapping[CellKey, int],
                        collection: ElementCollection):
    view = views[comm.rank]
    owned_fe = {cell: active_fe[cell] for cell in view.owned}
    relevant_fe = exchange_active_fe_indices(view, owned_fe, comm)
    return relevant_fe, distribute_dofs(view, relevant_fe, collection, comm)


def build_views(forest: Forest, owners: Mapping[CellKey, int], ranks: int) -> List[LocalView]:
    return [build_local_view(forest, owners.__getitem__, p) for p in range(ranks)]


def run_distribution(fabric: Fabric, forest: Forest, owners: Mapping[CellKey, int],
                     active_fe: Mapping[CellKey, int], collection: ElementCollection) -> DistributionRun:
    """Build the rank views, exchange FE indices and enumerate on every rank of the fabric."""
    views = build_views(forest, owners, fabric.size)
    fabric.clear_history()
    outcome = fabric.run(_distribute_on_rank, views, active_fe, collection)
    traffic = {
        stage: fabric.bytes_sent(stage)
        for stage in (STAGE_FE_EXCHANGE, STAGE_GHOSTS, STAGE_GHOSTS_AGAIN)
    }
    run = DistributionRun(views, [fe for fe, _ in outcome], [d for _, d in outcome], traffic)
    logger.info("enumerated %d DoFs on %d ranks (%s)", run.n_global, fabric.size,
                ", ".join(str(d.numbers.n_owned) for d in run.results))
    return run
