"""
Distributed 2D forest of quadtrees.

Leaves are identified by CellKey (tree, level, anchor at depth L_MAX) and kept
in Morton order. The module provides 2:1 balanced refinement/coarsening, canonical
vertex/edge keys, and per-rank views with a vertex-inclusive ghost layer.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, total_ordering
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

from scripts.errors import DepthExceededError

logger = logging.getLogger(__name__)

L_MAX = 30

Point = Tuple[int, int]


def _split_bits(value: int) -> int:
    """Spread the low 32 bits of value onto the even bit positions."""
    value &= 0xFFFFFFFF
    value = (value | (value << 16)) & 0x0000FFFF0000FFFF
    value = (value | (value << 8)) & 0x00FF00FF00FF00FF
    value = (value | (value << 4)) & 0x0F0F0F0F0F0F0F0F
    value = (value | (value << 2)) & 0x3333333333333333
    value = (value | (value << 1)) & 0x5555555555555555
    return value


def morton_code(x: int, y: int) -> int:
    """Interleave x (low bits) and y into a Morton code."""
    return _split_bits(x) | (_split_bits(y) << 1)


@total_ordering
@dataclass(frozen=True)
class CellKey:
    """A quadtree leaf: tree index, refinement level and lower-left anchor at depth L_MAX."""

    tree: int
    level: int
    anchor: Point
    morton: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.level <= L_MAX:
            raise ValueError(f"level {self.level} outside [0, {L_MAX}]")
        x, y = self.anchor
        size = 1 << (L_MAX - self.level)
        if x < 0 or y < 0 or x % size or y % size or x >= (1 << L_MAX) or y >= (1 << L_MAX):
            raise ValueError(f"anchor {self.anchor} is not aligned to level {self.level}")
        object.__setattr__(self, 'morton', morton_code(x, y))

    @property
    def size(self) -> int:
        return 1 << (L_MAX - self.level)

    def sort_key(self) -> Tuple[int, int, int]:
        return (self.tree, self.morton, self.level)

    def __lt__(self, other):
        if not isinstance(other, CellKey):
            return NotImplemented
        return self.sort_key() < other.sort_key()

    def parent(self) -> 'CellKey':
        if self.level == 0:
            raise ValueError(f"{self} is a tree root")
        size = self.size << 1
        x, y = self.anchor
        return CellKey(self.tree, self.level - 1, (x - x % size, y - y % size))

    def children(self) -> Tuple['CellKey', ...]:
        half = self.size >> 1
        x, y = self.anchor
        level = self.level + 1
        return (
            CellKey(self.tree, level, (x, y)),
            CellKey(self.tree, level, (x + half, y)),
            CellKey(self.tree, level, (x, y + half)),
            CellKey(self.tree, level, (x + half, y + half)),
        )

    def is_ancestor_of(self, other: 'CellKey') -> bool:
        if other.tree != self.tree or other.level <= self.level:
            return False
        x, y = self.anchor
        ox, oy = other.anchor
        return x <= ox < x + self.size and y <= oy < y + self.size


class EntityKind(Enum):
    VERTEX = 'vertex'
    EDGE = 'edge'
    INTERIOR = 'interior'


@dataclass(frozen=True)
class EntityKey:
    """A vertex or edge in global integer coordinates at depth L_MAX."""

    kind: EntityKind
    endpoints: Tuple[Point, ...]

    def __post_init__(self):
        if self.kind is EntityKind.VERTEX:
            if len(self.endpoints) != 1:
                raise ValueError("a vertex has exactly one endpoint")
        elif self.kind is EntityKind.EDGE:
            if len(self.endpoints) != 2 or self.endpoints[0] >= self.endpoints[1]:
                raise ValueError(f"edge endpoints must be two sorted points, got {self.endpoints}")
        else:
            raise ValueError("only vertices and edges have entity keys")

    @classmethod
    def vertex(cls, point: Point) -> 'EntityKey':
        return cls(EntityKind.VERTEX, (point,))

    @classmethod
    def edge(cls, a: Point, b: Point) -> 'EntityKey':
        return cls(EntityKind.EDGE, (a, b) if a < b else (b, a))


class CellEntities(NamedTuple):
    vertices: Tuple[EntityKey, EntityKey, EntityKey, EntityKey]
    edges: Tuple[EntityKey, EntityKey, EntityKey, EntityKey]
    interior: CellKey


# edge numbering: 0 left, 1 right, 2 bottom, 3 top
OPPOSITE_EDGE = (1, 0, 3, 2)


def global_box(cell: CellKey, tree_origins: Tuple[Point, ...]) -> Tuple[int, int, int]:
    ox, oy = tree_origins[cell.tree]
    x, y = cell.anchor
    return ((ox << L_MAX) + x, (oy << L_MAX) + y, cell.size)


def entities_of(cell: CellKey, tree_origins: Tuple[Point, ...] = ((0, 0),)) -> CellEntities:
    """Canonical vertex and edge keys of a cell, plus the cell itself as interior."""
    x0, y0, s = global_box(cell, tree_origins)
    x1, y1 = x0 + s, y0 + s
    p00, p10, p01, p11 = (x0, y0), (x1, y0), (x0, y1), (x1, y1)
    vertices = (EntityKey.vertex(p00), EntityKey.vertex(p10), EntityKey.vertex(p01), EntityKey.vertex(p11))
    edges = (
        EntityKey(EntityKind.EDGE, (p00, p01)),
        EntityKey(EntityKind.EDGE, (p10, p11)),
        EntityKey(EntityKind.EDGE, (p00, p10)),
        EntityKey(EntityKind.EDGE, (p01, p11)),
    )
    return CellEntities(vertices, edges, cell)


class Flag(Enum):
    KEEP = 'keep'
    REFINE = 'refine'
    COARSEN = 'coarsen'


class CellAdjacency(NamedTuple):
    edges: Tuple[Tuple[CellKey, ...], ...]
    touching: Tuple[CellKey, ...]


@dataclass(frozen=True)
class Forest:
    leaves: Tuple[CellKey, ...]
    tree_origins: Tuple[Point, ...]
    max_level: int = L_MAX

    @classmethod
    def uniform(cls, tree_origins: Iterable[Point], level: int = 0, max_level: int = L_MAX) -> 'Forest':
        origins = tuple(tuple(o) for o in tree_origins)
        if level > max_level:
            raise DepthExceededError(f"uniform level {level}", max_level)
        step = 1 << (L_MAX - level)
        count = 1 << level
        leaves = [
            CellKey(tree, level, (i * step, j * step))
            for tree in range(len(origins))
            for j in range(count)
            for i in range(count)
        ]
        return cls(tuple(sorted(leaves, key=CellKey.sort_key)), origins, max_level)

    def with_leaves(self, leaves: Iterable[CellKey]) -> 'Forest':
        return Forest(tuple(sorted(leaves, key=CellKey.sort_key)), self.tree_origins, self.max_level)

    @cached_property
    def _lookup(self) -> Dict[Tuple[int, int, int, int], CellKey]:
        return {(c.tree, c.level, c.anchor[0], c.anchor[1]): c for c in self.leaves}

    @cached_property
    def _trees_at(self) -> Dict[Point, int]:
        return {origin: tree for tree, origin in enumerate(self.tree_origins)}

    @cached_property
    def depth(self) -> int:
        return max((c.level for c in self.leaves), default=0)

    def box(self, cell: CellKey) -> Tuple[int, int, int]:
        return global_box(cell, self.tree_origins)

    def entities_of(self, cell: CellKey) -> CellEntities:
        return entities_of(cell, self.tree_origins)

    def find_leaf(self, gx: int, gy: int) -> Optional[CellKey]:
        """Leaf containing the unit square whose lower-left corner is (gx, gy), if any."""
        if gx < 0 or gy < 0:
            return None
        tree = self._trees_at.get((gx >> L_MAX, gy >> L_MAX))
        if tree is None:
            return None
        mask = (1 << L_MAX) - 1
        ax, ay = gx & mask, gy & mask
        lookup = self._lookup
        for level in range(self.depth + 1):
            size = 1 << (L_MAX - level)
            cell = lookup.get((tree, level, ax - ax % size, ay - ay % size))
            if cell is not None:
                return cell
        return None

    def edge_neighbors(self, cell: CellKey, edge: int) -> Tuple[CellKey, ...]:
        """Leaves across one edge, ordered along the edge's canonical direction."""
        gx, gy, s = self.box(cell)
        found = []
        if edge < 2:
            x = gx - 1 if edge == 0 else gx + s
            pos, end = gy, gy + s
            while pos < end:
                other = self.find_leaf(x, pos)
                if other is None:
                    break
                found.append(other)
                _, oy, os_ = self.box(other)
                pos = oy + os_
        else:
            y = gy - 1 if edge == 2 else gy + s
            pos, end = gx, gx + s
            while pos < end:
                other = self.find_leaf(pos, y)
                if other is None:
                    break
                found.append(other)
                ox, _, os_ = self.box(other)
                pos = ox + os_
        return tuple(found)

    def _touching(self, cell: CellKey, edges: Tuple[Tuple[CellKey, ...], ...]) -> Tuple[CellKey, ...]:
        gx, gy, s = self.box(cell)
        found = {other for across in edges for other in across}
        for cx, cy in ((gx, gy), (gx + s, gy), (gx, gy + s), (gx + s, gy + s)):
            for ux, uy in ((cx - 1, cy - 1), (cx, cy - 1), (cx - 1, cy), (cx, cy)):
                other = self.find_leaf(ux, uy)
                if other is not None and other != cell:
                    found.add(other)
        return tuple(sorted(found))

    @cached_property
    def adjacency(self) -> Dict[CellKey, CellAdjacency]:
        table = {}
        for cell in self.leaves:
            edges = tuple(self.edge_neighbors(cell, e) for e in range(4))
            table[cell] = CellAdjacency(edges, self._touching(cell, edges))
        logger.debug("built adjacency for %d leaves", len(table))
        return table

    def is_balanced(self) -> bool:
        for cell, adj in self.adjacency.items():
            for across in adj.edges:
                if any(abs(other.level - cell.level) > 1 for other in across):
                    return False
        return True

    def covered_area(self) -> int:
        """Sum of leaf areas in units of the finest possible cell."""
        return sum(4 ** (L_MAX - c.level) for c in self.leaves)


def balance(forest: Forest) -> Forest:
    """Refine coarse leaves until edge neighbors differ by at most one level."""
    current = forest
    while True:
        to_refine = set()
        for cell in current.leaves:
            if cell.level < 2:
                continue
            # one sample per side; a too-coarse neighbor covers the whole side
            gx, gy, s = current.box(cell)
            for ux, uy in ((gx - 1, gy), (gx + s, gy), (gx, gy - 1), (gx, gy + s)):
                other = current.find_leaf(ux, uy)
                if other is not None and other.level < cell.level - 1:
                    to_refine.add(other)
        if not to_refine:
            return current
        leaves = []
        for cell in current.leaves:
            if cell in to_refine:
                if cell.level + 1 > current.max_level:
                    raise DepthExceededError(cell, current.max_level)
                leaves.extend(cell.children())
            else:
                leaves.append(cell)
        logger.debug("balance pass refined %d leaves", len(to_refine))
        current = current.with_leaves(leaves)


def refine_and_coarsen(forest: Forest, flags: Mapping[CellKey, Flag]) -> Forest:
    """
    Apply refine/coarsen flags and restore 2:1 balance.
    Balance may suppress coarsening but never undoes a refinement.
    """
    # refinement first, then balance
    leaves = []
    for cell in forest.leaves:
        if flags.get(cell, Flag.KEEP) is Flag.REFINE:
            if cell.level + 1 > forest.max_level:
                raise DepthExceededError(cell, forest.max_level)
            leaves.extend(cell.children())
        else:
            leaves.append(cell)
    refined = balance(forest.with_leaves(leaves))

    # coarsening flags are read on the old leaves
    siblings: Dict[CellKey, List[CellKey]] = {}
    for cell in forest.leaves:
        if cell.level > 0 and flags.get(cell, Flag.KEEP) is Flag.COARSEN:
            siblings.setdefault(cell.parent(), []).append(cell)

    current = set(refined.leaves)
    coarsened = []
    for parent in sorted(siblings):
        children = parent.children()
        # all four children flagged and none refined by balance
        if len(siblings[parent]) != 4 or not all(child in current for child in children):
            continue
        # the parent must not end up next to a leaf two levels finer
        if any(
            other.level > child.level
            for child in children
            for across in refined.adjacency[child].edges
            for other in across
        ):
            continue
        coarsened.append(parent)
    for parent in coarsened:
        current.difference_update(parent.children())
        current.add(parent)
    if coarsened:
        logger.debug("coarsened %d sibling groups", len(coarsened))
    return refined.with_leaves(current)


class HangingEdge(NamedTuple):
    coarse: CellKey
    edge: int
    fine: Tuple[CellKey, CellKey]


class RegularEdge(NamedTuple):
    cell: CellKey
    edge: int
    neighbor: CellKey


@dataclass(frozen=True)
class LocalView:
    rank: int
    owned: Tuple[CellKey, ...]
    ghosts: Dict[CellKey, int]
    edge_neighbors: Dict[CellKey, Tuple[Tuple[CellKey, ...], ...]]
    vertex_neighbors: Dict[CellKey, Tuple[CellKey, ...]]
    hanging_edges: Tuple[HangingEdge, ...]
    regular_edges: Tuple[RegularEdge, ...]
    tree_origins: Tuple[Point, ...]

    @cached_property
    def owned_set(self) -> frozenset:
        return frozenset(self.owned)

    @cached_property
    def relevant(self) -> Tuple[CellKey, ...]:
        return tuple(sorted(self.owned_set.union(self.ghosts)))

    @cached_property
    def neighbor_ranks(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.ghosts.values())))

    def owner_of(self, cell: CellKey) -> int:
        if cell in self.owned_set:
            return self.rank
        return self.ghosts[cell]

    def is_owned(self, cell: CellKey) -> bool:
        return cell in self.owned_set

    def entities_of(self, cell: CellKey) -> CellEntities:
        return entities_of(cell, self.tree_origins)

    def touching(self, cell: CellKey) -> Tuple[CellKey, ...]:
        across = {other for group in self.edge_neighbors[cell] for other in group}
        return tuple(sorted(across.union(self.vertex_neighbors[cell])))

    @cached_property
    def ghost_targets(self) -> Dict[CellKey, Tuple[int, ...]]:
        """For each owned cell, the ranks on which it is a ghost."""
        targets = {}
        for cell in self.owned:
            ranks = {self.ghosts[other] for other in self.touching(cell) if other in self.ghosts}
            if ranks:
                targets[cell] = tuple(sorted(ranks))
        return targets


def build_local_view(forest: Forest, owner_of: Callable[[CellKey], int], p: int) -> LocalView:
    adjacency = forest.adjacency
    owned = tuple(c for c in forest.leaves if owner_of(c) == p)
    ghosts: Dict[CellKey, int] = {}
    edge_neighbors = {}
    vertex_neighbors = {}
    hanging = {}
    regular = {}
    for cell in owned:
        adj = adjacency[cell]
        for other in adj.touching:
            q = owner_of(other)
            if q != p:
                ghosts[other] = q
        edge_neighbors[cell] = adj.edges
        across = {other for group in adj.edges for other in group}
        vertex_neighbors[cell] = tuple(c for c in adj.touching if c not in across)
        for e, group in enumerate(adj.edges):
            if len(group) == 2:
                hanging[(cell, e)] = HangingEdge(cell, e, (group[0], group[1]))
            elif len(group) == 1 and group[0].level == cell.level - 1:
                coarse = group[0]
                opposite = OPPOSITE_EDGE[e]
                fine = adjacency[coarse].edges[opposite]
                hanging[(coarse, opposite)] = HangingEdge(coarse, opposite, (fine[0], fine[1]))
            elif len(group) == 1 and group[0].level == cell.level:
                other = group[0]
                key = (cell, e) if cell < other else (other, OPPOSITE_EDGE[e])
                regular[key] = RegularEdge(key[0], key[1], other if key[0] == cell else cell)
    view = LocalView(
        rank=p,
        owned=owned,
        ghosts=dict(sorted(ghosts.items())),
        edge_neighbors=edge_neighbors,
        vertex_neighbors=vertex_neighbors,
        hanging_edges=tuple(hanging[k] for k in sorted(hanging)),
        regular_edges=tuple(regular[k] for k in sorted(regular)),
        tree_origins=forest.tree_origins,
    )
    logger.debug("rank %d: %d owned, %d ghosts", p, len(owned), len(ghosts))
    return view


L_SHAPE_TREES = ((0, 0), (0, 1), (1, 1))


def l_shaped_forest(initial_refines: int = 0) -> Forest:
    """Three unit trees forming (-1,1)^2 minus the lower right quadrant."""
    return Forest.uniform(L_SHAPE_TREES, level=initial_refines)


def format_mesh_dump(forest: Forest, degrees: Mapping[CellKey, int], owners: Mapping[CellKey, int]) -> str:
    lines = [
        f"{c.tree} {c.level} {c.anchor[0]} {c.anchor[1]} {degrees[c]} {owners[c]}"
        for c in forest.leaves
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def write_mesh_dump(path: Path, forest: Forest, degrees: Mapping[CellKey, int], owners: Mapping[CellKey, int]):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(format_mesh_dump(forest, degrees, owners))
