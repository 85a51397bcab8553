"""
Reference Lagrange elements Q_k and the collection the active FE index points into.
Support points are exact rationals so unification is an equality test.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import FrozenSet, Iterable, Tuple

from scripts.errors import UnknownElementError
from scripts.mesh_forest import EntityKind

MIN_DEGREE = 1
MAX_DEGREE = 12


@dataclass(frozen=True)
class LagrangeElement:
    degree: int

    def __post_init__(self):
        if not MIN_DEGREE <= self.degree <= MAX_DEGREE:
            raise ValueError(f"degree {self.degree} outside [{MIN_DEGREE}, {MAX_DEGREE}]")

    @property
    def name(self) -> str:
        return f"Q{self.degree}"

    @property
    def dofs_per_vertex(self) -> int:
        return 1

    @property
    def dofs_per_edge(self) -> int:
        return self.degree - 1

    @property
    def dofs_per_interior(self) -> int:
        return (self.degree - 1) ** 2

    @property
    def dofs_per_cell(self) -> int:
        return (self.degree + 1) ** 2

    @cached_property
    def edge_support_points(self) -> Tuple[Fraction, ...]:
        return tuple(Fraction(j, self.degree) for j in range(1, self.degree))

    def trace_nodes(self) -> Tuple[Fraction, ...]:
        """Nodes of the 1D trace in DoF order: both vertices, then the edge points."""
        return (Fraction(0), Fraction(1)) + self.edge_support_points


class ElementCollection:
    """Ordered Q_k elements; the active FE index is the position in this list."""

    def __init__(self, degrees: Iterable[int]):
        self.elements = tuple(LagrangeElement(k) for k in degrees)
        if not self.elements:
            raise ValueError("an element collection needs at least one element")
        for a, b in zip(self.elements, self.elements[1:]):
            if b.degree <= a.degree:
                raise ValueError("degrees must be strictly increasing")
        self._index_of_degree = {e.degree: i for i, e in enumerate(self.elements)}

    @classmethod
    def from_range(cls, low: int, high: int) -> 'ElementCollection':
        return cls(range(low, high + 1))

    def __len__(self) -> int:
        return len(self.elements)

    def __repr__(self) -> str:
        return f"ElementCollection({[e.degree for e in self.elements]})"

    def __getitem__(self, index: int) -> LagrangeElement:
        if not 0 <= index < len(self.elements):
            raise UnknownElementError(index, len(self.elements))
        return self.elements[index]

    @property
    def min_degree(self) -> int:
        return self.elements[0].degree

    @property
    def max_degree(self) -> int:
        return self.elements[-1].degree

    def degree(self, index: int) -> int:
        return self[index].degree

    def index_of_degree(self, degree: int) -> int:
        try:
            return self._index_of_degree[degree]
        except KeyError:
            raise UnknownElementError(degree, len(self.elements)) from None

    def dofs_per_entity(self, index: int, kind: EntityKind) -> int:
        element = self[index]
        if kind is EntityKind.VERTEX:
            return element.dofs_per_vertex
        if kind is EntityKind.EDGE:
            return element.dofs_per_edge
        return element.dofs_per_interior

    def dofs_per_cell(self, index: int) -> int:
        return self[index].dofs_per_cell

    def unification_pairs(self, index_a: int, index_b: int) -> FrozenSet[Tuple[int, int]]:
        """Edge slot pairs (slot in A, slot in B) whose support points coincide."""
        return _coincident_slots(self[index_a].degree, self[index_b].degree)

    def dominating_index(self, index_a: int, index_b: int) -> int:
        """The element whose space is common to both: the lower degree."""
        return index_a if self[index_a].degree <= self[index_b].degree else index_b

    def index_at_least(self, degree: int) -> int:
        """Index of the lowest element of at least the given degree, capped at the highest."""
        for index, element in enumerate(self.elements):
            if element.degree >= degree:
                return index
        return len(self.elements) - 1


@lru_cache(maxsize=None)
def _coincident_slots(degree_a: int, degree_b: int) -> FrozenSet[Tuple[int, int]]:
    points_b = {Fraction(j, degree_b): j - 1 for j in range(1, degree_b)}
    pairs = set()
    for i in range(1, degree_a):
        slot_b = points_b.get(Fraction(i, degree_a))
        if slot_b is not None:
            pairs.add((i - 1, slot_b))
    return frozenset(pairs)
