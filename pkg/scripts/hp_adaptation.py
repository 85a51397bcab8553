"""
hp adaptation on the L-shaped domain without a solver.

The Kelly/smoothness estimators are replaced by an analytic indicator built from
u = r^alpha sin(alpha theta): eta(K) = h_K * |grad u| at the corner closest to the
reentrant corner. Marking uses fixed fractions of the global indicator order.
"""

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from scripts.comm_fabric import Communicator
from scripts.dof_enumerator import exchange_active_fe_indices
from scripts.element_collection import ElementCollection
from scripts.errors import TransferError
from scripts.mesh_forest import L_MAX, CellKey, Flag, Forest, LocalView, global_box, refine_and_coarsen

logger = logging.getLogger(__name__)

ALPHA = Fraction(2, 3)
UNIT = float(1 << L_MAX)

STAGE_INDICATORS = 'adapt:indicators'
STAGE_SMOOTH = 'adapt:smooth'
STAGE_SMOOTH_DONE = 'adapt:smooth-done'

FE_INDEX = struct.Struct('<I')
SAMPLE_DTYPE = np.dtype('<f8')


@dataclass(frozen=True)
class ExactSolution:
    alpha: Fraction = ALPHA

    def __call__(self, x, y):
        """r^alpha sin(alpha theta) with theta in [0, 2pi) from the positive x axis."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        r = np.hypot(x, y)
        theta = np.mod(np.arctan2(y, x), 2 * np.pi)
        return r ** float(self.alpha) * np.sin(float(self.alpha) * theta)

    def gradient_norm(self, r: float) -> float:
        if r == 0:
            return math.inf
        alpha = float(self.alpha)
        return alpha * r ** (alpha - 1)


def physical_box(cell: CellKey, tree_origins) -> Tuple[float, float, float]:
    """Lower-left corner and size in physical coordinates; the forest grid starts at (-1, -1)."""
    gx, gy, size = global_box(cell, tree_origins)
    return gx / UNIT - 1.0, gy / UNIT - 1.0, size / UNIT


def corner_distance(cell: CellKey, tree_origins) -> float:
    x0, y0, h = physical_box(cell, tree_origins)
    return min(math.hypot(x, y) for x in (x0, x0 + h) for y in (y0, y0 + h))


def indicator(cell: CellKey, tree_origins, solution: ExactSolution = ExactSolution()) -> float:
    """h_K times the largest gradient magnitude over the cell's corners."""
    _, _, h = physical_box(cell, tree_origins)
    return h * solution.gradient_norm(corner_distance(cell, tree_origins))


class Decision(Enum):
    KEEP = 'keep'
    REFINE_H = 'refine-h'
    REFINE_P = 'refine-p'
    COARSEN_H = 'coarsen-h'
    COARSEN_P = 'coarsen-p'


@dataclass(frozen=True)
class MarkingPolicy:
    refine_fraction: float = 0.30
    coarsen_fraction: float = 0.03
    p_fraction: float = 0.90

    def __post_init__(self):
        for name in ('refine_fraction', 'coarsen_fraction', 'p_fraction'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.refine_fraction + self.coarsen_fraction > 1.0:
            raise ValueError("refine and coarsen fractions overlap")


class CellEstimate(NamedTuple):
    cell: CellKey
    eta: float
    r_min: float
    level: int
    degree: int


def _share(fraction: float, count: int) -> float:
    # float noise: 0.1 * 3 == 0.30000000000000004
    return round(fraction * count, 9)


def _split_h(marked: List[CellEstimate], policy: MarkingPolicy) -> set:
    """Cells of a marked set nearest the singularity: the h-adapted share."""
    h_count = math.ceil(_share(1.0 - policy.p_fraction, len(marked)))
    nearest = sorted(marked, key=lambda e: (e.r_min, e.cell))
    return {e.cell for e in nearest[:h_count]}


def mark_and_decide(estimates: Sequence[CellEstimate], collection: ElementCollection,
                    policy: MarkingPolicy = MarkingPolicy()) -> Dict[CellKey, Decision]:
    ordered = sorted(estimates, key=lambda e: (-e.eta, e.cell))
    n = len(ordered)
    n_refine = math.floor(_share(policy.refine_fraction, n))
    n_coarsen = min(math.floor(_share(policy.coarsen_fraction, n)), n - n_refine)
    refine = ordered[:n_refine]
    coarsen = ordered[n - n_coarsen:] if n_coarsen else []

    decisions = {e.cell: Decision.KEEP for e in ordered}
    refine_h = _split_h(refine, policy)
    for e in refine:
        if e.cell in refine_h or e.degree >= collection.max_degree:
            decisions[e.cell] = Decision.REFINE_H
        else:
            decisions[e.cell] = Decision.REFINE_P
    coarsen_h = _split_h(coarsen, policy)
    for e in coarsen:
        if e.cell in coarsen_h:
            decisions[e.cell] = Decision.COARSEN_H if e.level > 0 else Decision.KEEP
        else:
            decisions[e.cell] = Decision.COARSEN_P if e.degree > collection.min_degree else Decision.KEEP
    return decisions


def estimate_owned(view: LocalView, active_fe: Mapping[CellKey, int], collection: ElementCollection,
                   solution: ExactSolution = ExactSolution()) -> List[CellEstimate]:
    return [
        CellEstimate(
            cell,
            indicator(cell, view.tree_origins, solution),
            corner_distance(cell, view.tree_origins),
            cell.level,
            collection.degree(active_fe[cell]),
        )
        for cell in view.owned
    ]


def gather_and_mark(comm: Communicator, view: LocalView, active_fe: Mapping[CellKey, int],
                    collection: ElementCollection, policy: MarkingPolicy = MarkingPolicy()) -> Dict[CellKey, Decision]:
    """Every rank gathers all estimates, marks the global order and keeps its own decisions."""
    everything = [e for part in comm.allgather(estimate_owned(view, active_fe, collection), STAGE_INDICATORS) for e in part]
    decisions = mark_and_decide(everything, collection, policy)
    return {cell: decisions[cell] for cell in view.owned}


def apply_decisions(forest: Forest, active_fe: Mapping[CellKey, int], owners: Mapping[CellKey, int],
                    decisions: Mapping[CellKey, Decision], collection: ElementCollection):
    """
    Adapt the forest and carry degrees and owners to the new leaves.
    Children inherit their parent's degree and owner; a coarsened parent takes the
    largest child degree and the first child's owner.
    """
    flags = {}
    degrees = {}
    for cell in forest.leaves:
        decision = decisions.get(cell, Decision.KEEP)
        degree = collection.degree(active_fe[cell])
        if decision is Decision.REFINE_H:
            flags[cell] = Flag.REFINE
        elif decision is Decision.COARSEN_H:
            flags[cell] = Flag.COARSEN
        elif decision is Decision.REFINE_P:
            degree = min(degree + 1, collection.max_degree)
        elif decision is Decision.COARSEN_P:
            degree = max(degree - 1, collection.min_degree)
        degrees[cell] = degree

    adapted = refine_and_coarsen(forest, flags)

    new_fe, new_owners = {}, {}
    for leaf in adapted.leaves:
        source = leaf
        while source not in degrees and source.level > 0:
            source = source.parent()
        if source in degrees:
            new_fe[leaf] = collection.index_at_least(degrees[source])
            new_owners[leaf] = owners[source]
            continue
        children = leaf.children()
        new_fe[leaf] = collection.index_at_least(max(degrees[c] for c in children))
        new_owners[leaf] = owners[children[0]]
    return adapted, new_fe, new_owners


def smooth_degrees(comm: Communicator, view: LocalView, owned_fe: Mapping[CellKey, int],
                   collection: ElementCollection) -> Dict[CellKey, int]:
    """
    Raise degrees until edge neighbors differ by at most one. Jacobi sweeps: each
    sweep reads ghost degrees from the previous one, so the result does not depend
    on the partition.
    """
    current = {cell: owned_fe[cell] for cell in view.owned}
    sweeps = 0
    while True:
        relevant = exchange_active_fe_indices(view, current, comm, STAGE_SMOOTH)
        raised = {}
        for cell in view.owned:
            degree = collection.degree(relevant[cell])
            target = max(
                (collection.degree(relevant[other]) - 1 for group in view.edge_neighbors[cell] for other in group),
                default=degree,
            )
            if target > degree:
                raised[cell] = collection.index_at_least(target)
        current.update(raised)
        sweeps += 1
        if not any(comm.allgather(bool(raised), STAGE_SMOOTH_DONE)):
            break
    logger.debug("rank %d: degree smoothing converged after %d sweeps", view.rank, sweeps)
    return current


def encode_nodal_payload(cell: CellKey, fe: int, collection: ElementCollection, tree_origins,
                         solution: ExactSolution = ExactSolution()) -> bytes:
    """FE index followed by u at the (k+1)^2 support points, x fastest."""
    k = collection.degree(fe)
    x0, y0, h = physical_box(cell, tree_origins)
    steps = np.arange(k + 1, dtype=np.float64) * (h / k)
    xs, ys = np.meshgrid(x0 + steps, y0 + steps)
    values = solution(xs, ys).astype(SAMPLE_DTYPE)
    return FE_INDEX.pack(fe) + values.tobytes()


def decode_nodal_payload(payload: bytes, collection: ElementCollection) -> Tuple[int, np.ndarray]:
    if len(payload) < FE_INDEX.size:
        raise TransferError(f"payload of {len(payload)} bytes has no FE index")
    (fe,) = FE_INDEX.unpack_from(payload, 0)
    k = collection.degree(fe)
    expected = FE_INDEX.size + (k + 1) ** 2 * SAMPLE_DTYPE.itemsize
    if len(payload) != expected:
        raise TransferError(f"payload for Q{k} holds {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype=SAMPLE_DTYPE, offset=FE_INDEX.size).reshape(k + 1, k + 1)
    return fe, values
