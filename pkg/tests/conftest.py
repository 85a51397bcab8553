import random

import numpy as np
import pytest

from scripts.comm_fabric import run_on_ranks
from scripts.dof_enumerator import build_views
from scripts.element_collection import ElementCollection
from scripts.hp_adaptation import smooth_degrees
from scripts.mesh_forest import Flag, Forest, l_shaped_forest, refine_and_coarsen
from scripts.partitioner import partition_by_weight
from scripts.sequential_oracle import cell_anchors


@pytest.fixture
def collection():
    return ElementCollection.from_range(2, 7)


def with_degrees(forest, collection, degrees):
    return {cell: collection.index_of_degree(d) for cell, d in zip(forest.leaves, degrees)}


@pytest.fixture
def fig1(collection):
    """Q2 next to Q4, one cell per tree."""
    forest = Forest.uniform(((0, 0), (1, 0)), level=0)
    return forest, with_degrees(forest, collection, [2, 4])


@pytest.fixture
def fig2(collection):
    """One tree refined once, Q2/Q4 checkerboard in Morton order."""
    forest = Forest.uniform(((0, 0),), level=1)
    return forest, with_degrees(forest, collection, [2, 4, 4, 2])


def random_hp_mesh(seed, collection, refinements=2, degrees=(2, 5)):
    rng = random.Random(seed)
    forest = l_shaped_forest(1)
    for round_ in range(refinements):
        flags = {c: Flag.REFINE for c in forest.leaves if rng.random() < 0.3}
        if round_ == 0:
            flags[forest.leaves[0]] = Flag.REFINE
        forest = refine_and_coarsen(forest, flags)
    active_fe = {c: collection.index_of_degree(rng.randint(*degrees)) for c in forest.leaves}
    return forest, active_fe


def smoothed_hp_mesh(seed, collection):
    """3 to 6 random refinement rounds, degrees drawn from 2..7, then degree smoothing."""
    rng = random.Random(seed)
    forest = l_shaped_forest(1)
    for _ in range(rng.randint(3, 6)):
        flags = {c: Flag.REFINE for c in forest.leaves if rng.random() < 0.2}
        flags[rng.choice(forest.leaves)] = Flag.REFINE
        forest = refine_and_coarsen(forest, flags)
    drawn = {c: collection.index_of_degree(rng.randint(2, 7)) for c in forest.leaves}
    (view,) = build_views(forest, {c: 0 for c in forest.leaves}, 1)
    (active_fe,) = run_on_ranks(1, smooth_degrees, view, drawn, collection)
    return forest, active_fe


def contiguous_owners(forest, ranks):
    assignment = partition_by_weight(np.ones(len(forest.leaves), dtype=np.int64), ranks)
    return {cell: int(rank) for cell, rank in zip(forest.leaves, assignment)}


def scattered_owners(forest, ranks, seed):
    rng = random.Random(seed)
    return {cell: rng.randrange(ranks) for cell in forest.leaves}


def anchor_map(run, collection):
    """Anchor -> index over all ranks; fails if two ranks disagree on a shared DoF."""
    seen = {}
    for view, active_fe, result in zip(run.views, run.active_fe, run.results):
        for cell in view.relevant:
            fe = active_fe[cell]
            dofs = result.store.cell_dofs(cell, fe)
            anchors = [a for _, a in cell_anchors(cell, fe, collection, view.tree_origins)]
            for index, anchor in zip(dofs, anchors):
                assert seen.setdefault(anchor, index) == index, f"ranks disagree on {anchor}"
    return seen
