import numpy as np
import pytest

from scripts.partitioner import (
    WeightPolicy,
    cell_weight,
    cell_weights,
    partition_by_weight,
    rank_weights,
    weight_imbalance,
)


def test_default_weights_of_q2_and_q4_cells():
    assert cell_weight(9) == 65
    assert cell_weight(25) == 453
    assert cell_weights([9, 25, 25, 9]).tolist() == [65, 453, 453, 65]


def test_unit_exponent_weighs_by_dof_count():
    policy = WeightPolicy(exponent=1.0)
    assert cell_weights([1, 9, 16], policy).tolist() == [1, 9, 16]
    assert cell_weight(4, WeightPolicy(exponent=1.0, scale=3)) == 12


def test_checkerboard_splits_between_the_heavy_cells():
    assert partition_by_weight([65, 453, 453, 65], 2).tolist() == [0, 0, 1, 1]


def test_assignment_is_monotone_and_may_leave_ranks_empty():
    assignment = partition_by_weight([100, 1], 4)
    assert assignment.tolist() == [0, 3]
    rng = np.random.default_rng(7)
    weights = rng.integers(1, 500, size=200)
    assignment = partition_by_weight(weights, 6)
    assert np.all(np.diff(assignment) >= 0)
    assert assignment.min() >= 0 and assignment.max() < 6


def test_each_rank_stays_within_one_cell_of_the_average():
    rng = np.random.default_rng(3)
    weights = rng.integers(1, 400, size=300)
    ranks = 5
    per_rank = rank_weights(weights, partition_by_weight(weights, ranks), ranks)
    assert per_rank.sum() == weights.sum()
    assert per_rank.max() <= weights.sum() / ranks + weights.max()


def test_empty_input_and_invalid_arguments():
    assert partition_by_weight([], 3).tolist() == []
    with pytest.raises(ValueError):
        partition_by_weight([1, 2], 0)
    with pytest.raises(ValueError):
        partition_by_weight([0, 2], 2)
    with pytest.raises(ValueError):
        WeightPolicy(exponent=0)
    with pytest.raises(ValueError):
        cell_weight(0)


def test_weight_imbalance():
    assert weight_imbalance([1, 1, 1, 1], [0, 0, 1, 1], 2) == 1.0
    assert weight_imbalance([3, 1], [0, 1], 2) == pytest.approx(1.5)
