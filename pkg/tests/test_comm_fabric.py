import pytest

from scripts.comm_fabric import Fabric, run_on_ranks
from scripts.errors import FabricDeadlockError, FabricError, UnmatchedExchangeError


def test_exscan_and_allgather():
    def program(comm):
        return comm.exscan_sum(comm.rank + 1), comm.allgather(comm.rank * 10)

    results = run_on_ranks(4, program)
    assert [shift for shift, _ in results] == [0, 1, 3, 6]
    assert all(gathered == [0, 10, 20, 30] for _, gathered in results)


def test_neighbor_exchange_ring_records_traffic():
    fabric = Fabric(3)

    def program(comm):
        left, right = (comm.rank - 1) % comm.size, (comm.rank + 1) % comm.size
        return comm.neighbor_exchange({left: b'L' * comm.rank, right: b'RR'}, 'ring')

    results = fabric.run(program)
    assert results[0] == {1: b'L', 2: b'RR'}
    assert results[2] == {0: b'', 1: b'RR'}
    assert fabric.bytes_sent('ring') == (0 + 1 + 2) + 3 * 2
    assert fabric.bytes_received('ring') == fabric.bytes_sent('ring')
    assert {m.stage for m in fabric.history()} == {'ring'}
    fabric.clear_history()
    assert fabric.history() == []


def test_alltoall_allows_one_sided_messages():
    def program(comm):
        payloads = {1: b'x'} if comm.rank == 0 else {}
        return comm.alltoall(payloads, 'one-way')

    assert run_on_ranks(2, program) == [{}, {0: b'x'}]


def test_unmatched_neighbor_exchange():
    def program(comm):
        payloads = {1: b'x'} if comm.rank == 0 else {}
        return comm.neighbor_exchange(payloads, 'lopsided')

    with pytest.raises(UnmatchedExchangeError, match="unmatched exchange"):
        run_on_ranks(2, program)


def test_ranks_at_different_stages_deadlock():
    def program(comm):
        return comm.allgather(comm.rank, f"stage-{comm.rank}")

    with pytest.raises(FabricDeadlockError, match="participation mismatch"):
        run_on_ranks(2, program)


def test_missing_rank_times_out():
    def program(comm):
        if comm.rank == 1:
            return None
        return comm.allgather(comm.rank, 'lonely')

    with pytest.raises(FabricDeadlockError):
        run_on_ranks(2, program, timeout=0.2)


def test_root_cause_is_raised_instead_of_released_ranks():
    def program(comm):
        if comm.rank == 1:
            raise KeyError('boom')
        return comm.barrier('wait')

    with pytest.raises(KeyError, match='boom'):
        run_on_ranks(3, program)


def test_addressing_a_missing_rank():
    def program(comm):
        return comm.alltoall({5: b''}, 'nowhere')

    with pytest.raises(FabricError, match="missing rank 5"):
        run_on_ranks(2, program)


def test_fabric_needs_a_rank():
    with pytest.raises(ValueError):
        Fabric(0)


def test_fabric_is_reusable_after_failure():
    fabric = Fabric(2, timeout=0.2)

    def failing(comm):
        raise RuntimeError('first run')

    with pytest.raises(RuntimeError):
        fabric.run(failing)
    assert fabric.run(lambda comm: comm.exscan_sum(1)) == [0, 1]
