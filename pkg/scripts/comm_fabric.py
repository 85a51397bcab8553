"""
Deterministic in-process message passing for rank programs.

Every rank program runs on its own thread and talks to the others only through
the collective calls of its Communicator. Each call is a rendezvous: all ranks
deposit, all ranks read, and nothing is left behind when the call returns.
"""

import logging
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, NamedTuple, Protocol

from scripts.errors import FabricDeadlockError, FabricError, UnmatchedExchangeError

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


class Communicator(Protocol):
    """The operations the enumeration, transfer and driver code may use."""

    rank: int
    size: int

    def exscan_sum(self, value: int, stage: str = 'exscan') -> int: ...

    def allgather(self, value: Any, stage: str = 'allgather') -> List[Any]: ...

    def neighbor_exchange(self, payloads: Dict[int, bytes], stage: str) -> Dict[int, bytes]: ...

    def alltoall(self, payloads: Dict[int, bytes], stage: str) -> Dict[int, bytes]: ...

    def barrier(self, stage: str = 'barrier') -> None: ...


class Message(NamedTuple):
    round: int
    stage: str
    sender: int
    receiver: int
    nbytes: int


class _BrokenRendezvous(FabricDeadlockError):
    """Raised on ranks released by another rank's failure."""


class SimulatedCommunicator:
    def __init__(self, fabric: 'Fabric', rank: int):
        self.fabric = fabric
        self.rank = rank
        self.size = fabric.size
        self._round = 0

    def __repr__(self) -> str:
        return f"<SimulatedCommunicator rank={self.rank} size={self.size}>"

    def _collect(self, stage: str, value: Any) -> List[Any]:
        self._round += 1
        return self.fabric._collect(self.rank, self._round, stage, value)

    def barrier(self, stage: str = 'barrier') -> None:
        self._collect(stage, None)

    def exscan_sum(self, value: int, stage: str = 'exscan') -> int:
        value = int(value)
        if value < 0:
            raise ValueError(f"exscan_sum expects a non-negative value, got {value}")
        values = self._collect(stage, value)
        return sum(values[:self.rank])

    def allgather(self, value: Any, stage: str = 'allgather') -> List[Any]:
        return self._collect(stage, value)

    def _exchange(self, payloads: Dict[int, bytes], stage: str, symmetric: bool) -> Dict[int, bytes]:
        for dest in payloads:
            if not 0 <= dest < self.size:
                raise FabricError(f"rank {self.rank} addressed missing rank {dest}")
        outboxes = self._collect(stage, {dest: bytes(data) for dest, data in payloads.items()})
        received = {
            sender: box[self.rank]
            for sender, box in enumerate(outboxes)
            if self.rank in box
        }
        if symmetric and set(received) != set(payloads):
            raise UnmatchedExchangeError(self.rank, payloads.keys(), received.keys())
        self.fabric._record(self._round, stage, self.rank, payloads, received)
        return received

    def neighbor_exchange(self, payloads: Dict[int, bytes], stage: str) -> Dict[int, bytes]:
        """Symmetric point-to-point round: a rank hears from exactly the ranks it sent to."""
        return self._exchange(payloads, stage, symmetric=True)

    def alltoall(self, payloads: Dict[int, bytes], stage: str) -> Dict[int, bytes]:
        """Sparse point-to-point round without the symmetry requirement."""
        return self._exchange(payloads, stage, symmetric=False)


class Fabric:
    """P simulated ranks with bulk-synchronous collectives."""

    def __init__(self, size: int, timeout: float = DEFAULT_TIMEOUT):
        if size < 1:
            raise ValueError("a fabric needs at least one rank")
        self.size = size
        self.timeout = timeout
        self._lock = threading.Lock()
        self._messages: List[Message] = []
        self._received: Dict[str, int] = defaultdict(int)
        self._reset()

    def _reset(self):
        self._barrier = threading.Barrier(self.size, timeout=self.timeout)
        self._slots: List[Any] = [None] * self.size
        self._stages: List[Any] = [None] * self.size

    def _wait(self, rank: int, stage: str):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise _BrokenRendezvous(
                f"rank {rank} could not complete stage '{stage}': a rank failed or never arrived"
            ) from None

    def _collect(self, rank: int, round_: int, stage: str, value: Any) -> List[Any]:
        self._stages[rank] = (round_, stage)
        self._slots[rank] = value
        self._wait(rank, stage)
        stages = list(self._stages)
        values = list(self._slots)
        self._wait(rank, stage)
        if len(set(stages)) != 1:
            raise FabricDeadlockError(f"participation mismatch: ranks are at {stages}")
        return values

    def _record(self, round_: int, stage: str, sender: int, sent: Dict[int, bytes], received: Dict[int, bytes]):
        with self._lock:
            for dest, data in sent.items():
                self._messages.append(Message(round_, stage, sender, dest, len(data)))
            self._received[stage] += sum(len(data) for data in received.values())

    def communicator(self, rank: int) -> SimulatedCommunicator:
        return SimulatedCommunicator(self, rank)

    def run(self, program: Callable[..., Any], *args, **kwargs) -> List[Any]:
        """Run program(comm, *args, **kwargs) on every rank; return the per-rank results."""
        self._reset()

        def run_rank(rank: int):
            try:
                return program(self.communicator(rank), *args, **kwargs)
            except BaseException:
                self._barrier.abort()
                raise

        with ThreadPoolExecutor(max_workers=self.size, thread_name_prefix='rank') as pool:
            futures = [pool.submit(run_rank, rank) for rank in range(self.size)]
            errors = [f.exception() for f in futures]
        failures = [e for e in errors if e is not None]
        if failures:
            root = next((e for e in failures if not isinstance(e, _BrokenRendezvous)), failures[0])
            logger.debug("fabric run failed on %d ranks: %s", len(failures), root)
            raise root
        return [f.result() for f in futures]

    def history(self) -> List[Message]:
        with self._lock:
            return sorted(self._messages)

    def bytes_sent(self, stage: str) -> int:
        with self._lock:
            return sum(m.nbytes for m in self._messages if m.stage == stage)

    def bytes_received(self, stage: str) -> int:
        with self._lock:
            return self._received.get(stage, 0)

    def clear_history(self):
        with self._lock:
            self._messages.clear()
            self._received.clear()


def run_on_ranks(size: int, program: Callable[..., Any], *args, timeout: float = DEFAULT_TIMEOUT, **kwargs) -> List[Any]:
    return Fabric(size, timeout=timeout).run(program, *args, **kwargs)
