"""
Exception types shared by the hp DoF scripts.
Every error raised on purpose derives from HpError so callers can catch one type.
"""


class HpError(Exception):
    """Base class for all errors raised by the hp DoF scripts."""


class ConfigError(HpError):
    pass


class DepthExceededError(HpError):
    def __init__(self, cell, max_level: int):
        super().__init__(f"depth exceeded: cannot refine {cell} beyond level {max_level}")
        self.cell = cell
        self.max_level = max_level


class UnknownElementError(HpError):
    def __init__(self, index: int, count: int):
        super().__init__(f"unknown active FE index {index} (collection has {count} elements)")
        self.index = index


class FabricError(HpError):
    pass


class UnmatchedExchangeError(FabricError):
    def __init__(self, rank: int, sent_to, received_from):
        super().__init__(
            f"unmatched exchange on rank {rank}: sent to {sorted(sent_to)}, "
            f"received from {sorted(received_from)}"
        )


class FabricDeadlockError(FabricError):
    pass


class EnumerationError(HpError):
    pass


class MissingActiveFeIndexError(EnumerationError):
    def __init__(self, cell):
        super().__init__(f"no active FE index for owned cell {cell}")
        self.cell = cell


class StrayGhostDataError(EnumerationError):
    def __init__(self, rank: int, sender: int, cell):
        super().__init__(f"stray ghost data: rank {rank} got {cell} from rank {sender}")
        self.cell = cell


class IncompleteGhostClosureError(EnumerationError):
    def __init__(self, rank: int, cells):
        cells = list(cells)
        super().__init__(
            f"incomplete ghost closure on rank {rank}: {len(cells)} cells still carry "
            f"invalid indices (first: {cells[0] if cells else None})"
        )
        self.cells = cells


class SentinelIndexError(EnumerationError):
    def __init__(self):
        super().__init__("the invalid index has no owner")


class ConstraintError(HpError):
    pass


class NotHangingError(ConstraintError):
    pass


class CircularConstraintError(ConstraintError):
    def __init__(self, chain):
        super().__init__(f"circular constraint through DoFs {list(chain)}")
        self.chain = list(chain)


class TransferError(HpError):
    pass


class DestinationMismatchError(TransferError):
    def __init__(self, rank: int, cell, new_owner: int):
        super().__init__(f"rank {rank} received {cell}, which is newly owned by rank {new_owner}")


class CheckpointFormatError(TransferError):
    pass
