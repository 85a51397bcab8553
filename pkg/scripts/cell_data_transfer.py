"""
Variable-size per-cell data: CSR-style packing, repartition transfer and checkpoints.

Checkpoint file (little-endian):
  magic b'HPDK' | version u32 | count u64 | count cell keys | count+1 offsets u64 | data
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from scripts.comm_fabric import Communicator
from scripts.errors import CheckpointFormatError, DestinationMismatchError, TransferError
from scripts.mesh_forest import CellKey
from scripts.wire_format import CELL_KEY, decode_cell_keys, encode_cell_keys

logger = logging.getLogger(__name__)

MAGIC = b'HPDK'
VERSION = 1
HEADER = struct.Struct('<4sIQ')
OFFSET_DTYPE = np.dtype('<u8')

STAGE_OFFSETS = 'transfer:offsets'
STAGE_DATA = 'transfer:data'


@dataclass(frozen=True)
class PackedCellData:
    cell_order: Tuple[CellKey, ...]
    offsets: Tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if len(self.offsets) != len(self.cell_order) + 1 or self.offsets[0] != 0:
            raise ValueError("offsets must start at 0 and hold one entry per cell plus one")
        if any(b < a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ValueError("offsets must be non-decreasing")
        if self.offsets[-1] != len(self.data):
            raise ValueError(f"offsets end at {self.offsets[-1]} but data holds {len(self.data)} bytes")

    @classmethod
    def empty(cls) -> 'PackedCellData':
        return cls((), (0,), b'')

    def __len__(self) -> int:
        return len(self.cell_order)

    def payload(self, j: int) -> bytes:
        return self.data[self.offsets[j]:self.offsets[j + 1]]

    def items(self) -> List[Tuple[CellKey, bytes]]:
        return [(cell, self.payload(j)) for j, cell in enumerate(self.cell_order)]


def pack(cells: Sequence[CellKey], payload_of: Callable[[CellKey], bytes]) -> PackedCellData:
    """Size every payload first, then copy them into one buffer."""
    cells = tuple(cells)
    payloads = [bytes(payload_of(cell)) for cell in cells]
    sizes = np.fromiter((len(p) for p in payloads), dtype=np.int64, count=len(payloads))
    offsets = np.zeros(len(cells) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    buffer = bytearray(int(offsets[-1]))
    for j, payload in enumerate(payloads):
        buffer[offsets[j]:offsets[j + 1]] = payload
    return PackedCellData(cells, tuple(int(o) for o in offsets), bytes(buffer))


def unpack(packed: PackedCellData) -> Dict[CellKey, bytes]:
    return dict(packed.items())


def merge_packed(parts: Sequence[PackedCellData]) -> PackedCellData:
    """Concatenate several packs into one in Morton order."""
    payloads = {}
    for part in parts:
        payloads.update(part.items())
    return pack(sorted(payloads), payloads.__getitem__)


def _encode_run(packed: PackedCellData, start: int, stop: int) -> Tuple[bytes, bytes]:
    base = packed.offsets[start]
    offsets = np.asarray(packed.offsets[start:stop + 1], dtype=np.int64) - base
    header = struct.pack('<Q', stop - start)
    index = header + encode_cell_keys(packed.cell_order[start:stop]) + offsets.astype(OFFSET_DTYPE).tobytes()
    return index, packed.data[base:packed.offsets[stop]]


def _decode_run(index: bytes, data: bytes) -> PackedCellData:
    (count,) = struct.unpack_from('<Q', index, 0)
    cells = decode_cell_keys(index, count, 8)
    position = 8 + count * CELL_KEY.size
    offsets = np.frombuffer(index, dtype=OFFSET_DTYPE, count=count + 1, offset=position)
    return PackedCellData(tuple(cells), tuple(int(o) for o in offsets), bytes(data))


def repartition_transfer(packed: PackedCellData, old_owner: Callable[[CellKey], int],
                         new_owner: Callable[[CellKey], int], comm: Communicator) -> PackedCellData:
    """
    Move each payload to its new owner. Cells are sorted by destination so every
    target gets one offsets message and one data message; retained cells never
    touch the fabric.
    """
    rank = comm.rank
    for cell in packed.cell_order:
        if old_owner(cell) != rank:
            raise TransferError(f"rank {rank} holds data for {cell} owned by rank {old_owner(cell)}")

    payloads = unpack(packed)
    ordered = sorted(packed.cell_order, key=lambda c: (new_owner(c), c))
    by_destination = pack(ordered, payloads.__getitem__)

    runs: Dict[int, Tuple[int, int]] = {}
    for j, cell in enumerate(by_destination.cell_order):
        dest = new_owner(cell)
        start, _ = runs.get(dest, (j, j))
        runs[dest] = (start, j + 1)

    kept: List[Tuple[CellKey, bytes]] = []
    index_messages, data_messages = {}, {}
    for dest, (start, stop) in sorted(runs.items()):
        if dest == rank:
            kept.extend(by_destination.items()[start:stop])
            continue
        index_messages[dest], data_messages[dest] = _encode_run(by_destination, start, stop)

    index_in = comm.alltoall(index_messages, STAGE_OFFSETS)
    data_in = comm.alltoall(data_messages, STAGE_DATA)
    if set(index_in) != set(data_in):
        raise TransferError(f"rank {rank} got offsets from {sorted(index_in)} but data from {sorted(data_in)}")

    received: Dict[CellKey, bytes] = dict(kept)
    for sender in sorted(index_in):
        for cell, payload in _decode_run(index_in[sender], data_in[sender]).items():
            if new_owner(cell) != rank:
                raise DestinationMismatchError(rank, cell, new_owner(cell))
            received[cell] = payload
    logger.debug("rank %d kept %d cells and received %d from %d ranks",
                 rank, len(kept), len(received) - len(kept), len(index_in))
    return pack(sorted(received), received.__getitem__)


def encode_checkpoint(packed: PackedCellData) -> bytes:
    return (
        HEADER.pack(MAGIC, VERSION, len(packed))
        + encode_cell_keys(packed.cell_order)
        + np.asarray(packed.offsets, dtype=OFFSET_DTYPE).tobytes()
        + packed.data
    )


def decode_checkpoint(buffer: bytes) -> PackedCellData:
    if len(buffer) < HEADER.size:
        raise CheckpointFormatError(f"file of {len(buffer)} bytes is shorter than the header")
    magic, version, count = HEADER.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    keys_end = HEADER.size + count * CELL_KEY.size
    offsets_end = keys_end + (count + 1) * OFFSET_DTYPE.itemsize
    if len(buffer) < offsets_end:
        raise CheckpointFormatError(f"truncated: {count} cells need {offsets_end} bytes before the data")
    try:
        cells = decode_cell_keys(buffer, count, HEADER.size)
    except ValueError as e:
        raise CheckpointFormatError(f"invalid cell key: {e}") from e
    offsets = np.frombuffer(buffer, dtype=OFFSET_DTYPE, count=count + 1, offset=keys_end)
    data = buffer[offsets_end:]
    try:
        return PackedCellData(tuple(cells), tuple(int(o) for o in offsets), bytes(data))
    except ValueError as e:
        raise CheckpointFormatError(str(e)) from e


def checkpoint_save(packed: PackedCellData, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_checkpoint(packed))


def checkpoint_load(path: Path) -> PackedCellData:
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())


def shard_path(prefix: Path, rank: int) -> Path:
    prefix = Path(prefix)
    return prefix.with_name(f"{prefix.name}.rank{rank}.hpdk")


def meta_path(prefix: Path) -> Path:
    prefix = Path(prefix)
    return prefix.with_name(f"{prefix.name}.meta.json")


def save_shards(prefix: Path, shards: Sequence[PackedCellData], metadata: Mapping):
    for rank, packed in enumerate(shards):
        checkpoint_save(packed, shard_path(prefix, rank))
    meta = dict(metadata)
    meta['ranks'] = len(shards)
    with open(meta_path(prefix), 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, ensure_ascii=False)
    logger.info("wrote %d checkpoint shards under %s", len(shards), prefix)


def load_shards(prefix: Path) -> Tuple[dict, List[PackedCellData]]:
    path = meta_path(prefix)
    if not path.exists():
        raise CheckpointFormatError(f"checkpoint metadata not found at {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointFormatError(f"unreadable metadata {path}: {e}") from e
    ranks = meta.get('ranks')
    if not isinstance(ranks, int) or ranks < 1:
        raise CheckpointFormatError(f"metadata {path} has no valid rank count")
    shards = []
    for rank in range(ranks):
        shard = shard_path(prefix, rank)
        if not shard.exists():
            raise CheckpointFormatError(f"missing shard {shard}")
        shards.append(checkpoint_load(shard))
    return meta, shards
