"""
Little-endian binary layouts shared by the ghost exchange and the checkpoint files.

Cell key: tree u32, level u8, anchor_x u32, anchor_y u32 (13 bytes, no padding).
Ghost record: cell key, DoF count u32, DoF indices u64.
"""

import struct
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from scripts.mesh_forest import CellKey

CELL_KEY = struct.Struct('<IBII')
COUNT = struct.Struct('<I')
INDEX_DTYPE = np.dtype('<u8')


def encode_cell_key(cell: CellKey) -> bytes:
    return CELL_KEY.pack(cell.tree, cell.level, cell.anchor[0], cell.anchor[1])


def decode_cell_key(buffer, offset: int = 0) -> CellKey:
    tree, level, x, y = CELL_KEY.unpack_from(buffer, offset)
    return CellKey(tree, level, (x, y))


def encode_cell_keys(cells: Iterable[CellKey]) -> bytes:
    return b''.join(encode_cell_key(c) for c in cells)


def decode_cell_keys(buffer, count: int, offset: int = 0) -> List[CellKey]:
    return [decode_cell_key(buffer, offset + i * CELL_KEY.size) for i in range(count)]


def encode_cell_records(records: Sequence[Tuple[CellKey, Sequence[int]]]) -> bytes:
    """Concatenate (cell key, count, indices) records in the order given."""
    parts = []
    for cell, indices in records:
        parts.append(encode_cell_key(cell))
        parts.append(COUNT.pack(len(indices)))
        parts.append(np.asarray(indices, dtype=INDEX_DTYPE).tobytes())
    return b''.join(parts)


def decode_cell_records(buffer: bytes) -> List[Tuple[CellKey, List[int]]]:
    records = []
    offset = 0
    end = len(buffer)
    while offset < end:
        cell = decode_cell_key(buffer, offset)
        offset += CELL_KEY.size
        (count,) = COUNT.unpack_from(buffer, offset)
        offset += COUNT.size
        if count:
            indices = np.frombuffer(buffer, dtype=INDEX_DTYPE, count=count, offset=offset).tolist()
        else:
            indices = []
        offset += count * INDEX_DTYPE.itemsize
        records.append((cell, indices))
    return records
