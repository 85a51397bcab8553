from scripts.mesh_forest import CellKey
from scripts.wire_format import CELL_KEY, decode_cell_records, encode_cell_key, encode_cell_records


def test_cell_key_is_thirteen_packed_bytes():
    cell = CellKey(2, 1, (1 << 29, 0))
    encoded = encode_cell_key(cell)
    assert len(encoded) == CELL_KEY.size == 13
    assert encoded[:5] == b'\x02\x00\x00\x00\x01'


def test_records_keep_order_and_empty_index_lists():
    a = CellKey(0, 0, (0, 0))
    b = CellKey(1, 1, (1 << 29, 1 << 29))
    buffer = encode_cell_records([(b, [7, 2 ** 64 - 1]), (a, [])])
    assert len(buffer) == 2 * (13 + 4) + 2 * 8
    assert decode_cell_records(buffer) == [(b, [7, 2 ** 64 - 1]), (a, [])]
    assert decode_cell_records(b'') == []
