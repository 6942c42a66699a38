import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelforge.geometry import PolygonGeometry, TileSpec, pixel_to_lonlat
from pixelforge.raster import (
    BadMagicError,
    CompositionGrid,
    GridFormatError,
    InternTable,
    MissingInternError,
    TruncatedError,
    UnknownVersionError,
    composite_tile,
    coverage_fraction,
    decode_grid,
    downsample_mask,
    encode_grid,
    extract_instances,
    grid_from_compositions,
    passes_coverage,
    read_grid,
    write_grid,
)
from pixelforge.tags import EMPTY, Composition, parse_tag

from .oracles import flood_fill_instances

T8 = TileSpec(16, 32768, 32768, 8, 8)


def square(t, u0, v0, u1, v1):
    pts = [(u0, v0), (u1, v0), (u1, v1), (u0, v1), (u0, v0)]
    return PolygonGeometry([pixel_to_lonlat(u, v, t) for u, v in pts])


def comp(*tags):
    return Composition(tuple(parse_tag(s) for s in tags))


def random_grid(rng, h=64, w=64, max_ids=12, blocky=True):
    n = int(rng.integers(1, max_ids + 1))
    table = InternTable()
    for i in range(n):
        table.intern(comp(f"k{i} v{i}"))
    if blocky:
        coarse = rng.integers(0, n + 1, size=(h // 4, w // 4))
        ids = np.kron(coarse, np.ones((4, 4), dtype=np.int64))
        flip = rng.random((h, w)) < 0.1
        ids[flip] = rng.integers(0, n + 1, size=int(flip.sum()))
    else:
        ids = rng.integers(0, n + 1, size=(h, w))
    return CompositionGrid(ids, table)


def test_composite_overlap_union():
    a, b = comp("a x"), comp("b y")
    g = composite_tile([(square(T8, 0, 0, 5, 5), a), (square(T8, 3, 3, 8, 8), b)], T8)
    assert g.composition_at(4, 4) == comp("a x", "b y")
    assert g.composition_at(0, 0) == a and g.composition_at(7, 7) == b
    assert g.composition_at(0, 7) == EMPTY


def test_composite_empty_and_full():
    g = composite_tile([], T8)
    assert (g.ids == 0).all() and len(g.intern) == 1
    g = composite_tile([(square(T8, 0, 0, 8, 8), comp("landuse grass"))], T8)
    assert (g.ids == g.ids[0, 0]).all() and g.ids[0, 0] != 0


def test_composite_drops_unretained_atoms():
    keep = {parse_tag("a x")}
    g = composite_tile([(square(T8, 0, 0, 8, 8), comp("a x", "rare tag"))], T8, keep)
    assert g.composition_at(0, 0) == comp("a x")
    g = composite_tile([(square(T8, 0, 0, 8, 8), comp("rare tag"))], T8, keep)
    assert (g.ids == 0).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(1, 8), st.integers(1, 8),
                          st.integers(0, 3)), min_size=1, max_size=5), st.randoms())
def test_composite_order_independent(boxes, rnd):
    polys = [(square(T8, u, v, min(u + du, 8), min(v + dv, 8)), comp(f"k{k} v")) for u, v, du, dv, k in boxes]
    shuffled = list(polys)
    rnd.shuffle(shuffled)
    assert composite_tile(polys, T8) == composite_tile(shuffled, T8)


def test_coverage_examples():
    table = InternTable()
    cid = table.intern(comp("a b"))
    assert coverage_fraction(CompositionGrid(np.zeros((4, 4)), table)) == 0.0
    assert coverage_fraction(CompositionGrid(np.full((4, 4), cid), table)) == 1.0
    ids = np.zeros((10, 10))
    ids[:7] = cid
    g = CompositionGrid(ids, table)
    assert coverage_fraction(g) == pytest.approx(0.70, abs=1e-12)
    assert passes_coverage(g, 0.70)
    ids = np.zeros((1000,))
    ids[:699] = cid
    assert not passes_coverage(CompositionGrid(ids.reshape(10, 100), table))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coverage_invariant_under_relabel(seed):
    g = random_grid(np.random.default_rng(seed), 16, 16)
    other = InternTable()
    for i in range(30, 0, -1):
        other.intern(comp(f"z{i} w"))
    r = g.relabel(other)
    assert coverage_fraction(r) == coverage_fraction(g)
    assert all(r.composition_at(i, j) == g.composition_at(i, j) for i in range(16) for j in range(16))


def test_instances_disjoint_and_diagonal():
    table = InternTable()
    c = table.intern(comp("a b"))
    ids = np.zeros((5, 5))
    ids[0, 0] = ids[4, 4] = c
    assert len(extract_instances(CompositionGrid(ids, table))) == 2
    ids = np.zeros((2, 2))
    ids[0, 0] = ids[1, 1] = c
    inst = extract_instances(CompositionGrid(ids, table))
    assert len(inst) == 2 and [i.pixel_count for i in inst] == [1, 1]


def test_instances_match_flood_fill_oracle():
    rng = np.random.default_rng(42)
    for k in range(100):
        g = random_grid(rng, blocky=k % 2 == 0)
        got = {(i.composition_id, frozenset(zip(*np.nonzero(i.mask)))) for i in extract_instances(g)}
        assert got == flood_fill_instances(g.ids.tolist())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_instance_pixel_counts_sum_and_order(seed):
    g = random_grid(np.random.default_rng(seed), 24, 24)
    inst = extract_instances(g)
    assert sum(i.pixel_count for i in inst) == np.count_nonzero(g.ids)
    firsts = [int(np.flatnonzero(i.mask)[0]) for i in inst]
    assert firsts == sorted(firsts)
    for i in inst:
        assert (g.ids[i.mask] == i.composition_id).all()


def test_downsample_examples():
    assert downsample_mask(np.ones((16, 16), bool), (5, 3)).all()
    assert not downsample_mask(np.zeros((16, 16), bool), (4, 4)).any()
    m = np.zeros((512, 512), bool)
    m[:, :256] = True
    d = downsample_mask(m, (64, 64))
    assert d[:, :32].all() and not d[:, 32:].any()
    with pytest.raises(ValueError):
        downsample_mask(m, (0, 64))


def test_downsample_survivor():
    m = np.zeros((512, 512), bool)
    m[100:102, 300:303] = True
    d = downsample_mask(m, (64, 64))
    assert d.sum() == 1 and d[12, 37]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_downsample_identity_and_band(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((32, 32)) < 0.5
    assert np.array_equal(downsample_mask(m, (32, 32)), m)
    # convex (rectangle) masks: scaled popcount within one cell-row of the source
    r0, c0 = rng.integers(0, 40, 2)
    r1, c1 = r0 + rng.integers(8, 24), c0 + rng.integers(8, 24)
    rect = np.zeros((64, 64), bool)
    rect[r0:r1, c0:c1] = True
    d = downsample_mask(rect, (8, 8))
    cell = 8 * 8
    row_cells = 8 * cell
    assert abs(int(d.sum()) * cell - int(rect.sum())) <= row_cells


def test_encode_empty_1x1():
    g = CompositionGrid(np.zeros((1, 1)), InternTable())
    data = encode_grid(g)
    assert data == b"PXFG" + struct.pack("<HII", 1, 1, 1) + b"\0\0\0\0" + struct.pack("<IIH", 1, 0, 0)
    assert decode_grid(data) == g


def test_grid_round_trip_1000():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        h, w = rng.integers(1, 20, 2)
        g = random_grid(rng, int(h), int(w), blocky=False)
        assert decode_grid(encode_grid(g)) == g


def test_grid_file_round_trip(tmp_path):
    g = grid_from_compositions([[comp("a b"), EMPTY], [comp("a b", "c d"), comp("名前 東京")]])
    write_grid(tmp_path / "g.pxfg", g)
    assert read_grid(tmp_path / "g.pxfg") == g


def test_decode_errors():
    g = grid_from_compositions([[comp("a b"), EMPTY]])
    data = encode_grid(g)
    with pytest.raises(BadMagicError):
        decode_grid(b"XXXX" + data[4:])
    with pytest.raises(TruncatedError):
        decode_grid(data[:-3])
    with pytest.raises(TruncatedError):
        decode_grid(data[:9])
    with pytest.raises(UnknownVersionError):
        decode_grid(data[:4] + struct.pack("<H", 2) + data[6:])
    ids = np.array([[5, 0]], dtype="<u4").tobytes()
    with pytest.raises(MissingInternError):
        decode_grid(data[:14] + ids + data[14 + 8:])
    assert issubclass(MissingInternError, GridFormatError)


def test_grid_rejects_unknown_ids():
    with pytest.raises(ValueError):
        CompositionGrid(np.array([[3]]), InternTable())
