"""Per-pixel tag compositing, composition interning, instances and the PXFG grid format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .geometry import PolygonGeometry, TileSpec, rasterize_polygon
from .tags import EMPTY, Composition, TagAtom, parse_sentence, render_sentence

MIN_COVERAGE = 0.70
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class InternTable:
    """Bijection between u32 composition IDs and compositions; ID 0 is the empty composition."""

    def __init__(self):
        self._by_id: dict[int, Composition] = {0: EMPTY}
        self._by_comp: dict[Composition, int] = {EMPTY: 0}
        self._next = 1

    def intern(self, c: Composition) -> int:
        cid = self._by_comp.get(c)
        if cid is None:
            cid = self._next
            self._insert(cid, c)
        return cid

    def _insert(self, cid: int, c: Composition):
        if cid in self._by_id or c in self._by_comp:
            if self._by_id.get(cid) == c:
                return
            raise ValueError(f"intern conflict for id {cid}")
        if not 0 <= cid <= 0xFFFFFFFF:
            raise ValueError("composition id outside u32 range")
        self._by_id[cid] = c
        self._by_comp[c] = cid
        self._next = max(self._next, cid + 1)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, Composition]]) -> "InternTable":
        table = cls()
        for cid, c in entries:
            table._insert(cid, c)
        return table

    def subset(self, ids: Iterable[int]) -> "InternTable":
        return InternTable.from_entries((int(i), self._by_id[int(i)]) for i in ids)

    def __getitem__(self, cid: int) -> Composition:
        return self._by_id[int(cid)]

    def id_of(self, c: Composition) -> int:
        return self._by_comp[c]

    def __contains__(self, cid) -> bool:
        return int(cid) in self._by_id

    def __len__(self):
        return len(self._by_id)

    def items(self) -> list[tuple[int, Composition]]:
        return sorted(self._by_id.items())

    def __eq__(self, other):
        return isinstance(other, InternTable) and self._by_id == other._by_id


@dataclass
class CompositionGrid:
    ids: np.ndarray
    intern: InternTable
    tile: Optional[TileSpec] = None

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        if self.ids.ndim != 2 or 0 in self.ids.shape:
            raise ValueError("composition grid must be a nonempty 2-D array")
        if self.tile is not None and self.tile.shape != self.ids.shape:
            raise ValueError("grid dims do not match tile pixel dims")
        missing = [int(i) for i in np.unique(self.ids) if int(i) not in self.intern]
        if missing:
            raise ValueError(f"grid references ids missing from intern table: {missing[:5]}")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def composition_at(self, r: int, c: int) -> Composition:
        return self.intern[self.ids[r, c]]

    def relabel(self, table: InternTable) -> "CompositionGrid":
        """Re-express this grid with IDs from ``table`` (new compositions are interned there)."""
        present = np.unique(self.ids)
        lut = {int(i): table.intern(self.intern[i]) for i in present}
        keys = np.array(sorted(lut), dtype=np.uint32)
        vals = np.array([lut[k] for k in keys], dtype=np.uint32)
        ids = vals[np.searchsorted(keys, self.ids)]
        return CompositionGrid(ids, table.subset(vals), self.tile)

    def __eq__(self, other):
        return (
            isinstance(other, CompositionGrid)
            and self.ids.shape == other.ids.shape
            and np.array_equal(self.ids, other.ids)
            and self.intern == other.intern
            and self.tile == other.tile
        )


@dataclass
class PolygonInstance:
    composition_id: int
    mask: np.ndarray
    pixel_count: int = field(init=False)

    def __post_init__(self):
        self.pixel_count = int(np.count_nonzero(self.mask))


def composite_tile(
    polygons: Iterable[tuple[PolygonGeometry, Composition]],
    t: TileSpec,
    retained: Optional[set] = None,
) -> CompositionGrid:
    """Union the retained tags of all polygons covering each pixel.

    IDs are assigned in raster scan order of first appearance, so the result
    does not depend on the order of ``polygons``. ``retained=None`` keeps every tag.
    """
    label = np.zeros(t.shape, dtype=np.int64)
    label_atoms: list[frozenset] = [frozenset()]
    for geom, comp in polygons:
        atoms = frozenset(a for a in comp.atoms if retained is None or a in retained)
        if not atoms:
            continue
        m = rasterize_polygon(geom, t)
        if not m.any():
            continue
        # pair (old label, covered) -> new label
        old = np.unique(label[m])
        remap = {}
        for o in old:
            merged = label_atoms[o] | atoms
            remap[int(o)] = len(label_atoms)
            label_atoms.append(merged)
        sub = label[m]
        keys = np.array(sorted(remap), dtype=np.int64)
        vals = np.array([remap[k] for k in keys], dtype=np.int64)
        label[m] = vals[np.searchsorted(keys, sub)]
    return _grid_from_labels(label, label_atoms, t)


def _grid_from_labels(label: np.ndarray, label_atoms: list, t: Optional[TileSpec]) -> CompositionGrid:
    flat = label.ravel()
    uniq, first = np.unique(flat, return_index=True)
    table = InternTable()
    lut = np.zeros(len(label_atoms), dtype=np.uint32)
    for lab in uniq[np.argsort(first)]:
        lut[lab] = table.intern(Composition(tuple(label_atoms[lab])))
    return CompositionGrid(lut[label], table, t)


def coverage_fraction(g: CompositionGrid) -> float:
    return float(np.count_nonzero(g.ids)) / g.ids.size


def passes_coverage(g: CompositionGrid, min_coverage: float = MIN_COVERAGE) -> bool:
    # counts avoid 0.7 * n rounding surprises at the inclusive boundary
    return np.count_nonzero(g.ids) >= min_coverage * g.ids.size - 1e-9


def extract_instances(g: CompositionGrid) -> list[PolygonInstance]:
    """4-connected regions of equal nonzero composition, ordered by first pixel in scan order."""
    found = []
    for cid in np.unique(g.ids):
        if cid == 0:
            continue
        labels, n = ndimage.label(g.ids == cid, structure=FOUR_CONNECTED)
        if n == 0:
            continue
        flat = labels.ravel()
        uniq, first = np.unique(flat, return_index=True)
        for lab, pos in zip(uniq, first):
            if lab == 0:
                continue
            found.append((int(pos), int(cid), labels == lab))
    found.sort(key=lambda item: item[0])
    return [PolygonInstance(cid, m) for _, cid, m in found]


def _box_weights(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) overlap lengths of target cells with source pixels, rows sum to 1."""
    scale = n_src / n_dst
    edges = np.arange(n_dst + 1) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    pix = np.arange(n_src)[None, :]
    overlap = np.clip(np.minimum(hi, pix + 1) - np.maximum(lo, pix), 0.0, None)
    return overlap / scale


def pool_mask(m: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-weighted box average of a mask onto a coarser grid."""
    th, tw = target
    h, w = m.shape
    if th <= 0 or tw <= 0:
        raise ValueError("target dims must be positive")
    if th > h or tw > w:
        raise ValueError("target dims must not exceed source dims")
    if (h % th, w % tw) == (0, 0):
        return m.reshape(th, h // th, tw, w // tw).mean(axis=(1, 3), dtype=np.float64)
    return _box_weights(h, th) @ m.astype(np.float64) @ _box_weights(w, tw).T


def downsample_mask(m: np.ndarray, target: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Pool then threshold; a nonempty source always keeps at least its best-covered cell."""
    avg = pool_mask(m, target)
    out = avg >= threshold - 1e-12
    if not out.any() and m.any():
        out.flat[int(np.argmax(avg))] = True
    return out


# -- PXFG binary format -------------------------------------------------------

GRID_MAGIC = b"PXFG"
GRID_VERSION = 1


class GridFormatError(ValueError):
    pass


class BadMagicError(GridFormatError):
    pass


class TruncatedError(GridFormatError):
    pass


class UnknownVersionError(GridFormatError):
    pass


class MissingInternError(GridFormatError):
    pass


def encode_grid(g: CompositionGrid) -> bytes:
    h, w = g.ids.shape
    parts = [GRID_MAGIC, struct.pack("<HII", GRID_VERSION, w, h), g.ids.astype("<u4").tobytes()]
    entries = g.intern.items()
    parts.append(struct.pack("<I", len(entries)))
    for cid, comp in entries:
        text = render_sentence(comp).encode("utf-8")
        if len(text) > 0xFFFF:
            raise ValueError(f"composition {cid} too long to encode")
        parts.append(struct.pack("<IH", cid, len(text)))
        parts.append(text)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_grid(data: bytes, tile: Optional[TileSpec] = None) -> CompositionGrid:
    rd = _Reader(data)
    if bytes(rd.take(4)) != GRID_MAGIC:
        raise BadMagicError("not a PXFG grid")
    version, w, h = rd.unpack("<HII")
    if version != GRID_VERSION:
        raise UnknownVersionError(f"unsupported PXFG version {version}")
    if w == 0 or h == 0:
        raise GridFormatError("grid dims must be positive")
    ids = np.frombuffer(rd.take(4 * w * h), dtype="<u4").astype(np.uint32).reshape(h, w)
    (n_entries,) = rd.unpack("<I")
    entries = []
    for _ in range(n_entries):
        cid, n = rd.unpack("<IH")
        try:
            text = bytes(rd.take(n)).decode("utf-8")
            entries.append((cid, parse_sentence(text)))
        except (UnicodeDecodeError, ValueError) as exc:
            if isinstance(exc, TruncatedError):
                raise
            raise GridFormatError(f"bad intern entry {cid}: {exc}") from exc
    if rd.pos != len(data):
        raise GridFormatError("trailing bytes after intern table")
    try:
        table = InternTable.from_entries(entries)
    except ValueError as exc:
        raise GridFormatError(str(exc)) from exc
    present = np.unique(ids)
    missing = [int(i) for i in present if int(i) not in table]
    if missing:
        raise MissingInternError(f"ids {missing[:5]} have no intern entry")
    return CompositionGrid(ids, table, tile)


def write_grid(path, g: CompositionGrid):
    with open(path, "wb") as fh:
        fh.write(encode_grid(g))


def read_grid(path, tile: Optional[TileSpec] = None) -> CompositionGrid:
    with open(path, "rb") as fh:
        return decode_grid(fh.read(), tile)


def grid_from_compositions(rows: list[list[Composition]], tile: Optional[TileSpec] = None) -> CompositionGrid:
    """Build a grid from a nested list of compositions (handy in tests and demos)."""
    table = InternTable()
    ids = np.array([[table.intern(c) for c in row] for row in rows], dtype=np.uint32)
    return CompositionGrid(ids, table.subset(np.unique(np.append(ids, 0))), tile)


def atoms_of(g: CompositionGrid) -> set[TagAtom]:
    out: set[TagAtom] = set()
    for cid in np.unique(g.ids):
        out.update(g.intern[cid].atoms)
    return out
