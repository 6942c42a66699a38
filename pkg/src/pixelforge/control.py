"""Dense semantic embedding grids, control rasters and polygon masking."""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .align import pool_polygon
from .embed import ControlAdapterParams, adapter_forward
from .raster import CompositionGrid, PolygonInstance
from .tags import render_sentence


class MissingEmbeddingError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing embedding"


def build_embedding_grid(g: CompositionGrid, cache: Mapping[int, np.ndarray]) -> np.ndarray:
    """(D, H, W) grid whose column at (h, w) is the cached embedding of that pixel's composition."""
    present = np.unique(g.ids)
    missing = [int(i) for i in present if int(i) not in cache]
    if missing:
        names = ", ".join(repr(render_sentence(g.intern[i]) or "<empty>") for i in missing[:5])
        raise MissingEmbeddingError(f"no cached text embedding for composition(s) {names}")
    table = np.stack([np.asarray(cache[int(i)], dtype=np.float64) for i in present])
    idx = np.searchsorted(present, g.ids)
    return np.ascontiguousarray(table[idx].transpose(2, 0, 1))


def build_control_raster(E: np.ndarray, a: ControlAdapterParams) -> np.ndarray:
    return adapter_forward(E, a)


@dataclass(frozen=True)
class MaskSchedule:
    total_steps: int
    start_retained: float = 1.0
    end_retained: float = 0.3

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.end_retained <= self.start_retained <= 1.0:
            raise ValueError("need 0 <= end_retained <= start_retained <= 1")


def retained_fraction(sched: MaskSchedule, step: int) -> float:
    """Linear decay of retained polygon coverage from start to end over the schedule."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step > sched.total_steps:
        warnings.warn(f"step {step} beyond schedule length {sched.total_steps}; clamping", RuntimeWarning)
        return sched.end_retained
    if step == sched.total_steps:
        return sched.end_retained
    frac = step / sched.total_steps
    return sched.start_retained - (sched.start_retained - sched.end_retained) * frac


def kept_count(n: int, retained: float) -> int:
    # round first so 0.7 * 10 = 7.000000000000001 still keeps 7
    return min(n, math.ceil(round(retained * n, 9)))


def apply_polygon_mask(
    g: CompositionGrid,
    instances: Sequence[PolygonInstance],
    retained: float,
    rng=None,
) -> tuple[CompositionGrid, np.ndarray]:
    """Keep ``ceil(retained * N)`` instances and blank the rest to the empty composition.

    The kept set is a prefix of one seeded permutation, so for a fixed seed a
    smaller ``retained`` always keeps a subset. Returns the masked grid and the
    indices of dropped instances.
    """
    if not 0.0 <= retained <= 1.0:
        raise ValueError("retained must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    n = len(instances)
    order = rng.permutation(n)
    keep = kept_count(n, retained)
    dropped = np.sort(order[keep:])
    ids = g.ids.copy()
    for i in dropped:
        ids[instances[i].mask] = 0
    table = g.intern.subset(np.unique(np.append(ids, 0)))
    return CompositionGrid(ids, table, g.tile), dropped


@dataclass
class MaskLabel:
    mask_index: int
    composition_id: int
    similarity: float


def label_masks_by_retrieval(
    z: np.ndarray,
    masks: Sequence[np.ndarray],
    gallery: Sequence[tuple[int, np.ndarray]],
) -> list[MaskLabel]:
    """Label each mask with the gallery composition nearest (cosine) to its pooled feature."""
    if not gallery:
        raise ValueError("empty gallery")
    order = sorted(range(len(gallery)), key=lambda i: gallery[i][0])
    gids = np.array([gallery[i][0] for i in order])
    gvec = np.stack([np.asarray(gallery[i][1], dtype=np.float64) for i in order])
    gvec = gvec / np.linalg.norm(gvec, axis=1, keepdims=True)
    out = []
    for idx, m in enumerate(masks):
        if not np.any(m):
            warnings.warn(f"mask {idx} is empty; skipped", RuntimeWarning)
            continue
        p = pool_polygon(z, m)
        sims = gvec @ (p / np.linalg.norm(p))
        best = int(np.argmax(sims))  # first max = lowest composition id
        out.append(MaskLabel(idx, int(gids[best]), float(sims[best])))
    return out


# -- PXFC control raster format -------------------------------------------------------

RASTER_MAGIC = b"PXFC"
RASTER_VERSION = 1


class RasterFormatError(ValueError):
    pass


def encode_raster(s: np.ndarray) -> bytes:
    c, h, w = s.shape
    return RASTER_MAGIC + struct.pack("<HIII", RASTER_VERSION, c, h, w) + np.asarray(s, dtype="<f4").tobytes()


def decode_raster(data: bytes) -> np.ndarray:
    if data[:4] != RASTER_MAGIC:
        raise RasterFormatError("not a PXFC raster")
    head = struct.calcsize("<HIII")
    if len(data) < 4 + head:
        raise RasterFormatError("truncated PXFC header")
    version, c, h, w = struct.unpack_from("<HIII", data, 4)
    if version != RASTER_VERSION:
        raise RasterFormatError(f"unsupported PXFC version {version}")
    body = data[4 + head:]
    if len(body) != 4 * c * h * w:
        raise RasterFormatError(f"expected {4 * c * h * w} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_raster(path, s: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode_raster(s))


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_raster(fh.read())


def quantize_preview(s: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 image, round(255 * s)."""
    return np.round(255.0 * np.asarray(s, dtype=np.float64)).astype(np.uint8).transpose(1, 2, 0)


def text_embedding_cache(intern_items, encode) -> dict:
    """Precompute ``{composition id: embedding}`` with ``encode(composition)``."""
    return {int(cid): encode(comp) for cid, comp in intern_items}
