"""Deterministic synthetic imagery and planted-separable datasets.

Synthetic images paint every pixel with a color derived from its composition
(the normalized sum of hash-seeded per-atom unit 3-vectors) plus seeded Gaussian noise, so alignment can be
trained and evaluated without licensed satellite imagery.
"""
from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from .embed import EMPTY_TOKEN
from .align import FeatureInstance, TrainingSample
from .geometry import TileSpec
from .raster import CompositionGrid, InternTable, downsample_mask, extract_instances
from .tags import Composition, TagAtom, render_sentence

PARENTS = {
    "building": ["residential", "apartments", "house", "school", "retail", "industrial", "garage", "church"],
    "landuse": ["residential", "grass", "industrial", "forest", "farmland", "retail", "cemetery", "railway"],
    "natural": ["water", "wood", "scrub", "sand", "wetland", "bare_rock", "beach"],
    "leisure": ["park", "pitch", "playground", "garden", "swimming_pool", "golf_course"],
    "amenity": ["parking", "school", "hospital", "university", "marketplace"],
    "height": ["3m", "6m", "9m", "12m", "30m"],
}


def _digest_seed(*parts) -> int:
    text = "/".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def atom_color(token: str) -> np.ndarray:
    rng = np.random.default_rng(_digest_seed("color", token))
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def composition_color(c: Composition) -> np.ndarray:
    """Unit 3-vector: normalized sum of hash-seeded per-atom colors."""
    tokens = [a.rendered for a in c.atoms] or [EMPTY_TOKEN]
    v = sum(atom_color(t) for t in tokens)
    norm = np.linalg.norm(v)
    return v / norm if norm > 1e-9 else atom_color(render_sentence(c) + "#")


def synthetic_image(
    g: CompositionGrid, seed: int = 42, noise: float = 0.5, tile_key: Optional[tuple] = None
) -> np.ndarray:
    """(3, H, W) float image: composition color per pixel plus seeded noise."""
    key = tile_key if tile_key is not None else ((g.tile.z, g.tile.x, g.tile.y) if g.tile else ())
    rng = np.random.default_rng(_digest_seed("image", seed, *key))
    uniq, inv = np.unique(g.ids, return_inverse=True)
    palette = np.stack([composition_color(g.intern[i]) for i in uniq])
    img = palette[inv.reshape(g.ids.shape)].transpose(2, 0, 1)
    return img + noise * rng.standard_normal(img.shape)


def feature_instances(g: CompositionGrid, grid: tuple[int, int]) -> list[FeatureInstance]:
    return [FeatureInstance(inst.composition_id, downsample_mask(inst.mask, grid)) for inst in extract_instances(g)]


def training_sample(g: CompositionGrid, image: np.ndarray, grid: tuple[int, int]) -> TrainingSample:
    instances = feature_instances(g, grid)
    comps = {inst.composition_id: g.intern[inst.composition_id] for inst in instances}
    return TrainingSample(image=image, instances=instances, compositions=comps)


def candidate_compositions(rng: np.random.Generator, n: int = 400) -> list[Composition]:
    atoms = [TagAtom(k, v) for k, vals in PARENTS.items() for v in vals]
    out: dict = {}
    while len(out) < n:
        size = int(rng.integers(1, 4))
        idx = rng.choice(len(atoms), size=size, replace=False)
        c = Composition(tuple(atoms[i] for i in idx))
        out[render_sentence(c)] = c
    return list(out.values())


def pick_separable(cands: list[Composition], n: int) -> list[Composition]:
    """Greedy farthest-point selection on the composition colors."""
    colors = np.stack([composition_color(c) for c in cands])
    chosen = [0]
    best = colors @ colors[0]
    for _ in range(n - 1):
        best_i = int(np.argmin(np.where(np.isin(np.arange(len(cands)), chosen), np.inf, best)))
        chosen.append(best_i)
        best = np.maximum(best, colors @ colors[best_i])
    return [cands[i] for i in chosen]


def random_partition(rng: np.random.Generator, size: int, n_comp: int, min_block: int) -> np.ndarray:
    """Label a size x size grid with random vertical strips split into blocks."""
    labels = np.zeros((size, size), dtype=np.int64)

    def cuts(n):
        k = int(rng.integers(1, max(2, n // min_block)))
        inner = np.sort(rng.choice(np.arange(min_block, n - min_block + 1), size=min(k, 3) - 1, replace=False)) \
            if n >= 2 * min_block and min(k, 3) > 1 else np.array([], dtype=int)
        return [0, *inner.tolist(), n]

    xs = cuts(size)
    for a, b in zip(xs[:-1], xs[1:]):
        ys = cuts(size)
        for c, d in zip(ys[:-1], ys[1:]):
            labels[c:d, a:b] = int(rng.integers(n_comp))
    return labels


def planted_dataset(
    n_compositions: int = 32,
    n_tiles: int = 256,
    tile_px: int = 64,
    cell: int = 4,
    min_block: int = 3,
    seed: int = 42,
    z: int = 16,
) -> list[CompositionGrid]:
    """Fully covered tiles built from ``n_compositions`` color-separated compositions.

    Region boundaries snap to multiples of ``cell`` pixels so that, at a
    feature stride of ``cell``, no feature cell mixes two compositions. Tiles
    sit four tile-widths apart so each falls in its own 4x4 spatial block.
    """
    if tile_px % cell:
        raise ValueError("tile_px must be a multiple of cell")
    rng = np.random.default_rng(seed)
    comps = pick_separable(candidate_compositions(rng), n_compositions)
    table = InternTable()
    ids = np.array([table.intern(c) for c in comps], dtype=np.uint32)
    side = int(np.ceil(np.sqrt(n_tiles)))
    base = 1 << (z - 1)
    grids = []
    for i in range(n_tiles):
        t = TileSpec(z, base + 4 * (i % side), base + 4 * (i // side), tile_px, tile_px)
        lab = random_partition(rng, tile_px // cell, n_compositions, min_block)
        lab = np.kron(lab, np.ones((cell, cell), dtype=np.int64))
        g = CompositionGrid(ids[lab], table.subset(np.unique(ids[lab])), t)
        grids.append(g)
    return grids
