"""Toy text/image encoders and the 1x1-conv + sigmoid control adapter.

The encoders are deliberately small so that every gradient can be written by
hand and checked against finite differences. Forward helpers return the
intermediates their ``*_backward`` counterparts need.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tags import Composition

EMPTY_TOKEN = "∅"
_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


@dataclass
class ToyTextEncoderParams:
    weight: np.ndarray  # (D, V)

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def v(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, d: int = 64, v: int = 1024, rng=None):
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal((d, v)))


@dataclass
class ToyImageEncoderParams:
    weight: np.ndarray  # (D, C_in)

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, d: int = 64, channels: int = 3, rng=None):
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal((d, channels)) / np.sqrt(channels))


@dataclass
class ControlAdapterParams:
    weight: np.ndarray  # (3, D)
    bias: np.ndarray  # (3,)

    @classmethod
    def zeros(cls, d: int):
        return cls(np.zeros((3, d)), np.zeros(3))

    @classmethod
    def init(cls, d: int, rng=None, scale: float = 2.0):
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal((3, d)) * scale / np.sqrt(d), np.zeros(3))


def _hash_token(token: str, v: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "little")
    return (h >> 1) % v, (1.0 if h & 1 else -1.0)


def hash_features(c: Composition, v: int = 1024) -> np.ndarray:
    """Signed feature hashing of each atom's rendered form, averaged over atoms."""
    tokens = [a.rendered for a in c.atoms] or [EMPTY_TOKEN]
    out = np.zeros(v)
    for tok in tokens:
        idx, sign = _hash_token(tok, v)
        out[idx] += sign
    return out / len(tokens)


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.einsum("...i,...i->...", x, x))[..., None]
    return x / np.maximum(norm, 1e-300), norm


def _normalize_rows_backward(y: np.ndarray, norm: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    # d(x/|x|) = (I - y y^T) dx / |x|
    return (grad_y - y * np.einsum("...i,...i->...", grad_y, y)[..., None]) / np.maximum(norm, 1e-300)


def text_forward(comps: list[Composition], p: ToyTextEncoderParams) -> tuple[np.ndarray, dict]:
    feats = np.stack([hash_features(c, p.v) for c in comps]) if comps else np.zeros((0, p.v))
    raw = feats @ p.weight.T
    emb, norm = _normalize_rows(raw)
    return emb, {"feats": feats, "emb": emb, "norm": norm}


def text_backward(cache: dict, grad_emb: np.ndarray) -> np.ndarray:
    grad_raw = _normalize_rows_backward(cache["emb"], cache["norm"], grad_emb)
    return grad_raw.T @ cache["feats"]


def encode_text_toy(c: Composition, p: ToyTextEncoderParams) -> np.ndarray:
    emb, _ = text_forward([c], p)
    return emb[0]


def cell_means(x: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Channel means over each (H/H') x (W/W') patch, shape (H'*W', C)."""
    c, h, w = x.shape
    gh, gw = grid
    if gh <= 0 or gw <= 0 or h % gh or w % gw:
        raise ValueError(f"image {h}x{w} not divisible into a {gh}x{gw} feature grid")
    patches = x.reshape(c, gh, h // gh, gw, w // gw).mean(axis=(2, 4))
    return patches.reshape(c, gh * gw).T


def image_forward(x: np.ndarray, p: ToyImageEncoderParams, grid: tuple[int, int]) -> tuple[np.ndarray, dict]:
    """Dense features (D, H', W') plus the backward cache."""
    cells = cell_means(np.asarray(x, dtype=np.float64), grid)
    raw = cells @ p.weight.T
    feat, norm = _normalize_rows(raw)
    z = feat.T.reshape(p.d, *grid)
    return z, {"cells": cells, "feat": feat, "norm": norm}


def image_backward(cache: dict, grad_z: np.ndarray) -> np.ndarray:
    d = grad_z.shape[0]
    grad_feat = grad_z.reshape(d, -1).T
    grad_raw = _normalize_rows_backward(cache["feat"], cache["norm"], grad_feat)
    return grad_raw.T @ cache["cells"]


def encode_image_toy(x: np.ndarray, p: ToyImageEncoderParams, grid: tuple[int, int]) -> np.ndarray:
    z, _ = image_forward(x, p, grid)
    return z


def adapter_forward(E: np.ndarray, a: ControlAdapterParams) -> np.ndarray:
    """Per-pixel affine map (1x1 convolution) then sigmoid; returns (3, H, W) in (0, 1)."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 3 or E.shape[0] != a.weight.shape[1]:
        raise ValueError(f"embedding grid {E.shape} does not match adapter input dim {a.weight.shape[1]}")
    if a.weight.shape[0] != 3 or a.bias.shape != (3,):
        raise ValueError("adapter must map to exactly 3 channels")
    logits = np.einsum("cd,dhw->chw", a.weight, E) + a.bias[:, None, None]
    return np.clip(expit(logits), _OPEN_LO, _OPEN_HI)
