"""Retrieval, tag-prediction and image-quality metrics, plus Frechet distance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .tags import Composition


@dataclass
class RetrievalResult:
    ranked_ids: list
    similarities: list
    truth: int


def rank_gallery(query: np.ndarray, gallery_ids: Sequence[int], gallery: np.ndarray, truth: int) -> RetrievalResult:
    """Rank gallery rows by cosine similarity to ``query``; ties go to the lower ID."""
    q = query / np.linalg.norm(query)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    sims = g @ q
    ids = np.asarray(gallery_ids)
    order = np.lexsort((ids, -sims))
    return RetrievalResult(ids[order].tolist(), sims[order].tolist(), int(truth))


def recall_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no retrieval results")
    return sum(r.truth in r.ranked_ids[:k] for r in results) / len(results)


def jaccard_relevance(compositions: dict) -> Callable[[int, int], float]:
    """Relevance = Jaccard overlap of tag atoms, looked up by composition ID."""

    def rel(truth: int, cand: int) -> float:
        a, b = set(compositions[truth].atoms), set(compositions[cand].atoms)
        union = a | b
        return len(a & b) / len(union) if union else 1.0

    return rel


def ndcg_from_gains(gains: Sequence[float], ideal: Sequence[float], k: int) -> float:
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.dot(np.asarray(gains[:k], dtype=float), disc[:len(gains[:k])]))
    best = sorted(ideal, reverse=True)[:k]
    idcg = float(np.dot(np.asarray(best, dtype=float), disc[:len(best)]))
    return 1.0 if idcg == 0.0 else dcg / idcg


def semantic_ndcg_at_k(
    results: Sequence[RetrievalResult], relevance: Callable[[int, int], float], k: int = 20
) -> float:
    """Mean nDCG@k with linear gain; queries whose ideal DCG is zero score 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no retrieval results")
    scores = []
    for r in results:
        gains = [relevance(r.truth, c) for c in r.ranked_ids]
        scores.append(ndcg_from_gains(gains[:k], gains, k))
    return float(np.mean(scores))


def parent_child_accuracy(predictions: Sequence[tuple[Composition, Composition]]) -> tuple[float, float]:
    """(parent, child) hit rates over (predicted, true) composition pairs."""
    if not predictions:
        raise ValueError("no predictions")
    parent = child = 0
    for pred, true in predictions:
        parent += bool(pred.keys & true.keys)
        child += bool(set(pred.atoms) & set(true.atoms))
    n = len(predictions)
    return parent / n, child / n


def _micro_f1(pairs) -> float:
    tp = fp = fn = 0
    for pred, true in pairs:
        tp += len(pred & true)
        fp += len(pred - true)
        fn += len(true - pred)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def mixed_f1(predictions: Sequence[tuple[Composition, Composition]]) -> float:
    """Mean of micro-F1 over parent keys and micro-F1 over full atoms."""
    if not predictions:
        raise ValueError("no predictions")
    parent = _micro_f1((set(p.keys), set(t.keys)) for p, t in predictions)
    child = _micro_f1((set(p.atoms), set(t.atoms)) for p, t in predictions)
    return (parent + child) / 2


def tag_overlap_f1(pred: Composition, true: Composition) -> float:
    return _micro_f1([(set(pred.atoms), set(true.atoms))])


# -- image quality ------------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    half = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _ssim_channel(a: np.ndarray, b: np.ndarray, L: float, win: np.ndarray) -> float:
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a * mu_a
    sbb = _filter_valid(b * b, win) - mu_b * mu_b
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def _as_channels(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[..., None]
    if img.ndim == 3 and img.shape[2] in (1, 3):
        return img
    raise ValueError("images must be (H, W) or (H, W, C) with C in {1, 3}")


def ssim(a, b, L: float = 255.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged across channels."""
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    win = gaussian_window(win_size, sigma)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], L, win) for c in range(a.shape[2])]))


def psnr(a, b, peak: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


# -- Frechet distance ---------------------------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape does not match mean")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-9:
            raise ValueError("covariance is not symmetric")
        if d and np.linalg.eigvalsh(self.cov).min() < -1e-9:
            raise ValueError("covariance is not positive semidefinite")


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (N, D) array with N >= 2")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu, (cov + cov.T) / 2)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(p: GaussianStats, q: GaussianStats, tol: float = 1e-9) -> float:
    """||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p S_q)^{1/2}).

    The trace term uses the eigenvalues of S_p^{1/2} S_q S_p^{1/2}, which is
    symmetric and shares the spectrum of S_p S_q.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError("dimension mismatch")
    root = _psd_sqrt(p.cov)
    mid = root @ q.cov @ root
    eig = np.linalg.eigvalsh((mid + mid.T) / 2)
    floor = -tol * max(1.0, float(np.abs(eig).max(initial=0.0)))
    if eig.size and eig.min() < floor:
        raise FloatingPointError(f"product covariance has negative eigenvalue {eig.min():.3e}")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    diff = p.mean - q.mean
    val = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * tr_sqrt)
    return max(val, 0.0)
