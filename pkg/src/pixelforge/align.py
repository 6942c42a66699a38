"""Polygon-guided contrastive alignment with analytic gradients.

Logit convention: ``logits = cos_sim * exp(log_scale)``, so the temperature is
``exp(-log_scale)``. The scale starts at ``log(1/0.07)`` and is clamped to
``log(100)`` after every update.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .embed import (
    ToyImageEncoderParams,
    ToyTextEncoderParams,
    image_backward,
    image_forward,
    text_backward,
    text_forward,
)
from .tags import subsample_tags

log = logging.getLogger(__name__)

INIT_LOG_SCALE = math.log(1 / 0.07)
MAX_LOGIT_SCALE = 100.0
# math.log(100) rounds up and exp of it gives 100.00000000000004; the double one ulp
# below is equally close to ln(100) and keeps exp(log_scale) <= 100
MAX_LOG_SCALE = math.log(MAX_LOGIT_SCALE)
if math.exp(MAX_LOG_SCALE) > MAX_LOGIT_SCALE:
    MAX_LOG_SCALE = math.nextafter(MAX_LOG_SCALE, 0.0)


def logit_scale(log_scale: float) -> float:
    return math.exp(log_scale)


# -- pooling and similarity -----------------------------------------------------

def pool_polygon(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Masked mean of a (D, H', W') feature map; the raw (unnormalized) average."""
    m = np.asarray(m, dtype=bool)
    if m.shape != z.shape[1:]:
        raise ValueError(f"mask {m.shape} does not match feature grid {z.shape[1:]}")
    n = np.count_nonzero(m)
    if n == 0:
        raise ValueError("cannot pool over an empty mask")
    # cumsum accumulates strictly in scan order, so the result does not depend on
    # numpy's pairwise-summation blocking
    return np.cumsum(z[:, m], axis=1)[:, -1] / n


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# -- loss --------------------------------------------------------------------------

@dataclass
class InfoNCEResult:
    loss: float
    grad_p: np.ndarray
    grad_e: np.ndarray
    grad_log_scale: float
    logits: np.ndarray


def infonce_symmetric(P: np.ndarray, E: np.ndarray, log_scale: float) -> InfoNCEResult:
    """Symmetric InfoNCE over K matched rows of P and E.

    Rows are cosine-normalized internally, so gradients are taken with respect
    to the vectors as passed in (unit or not).
    """
    P = np.asarray(P, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if P.ndim != 2 or P.shape != E.shape:
        raise ValueError("P and E must both be (K, D)")
    k = P.shape[0]
    if k == 0:
        raise ValueError("need at least one pair")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(E)) and math.isfinite(log_scale)):
        raise FloatingPointError("non-finite input to InfoNCE")
    pn_norm = np.linalg.norm(P, axis=1, keepdims=True)
    en_norm = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(pn_norm == 0) or np.any(en_norm == 0):
        raise ValueError("zero-norm embedding in InfoNCE batch")
    Pn, En = P / pn_norm, E / en_norm
    scale = logit_scale(log_scale)
    sim = Pn @ En.T
    logits = scale * sim
    diag = np.arange(k)
    row_lp = log_softmax(logits, axis=1)
    col_lp = log_softmax(logits, axis=0)
    loss = -(row_lp[diag, diag].sum() + col_lp[diag, diag].sum()) / (2 * k)

    eye = np.eye(k)
    g_logits = (softmax(logits, axis=1) - eye + softmax(logits, axis=0) - eye) / (2 * k)
    g_sim = scale * g_logits
    g_pn = g_sim @ En
    g_en = g_sim.T @ Pn
    g_p = (g_pn - Pn * np.sum(g_pn * Pn, axis=1, keepdims=True)) / pn_norm
    g_e = (g_en - En * np.sum(g_en * En, axis=1, keepdims=True)) / en_norm
    g_ls = float(np.sum(g_logits * logits))
    return InfoNCEResult(float(loss), g_p, g_e, g_ls, logits)


# -- batches -----------------------------------------------------------------------

@dataclass
class FeatureInstance:
    """A polygon instance reduced to the feature grid."""

    composition_id: int
    mask: np.ndarray


@dataclass
class Pair:
    image_index: int
    composition_id: int
    mask: np.ndarray


@dataclass
class ContrastiveBatch:
    pairs: list
    images: Optional[list] = None
    compositions: Optional[list] = None

    @property
    def k(self) -> int:
        return len(self.pairs)


def sample_pairs(
    batch: Sequence[Sequence[FeatureInstance]],
    k: int = 128,
    rng: Optional[np.random.Generator] = None,
) -> ContrastiveBatch:
    """Draw up to ``k`` pairs with distinct compositions across the minibatch.

    A composition present in several images is assigned to one of those images
    uniformly at random (then to one of its instances there).
    """
    rng = np.random.default_rng(rng)
    if not batch:
        raise ValueError("empty minibatch")
    owners: dict[int, dict[int, list]] = {}
    for img, instances in enumerate(batch):
        for inst in instances:
            if inst.composition_id == 0 or not inst.mask.any():
                continue
            owners.setdefault(inst.composition_id, {}).setdefault(img, []).append(inst)
    if not owners:
        raise ValueError("minibatch has no polygon instances")
    pairs = []
    for cid in sorted(owners):
        imgs = sorted(owners[cid])
        img = imgs[int(rng.integers(len(imgs)))]
        cands = owners[cid][img]
        inst = cands[int(rng.integers(len(cands)))]
        pairs.append(Pair(img, cid, inst.mask))
    if len(pairs) > k:
        keep = np.sort(rng.choice(len(pairs), size=k, replace=False))
        pairs = [pairs[i] for i in keep]
    return ContrastiveBatch(pairs)


def plan_batch_size(
    counts: Sequence[int],
    k: int = 128,
    confidence: float = 0.95,
    n_resamples: int = 10_000,
    seed: int = 42,
) -> Optional[int]:
    """Smallest minibatch size B whose pair total reaches ``k`` with the given confidence.

    Images are resampled with replacement from the empirical per-image counts.
    Returns ``None`` when no B up to the dataset size qualifies.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0:
        raise ValueError("empty pair-count distribution")
    rng = np.random.default_rng(seed)
    totals = np.zeros(n_resamples, dtype=np.int64)
    for b in range(1, counts.size + 1):
        totals += rng.choice(counts, size=n_resamples)
        if np.mean(totals >= k) >= confidence:
            return b
    return None


# -- parameters and optimizer -------------------------------------------------------

@dataclass
class AlignParams:
    text: ToyTextEncoderParams
    image: ToyImageEncoderParams
    log_scale: float = INIT_LOG_SCALE

    @classmethod
    def init(cls, d: int = 64, v: int = 1024, channels: int = 3, seed: int = 42):
        rng = np.random.default_rng(seed)
        return cls(ToyTextEncoderParams.init(d, v, rng), ToyImageEncoderParams.init(d, channels, rng))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.text.weight.ravel(), self.image.weight.ravel(), [self.log_scale]])

    def unflatten(self, flat: np.ndarray) -> "AlignParams":
        nt = self.text.weight.size
        ni = self.image.weight.size
        return AlignParams(
            ToyTextEncoderParams(flat[:nt].reshape(self.text.weight.shape).copy()),
            ToyImageEncoderParams(flat[nt:nt + ni].reshape(self.image.weight.shape).copy()),
            float(flat[nt + ni]),
        )

    def decay_mask(self) -> np.ndarray:
        mask = np.ones(self.text.weight.size + self.image.weight.size + 1)
        mask[-1] = 0.0
        return mask


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    ort_ema: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    beta_ort: float = 0.9
    orthogonal: bool = True

    @classmethod
    def for_params(cls, params: AlignParams, **kw):
        n = params.flatten().size
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), **kw)


def orthogonalize_gradient(g: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Remove the component of ``g`` along the running gradient average, then update the average."""
    if g.shape != state.ort_ema.shape:
        raise ValueError("gradient and EMA shapes differ")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    m = state.ort_ema
    norm = np.linalg.norm(m)
    if norm == 0.0:
        out = g.copy()
    else:
        mhat = m / norm
        out = g - np.dot(g, mhat) * mhat
    state.ort_ema = state.beta_ort * m + (1.0 - state.beta_ort) * g
    return out


def adamw_update(
    flat: np.ndarray, g: np.ndarray, state: OptimizerState, lr: float, weight_decay: float, decay_mask
) -> np.ndarray:
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    decayed = flat * (1.0 - lr * weight_decay * decay_mask)
    return decayed - lr * mhat / (np.sqrt(vhat) + state.eps)


# -- forward / backward ---------------------------------------------------------------

def forward_backward(params: AlignParams, batch: ContrastiveBatch, grid: tuple[int, int]):
    """Loss and gradients (as an ``AlignParams``) for one contrastive batch."""
    used = sorted({p.image_index for p in batch.pairs})
    maps, caches = {}, {}
    for i in used:
        maps[i], caches[i] = image_forward(batch.images[i], params.image, grid)
    pooled = np.stack([pool_polygon(maps[p.image_index], p.mask) for p in batch.pairs])
    emb, tcache = text_forward(batch.compositions, params.text)
    res = infonce_symmetric(pooled, emb, params.log_scale)

    g_text = text_backward(tcache, res.grad_e)
    g_maps = {i: np.zeros_like(maps[i]) for i in used}
    for row, p in enumerate(batch.pairs):
        g_maps[p.image_index][:, p.mask] += res.grad_p[row][:, None] / np.count_nonzero(p.mask)
    g_image = sum(image_backward(caches[i], g_maps[i]) for i in used)
    grads = AlignParams(ToyTextEncoderParams(g_text), ToyImageEncoderParams(g_image), res.grad_log_scale)
    return res.loss, grads


def train_step(
    batch: ContrastiveBatch,
    params: AlignParams,
    opt: OptimizerState,
    lr: float,
    weight_decay: float,
    grid: tuple[int, int],
) -> tuple[AlignParams, float]:
    loss, grads = forward_backward(params, batch, grid)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {opt.step} (log_scale={params.log_scale:.4f})")
    g = grads.flatten()
    if opt.orthogonal:
        g = orthogonalize_gradient(g, opt)
    flat = adamw_update(params.flatten(), g, opt, lr, weight_decay, params.decay_mask())
    new = params.unflatten(flat)
    new.log_scale = min(new.log_scale, MAX_LOG_SCALE)
    return new, loss


def gradient_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-3,
    n_coords: Optional[int] = 50,
    rng=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a flat float64 vector to ``(value, gradient)``. Uses the
    fourth-order five-point stencil, whose O(eps^4) truncation lets eps stay
    large enough that round-off does not swamp small gradient entries.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=np.float64)
    _, grad = f(x)
    idx = np.arange(x.size) if n_coords is None or n_coords >= x.size else rng.choice(x.size, n_coords, replace=False)
    worst = 0.0
    for i in idx:
        vals = []
        for step in (2 * eps, eps, -eps, -2 * eps):
            xs = x.copy()
            xs[i] += step
            vals.append(f(xs)[0])
        num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
        denom = max(abs(num), abs(grad[i]), 1e-8)
        worst = max(worst, abs(num - grad[i]) / denom)
    return worst


# -- training loop --------------------------------------------------------------------

@dataclass
class TrainConfig:
    d: int = 64
    v_hash: int = 1024
    grid_h: int = 64
    grid_w: int = 64
    k_pairs: int = 128
    batch_images: int = 6
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    beta_ort: float = 0.9
    seed: int = 42
    max_steps: int = 1000
    keep_prob: float = 1.0
    orthogonal: bool = True
    eps: float = 1e-6

    @property
    def grid(self) -> tuple[int, int]:
        return (self.grid_h, self.grid_w)

    def validate(self):
        ints = ("d", "v_hash", "grid_h", "grid_w", "k_pairs", "batch_images")
        for name in ints:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("max_steps, lr and weight_decay must be nonnegative")
        for name in ("beta1", "beta2", "beta_ort", "keep_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        return self

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        cfg = cls()
        types = {f: type(getattr(cfg, f)) for f in cfg.__dataclass_fields__}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            if types[key] is bool:
                parsed = value.lower() in ("1", "true", "yes", "on")
            else:
                parsed = types[key](float(value)) if types[key] is int else types[key](value)
            setattr(cfg, key, parsed)
        return cfg.validate()

    def dump(self) -> str:
        return "".join(f"{k} = {getattr(self, k)}\n" for k in self.__dataclass_fields__)


@dataclass
class TrainingSample:
    """One training image with its instances at feature resolution."""

    image: np.ndarray
    instances: list
    compositions: dict = field(default_factory=dict)  # composition id -> Composition


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    scales: list = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["step,loss,logit_scale"]
        rows += [f"{s},{l!r},{c!r}" for s, l, c in zip(self.steps, self.losses, self.scales)]
        return "\n".join(rows) + "\n"


def make_batch(
    samples: Sequence[TrainingSample], cfg: TrainConfig, rng: np.random.Generator
) -> ContrastiveBatch:
    n = len(samples)
    chosen = rng.choice(n, size=min(cfg.batch_images, n), replace=False)
    picked = [samples[i] for i in chosen]
    batch = sample_pairs([s.instances for s in picked], cfg.k_pairs, rng)
    batch.images = [s.image for s in picked]
    batch.compositions = [
        subsample_tags(picked[p.image_index].compositions[p.composition_id], cfg.keep_prob, rng)
        for p in batch.pairs
    ]
    return batch


def train(
    samples: Sequence[TrainingSample],
    cfg: TrainConfig,
    params: Optional[AlignParams] = None,
    callback: Optional[Callable[[int, float, AlignParams], None]] = None,
) -> tuple[AlignParams, TrainLog]:
    """Run ``cfg.max_steps`` steps of contrastive training from seed ``cfg.seed``."""
    if not samples:
        raise ValueError("no training samples")
    params = params or AlignParams.init(cfg.d, cfg.v_hash, samples[0].image.shape[0], cfg.seed)
    opt = OptimizerState.for_params(
        params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, beta_ort=cfg.beta_ort, orthogonal=cfg.orthogonal
    )
    rng = np.random.default_rng(cfg.seed)
    history = TrainLog()
    for step in range(1, cfg.max_steps + 1):
        batch = make_batch(samples, cfg, rng)
        params, loss = train_step(batch, params, opt, cfg.lr, cfg.weight_decay, cfg.grid)
        history.steps.append(step)
        history.losses.append(loss)
        history.scales.append(logit_scale(params.log_scale))
        if callback is not None:
            callback(step, loss, params)
        if step % 100 == 0:
            log.info("step %d loss %.4f logit_scale %.2f", step, loss, logit_scale(params.log_scale))
    return params, history
