"""Stain, geometry and resolution transforms on small ``(3, H, W)`` rasters,
plus triplet batch construction from pseudo-classes.

Images are float arrays with values in [0, 1]. All randomness comes from an
explicit seed so that ``(spec, seed)`` fixes every output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Ruifrok & Johnston H&E-DAB stain vectors, one stain per row (OD = HED @ M).
_STAIN_RAW = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
STAIN_MATRIX = _STAIN_RAW / np.linalg.norm(_STAIN_RAW, axis=1, keepdims=True)
STAIN_INVERSE = np.linalg.inv(STAIN_MATRIX)
OD_FLOOR = 1e-6


@dataclass(frozen=True)
class AugmentSpec:
    hed_theta: float = 0.05
    rotation: float = 10.0
    translation: float = 0.1
    shear: float = 1.0
    pixelation: int = 2
    apply_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.hed_theta < 0:
            raise ValueError(f"hed_theta must be >= 0, got {self.hed_theta}")
        if self.pixelation < 1:
            raise ValueError(f"pixelation factor must be >= 1, got {self.pixelation}")


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_idx: np.ndarray
    negative_idx: np.ndarray

    def __len__(self):
        return len(self.anchor_idx)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    return img


def rgb_to_hed(img: np.ndarray) -> np.ndarray:
    """Optical density deconvolved into stain concentrations; the channel axis
    is third from last, so ``(3, H, W)`` and ``(N, 3, H, W)`` both work."""
    od = -np.log10(np.maximum(img, OD_FLOOR))
    return np.moveaxis(np.tensordot(np.moveaxis(od, -3, -1), STAIN_INVERSE, axes=1), -1, -3)


def hed_to_rgb(hed: np.ndarray) -> np.ndarray:
    od = np.moveaxis(np.tensordot(np.moveaxis(hed, -3, -1), STAIN_MATRIX, axes=1), -1, -3)
    return np.power(10.0, -od)


def _jitter(imgs: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    hed = rgb_to_hed(imgs)
    hed = hed * (1.0 + u)[..., None, None] + v[..., None, None]
    return np.clip(hed_to_rgb(hed), 0.0, 1.0)


def hed_jitter(img, theta: float, seed=None) -> np.ndarray:
    """Scale-and-shift each stain channel by ``(1 + u)`` and ``v`` drawn from
    ``U(-theta, theta)``, then map back to RGB."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    img = _check_image(img)
    rng = _rng(seed)
    u = rng.uniform(-theta, theta, size=3)
    v = rng.uniform(-theta, theta, size=3)
    if theta == 0:
        return np.clip(img, 0.0, 1.0)
    return _jitter(img, u, v)


def _affine_inverse(angle, shear) -> np.ndarray:
    """Inverse of rotation @ shear for arrays of angles/shears in degrees."""
    a = np.deg2rad(angle)
    c, s = np.cos(a), np.sin(a)
    tx, ty = np.tan(np.deg2rad(shear[0])), np.tan(np.deg2rad(shear[1]))
    forward = np.empty(np.shape(angle) + (2, 2))
    forward[..., 0, 0] = c + s * ty
    forward[..., 0, 1] = c * tx + s
    forward[..., 1, 0] = -s + c * ty
    forward[..., 1, 1] = -s * tx + c
    return np.linalg.inv(forward)


def _resample(imgs: np.ndarray, inv: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Bilinear pull-back of ``(N, 3, H, W)`` images through per-image inverse
    maps about the centre, with border replication."""
    n, _, h, w = imgs.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    px = cols[None] - cx - shift[:, 0, None, None] * w
    py = rows[None] - cy - shift[:, 1, None, None] * h
    sx = inv[:, 0, 0, None, None] * px + inv[:, 0, 1, None, None] * py + cx
    sy = inv[:, 1, 0, None, None] * px + inv[:, 1, 1, None, None] * py + cy
    # snap round-off so exact grid rotations stay exact
    sx = np.clip(np.round(sx, 9), 0, w - 1)
    sy = np.clip(np.round(sy, 9), 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    b = np.arange(n)[:, None, None, None]
    ch = np.arange(3)[None, :, None, None]

    def at(yy, xx):
        return imgs[b, ch, yy[:, None], xx[:, None]]

    out = at(y0, x0) * (1 - fx) * (1 - fy) + at(y0, x1) * fx * (1 - fy) + at(y1, x0) * (1 - fx) * fy + at(y1, x1) * fx * fy
    return np.clip(out, 0.0, 1.0)


def affine_transform(img, angle: float = 0.0, translate=(0.0, 0.0), shear=(0.0, 0.0)) -> np.ndarray:
    """Rotate (degrees, counter-clockwise as displayed), shear (degrees) and
    translate (fractions of width/height) about the image centre.

    Bilinear resampling; samples falling outside the raster take the value of
    the nearest border pixel.
    """
    img = _check_image(img)
    inv = _affine_inverse(np.array([angle]), (np.array([shear[0]]), np.array([shear[1]])))
    return _resample(img[None], inv, np.array([translate], dtype=np.float64))[0]


def _affine_draws(spec: AugmentSpec, rng, n: int):
    angle = rng.uniform(-spec.rotation, spec.rotation, size=n)
    shift = rng.uniform(-spec.translation, spec.translation, size=(n, 2))
    shear = rng.uniform(-spec.shear, spec.shear, size=(n, 2))
    return _affine_inverse(angle, (shear[:, 0], shear[:, 1])), shift


def random_affine(img, spec: AugmentSpec, seed=None) -> np.ndarray:
    inv, shift = _affine_draws(spec, _rng(seed), 1)
    return _resample(_check_image(img)[None], inv, shift)[0]


def pixelate(img, factor: int) -> np.ndarray:
    """Average-pool over ``factor``-sized blocks, then paint each block with its
    mean. Edge blocks that do not fill a whole block average what they hold.
    Works on ``(3, H, W)`` or ``(N, 3, H, W)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        _check_image(img)
    h, w = img.shape[-2:]
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor > min(h, w):
        raise ValueError(f"factor {factor} exceeds image size {h}x{w}")
    if factor == 1:
        return img.copy()
    by = np.arange(h) // factor
    bx = np.arange(w) // factor
    pool_y = np.zeros((by[-1] + 1, h))
    pool_y[by, np.arange(h)] = 1.0
    pool_x = np.zeros((bx[-1] + 1, w))
    pool_x[bx, np.arange(w)] = 1.0
    pool_y /= pool_y.sum(axis=1, keepdims=True)
    pool_x /= pool_x.sum(axis=1, keepdims=True)
    means = pool_y @ img @ pool_x.T
    return means[..., by[:, None], bx[None, :]]


def random_views(imgs, spec: AugmentSpec, seed=None) -> np.ndarray:
    """Per image, apply pixelate, random affine and HED jitter each with
    probability ``spec.apply_prob`` (in that order, so jitter is outermost)."""
    imgs = np.array(imgs, dtype=np.float64)
    rng = _rng(seed)
    n = len(imgs)
    flags = rng.random((n, 3)) < spec.apply_prob
    inv, shift = _affine_draws(spec, rng, n)
    u = rng.uniform(-spec.hed_theta, spec.hed_theta, size=(n, 3))
    v = rng.uniform(-spec.hed_theta, spec.hed_theta, size=(n, 3))
    if n == 0:
        return imgs
    factor = min(spec.pixelation, *imgs.shape[-2:])
    sel = flags[:, 0]
    if factor > 1 and sel.any():
        imgs[sel] = pixelate(imgs[sel], factor)
    sel = flags[:, 1]
    if sel.any():
        imgs[sel] = _resample(imgs[sel], inv[sel], shift[sel])
    sel = flags[:, 2]
    if spec.hed_theta > 0 and sel.any():
        imgs[sel] = _jitter(imgs[sel], u[sel], v[sel])
    return imgs


def random_view(img, spec: AugmentSpec, seed=None) -> np.ndarray:
    return random_views(_check_image(img)[None], spec, seed)[0]


def make_triplet_batch(pool, spec: AugmentSpec, batch: int, seed=None) -> TripletBatch:
    """Anchor = a pool image (its own pseudo-class), positive = a random view of
    it, negative = a different pool image drawn uniformly."""
    pool = np.asarray(pool, dtype=np.float64)
    n = len(pool)
    if n < 2:
        raise ValueError(f"triplet pool needs at least 2 images, got {n}")
    rng = _rng(seed)
    if batch == 0:
        empty = np.zeros((0,) + pool.shape[1:])
        none = np.zeros(0, dtype=int)
        return TripletBatch(empty, empty.copy(), empty.copy(), none, none.copy())
    anchor_idx = rng.choice(n, size=batch, replace=batch > n)
    # uniform over the other n - 1 images
    neg_idx = rng.integers(0, n - 1, size=batch)
    neg_idx = neg_idx + (neg_idx >= anchor_idx)
    positives = random_views(pool[anchor_idx], spec, rng)
    return TripletBatch(pool[anchor_idx], positives, pool[neg_idx], anchor_idx, neg_idx)
