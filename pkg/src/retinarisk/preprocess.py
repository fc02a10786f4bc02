"""Fundus image enhancement, quality filtering and augmentation.

Images are float arrays in [0, 1], shaped ``[H, W]`` (grayscale) or
``[H, W, 3]`` (RGB). Every function returns a new array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
N_BINS = 256


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    clahe_clip: float = 2.0
    clahe_grid: tuple[int, int] = (8, 8)
    denoise_sigma: float = 1.5
    target_size: int = 224
    blur_threshold: float = 100.0
    rot_limit_deg: float = 15.0
    brightness_limit: float = 0.20
    flip_prob: float = 0.5

    def __post_init__(self):
        positive = dict(clahe_clip=self.clahe_clip, denoise_sigma=self.denoise_sigma,
                        target_size=self.target_size, blur_threshold=self.blur_threshold,
                        rot_limit_deg=self.rot_limit_deg, brightness_limit=self.brightness_limit)
        bad = [k for k, v in positive.items() if not v > 0]
        if bad or min(self.clahe_grid) < 1:
            raise PreprocessError(f"preprocess settings must be positive: {bad or ['clahe_grid']}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise PreprocessError("flip_prob must lie in [0, 1]")


def _check(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise PreprocessError(f"expected [H,W] or [H,W,3] image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise PreprocessError("empty image")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    img = _check(img)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA


# ----------------------------------------------------------------------- CLAHE
def _clipped_lut(tile: np.ndarray, clip: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=N_BINS).astype(np.float64)
    limit = max(clip * tile.size / N_BINS, 1.0)
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / N_BINS
    return np.cumsum(hist) / hist.sum()


def _clahe_gray(gray: np.ndarray, clip: float, grid: tuple[int, int]) -> np.ndarray:
    h, w = gray.shape
    gy, gx = grid
    if h < gy or w < gx:
        gy, gx = 1, 1
    th, tw = math.ceil(h / gy), math.ceil(w / gx)
    levels = np.round(np.clip(gray, 0.0, 1.0) * (N_BINS - 1)).astype(np.int64)
    padded = np.pad(levels, ((0, gy * th - h), (0, gx * tw - w)), mode="edge")
    luts = np.empty((gy, gx, N_BINS))
    for i in range(gy):
        for j in range(gx):
            luts[i, j] = _clipped_lut(padded[i * th:(i + 1) * th, j * tw:(j + 1) * tw], clip)

    # bilinear blend of the four nearest tile mappings (tile centres as nodes)
    fy = np.clip((np.arange(h) + 0.5) / th - 0.5, 0.0, gy - 1)
    fx = np.clip((np.arange(w) + 0.5) / tw - 0.5, 0.0, gx - 1)
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, gy - 1)
    x1 = np.minimum(x0 + 1, gx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, X0, Y1, X1 = y0[:, None], x0[None, :], y1[:, None], x1[None, :]
    v = levels
    top = (1 - wx) * luts[Y0, X0, v] + wx * luts[Y0, X1, v]
    bottom = (1 - wx) * luts[Y1, X0, v] + wx * luts[Y1, X1, v]
    return np.clip((1 - wy) * top + wy * bottom, 0.0, 1.0)


def clahe(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    RGB input is equalized on luminance only; each pixel's RGB triple is then
    rescaled by the luminance ratio so chromaticity is preserved.
    """
    img = _check(img)
    if img.ndim == 2 or img.shape[2] == 1:
        out = _clahe_gray(to_gray(img), cfg.clahe_clip, cfg.clahe_grid)
        return out if img.ndim == 2 else out[:, :, None]
    y = to_gray(img)
    y_new = _clahe_gray(y, cfg.clahe_clip, cfg.clahe_grid)
    safe = y > 1e-12
    ratio = np.where(safe, y_new / np.where(safe, y, 1.0), 0.0)
    out = img * ratio[:, :, None]
    # black pixels carry no chromaticity; they become neutral gray
    out[~safe] = y_new[~safe, None]
    return np.clip(out, 0.0, 1.0)


# -------------------------------------------------------------------- denoise
def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise PreprocessError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = kernel.size // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect") if img.shape[axis] > 1 else np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    n = img.shape[axis]
    for offset, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(offset, offset + n), axis=axis)
    return out


def gaussian_denoise(img: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, reflect padding."""
    img = _check(img)
    k = gaussian_kernel(sigma)
    out = _convolve_axis(_convolve_axis(img, k, 0), k, 1)
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------ resampling core
def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     fill: float | None) -> np.ndarray:
    """Sample ``img`` at float coordinates. ``fill=None`` clamps to the border;
    otherwise samples outside the image blend toward ``fill``."""
    h, w = img.shape[:2]
    if fill is not None:
        pad = ((1, 1), (1, 1)) + ((0, 0),) * (img.ndim - 2)
        img = np.pad(img, pad, constant_values=fill)
        ys, xs = ys + 1.0, xs + 1.0
        h, w = h + 2, w + 2
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    if img.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    top = (1 - wx) * img[y0, x0] + wx * img[y0, x1]
    bottom = (1 - wx) * img[y1, x0] + wx * img[y1, x1]
    return (1 - wy) * top + wy * bottom


def resize(img: np.ndarray, target: int = 224) -> np.ndarray:
    """Bilinear resize to ``target x target`` with half-pixel centres."""
    img = _check(img)
    if target <= 0:
        raise PreprocessError("target size must be positive")
    h, w = img.shape[:2]
    if (h, w) == (target, target):
        return img.copy()
    ys = (np.arange(target) + 0.5) * (h / target) - 0.5
    xs = (np.arange(target) + 0.5) * (w / target) - 0.5
    out = _sample_bilinear(img, ys[:, None], xs[None, :], fill=None)
    return np.clip(out, 0.0, 1.0)


# -------------------------------------------------------------------- quality
def laplacian_variance(img: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian on the 0-255 luminance scale."""
    gray = to_gray(img) * 255.0
    if min(gray.shape) < 2:
        return 0.0
    p = np.pad(gray, 1, mode="reflect")
    lap = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1])
    return float(lap.var())


def is_sharp(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> bool:
    return laplacian_variance(img) >= cfg.blur_threshold


# --------------------------------------------------------------- augmentation
def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre (bilinear, black fill)."""
    img = _check(img)
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: source position of each output pixel
    src_y = c * dy - s * dx + cy
    src_x = s * dy + c * dx + cx
    return np.clip(_sample_bilinear(img, src_y, src_x, fill=0.0), 0.0, 1.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return _check(img)[:, ::-1].copy()


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(_check(img) * factor, 0.0, 1.0)


def apply_augmentation(img: np.ndarray, degrees: float, flip: bool, brightness: float) -> np.ndarray:
    out = rotate(img, degrees)
    if flip:
        out = hflip(out)
    return adjust_brightness(out, brightness)


def augment(img: np.ndarray, rng: np.random.Generator,
            cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Random rotation, horizontal flip and brightness scaling, drawn independently."""
    degrees = rng.uniform(-cfg.rot_limit_deg, cfg.rot_limit_deg)
    flip = bool(rng.random() < cfg.flip_prob)
    brightness = rng.uniform(1.0 - cfg.brightness_limit, 1.0 + cfg.brightness_limit)
    return apply_augmentation(img, degrees, flip, brightness)


# --------------------------------------------------------------- biomarkers
def minmax_normalize(values) -> np.ndarray:
    """Scale a series to [0, 1]. A constant series maps to zeros."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise PreprocessError("cannot normalize an empty series")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


# -------------------------------------------------------------------- pipeline
def preprocess_image(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """CLAHE -> Gaussian denoise -> resize (the deterministic stages)."""
    out = clahe(img, cfg)
    out = gaussian_denoise(out, cfg.denoise_sigma)
    return resize(out, cfg.target_size)
