"""Canny edge detection producing binary perimeter maps."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .imagecore import PerimeterMap, rgb_to_lab

LUMA = np.array([0.299, 0.587, 0.114])

# magnitudes at or below this are treated as flat (guards against round-off)
_FLAT = 1e-9


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.4
    low: float = 0.1
    high: float = 0.2
    use_lab_l: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.low < self.high <= 1:
            raise ValueError("need 0 < low < high <= 1")

    def to_dict(self):
        return asdict(self)


def gaussian_kernel(sigma):
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _correlate1d(plane, kernel, axis):
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    # symmetric: d c b a | a b c d
    padded = np.pad(plane, pad, mode="symmetric")
    n = plane.shape[axis]
    out = np.zeros_like(plane, dtype=np.float64)
    for i, k in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + n)
        out += k * padded[tuple(sl)]
    return out


def gaussian_blur(gray, sigma):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    kernel = gaussian_kernel(sigma)
    plane = np.asarray(gray, dtype=np.float64)
    return _correlate1d(_correlate1d(plane, kernel, 1), kernel, 0)


def sobel_gradients(plane):
    """3x3 Sobel; returns (magnitude, orientation) with orientation = atan2(gy, gx).

    x grows to the right and y grows downwards.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.shape[0] < 3 or plane.shape[1] < 3:
        raise ValueError(f"plane must be at least 3x3, got {plane.shape}")
    p = np.pad(plane, 1, mode="symmetric")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy), np.arctan2(gy, gx)


# (dy, dx) step along the gradient for each signed direction: 0, 45, ..., 315 degrees
_NMS_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))

# magnitudes are rounded to this many decimals so that mirrored pixels tie exactly
MAG_DECIMALS = 9


def non_max_suppression(magnitude, orientation):
    """Keep pixels that are maximal along the quantised gradient direction.

    The gradient direction is quantised to one of 8 compass steps. A pixel
    must be >= its forward neighbour (uphill) and > its backward neighbour,
    so of two equal adjacent maxima exactly one, the one on the darker side,
    survives. This choice rotates with the image. Borders use symmetric
    padding.
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.shape != np.shape(orientation):
        raise ValueError("magnitude and orientation shapes differ")
    deg = np.rad2deg(orientation) % 360.0
    bins = (np.floor((deg + 22.5) / 45.0).astype(int)) % 8
    p = np.pad(magnitude, 1, mode="symmetric")
    h, w = magnitude.shape
    keep = np.zeros((h, w), dtype=bool)
    for b, (dy, dx) in enumerate(_NMS_STEPS):
        fwd = p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = p[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (bins == b) & (magnitude >= fwd) & (magnitude > bwd)
    return np.where(keep, magnitude, 0.0)


def hysteresis(suppressed, low_abs, high_abs):
    """Pixels >= high_abs seed edges; pixels >= low_abs 8-connected to a seed join them."""
    if not 0 < low_abs < high_abs:
        raise ValueError("need 0 < low_abs < high_abs")
    s = np.asarray(suppressed, dtype=np.float64)
    weak, n = ndimage.label(s >= low_abs, structure=np.ones((3, 3), dtype=bool))
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[weak[s >= high_abs]] = True
    seeded[0] = False
    return PerimeterMap(np.where(seeded[weak], 255, 0).astype(np.uint8))


def to_gray(image, use_lab_l=False):
    if use_lab_l:
        return rgb_to_lab(image)[..., 0]
    return image.data.astype(np.float64) @ LUMA


def canny(image, params=CannyParams()):
    gray = to_gray(image, params.use_lab_l)
    if min(gray.shape) < 3:
        raise ValueError(f"image must be at least 3x3, got {gray.shape}")
    mag, ang = sobel_gradients(gaussian_blur(gray, params.sigma))
    mag = np.where(mag > _FLAT, np.round(mag, MAG_DECIMALS), 0.0)
    peak = mag.max()
    if peak == 0:
        return PerimeterMap(np.zeros(gray.shape, dtype=np.uint8))
    return hysteresis(non_max_suppression(mag, ang), params.low * peak, params.high * peak)

