"""Condition-image extraction.

Turns grayscale images into the single-channel condition maps the control
branch consumes: a full Canny edge detector and a cheap blur-based depth
stand-in. Everything here is pure and deterministic; repeated calls with
the same inputs produce bit-identical outputs.

All filtering runs in float64 with a fixed tap order (ascending offset,
row-major), so a naive per-pixel reimplementation of the same contract
reproduces the results exactly. That property is what the tests lean on.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = ["GrayImage", "canny", "depth_proxy", "rgb_to_gray"]


class GrayImage:
    """Single-channel image: float64 samples in [0, 1], row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        a = np.ascontiguousarray(data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-d array, got {a.ndim}-d")
        if a.size == 0:
            raise ValueError("image has no pixels")
        if not np.isfinite(a).all():
            raise ValueError("image contains non-finite values")
        lo = float(a.min())
        hi = float(a.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"values outside [0, 1]: range [{lo:.6g}, {hi:.6g}]")
        self.data = a

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def as_tensor(self):
        """Float32 copy shaped (1, H, W) for the control branch."""
        return Tensor.from_numpy(self.data[np.newaxis].astype(np.float32))


def _reflect_indices(n, radius):
    """Indices -radius .. n-1+radius mapped into [0, n) by mirroring.

    Mirrors about the ends without repeating the boundary sample, so the
    pattern for n=4 is ... 2 1 | 0 1 2 3 | 2 1 ... Works for any radius,
    even larger than the image.
    """
    i = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n - 2
    m = np.mod(i, period)
    return np.where(m < n, m, period - m)


def _gaussian_weights(sigma):
    """Normalized 1-d kernel with radius ceil(3*sigma).

    The 1/(sigma*sqrt(2*pi)) density factor cancels under normalization in
    exact arithmetic but shifts last-ulp rounding. A symmetric step sits
    exactly between its two adjacent columns otherwise, and equal-neighbor
    suppression would then erase the edge entirely; with the factor in
    place the tie breaks and one column survives. Don't drop it.
    """
    radius = math.ceil(3.0 * sigma)
    c = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    raw = [c * math.exp(-(k * k) / (2.0 * sigma * sigma)) for k in range(-radius, radius + 1)]
    total = 0.0
    for g in raw:
        total += g
    return [g / total for g in raw], radius


def _gaussian_blur(img, sigma):
    """Separable blur, horizontal pass then vertical pass.

    Taps accumulate in ascending offset order; each output element sees the
    exact rounding sequence a scalar loop would, which keeps the result
    reproducible against a per-pixel reference.
    """
    weights, radius = _gaussian_weights(sigma)
    h, w = img.shape

    idx = _reflect_indices(w, radius)
    padded = img[:, idx]
    tmp = np.zeros_like(img)
    for j, wt in enumerate(weights):
        tmp += wt * padded[:, j : j + w]

    idx = _reflect_indices(h, radius)
    padded = tmp[idx, :]
    out = np.zeros_like(img)
    for j, wt in enumerate(weights):
        out += wt * padded[j : j + h, :]
    return out


_SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
_SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))


def _filter3x3(img, kernel):
    """3x3 correlation with reflect borders, taps in row-major order.

    Zero coefficients are accumulated too; skipping them would change
    nothing numerically but the fixed sequence is easier to restate.
    """
    h, w = img.shape
    ry = _reflect_indices(h, 1)
    rx = _reflect_indices(w, 1)
    padded = img[np.ix_(ry, rx)]
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy][dx] * padded[dy : dy + h, dx : dx + w]
    return out


# Sector boundaries: tan(22.5 deg) and tan(67.5 deg). Written via sqrt so
# both this module and any reimplementation land on the same doubles.
_TAN_LO = math.sqrt(2.0) - 1.0
_TAN_HI = math.sqrt(2.0) + 1.0


def _quantize_sectors(gx, gy):
    """Gradient direction folded to [0, 180) and snapped to 4 sectors.

    Sector 0 is horizontal (compare left/right), 1 is the down-right
    diagonal, 2 vertical, 3 down-left. Boundaries follow round-to-nearest
    on the angle: 22.5 deg belongs to sector 1, 157.5 deg to sector 0,
    and so on. Comparisons run against tangent thresholds instead of
    calling atan2 so the decision is a pure float64 multiply-and-compare.
    """
    neg = gy < 0.0
    fy = np.where(neg, -gy, gy)
    fx = np.where(neg, -gx, np.where(gy == 0.0, np.abs(gx), gx))

    pos = fx >= 0.0
    m = -fx
    right = np.where(fy < _TAN_LO * fx, 0, np.where(fy < _TAN_HI * fx, 1, 2))
    left = np.where(fy <= _TAN_LO * m, 0, np.where(fy <= _TAN_HI * m, 3, 2))
    return np.where(pos, right, left)


_NMS_NEIGHBORS = {
    0: ((0, -1), (0, 1)),
    1: ((1, 1), (-1, -1)),
    2: ((-1, 0), (1, 0)),
    3: ((1, -1), (-1, 1)),
}


def _suppress_nonmaxima(mag, sector):
    """Keep pixels strictly greater than both neighbors along the gradient.

    Equal-magnitude neighbors suppress the pixel. The outermost ring is
    never kept; interior pixels always have all eight neighbors.
    """
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    center = mag[1:-1, 1:-1]
    sec = sector[1:-1, 1:-1]
    for s, ((dy1, dx1), (dy2, dx2)) in _NMS_NEIGHBORS.items():
        n1 = mag[1 + dy1 : h - 1 + dy1, 1 + dx1 : w - 1 + dx1]
        n2 = mag[1 + dy2 : h - 1 + dy2, 1 + dx2 : w - 1 + dx2]
        keep[1:-1, 1:-1] |= (sec == s) & (center > n1) & (center > n2)
    return keep


def _flood_from_strong(strong, weak):
    """8-connected flood over weak pixels, seeded at strong ones."""
    h, w = strong.shape
    edges = strong.copy()
    heads = deque(zip(*np.nonzero(strong)))
    while heads:
        y, x = heads.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny = y + dy
                nx = x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not edges[ny, nx]:
                    edges[ny, nx] = True
                    heads.append((ny, nx))
    return edges


def canny(img, low_thresh, high_thresh, sigma=1.0):
    """Binary edge map via the classic five-stage pipeline.

    Gaussian blur (radius ceil(3*sigma)), Sobel gradients, magnitude
    normalized by its peak, non-maximum suppression with 4-sector angle
    quantization, then double threshold and 8-connected hysteresis grown
    from strong pixels. Thresholds apply to the normalized magnitude.
    Output values are exactly 0.0 or 1.0.
    """
    if not (0.0 <= low_thresh < high_thresh <= 1.0):
        raise ValueError(
            f"thresholds must satisfy 0 <= low < high <= 1, got ({low_thresh}, {high_thresh})"
        )
    if img.height < 5 or img.width < 5:
        raise ValueError(f"image too small for edge detection: {img.height}x{img.width}")

    smooth = _gaussian_blur(img.data, sigma)
    gx = _filter3x3(smooth, _SOBEL_X)
    gy = _filter3x3(smooth, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0.0:
        mag = mag / peak

    keep = _suppress_nonmaxima(mag, _quantize_sectors(gx, gy))
    strong = keep & (mag >= high_thresh)
    weak = keep & (mag >= low_thresh)
    edges = _flood_from_strong(strong, weak)
    return GrayImage(edges.astype(np.float64))


def depth_proxy(img):
    """Blur-based stand-in for a depth map.

    Gaussian blur at sigma=2, then min-max normalization to [0, 1]. A
    constant input has zero range and maps to all zeros.
    """
    smooth = _gaussian_blur(img.data, 2.0)
    lo = smooth.min()
    hi = smooth.max()
    if hi > lo:
        return GrayImage((smooth - lo) / (hi - lo))
    return GrayImage(np.zeros_like(smooth))


def rgb_to_gray(image):
    """Luminance of a (3, H, W) tensor in [-1, 1], rescaled to [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {image.shape}")
    arr = image.np().astype(np.float64)
    scaled = (arr + 1.0) / 2.0
    # Offset form rather than a plain weighted sum: the three weights do
    # not add to exactly 1.0 in float64, and equal channels (gray input,
    # pure white) must come back unchanged.
    y = scaled[2] + 0.299 * (scaled[0] - scaled[2]) + 0.587 * (scaled[1] - scaled[2])
    return GrayImage(np.clip(y, 0.0, 1.0))
