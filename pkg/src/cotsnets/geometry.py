"""Mask geometry: Sobel gradients, boundary emphasis maps and surface distances.

Everything here works on plain 2D numpy arrays and is free of state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

# Correlation kernels: gx > 0 where intensity grows with the column index,
# gy > 0 where it grows with the row index.
SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class EmptySurfaceError(ValueError):
    """Raised when a surface distance is requested for a mask without foreground."""


@dataclass(frozen=True)
class GaussianSpec:
    kernel_size: int = 5
    sigma: float = 1.0

    def __post_init__(self):
        if int(self.kernel_size) != self.kernel_size or self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be an odd integer >= 3, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def kernel(self) -> np.ndarray:
        """Normalised 2D Gaussian kernel of shape (kernel_size, kernel_size)."""
        half = self.kernel_size // 2
        x = np.arange(-half, half + 1, dtype=np.float64)
        g = np.exp(-(x ** 2) / (2.0 * self.sigma ** 2))
        g /= g.sum()
        return np.outer(g, g)


@dataclass
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray


@dataclass
class BoundaryMap:
    values: np.ndarray
    source_shape: tuple
    smoothing: GaussianSpec


def as_mask(mask) -> np.ndarray:
    """Validate a binary mask and return it as a float64 array."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"mask must be non-empty, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return m.astype(np.float64)


def sobel_gradients(mask) -> GradientField:
    m = as_mask(mask)
    if m.shape[0] < 3 or m.shape[1] < 3:
        raise ValueError(f"mask must be at least 3x3 for Sobel filtering, got {m.shape}")
    gx = ndimage.correlate(m, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(m, SOBEL_Y, mode="nearest")
    return GradientField(gx=gx, gy=gy, magnitude=np.hypot(gx, gy))


def boundary_map(mask, spec: GaussianSpec | None = None) -> BoundaryMap:
    """Min-max normalised, Gaussian-smoothed Sobel magnitude of ``mask``.

    A constant mask has no edges, so its map is all zeros instead of 0/0.
    """
    spec = spec or GaussianSpec()
    grad = sobel_gradients(mask)
    smooth = ndimage.correlate(grad.magnitude, spec.kernel(), mode="nearest")
    lo, hi = smooth.min(), smooth.max()
    # Smoothing a zero field can leave ~1e-17 residue; treat that as flat.
    if hi - lo <= 1e-12:
        values = np.zeros_like(smooth)
    else:
        values = (smooth - lo) / (hi - lo)
    return BoundaryMap(values=values, source_shape=smooth.shape, smoothing=spec)


def surface_coords(mask) -> np.ndarray:
    """(n, 2) array of (row, col) surface pixels, in row-major order."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def surface_points(mask) -> set[tuple[int, int]]:
    """Foreground pixels with a 4-connected background or out-of-image neighbour."""
    as_mask(mask)
    return {(int(r), int(c)) for r, c in surface_coords(mask)}


def directed_surface_distances(a, b) -> np.ndarray:
    """Sorted distances from each surface pixel of ``a`` to the nearest one of ``b``."""
    pa, pb = surface_coords(as_mask(a)), surface_coords(as_mask(b))
    if len(pa) == 0 or len(pb) == 0:
        raise EmptySurfaceError("both masks need foreground to measure surface distance")
    dist, _ = cKDTree(pb).query(pa, k=1)
    return np.sort(np.asarray(dist, dtype=np.float64))
