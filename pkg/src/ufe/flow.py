"""Dense two-frame optical flow (Farneback polynomial expansion).

Convention: ``farneback_flow(a, b)`` returns ``d`` with ``b(x + d(x)) ~= a(x)``,
i.e. the displacement of content from ``a`` to ``b``.  ``warp(b, d)`` therefore
reconstructs ``a``.  Coordinates are (x = column, y = row).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import ConfigDict
from scipy import ndimage

from .autodiff import Tensor, bilinear_matrix


@dataclass(frozen=True)
class FarnebackParams:
    __pydantic_config__ = ConfigDict(extra="forbid")

    pyramid_scale: float = 0.5
    levels: int = 3
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if not 0 < self.pyramid_scale < 1:
            raise ValueError(f"pyramid_scale must be in (0,1), got {self.pyramid_scale}")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be a positive odd int, got {self.window_size}")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ValueError(f"poly_n must be an odd int >= 3, got {self.poly_n}")
        if self.poly_sigma <= 0:
            raise ValueError(f"poly_sigma must be > 0, got {self.poly_sigma}")


@dataclass
class FlowField:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    def to_array(self) -> np.ndarray:
        return np.stack([self.dx, self.dy]).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FlowField":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"flow array must be [2,H,W], got {arr.shape}")
        return cls(arr[0].astype(np.float32), arr[1].astype(np.float32))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def to_grayscale(image) -> np.ndarray:
    """[3,H,W] in [0,1] -> [1,H,W] luma."""
    img = _data(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"to_grayscale expects a [3,H,W] image, got shape {img.shape}")
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return gray[None].astype(img.dtype if img.dtype.kind == "f" else np.float32)


def _as_plane(gray) -> np.ndarray:
    g = _data(gray)
    if g.ndim == 3:
        if g.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got shape {g.shape}")
        g = g[0]
    return g.astype(np.float64)


def resize(plane: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (align-corners=False) resize of a 2-D array."""
    h, w = plane.shape
    uh = bilinear_matrix(h, size[0], np.float64)
    uw = bilinear_matrix(w, size[1], np.float64)
    return uh @ plane @ uw.T


def gaussian_pyramid(gray, params: FarnebackParams) -> list[np.ndarray]:
    """Level 0 is the input; each next level is blurred then rescaled."""
    g = _as_plane(gray)
    sizes = [g.shape]
    for _ in range(params.levels - 1):
        h, w = sizes[-1]
        sizes.append((int(round(h * params.pyramid_scale)), int(round(w * params.pyramid_scale))))
    if min(sizes[-1]) < 8:
        raise ValueError(f"frame {g.shape} too small for {params.levels} pyramid levels "
                         f"at scale {params.pyramid_scale} (coarsest {sizes[-1]} < 8x8)")
    sigma = (1.0 / params.pyramid_scale - 1.0) * 0.5
    levels = [g]
    for size in sizes[1:]:
        blurred = ndimage.gaussian_filter(levels[-1], sigma, mode="reflect")
        levels.append(resize(blurred, size))
    return levels


def _applicability(poly_n: int, poly_sigma: float) -> tuple[np.ndarray, np.ndarray]:
    n = poly_n // 2
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * poly_sigma * poly_sigma))
    return x, g / g.sum()


def poly_expansion(gray, poly_n: int = 5, poly_sigma: float = 1.1):
    """Per-pixel fit f(x0 + u) ~ u^T A u + b^T u + c under Gaussian applicability.

    Returns A [H,W,2,2], b [H,W,2], c [H,W].  The six basis correlations are
    separable, so each is two 1-D correlations; pixels closer than poly_n//2 to
    the border copy the nearest interior coefficients.
    """
    f = _as_plane(gray)
    if poly_n < 3 or poly_n % 2 == 0:
        raise ValueError(f"poly_n must be odd and >= 3, got {poly_n}")
    h, w = f.shape
    if poly_n > min(h, w):
        raise ValueError(f"poly_n={poly_n} larger than image side {min(h, w)}")
    x, g = _applicability(poly_n, poly_sigma)
    kern = {0: g, 1: g * x, 2: g * x * x}
    # basis order: 1, u, v, u^2, v^2, uv   (u along columns, v along rows)
    powers = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    rows = {p: ndimage.correlate1d(f, kern[p], axis=1, mode="nearest") for p in (0, 1, 2)}
    proj = np.stack([ndimage.correlate1d(rows[pu], kern[pv], axis=0, mode="nearest")
                     for pu, pv in powers], axis=-1)
    uu, vv = np.meshgrid(x, x)
    ww = np.outer(g, g)
    basis = np.stack([uu ** pu * vv ** pv for pu, pv in powers], axis=-1).reshape(-1, 6)
    gram = basis.T @ (basis * ww.reshape(-1, 1))
    r = proj @ np.linalg.inv(gram).T

    n = poly_n // 2
    if h > 2 * n and w > 2 * n:
        inner = r[n:h - n, n:w - n]
        r = np.pad(inner, ((n, n), (n, n), (0, 0)), mode="edge")
    c = r[..., 0]
    b = r[..., 1:3]
    A = np.empty((h, w, 2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = r[..., 5] / 2
    return A, b, c


def _sample(field: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a [H,W,...] field at float coords, clamped at the border."""
    h, w = field.shape[:2]
    flat = field.reshape(h, w, -1)
    out = np.empty(xs.shape + (flat.shape[-1],))
    for ch in range(flat.shape[-1]):
        out[..., ch] = ndimage.map_coordinates(flat[..., ch], [ys, xs], order=1, mode="nearest")
    return out.reshape(xs.shape + field.shape[2:])


def _update(A1, b1, A2, b2, d, params: FarnebackParams) -> np.ndarray:
    h, w = d.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    A2w = _sample(A2, xs + d[..., 0], ys + d[..., 1])
    b2w = _sample(b2, xs + d[..., 0], ys + d[..., 1])
    A = 0.5 * (A1 + A2w)
    db = -0.5 * (b2w - b1) + np.einsum("hwij,hwj->hwi", A, d)
    # normal equations A^T A d = A^T db, averaged over the window
    ata = np.einsum("hwki,hwkj->hwij", A, A)
    atb = np.einsum("hwki,hwk->hwi", A, db)
    size = params.window_size
    g00 = ndimage.uniform_filter(ata[..., 0, 0], size, mode="reflect")
    g01 = ndimage.uniform_filter(ata[..., 0, 1], size, mode="reflect")
    g11 = ndimage.uniform_filter(ata[..., 1, 1], size, mode="reflect")
    h0 = ndimage.uniform_filter(atb[..., 0], size, mode="reflect")
    h1 = ndimage.uniform_filter(atb[..., 1], size, mode="reflect")
    det = g00 * g11 - g01 * g01
    ok = np.abs(det) >= 1e-9
    safe = np.where(ok, det, 1.0)
    out = np.empty_like(d)
    out[..., 0] = np.where(ok, (g11 * h0 - g01 * h1) / safe, 0.0)
    out[..., 1] = np.where(ok, (g00 * h1 - g01 * h0) / safe, 0.0)
    return out


def farneback_flow(frame_a, frame_b, params: FarnebackParams = FarnebackParams()) -> FlowField:
    """Coarse-to-fine Farneback flow from frame_a to frame_b ([3,H,W] or [1,H,W])."""
    a, b = _data(frame_a), _data(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] < 32 or a.shape[-2] < 32:
        raise ValueError(f"frames must be at least 32x32, got {a.shape[-2:]}")
    ga = to_grayscale(a) if a.shape[0] == 3 else a
    gb = to_grayscale(b) if b.shape[0] == 3 else b
    pa = gaussian_pyramid(ga, params)
    pb = gaussian_pyramid(gb, params)
    d = None
    for la, lb in zip(reversed(pa), reversed(pb)):
        h, w = la.shape
        if d is None:
            d = np.zeros((h, w, 2))
        else:
            ph, pw = d.shape[:2]
            d = np.stack([resize(d[..., 0], (h, w)) * (w / pw),
                          resize(d[..., 1], (h, w)) * (h / ph)], axis=-1)
        A1, b1, _ = poly_expansion(la, params.poly_n, params.poly_sigma)
        A2, b2, _ = poly_expansion(lb, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            d = _update(A1, b1, A2, b2, d, params)
    d = np.nan_to_num(d, nan=0.0, posinf=0.0, neginf=0.0)
    return FlowField(d[..., 0].astype(np.float32), d[..., 1].astype(np.float32))


def warp(image, flow: FlowField) -> np.ndarray:
    """Backward warp: out(x) = image(x + flow(x)), bilinear, border-clamped."""
    img = _data(image)
    if img.ndim != 3 or img.shape[1:] != (flow.height, flow.width):
        raise ValueError(f"image {img.shape} does not match flow {flow.height}x{flow.width}")
    ys, xs = np.mgrid[0:flow.height, 0:flow.width].astype(np.float64)
    coords = [ys + flow.dy, xs + flow.dx]
    out = np.stack([ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="nearest")
                    for ch in img])
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def normalize_for_model(flow: np.ndarray) -> np.ndarray:
    """Scale a [2,H,W] pixel flow to O(1) by 0.1 * min(H, W)."""
    return (flow / (0.1 * min(flow.shape[-2:]))).astype(np.float32)


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """Color-wheel encoding: hue = direction, value = magnitude / p95 (floored at 1 px)."""
    from matplotlib.colors import hsv_to_rgb

    mag = flow.magnitude()
    ang = np.arctan2(flow.dy, flow.dx)
    # floor keeps sub-pixel noise dark instead of stretching it to full brightness
    norm = max(float(np.percentile(mag, 95)), 1.0)
    hsv = np.stack([(ang / (2 * np.pi)) % 1.0, np.ones_like(mag), np.clip(mag / norm, 0, 1)], axis=-1)
    return (hsv_to_rgb(hsv) * 255).round().astype(np.uint8)


def flow_stats(flow: FlowField) -> dict:
    mag = flow.magnitude()
    return {"mean_magnitude": float(mag.mean()), "max_magnitude": float(mag.max()),
            "mean_dx": float(flow.dx.mean()), "mean_dy": float(flow.dy.mean())}
