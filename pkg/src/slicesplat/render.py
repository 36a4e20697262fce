"""Focus-aware slice rendering.

A primitive seen by a slice camera is multiplied by the axial sensitivity
map h(z) = exp(-z^2 / (2 sigma_z^2)).  The product is again Gaussian (the
focus Gaussian); its xy-marginal, scaled by the modulated intensity, is
splatted additively into the slice image.

Two evaluation routes exist.  The single-primitive functions
(:func:`axial_reparam`, :func:`opacity_modulation`, ...) use the information
form Sigma_e^-1 = Sigma_c^-1 + e3 e3^T / sigma_z^2 directly.  The batched
:func:`project_set` uses the equivalent rank-one update

    Sigma_e = Sigma_c - v v^T / k,   mu_e = mu_c - v mu_c,z / k,
    q = mu_c,z^2 / k,                 v = Sigma_c e3, k = sigma_z^2 + Sigma_c,zz

which needs no matrix inversion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import integrate

from . import _kernels
from .core import (
    DEFAULT_SCALE_MOD,
    GaussianPrimitive,
    GaussianSet,
    PsfSpec,
    SlicePose,
    quat_to_rotation,
    regularized_inverse,
    world_to_camera,
)
from .errors import DegenerateCovarianceError, InvalidArgumentError

DEFAULT_TAU = 0.02
DEFAULT_TILE = 16
DEFAULT_SUPPORT = 3.0

_E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class FocusGaussian:
    mu_e: np.ndarray
    Sigma_e: np.ndarray
    opacity_r: float
    mu_2d: np.ndarray
    Sigma_2d: np.ndarray
    alpha_tilde: float


def axial_reparam(mu_c, Sigma_c, sigma_z: float):
    """Focus Gaussian (mu_e, Sigma_e) of a camera-space primitive."""
    if not sigma_z > 0:
        raise InvalidArgumentError(f"sigma_z must be positive, got {sigma_z}")
    mu_c = np.asarray(mu_c, dtype=np.float64)
    prec_c = regularized_inverse(Sigma_c)
    prec_e = prec_c + np.outer(_E3, _E3) / sigma_z**2
    Sigma_e = regularized_inverse(prec_e)
    Sigma_e = 0.5 * (Sigma_e + Sigma_e.T)
    mu_e = Sigma_e @ prec_c @ mu_c
    return mu_e, Sigma_e


def opacity_modulation(mu_c, Sigma_c, mu_e, Sigma_e) -> float:
    """exp(-q/2) with q the drop in Mahalanobis quadratic, clipped to (0, 1]."""
    mu_c = np.asarray(mu_c, dtype=np.float64)
    mu_e = np.asarray(mu_e, dtype=np.float64)
    q = mu_c @ regularized_inverse(Sigma_c) @ mu_c - mu_e @ regularized_inverse(Sigma_e) @ mu_e
    return float(np.exp(-0.5 * max(q, 0.0)))


def project_2d(mu_e, Sigma_e):
    Sigma_e = np.asarray(Sigma_e, dtype=np.float64)
    Sigma_2d = np.array([[Sigma_e[0, 0], Sigma_e[1, 0]], [Sigma_e[1, 0], Sigma_e[1, 1]]])
    return np.asarray(mu_e, dtype=np.float64)[:2].copy(), Sigma_2d


def rendered_intensity(alpha: float, opacity_r: float, Sigma_2d) -> float:
    S = np.asarray(Sigma_2d, dtype=np.float64)
    det = float(S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0])
    if not det > 0:
        raise DegenerateCovarianceError(f"2D covariance determinant {det} is not positive")
    return alpha * opacity_r / np.sqrt(det)


def focus_gaussian(prim: GaussianPrimitive, pose: SlicePose, psf: PsfSpec,
                   mod: float = DEFAULT_SCALE_MOD) -> FocusGaussian:
    """Run the single-primitive chain end to end."""
    mu_c, Sigma_c = world_to_camera(prim.mu, prim.covariance(mod), pose)
    mu_e, Sigma_e = axial_reparam(mu_c, Sigma_c, psf.sigma_z)
    op = opacity_modulation(mu_c, Sigma_c, mu_e, Sigma_e)
    mu_2d, Sigma_2d = project_2d(mu_e, Sigma_e)
    return FocusGaussian(mu_e, Sigma_e, op, mu_2d, Sigma_2d, rendered_intensity(prim.alpha, op, Sigma_2d))


@dataclass
class Projection:
    """Per-primitive forward intermediates for one slice (kept for backward)."""

    R: np.ndarray          # (M, 3, 3) primitive rotations
    scale: np.ndarray      # (M, 3) mod * exposed scale
    alpha: np.ndarray      # (M,)
    mu_c: np.ndarray
    Sigma_c: np.ndarray
    mu_e: np.ndarray
    Sigma_e: np.ndarray
    opacity: np.ndarray
    mu_2d: np.ndarray
    det: np.ndarray
    conic: np.ndarray      # (M, 3): xx, xy, yy of Sigma_2d^-1
    alpha_tilde: np.ndarray
    radius: np.ndarray
    visible: np.ndarray

    @property
    def Sigma_2d(self) -> np.ndarray:
        return self.Sigma_e[:, :2, :2]

    def take(self, index) -> "Projection":
        return Projection(*(getattr(self, f.name)[index] for f in fields(self)))


def project_set(gs: GaussianSet, pose: SlicePose, psf: PsfSpec, tau: float = DEFAULT_TAU,
                support_sigmas: float = DEFAULT_SUPPORT, mod: float = DEFAULT_SCALE_MOD) -> Projection:
    """Vectorized focus-Gaussian construction for every primitive."""
    if not 0 <= tau < 1:
        raise InvalidArgumentError(f"tau must lie in [0, 1), got {tau}")
    m = len(gs)
    R = quat_to_rotation(gs.quat) if m else np.zeros((0, 3, 3))
    scale = mod * gs.scale
    alpha = gs.alpha
    Sigma = np.einsum("mij,mj,mkj->mik", R, scale**2, R)
    mu_c, Sigma_c = world_to_camera(gs.mu, Sigma, pose)
    v = Sigma_c[:, :, 2]
    k = psf.sigma_z**2 + Sigma_c[:, 2, 2]
    Sigma_e = Sigma_c - v[:, :, None] * v[:, None, :] / k[:, None, None]
    Sigma_e = 0.5 * (Sigma_e + np.swapaxes(Sigma_e, 1, 2))
    mu_e = mu_c - v * (mu_c[:, 2] / k)[:, None]
    opacity = np.exp(-0.5 * mu_c[:, 2] ** 2 / k)
    a = Sigma_e[:, 0, 0]
    b = Sigma_e[:, 1, 0]
    c = Sigma_e[:, 1, 1]
    det = a * c - b * b
    if np.any(~(det > 0)):
        bad = int(np.nonzero(~(det > 0))[0][0])
        raise DegenerateCovarianceError(f"primitive {bad}: 2D covariance determinant {det[bad]} is not positive")
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    alpha_tilde = alpha * opacity / np.sqrt(det)
    lam_max = 0.5 * (a + c) + np.sqrt((0.5 * (a - c)) ** 2 + b * b)
    radius = support_sigmas * np.sqrt(lam_max)
    visible = alpha * opacity >= tau
    return Projection(R, scale, alpha, mu_c, Sigma_c, mu_e, Sigma_e, opacity, mu_e[:, :2].copy(), det, conic,
                      alpha_tilde, radius, visible)


@dataclass
class SliceImage:
    """Row-major image, ``pixels[v, u]``."""

    pixels: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise InvalidArgumentError("slice image must be 2-D")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)

    def save_pgm(self, path, vmax: float = 1.0) -> None:
        """16-bit binary PGM; intensities are clipped to [0, vmax]."""
        scaled = np.clip(self.pixels / vmax, 0.0, 1.0) * 65535.0
        data = np.rint(scaled).astype(">u2")
        header = f"P5\n{self.width} {self.height}\n65535\n".encode("ascii")
        Path(path).write_bytes(header + data.tobytes())

    def save_raw(self, path) -> None:
        """Little-endian f32 samples plus a ``.json`` sidecar."""
        path = Path(path)
        path.write_bytes(self.pixels.astype("<f4").tobytes())
        sidecar = {"width": self.width, "height": self.height, "pixel_spacing": list(self.pixel_spacing)}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))

    @classmethod
    def load_pgm(cls, path, vmax: float = 1.0) -> "SliceImage":
        blob = Path(path).read_bytes()
        parts = blob.split(maxsplit=4)
        if parts[0] != b"P5":
            raise InvalidArgumentError("not a binary PGM")
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w)
        return cls(data.astype(np.float64) / maxval * vmax)


def tile_lists(proj: Projection, pose: SlicePose, tile: int = DEFAULT_TILE):
    """Per-tile primitive lists from footprint/tile box overlap."""
    sx, sy = pose.pixel_spacing
    ppx, ppy = pose.principal_point
    W, H = pose.width, pose.height
    mu, r = proj.mu_2d, proj.radius
    ulo = np.floor((mu[:, 0] - r) / sx + ppx) - 1
    uhi = np.ceil((mu[:, 0] + r) / sx + ppx) + 1
    vlo = np.floor((mu[:, 1] - r) / sy + ppy) - 1
    vhi = np.ceil((mu[:, 1] + r) / sy + ppy) + 1
    keep = proj.visible & (uhi >= 0) & (ulo <= W - 1) & (vhi >= 0) & (vlo <= H - 1)
    lo = np.stack([np.clip(ulo, 0, W - 1), np.clip(vlo, 0, H - 1)], axis=1).astype(np.int64) // tile
    hi = np.stack([np.clip(uhi, 0, W - 1), np.clip(vhi, 0, H - 1)], axis=1).astype(np.int64) // tile
    lo[~keep] = 1
    hi[~keep] = 0
    grid = (-(-W // tile), -(-H // tile))
    return _kernels.build_tile_lists(lo, hi, grid)


def rasterize_projection(proj: Projection, pose: SlicePose, tile: int = DEFAULT_TILE,
                         naive: bool = False) -> np.ndarray:
    sx, sy = pose.pixel_spacing
    ppx, ppy = pose.principal_point
    out = np.zeros((pose.height, pose.width))
    if len(proj.alpha) == 0:
        return out
    args = (np.ascontiguousarray(proj.mu_2d), np.ascontiguousarray(proj.conic), proj.alpha_tilde, proj.radius)
    if naive:
        _kernels.raster_forward_naive(pose.width, pose.height, sx, sy, ppx, ppy, *args, proj.visible, out)
    else:
        offsets, prims = tile_lists(proj, pose, tile)
        _kernels.raster_forward_tiled(pose.width, pose.height, tile, sx, sy, ppx, ppy, *args, offsets, prims, out)
    return out


def rasterize_slice(gs: GaussianSet, pose: SlicePose, psf: PsfSpec, tau: float = DEFAULT_TAU, *,
                    tile: int = DEFAULT_TILE, support_sigmas: float = DEFAULT_SUPPORT,
                    mod: float = DEFAULT_SCALE_MOD, naive: bool = False) -> SliceImage:
    """Additively splat every non-culled primitive into the slice image.

    ``naive=True`` runs the untiled all-pairs loop, used as the tiling oracle.
    """
    proj = project_set(gs, pose, psf, tau, support_sigmas, mod)
    return SliceImage(rasterize_projection(proj, pose, tile, naive), pose.pixel_spacing)


def _oracle_bounds(mu_c, prec_c, x, y, sigma_z):
    """Center and width of the t-integrand exp(-Q(t)/2), Q quadratic in t."""
    a = prec_c[2, 2] + 1.0 / sigma_z**2
    dx, dy = x - mu_c[0], y - mu_c[1]
    b = prec_c[2, 0] * dx + prec_c[2, 1] * dy - prec_c[2, 2] * mu_c[2]
    return -b / a, 1.0 / np.sqrt(a)


def render_oracle(prim: GaussianPrimitive, pose: SlicePose, psf: PsfSpec, pixel,
                  mod: float = DEFAULT_SCALE_MOD) -> float:
    """Numerically integrate h(t) * g_c(x, y, t) dt at one pixel.

    Quadrature runs over +-8 effective sigmas around the integrand peak.
    """
    if prim.alpha == 0:
        return 0.0
    mu_c, Sigma_c = world_to_camera(prim.mu, prim.covariance(mod), pose)
    prec_c = np.linalg.inv(Sigma_c)
    x, y = pose.pixel_to_camera(pixel[0], pixel[1])
    x, y = float(x), float(y)
    sz2 = psf.sigma_z**2

    def integrand(t):
        d = np.array([x, y, t]) - mu_c
        return np.exp(-0.5 * d @ prec_c @ d - 0.5 * t * t / sz2)

    center, width = _oracle_bounds(mu_c, prec_c, x, y, psf.sigma_z)
    val, _ = integrate.quad(integrand, center - 8 * width, center + 8 * width,
                            epsabs=1e-10, epsrel=1e-13, limit=200, points=[center])
    return prim.alpha * val
