"""Evaluation of the world-space Gaussian mixture on a dense voxel grid.

Each voxel center x receives sum_i alpha_i exp(-(x - mu_i)^T Sigma_i^-1 (x - mu_i) / 2)
over the primitives listed for its 8^3 tile.  A primitive is listed for a
tile when its axis-aligned support box mu +- k sqrt(diag Sigma) overlaps the
tile's voxel centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import DEFAULT_SCALE_MOD, GaussianSet, VolumeGrid, quat_to_rotation
from .errors import InvalidArgumentError
from .grad import GaussianGradients, chain_to_parameters

MAX_VOXELS = 2**31


@dataclass(frozen=True)
class VoxelizerConfig:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile: int = 8
    support_sigmas: float = 3.0
    mod: float = DEFAULT_SCALE_MOD

    def __post_init__(self):
        if self.tile < 1:
            raise InvalidArgumentError("tile size must be positive")
        if not self.support_sigmas > 0:
            raise InvalidArgumentError("support_sigmas must be positive")
        if any(int(n) < 1 for n in self.dims) or any(not s > 0 for s in self.spacing):
            raise InvalidArgumentError("grid dims and spacing must be positive")
        if int(np.prod(self.dims, dtype=np.int64)) > MAX_VOXELS:
            raise InvalidArgumentError(f"refusing to allocate more than 2^31 voxels ({self.dims})")

    @classmethod
    def like(cls, volume: VolumeGrid, **kw) -> "VoxelizerConfig":
        return cls(volume.dims, volume.spacing, volume.origin, **kw)

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(-(-int(n) // self.tile) for n in self.dims)


def _precisions(gs: GaussianSet, mod: float):
    R = quat_to_rotation(gs.quat)
    scale = mod * gs.scale
    prec = np.einsum("mij,mj,mkj->mik", R, 1.0 / scale**2, R)
    Sigma_diag = np.einsum("mij,mj->mi", R**2, scale**2)
    return R, scale, np.ascontiguousarray(prec), Sigma_diag


def _tile_boxes(gs: GaussianSet, Sigma_diag: np.ndarray, cfg: VoxelizerConfig):
    origin = np.asarray(cfg.origin)
    sp = np.asarray(cfg.spacing)
    n = np.asarray(cfg.dims)
    half = cfg.support_sigmas * np.sqrt(Sigma_diag)
    # support box in (continuous) voxel-index units
    a = (gs.mu - half - origin) / sp
    b = (gs.mu + half - origin) / sp
    t = cfg.tile
    lo = np.ceil((a - (t - 1)) / t)
    hi = np.floor(b / t)
    nt = np.asarray(cfg.grid)
    lo = np.clip(lo, 0, None)
    hi = np.minimum(hi, nt - 1)
    # a box entirely past the grid ends up with lo > hi on that axis
    lo = np.minimum(lo, nt)
    hi = np.maximum(hi, -1)
    return lo.astype(np.int64), hi.astype(np.int64)


def voxelize(gs: GaussianSet, cfg: VoxelizerConfig) -> VolumeGrid:
    nx, ny, nz = (int(v) for v in cfg.dims)
    out = np.zeros((nz, ny, nx))
    if len(gs):
        _, _, prec, Sdiag = _precisions(gs, cfg.mod)
        lo, hi = _tile_boxes(gs, Sdiag, cfg)
        offsets, prims = _kernels.build_tile_lists(lo, hi, cfg.grid)
        _kernels.voxel_forward_tiled(np.array(cfg.dims, np.int64), cfg.tile, np.asarray(cfg.origin, np.float64),
                                     np.asarray(cfg.spacing, np.float64), np.ascontiguousarray(gs.mu), prec,
                                     gs.alpha, offsets, prims, out)
    np.maximum(out, 0.0, out=out)
    return VolumeGrid(out, cfg.spacing, cfg.origin)


def voxelize_naive(gs: GaussianSet, cfg: VoxelizerConfig) -> VolumeGrid:
    """Untruncated all-pairs sum; O(M * voxels), for validation only."""
    nx, ny, nz = (int(v) for v in cfg.dims)
    out = np.zeros((nz, ny, nx))
    if len(gs):
        _, _, prec, _ = _precisions(gs, cfg.mod)
        _kernels.voxel_forward_naive(np.array(cfg.dims, np.int64), np.asarray(cfg.origin, np.float64),
                                     np.asarray(cfg.spacing, np.float64), np.ascontiguousarray(gs.mu), prec,
                                     gs.alpha, out)
    return VolumeGrid(out, cfg.spacing, cfg.origin)


def voxelize_backward(gs: GaussianSet, cfg: VoxelizerConfig, dL_dV) -> GaussianGradients:
    """Gradients of sum(dL_dV * voxelize(gs)) w.r.t. the stored parameters."""
    dL_dV = np.ascontiguousarray(np.asarray(dL_dV, dtype=np.float64))
    nx, ny, nz = (int(v) for v in cfg.dims)
    if dL_dV.shape != (nz, ny, nx):
        raise InvalidArgumentError(f"gradient volume shape {dL_dV.shape} != {(nz, ny, nx)}")
    m = len(gs)
    if m == 0:
        return GaussianGradients.zeros(0)
    R, scale, prec, Sdiag = _precisions(gs, cfg.mod)
    lo, hi = _tile_boxes(gs, Sdiag, cfg)
    g_alpha = np.zeros(m)
    g_mu = np.zeros((m, 3))
    g_prec = np.zeros((m, 3, 3))
    _kernels.voxel_backward(np.array(cfg.dims, np.int64), cfg.tile, np.asarray(cfg.origin, np.float64),
                            np.asarray(cfg.spacing, np.float64), np.ascontiguousarray(gs.mu), prec, gs.alpha,
                            lo, hi, dL_dV, g_alpha, g_mu, g_prec)
    G_Sigma = -prec @ g_prec @ prec
    d_mu, d_ls, d_q, d_a = chain_to_parameters(gs, R, scale, g_mu, G_Sigma, g_alpha, cfg.mod)
    grads = GaussianGradients(d_mu, d_ls, d_q, d_a, d_alpha=g_alpha)
    grads.check_finite()
    return grads
