"""Analytic backward pass through the focus-aware slice renderer.

Gradient flow, per primitive:

    pixels -> (alpha_tilde, conic, mu_2d)
           -> (alpha, opacity_r, det Sigma_2d, Sigma_2d^-1, mu_2d)
           -> (Sigma_e, mu_e, q)                  [q: Mahalanobis drop]
           -> (Sigma_c^-1, mu_c) -> (Sigma_c, mu_c)
           -> world (Sigma, mu) -> (log-scale, quat, raw alpha)

The focus step is differentiated in information form with
B = Sigma_c^-1 + e3 e3^T / sigma_z^2, b = Sigma_c^-1 mu_c, mu_e = B^-1 b and
q = mu_c^T Sigma_c^-1 mu_c - b^T B^-1 b, keeping the dependence of mu_e on
both mu_c and Sigma_c^-1.

Gradients w.r.t. symmetric matrices are symmetrized general-matrix gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .core import DEFAULT_SCALE_MOD, GaussianSet, PsfSpec, SlicePose
from .errors import InvalidArgumentError, NumericFailureError
from .render import DEFAULT_SUPPORT, DEFAULT_TAU, DEFAULT_TILE, Projection, project_set


def _sym(G):
    return 0.5 * (G + np.swapaxes(G, -1, -2))


@dataclass
class GaussianGradients:
    """Loss gradients w.r.t. the stored (pre-activation) parameters."""

    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_quat: np.ndarray
    d_alpha_raw: np.ndarray
    # Screen-space mean gradient, used by density control.
    d_mu_2d: np.ndarray | None = None
    # Gradient w.r.t. the exposed (post-activation) alpha.
    d_alpha: np.ndarray | None = None

    @classmethod
    def zeros(cls, m: int) -> "GaussianGradients":
        return cls(np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)), np.zeros(m), np.zeros((m, 2)), np.zeros(m))

    def flat(self) -> np.ndarray:
        """(M, 11) array in the same layout as ``GaussianSet.flat_params``."""
        return np.concatenate([self.d_mu, self.d_log_scale, self.d_quat, self.d_alpha_raw[:, None]], axis=1)

    def check_finite(self) -> None:
        bad = ~np.all(np.isfinite(self.flat()), axis=1)
        if np.any(bad):
            i = int(np.nonzero(bad)[0][0])
            raise NumericFailureError(f"non-finite gradient for primitive {i}", index=i)


def quat_rotation_vjp(q_unit: np.ndarray, G_R: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to the unit quaternion (w, x, y, z)."""
    w, x, y, z = np.moveaxis(q_unit, -1, 0)
    G = G_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2]
              - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def chain_to_parameters(gs: GaussianSet, R: np.ndarray, scale: np.ndarray, G_mu: np.ndarray,
                        G_Sigma: np.ndarray, g_alpha: np.ndarray, mod: float = DEFAULT_SCALE_MOD):
    """World-space (mu, Sigma, alpha) gradients -> stored parameter gradients.

    Sigma = M M^T with M = R S, S = diag(mod * exp(log_scale)).
    """
    G_M = 2.0 * np.einsum("mij,mjk->mik", _sym(G_Sigma), R * scale[:, None, :])
    # scale already carries mod; d scale / d log_scale = scale
    g_scale = np.einsum("mji,mji->mi", R, G_M)
    d_log_scale = g_scale * scale
    G_R = G_M * scale[:, None, :]
    qn = np.linalg.norm(gs.quat, axis=1, keepdims=True)
    q_unit = gs.quat / qn
    g_unit = quat_rotation_vjp(q_unit, G_R)
    d_quat = (g_unit - q_unit * np.sum(q_unit * g_unit, axis=1, keepdims=True)) / qn
    alpha = gs.alpha
    d_alpha_raw = g_alpha * alpha * (1.0 - alpha)
    return G_mu.copy(), d_log_scale, d_quat, d_alpha_raw


@dataclass
class FocusBackward:
    """Intermediate gradients of the focus step, exposed for inspection."""

    G_Sigma_2d: np.ndarray
    G_mu_c: np.ndarray
    G_Sigma_c: np.ndarray
    g_alpha: np.ndarray


def focus_backward(proj: Projection, cam_rotation: np.ndarray, g_alpha_tilde, g_conic, g_mu2d) -> FocusBackward:
    """Backward through intensity, 2D projection and axial re-parameterization."""
    m = len(proj.alpha)
    alpha, op, det = proj.alpha, proj.opacity, proj.det
    sqrt_det = np.sqrt(det)
    g_alpha = g_alpha_tilde * op / sqrt_det
    g_op = g_alpha_tilde * alpha / sqrt_det
    g_det = g_alpha_tilde * (-0.5 * alpha * op / det**1.5)

    C = np.empty((m, 2, 2))
    C[:, 0, 0] = proj.conic[:, 0]
    C[:, 0, 1] = C[:, 1, 0] = proj.conic[:, 1]
    C[:, 1, 1] = proj.conic[:, 2]
    G_C = np.empty((m, 2, 2))
    G_C[:, 0, 0] = g_conic[:, 0]
    G_C[:, 0, 1] = G_C[:, 1, 0] = g_conic[:, 1]
    G_C[:, 1, 1] = g_conic[:, 2]
    # Sigma_2d^-1 -> Sigma_2d, plus the determinant path: d det / d Sigma = det * Sigma^-1
    G_S2 = -C @ G_C @ C + (g_det * det)[:, None, None] * C

    G_Se = np.zeros((m, 3, 3))
    G_Se[:, :2, :2] = G_S2
    G_mue = np.zeros((m, 3))
    G_mue[:, :2] = g_mu2d
    g_q = g_op * (-0.5 * op)

    Sigma_e = proj.Sigma_e
    mu_c, mu_e = proj.mu_c, proj.mu_e
    R_s = np.einsum("mij,mj->mij", proj.R, 1.0 / proj.scale**2)
    # Sigma_c^-1 = R_cam R diag(1/s^2) R^T R_cam^T, exact from the factorization
    prec_w = np.einsum("mij,mkj->mik", R_s, proj.R)
    prec_c = _sym(np.einsum("ij,mjk,lk->mil", cam_rotation, prec_w, cam_rotation))
    b = np.einsum("mij,mj->mi", prec_c, mu_c)

    outer = lambda u, w: u[:, :, None] * w[:, None, :]  # noqa: E731
    G_Se_tot = G_Se + outer(G_mue, b) - g_q[:, None, None] * outer(b, b)
    G_b = np.einsum("mij,mj->mi", Sigma_e, G_mue) - 2.0 * g_q[:, None] * mu_e
    G_B = -Sigma_e @ G_Se_tot @ Sigma_e
    G_A = G_B + g_q[:, None, None] * outer(mu_c, mu_c) + outer(G_b, mu_c)
    G_muc = 2.0 * g_q[:, None] * b + np.einsum("mij,mj->mi", prec_c, G_b)
    G_Sc = _sym(-prec_c @ G_A @ prec_c)
    return FocusBackward(G_S2, G_muc, G_Sc, g_alpha)


def backward_projection(gs: GaussianSet, proj: Projection, pose: SlicePose, psf: PsfSpec, dL_dI,
                        tile: int = DEFAULT_TILE, mod: float = DEFAULT_SCALE_MOD) -> GaussianGradients:
    dL_dI = np.ascontiguousarray(np.asarray(dL_dI, dtype=np.float64))
    if dL_dI.shape != (pose.height, pose.width):
        raise InvalidArgumentError(f"gradient image shape {dL_dI.shape} != ({pose.height}, {pose.width})")
    m = len(gs)
    if m == 0:
        return GaussianGradients.zeros(0)
    sx, sy = pose.pixel_spacing
    ppx, ppy = pose.principal_point
    g_at = np.zeros(m)
    g_conic = np.zeros((m, 3))
    g_mu2d = np.zeros((m, 2))
    _kernels.raster_backward(pose.width, pose.height, tile, sx, sy, ppx, ppy,
                             np.ascontiguousarray(proj.mu_2d), np.ascontiguousarray(proj.conic),
                             proj.alpha_tilde, proj.radius, proj.visible, dL_dI, g_at, g_conic, g_mu2d)
    grads = GaussianGradients.zeros(m)
    grads.d_mu_2d[:] = g_mu2d
    vis = np.nonzero(proj.visible)[0]
    if len(vis):
        fb = focus_backward(proj.take(vis), pose.rotation, g_at[vis], g_conic[vis], g_mu2d[vis])
        Rc = pose.rotation
        G_mu = fb.G_mu_c @ Rc
        G_Sigma = np.einsum("ji,mjk,kl->mil", Rc, fb.G_Sigma_c, Rc)
        d_mu, d_ls, d_q, d_a = chain_to_parameters(gs.subset(vis), proj.R[vis], proj.scale[vis], G_mu, G_Sigma,
                                                   fb.g_alpha, mod)
        grads.d_mu[vis] = d_mu
        grads.d_log_scale[vis] = d_ls
        grads.d_quat[vis] = d_q
        grads.d_alpha_raw[vis] = d_a
        grads.d_alpha[vis] = fb.g_alpha
    grads.check_finite()
    return grads


def backward_slice(gs: GaussianSet, pose: SlicePose, psf: PsfSpec, dL_dI, tau: float = DEFAULT_TAU, *,
                   tile: int = DEFAULT_TILE, support_sigmas: float = DEFAULT_SUPPORT,
                   mod: float = DEFAULT_SCALE_MOD) -> GaussianGradients:
    """Gradients of a loss w.r.t. every primitive, given dL/dI for one slice."""
    proj = project_set(gs, pose, psf, tau, support_sigmas, mod)
    return backward_projection(gs, proj, pose, psf, dL_dI, tile, mod)


def finite_difference_oracle(gs: GaussianSet, pose: SlicePose, psf: PsfSpec,
                             loss_fn: Callable[[GaussianSet], float], param_index: tuple[int, int],
                             h: float = 1e-4) -> float:
    """Central difference of ``loss_fn`` in one stored scalar parameter.

    ``param_index`` is (primitive, column) into ``gs.flat_params()``.
    ``pose`` and ``psf`` are accepted for call-site symmetry; ``loss_fn``
    closes over whatever rendering it needs.
    """
    if not h > 0:
        raise InvalidArgumentError("finite-difference step must be positive")
    i, j = param_index
    base = gs.flat_params()

    def at(delta):
        p = base.copy()
        p[i, j] += delta
        return loss_fn(GaussianSet.from_flat(p, gs.bbox))

    return (at(h) - at(-h)) / (2.0 * h)
