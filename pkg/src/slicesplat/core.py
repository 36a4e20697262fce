"""Domain types and the coordinate/covariance algebra shared by all modules.

Array conventions: a set of M Gaussians is stored as a structure of arrays
(``mu`` (M, 3), ``log_scale`` (M, 3), ``quat`` (M, 4) in w, x, y, z order and
``alpha_raw`` (M,)).  Volumes are stored z-major, i.e. ``data[k, j, i]`` is
the sample at voxel (i, j, k), and images are row-major ``pixels[v, u]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import DegenerateCovarianceError, InvalidArgumentError, VolumeLoadError

CHECKPOINT_MAGIC = b"GPILE"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<5sIQ6d")

# Global scale modifier applied as S = diag(mod * s).
DEFAULT_SCALE_MOD = 1.0

# Condition number above which inversion gets a diagonal floor.
_COND_LIMIT = 1e12


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of the normalized quaternion ``q = (w, x, y, z)``.

    Accepts a single quaternion or a stack of shape (..., 4).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise InvalidArgumentError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(~(norm > 0)):
        raise InvalidArgumentError("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from_scale_rotation(scale, quat, mod: float = DEFAULT_SCALE_MOD) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(mod * scale). Broadcasts over leading axes."""
    scale = np.asarray(scale, dtype=np.float64)
    if not mod > 0:
        raise InvalidArgumentError(f"scale modifier must be positive, got {mod}")
    if np.any(~(scale > 0)):
        raise InvalidArgumentError("scale components must be strictly positive")
    R = quat_to_rotation(quat)
    s2 = (mod * scale) ** 2
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


def regularized_inverse(Sigma) -> np.ndarray:
    """Inverse of an SPD matrix (or stack), adding eps = 1e-9 * trace / 3 to
    the diagonal of members whose condition number exceeds 1e12."""
    Sigma = np.array(Sigma, dtype=np.float64)
    if not np.all(np.isfinite(Sigma)):
        raise DegenerateCovarianceError("covariance has non-finite entries")
    bad = ~(np.linalg.cond(Sigma) <= _COND_LIMIT)
    if np.any(bad):
        eps = 1e-9 * np.trace(Sigma, axis1=-2, axis2=-1) / 3.0
        if np.any(~(eps[bad] > 0) if Sigma.ndim > 2 else not eps > 0):
            raise DegenerateCovarianceError("covariance is singular beyond the regularization floor")
        eye = np.eye(Sigma.shape[-1])
        if Sigma.ndim == 2:
            Sigma = Sigma + eps * eye
        else:
            Sigma[bad] += eps[bad][:, None, None] * eye
    return np.linalg.inv(Sigma)


@dataclass(frozen=True)
class PsfSpec:
    """Spatially invariant Gaussian PSF; ``sigma_z`` sets the focal zone."""

    sigma_x: float
    sigma_y: float
    sigma_z: float

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "sigma_z"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidArgumentError(f"{name} must be positive and finite, got {v}")

    @classmethod
    def from_spacing(cls, spacing) -> "PsfSpec":
        """Nyquist-sampled default: sigma per axis equals the voxel spacing."""
        sx, sy, sz = (float(v) for v in spacing)
        return cls(sx, sy, sz)

    @staticmethod
    def sigma_z_from_aperture(wavelength: float, na_elevation: float) -> float:
        return 0.27 * wavelength / na_elevation

    @staticmethod
    def sigma_z_linear_optical(wavelength: float, na: float) -> float:
        return wavelength / na**2

    @staticmethod
    def sigma_z_ultrasound(wavelength: float, focal_length: float, aperture: float, k: float = 1.0) -> float:
        return k * wavelength * focal_length / aperture


@dataclass(frozen=True)
class SlicePose:
    """World-to-camera transform of one slice plus its pixel geometry.

    Pixel (u, v) has its center at camera coordinates
    ``((u - ppx) * sx, (v - ppy) * sy, 0)``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    principal_point: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise InvalidArgumentError("pose rotation must be orthonormal with det +1")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image dimensions must be >= 1")
        ps = tuple(float(v) for v in self.pixel_spacing)
        if not all(v > 0 for v in ps):
            raise InvalidArgumentError("pixel spacing must be positive")
        object.__setattr__(self, "pixel_spacing", ps)
        object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))

    @classmethod
    def identity(cls, width: int, height: int, **kw) -> "SlicePose":
        return cls(np.eye(3), np.zeros(3), width, height, **kw)

    def inverse_transform(self, mu_c, Sigma_c):
        R = self.rotation
        mu = np.einsum("ji,...j->...i", R, np.asarray(mu_c) - self.translation)
        Sigma = np.einsum("ji,...jk,kl->...il", R, np.asarray(Sigma_c), R)
        return mu, Sigma

    def pixel_to_camera(self, u, v):
        sx, sy = self.pixel_spacing
        ppx, ppy = self.principal_point
        return (np.asarray(u, dtype=np.float64) - ppx) * sx, (np.asarray(v, dtype=np.float64) - ppy) * sy


def world_to_camera(mu, Sigma, pose: SlicePose):
    """mu_c = R_c mu + t, Sigma_c = R_c Sigma R_c^T (broadcasts over stacks)."""
    R = pose.rotation
    mu_c = np.einsum("ij,...j->...i", R, np.asarray(mu, dtype=np.float64)) + pose.translation
    Sigma_c = np.einsum("ij,...jk,lk->...il", R, np.asarray(Sigma, dtype=np.float64), R)
    return mu_c, Sigma_c


@dataclass(frozen=True)
class GaussianPrimitive:
    """One primitive, exposed post-activation."""

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    alpha: float

    @classmethod
    def create(cls, mu, scale, quat=(1.0, 0.0, 0.0, 0.0), alpha=1.0) -> "GaussianPrimitive":
        q = np.asarray(quat, dtype=np.float64)
        q = q / np.linalg.norm(q)
        return cls(np.asarray(mu, dtype=np.float64), np.asarray(scale, dtype=np.float64), q, float(alpha))

    def covariance(self, mod: float = DEFAULT_SCALE_MOD) -> np.ndarray:
        return covariance_from_scale_rotation(self.scale, self.quat, mod)


def _as_bbox(bbox) -> np.ndarray:
    b = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if not np.all(np.isfinite(b)) or np.any(b[1] <= b[0]):
        raise InvalidArgumentError(f"degenerate bounding box {b.tolist()}")
    return b


# Exposed alpha is kept away from {0, 1} so the stored logit stays finite.
ALPHA_EPS = 1e-7


@dataclass
class GaussianSet:
    """M Gaussians stored pre-activation, plus their world bounding box.

    ``scale = exp(log_scale)``, ``alpha = sigmoid(alpha_raw)`` and the exposed
    quaternion is re-normalized on read.  Positions are clamped into ``bbox``
    whenever the set is constructed or :meth:`clamp` is called.
    """

    mu: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    alpha_raw: np.ndarray
    bbox: np.ndarray = field(default_factory=lambda: np.array([[-np.inf] * 3, [np.inf] * 3]))

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64).reshape(-1, 3)
        m = len(self.mu)
        self.log_scale = np.array(self.log_scale, dtype=np.float64).reshape(m, 3)
        self.quat = np.array(self.quat, dtype=np.float64).reshape(m, 4)
        self.alpha_raw = np.array(self.alpha_raw, dtype=np.float64).reshape(m)
        self.bbox = np.array(self.bbox, dtype=np.float64).reshape(2, 3)
        self.clamp()

    @classmethod
    def empty(cls, bbox) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), _as_bbox(bbox))

    @classmethod
    def from_exposed(cls, mu, scale, quat, alpha, bbox) -> "GaussianSet":
        alpha = np.clip(np.asarray(alpha, dtype=np.float64), ALPHA_EPS, 1 - ALPHA_EPS)
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(~(scale > 0)):
            raise InvalidArgumentError("scale components must be strictly positive")
        return cls(mu, np.log(scale), quat, logit(alpha), _as_bbox(bbox))

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], bbox) -> "GaussianSet":
        if not prims:
            return cls.empty(bbox)
        return cls.from_exposed(
            [p.mu for p in prims], [p.scale for p in prims], [p.quat for p in prims], [p.alpha for p in prims], bbox
        )

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i].copy(), self.scale[i], self.unit_quat[i], float(self.alpha[i]))

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        return (self[i] for i in range(len(self)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def alpha(self) -> np.ndarray:
        return sigmoid(self.alpha_raw)

    @property
    def unit_quat(self) -> np.ndarray:
        return self.quat / np.linalg.norm(self.quat, axis=1, keepdims=True)

    def covariances(self, mod: float = DEFAULT_SCALE_MOD) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return covariance_from_scale_rotation(self.scale, self.quat, mod)

    def clamp(self) -> None:
        if len(self):
            np.clip(self.mu, self.bbox[0], self.bbox[1], out=self.mu)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.mu.copy(), self.log_scale.copy(), self.quat.copy(), self.alpha_raw.copy(), self.bbox.copy())

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(self.mu[index], self.log_scale[index], self.quat[index], self.alpha_raw[index], self.bbox.copy())

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.log_scale, other.log_scale]),
            np.concatenate([self.quat, other.quat]),
            np.concatenate([self.alpha_raw, other.alpha_raw]),
            self.bbox.copy(),
        )

    def flat_params(self) -> np.ndarray:
        """Stored parameters as an (M, 11) array: mu, log-scale, quat, raw alpha."""
        return np.concatenate([self.mu, self.log_scale, self.quat, self.alpha_raw[:, None]], axis=1)

    @classmethod
    def from_flat(cls, params: np.ndarray, bbox) -> "GaussianSet":
        params = np.asarray(params, dtype=np.float64).reshape(-1, 11)
        return cls(params[:, 0:3], params[:, 3:6], params[:, 6:10], params[:, 10], bbox)


@dataclass
class VolumeGrid:
    """Dense scalar volume.  ``data`` has shape (Z, Y, X); voxel (i, j, k)
    sits at world position ``origin + (i, j, k) * spacing``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3-D (Z, Y, X), got shape {self.data.shape}")
        self.spacing = tuple(float(v) for v in self.spacing)
        self.origin = tuple(float(v) for v in self.origin)
        if not all(v > 0 for v in self.spacing):
            raise InvalidArgumentError("voxel spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.data.shape
        return (x, y, z)

    @property
    def delta_z(self) -> float:
        return self.spacing[2]

    @property
    def bbox(self) -> np.ndarray:
        """World box covering the full extent of every voxel."""
        o = np.asarray(self.origin)
        sp = np.asarray(self.spacing)
        n = np.asarray(self.dims, dtype=np.float64)
        return np.stack([o - 0.5 * sp, o + (n - 0.5) * sp])

    def voxel_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def slice_pose(self, k: int) -> SlicePose:
        """Axis-aligned camera whose imaging plane z_c = 0 passes through slice k."""
        if not 0 <= k < self.dims[2]:
            raise InvalidArgumentError(f"slice index {k} out of range [0, {self.dims[2]})")
        t = -(np.asarray(self.origin) + np.array([0.0, 0.0, k * self.spacing[2]]))
        x, y, _ = self.dims
        return SlicePose(np.eye(3), t, x, y, pixel_spacing=(self.spacing[0], self.spacing[1]))

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise VolumeLoadError("volume contains non-finite samples")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise VolumeLoadError("volume samples must lie in [0, 1]")


def write_checkpoint(gs: GaussianSet, dest: str | Path | BinaryIO) -> int:
    """Serialize to the uncompressed checkpoint format; returns bytes written."""
    bbox = np.where(np.isfinite(gs.bbox), gs.bbox, 0.0)
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(gs), *bbox[0], *bbox[1])
    body = gs.flat_params().astype("<f4").tobytes()
    blob = header + body
    if hasattr(dest, "write"):
        dest.write(blob)
    else:
        Path(dest).write_bytes(blob)
    return len(blob)


def checkpoint_bytes(gs: GaussianSet) -> bytes:
    import io

    buf = io.BytesIO()
    write_checkpoint(gs, buf)
    return buf.getvalue()


def read_checkpoint(src: str | Path | bytes) -> GaussianSet:
    blob = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise VolumeLoadError("checkpoint truncated")
    magic, version, count, *bb = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise VolumeLoadError("not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise VolumeLoadError(f"unsupported checkpoint version {version}")
    expected = _CKPT_HEADER.size + count * 11 * 4
    if len(blob) != expected:
        raise VolumeLoadError(f"checkpoint size {len(blob)} does not match header ({expected})")
    params = np.frombuffer(blob, dtype="<f4", offset=_CKPT_HEADER.size).reshape(count, 11).astype(np.float64)
    return GaussianSet.from_flat(params, np.asarray(bb).reshape(2, 3))
