"""Volume files, synthetic phantoms and JSON helpers.

Volume format: ``<name>.raw`` holds little-endian float32 samples in z-major
order (x fastest) and ``<name>.raw.json`` holds ``{dims: [X, Y, Z],
spacing: [sx, sy, sz], origin: [ox, oy, oz]}``.  A directory path stands for
``<dir>/volume.raw``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .core import GaussianSet, VolumeGrid
from .errors import InvalidArgumentError, VolumeLoadError
from .metrics import psnr, ssim
from .voxelize import VoxelizerConfig, voxelize

__all__ = [
    "Blob",
    "PhantomSpec",
    "default_phantom_spec",
    "load_json",
    "load_volume",
    "make_phantom",
    "psnr",
    "save_json",
    "save_volume",
    "ssim",
    "volume_path",
]

VOLUME_FILE = "volume.raw"


def volume_path(path: str | Path) -> Path:
    p = Path(path)
    if p.is_dir() or p.suffix == "" or str(path).endswith(("/", "\\")):
        return p / VOLUME_FILE
    return p


def _sidecar(raw: Path) -> Path:
    return raw.with_name(raw.name + ".json")


def save_volume(volume: VolumeGrid, path: str | Path) -> Path:
    raw = volume_path(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    meta = {"dims": list(volume.dims), "spacing": list(volume.spacing), "origin": list(volume.origin)}
    _sidecar(raw).write_text(json.dumps(meta, indent=2) + "\n")
    return raw


def load_volume(path: str | Path) -> VolumeGrid:
    raw = volume_path(path)
    side = _sidecar(raw)
    if not side.exists():
        raise VolumeLoadError(f"missing sidecar {side}")
    if not raw.exists():
        raise VolumeLoadError(f"missing volume file {raw}")
    try:
        meta = json.loads(side.read_text())
        dims = [int(v) for v in meta["dims"]]
        spacing = [float(v) for v in meta.get("spacing", (1.0, 1.0, 1.0))]
        origin = [float(v) for v in meta.get("origin", (0.0, 0.0, 0.0))]
    except (ValueError, KeyError, TypeError) as e:
        raise VolumeLoadError(f"malformed sidecar {side}: {e}") from e
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeLoadError(f"bad dims {dims} in {side}")
    blob = raw.read_bytes()
    expected = 4 * math.prod(dims)
    if len(blob) != expected:
        raise VolumeLoadError(f"{raw} has {len(blob)} bytes, expected {expected} for dims {dims}")
    x, y, z = dims
    data = np.frombuffer(blob, dtype="<f4").reshape(z, y, x).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeLoadError(f"{raw} contains non-finite samples")
    try:
        return VolumeGrid(data, spacing, origin)
    except InvalidArgumentError as e:
        raise VolumeLoadError(str(e)) from e


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    scale: tuple[float, float, float]
    quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    amplitude: float = 1.0

    def __post_init__(self):
        if not 0 < self.amplitude <= 1:
            raise InvalidArgumentError(f"blob amplitude must lie in (0, 1], got {self.amplitude}")
        if not all(s > 0 for s in self.scale):
            raise InvalidArgumentError("blob scales must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blobs: tuple[Blob, ...] = ()
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PhantomSpec":
        blobs = tuple(Blob(tuple(b["center"]), tuple(b["scale"]), tuple(b.get("quat", (1, 0, 0, 0))),
                           float(b.get("amplitude", 1.0))) for b in d.get("blobs", ()))
        return cls(tuple(int(v) for v in d["dims"]), tuple(float(v) for v in d.get("spacing", (1, 1, 1))),
                   blobs, float(d.get("noise_sigma", 0.0)), int(d.get("rng_seed", 0)))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def bbox(self) -> np.ndarray:
        sp = np.asarray(self.spacing)
        return np.stack([-0.5 * sp, (np.asarray(self.dims) - 0.5) * sp])

    def blob_set(self) -> GaussianSet:
        if not self.blobs:
            return GaussianSet.empty(self.bbox)
        return GaussianSet.from_exposed([b.center for b in self.blobs], [b.scale for b in self.blobs],
                                        [b.quat for b in self.blobs], [b.amplitude for b in self.blobs], self.bbox)


def default_phantom_spec(n: int = 64, noise_sigma: float = 0.0, rng_seed: int = 0) -> PhantomSpec:
    """Five anisotropic blobs of varied size, orientation and brightness in an n^3 grid."""
    c = n / 64.0
    blobs = (
        Blob((20 * c, 22 * c, 24 * c), (6 * c, 4 * c, 3 * c), (0.92, 0.2, 0.3, 0.1), 0.9),
        Blob((44 * c, 20 * c, 30 * c), (3 * c, 3 * c, 3 * c), (1.0, 0.0, 0.0, 0.0), 0.7),
        Blob((32 * c, 42 * c, 38 * c), (8 * c, 3 * c, 2.5 * c), (0.8, -0.1, 0.2, 0.55), 0.6),
        Blob((16 * c, 46 * c, 18 * c), (2.5 * c, 5 * c, 4 * c), (0.7, 0.5, -0.4, 0.3), 0.8),
        Blob((46 * c, 44 * c, 46 * c), (4 * c, 2 * c, 6 * c), (0.9, 0.0, 0.4, -0.2), 1.0),
    )
    return PhantomSpec((n, n, n), (1.0, 1.0, 1.0), blobs, noise_sigma, rng_seed)


PHANTOM_SUPPORT_SIGMAS = 12.0


def make_phantom(spec: PhantomSpec) -> tuple[VolumeGrid, GaussianSet]:
    """Voxelized blob set plus seeded Gaussian noise, clipped to [0, 1].

    Returns the volume and the generating set.
    """
    gs = spec.blob_set()
    cfg = VoxelizerConfig(spec.dims, spec.spacing, support_sigmas=PHANTOM_SUPPORT_SIGMAS)
    data = voxelize(gs, cfg).data
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return VolumeGrid(np.clip(data, 0.0, 1.0), spec.spacing), gs


def save_json(obj: Any, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
