"""Fitting a GaussianSet to a slice stack.

The loop samples one slice per iteration, renders it, scores it with
L1 + lambda * D-SSIM, back-propagates and takes an Adam step.  Between
``densify_start`` and ``densify_end`` the set is periodically pruned of
faint primitives and grown where the screen-space position gradient stays
large.
"""

from __future__ import annotations

import math
import queue
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable, Mapping

import numpy as np

from .core import ALPHA_EPS, DEFAULT_SCALE_MOD, GaussianSet, PsfSpec, SlicePose, VolumeGrid, _as_bbox, logit
from .errors import InvalidArgumentError, NumericFailureError
from .grad import GaussianGradients, backward_projection
from .metrics import psnr, ssim_with_grad
from .render import DEFAULT_TILE, SliceImage, project_set, rasterize_projection

GROUPS = ("mu", "log_scale", "quat", "alpha_raw")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 30000
    lr_position: float = 0.0006
    lr_opacity: float = 0.02
    lr_scale: float = 0.002
    lr_rotation: float = 0.001
    # every rate decays exponentially to this fraction of its start value
    lr_final_ratio: float = 0.1
    # position rate is multiplied by this length; None means half the scene extent
    position_lr_scale: float | None = None
    init_count: int = 20000
    init_mode: str = "random"
    tau: float = 0.02
    densify_start: int = 500
    densify_end: int = 25000
    densify_interval: int = 100
    grad_threshold: float = 5e-5
    split_extent_fraction: float = 0.01
    split_factor: float = 1.6
    # halve the exposed alpha of cloned / split primitives (energy preserving)
    densify_halve_alpha: bool = True
    max_count: int = 200_000
    lambda_dssim: float = 0.2
    # D-SSIM = (1 - SSIM) / 2 when True, else 1 - SSIM
    dssim_halved: bool = True
    log_interval: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        rates = (self.lr_position, self.lr_opacity, self.lr_scale, self.lr_rotation)
        if not all(r > 0 for r in rates):
            raise InvalidArgumentError("all learning rates must be positive")
        if not 0 < self.lr_final_ratio <= 1:
            raise InvalidArgumentError("lr_final_ratio must lie in (0, 1]")
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if not self.densify_start < self.densify_end <= self.iterations:
            raise InvalidArgumentError(
                f"need densify_start < densify_end <= iterations, got {self.densify_start}, "
                f"{self.densify_end}, {self.iterations}")
        if self.lambda_dssim < 0:
            raise InvalidArgumentError("lambda_dssim must be >= 0")
        if self.init_count < 1 or self.max_count < 1:
            raise InvalidArgumentError("primitive counts must be >= 1")
        if self.init_mode not in ("random", "grid"):
            raise InvalidArgumentError(f"init_mode must be 'random' or 'grid', got {self.init_mode!r}")
        if not 0 <= self.tau < 1:
            raise InvalidArgumentError("tau must lie in [0, 1)")
        if self.densify_interval < 1 or self.log_interval < 1:
            raise InvalidArgumentError("intervals must be >= 1")
        if not self.split_factor > 1:
            raise InvalidArgumentError("split_factor must exceed 1")

    @classmethod
    def for_iterations(cls, iterations: int, **kw) -> "FitConfig":
        """Defaults with the densification window scaled to a shorter run."""
        end = max(2, round(iterations * 25000 / 30000))
        start = min(500, end - 1)
        kw = {"densify_start": start, "densify_end": end, **kw}
        return cls(iterations=iterations, **kw)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "FitConfig | None" = None) -> "FitConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise InvalidArgumentError(f"unknown fit config keys: {', '.join(unknown)}")
        base = base or cls()
        return replace(base, **dict(values))

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rates(cfg: FitConfig, iteration: int, position_scale: float) -> dict[str, float]:
    """lr(t) = lr0 * ratio^(t / T) for every parameter group."""
    decay = cfg.lr_final_ratio ** (iteration / cfg.iterations)
    return {
        "mu": cfg.lr_position * position_scale * decay,
        "log_scale": cfg.lr_scale * decay,
        "quat": cfg.lr_rotation * decay,
        "alpha_raw": cfg.lr_opacity * decay,
    }


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_set(cls, gs: GaussianSet) -> "AdamState":
        m = {g: np.zeros_like(getattr(gs, g)) for g in GROUPS}
        v = {g: np.zeros_like(getattr(gs, g)) for g in GROUPS}
        return cls(m, v)

    def select(self, index) -> None:
        for d in (self.m, self.v):
            for g in GROUPS:
                d[g] = d[g][index]

    def append_zeros(self, n: int) -> None:
        for d in (self.m, self.v):
            for g in GROUPS:
                d[g] = np.concatenate([d[g], np.zeros((n,) + d[g].shape[1:])])


def adam_step(gs: GaussianSet, grads: GaussianGradients, state: AdamState, lrs: Mapping[str, float]) -> None:
    """In-place bias-corrected Adam update, then quaternion renormalization
    and position clamping."""
    gmap = {"mu": grads.d_mu, "log_scale": grads.d_log_scale, "quat": grads.d_quat, "alpha_raw": grads.d_alpha_raw}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in GROUPS:
        g = gmap[name]
        param = getattr(gs, name)
        if g.shape != param.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} does not match {name} {param.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        param -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)
    gs.quat /= np.linalg.norm(gs.quat, axis=1, keepdims=True)
    gs.clamp()


def _init_common(m: int, bbox, rng: np.random.Generator, voxel_spacing: float):
    scale = 1.5 * voxel_spacing * rng.uniform(0.8, 1.2, size=(m, 3))
    quat = rng.normal(size=(m, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    alpha = np.clip(0.1 * rng.uniform(0.5, 1.5, size=m), ALPHA_EPS, 1 - ALPHA_EPS)
    return np.log(scale), quat, logit(alpha)


def init_random(m: int, bbox, rng_seed: int = 0, voxel_spacing: float = 1.0) -> GaussianSet:
    """Uniform positions in ``bbox``; scales 1.5 voxels +-20%; alpha 0.1 +-50%."""
    bbox = _as_bbox(bbox)
    if m < 1:
        raise InvalidArgumentError("primitive count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    mu = rng.uniform(bbox[0], bbox[1], size=(m, 3))
    ls, q, a = _init_common(m, bbox, rng, voxel_spacing)
    return GaussianSet(mu, ls, q, a, bbox)


def init_grid(m: int, bbox, rng_seed: int = 0, voxel_spacing: float = 1.0) -> GaussianSet:
    """Cell centers of a ceil(m^(1/3))^3 lattice (x fastest), truncated to m."""
    bbox = _as_bbox(bbox)
    if m < 1:
        raise InvalidArgumentError("primitive count must be >= 1")
    n = math.ceil(round(m ** (1 / 3), 9))
    while n**3 < m:
        n += 1
    idx = np.arange(m)
    ijk = np.stack([idx % n, (idx // n) % n, idx // (n * n)], axis=1)
    mu = bbox[0] + (ijk + 0.5) * (bbox[1] - bbox[0]) / n
    rng = np.random.default_rng(rng_seed)
    ls, q, a = _init_common(m, bbox, rng, voxel_spacing)
    return GaussianSet(mu, ls, q, a, bbox)


def loss(rendered, target, lam: float = 0.2, dssim_halved: bool = True):
    """L1 + lam * D-SSIM and its gradient w.r.t. the rendered image."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise InvalidArgumentError(f"rendered {r.shape} and target {t.shape} differ in shape")
    diff = r - t
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if lam > 0:
        k = 0.5 if dssim_halved else 1.0
        s, ds = ssim_with_grad(r, t)
        value += lam * k * (1.0 - s)
        grad -= lam * k * ds
    return value, grad


def sample_slice(volume: VolumeGrid, rng: np.random.Generator) -> tuple[SlicePose, SliceImage]:
    k = int(rng.integers(volume.dims[2]))
    return volume.slice_pose(k), SliceImage(volume.data[k], (volume.spacing[0], volume.spacing[1]))


@dataclass
class DensifyStats:
    """Running sums between densification steps."""

    grad_norm: np.ndarray
    world_grad: np.ndarray
    seen: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "DensifyStats":
        return cls(np.zeros(m), np.zeros((m, 3)), np.zeros(m))

    def add(self, grads: GaussianGradients, visible: np.ndarray) -> None:
        self.grad_norm[visible] += np.linalg.norm(grads.d_mu_2d[visible], axis=1)
        self.world_grad[visible] += grads.d_mu[visible]
        self.seen[visible] += 1

    def mean_norm(self) -> np.ndarray:
        return np.where(self.seen > 0, self.grad_norm / np.maximum(self.seen, 1), 0.0)


def scene_extent(bbox) -> float:
    """Length of the bbox diagonal."""
    b = np.asarray(bbox, dtype=np.float64)
    return float(np.linalg.norm(b[1] - b[0]))


def peak_slice_opacity(gs: GaussianSet, volume: VolumeGrid, psf: PsfSpec,
                       mod: float = DEFAULT_SCALE_MOD) -> np.ndarray:
    """Largest opacity modulation each primitive reaches over the slice planes of ``volume``."""
    if len(gs) == 0:
        return np.zeros(0)
    z0, dz, nz = volume.origin[2], volume.spacing[2], volume.dims[2]
    k = np.clip(np.rint((gs.mu[:, 2] - z0) / dz), 0, nz - 1)
    d = gs.mu[:, 2] - (z0 + k * dz)
    var_z = gs.covariances(mod)[:, 2, 2] + psf.sigma_z**2
    return np.exp(-0.5 * d * d / var_z)


def densify_and_prune(gs: GaussianSet, state: AdamState, avg_pos_grad: np.ndarray, cfg: FitConfig,
                      rng: np.random.Generator, world_grad: np.ndarray | None = None,
                      peak_opacity: np.ndarray | None = None) -> GaussianSet:
    """Prune alpha < tau, then clone small / split large high-gradient primitives.

    With ``peak_opacity`` given, primitives whose alpha * peak_opacity stays
    below tau are pruned as well: they are culled in every slice and can no
    longer receive gradient.

    Clones are offset against the accumulated world position gradient by the
    primitive's largest scale; split children are drawn from the parent.  In
    both cases the exposed alpha is halved across the two resulting copies,
    which keeps the integrated 2D intensity unchanged.
    Returns the new set; ``state`` is updated in place.
    """
    m = len(gs)
    avg_pos_grad = np.asarray(avg_pos_grad, dtype=np.float64).reshape(m)
    if world_grad is None:
        world_grad = np.zeros((m, 3))
    keep = gs.alpha >= cfg.tau
    if peak_opacity is not None:
        keep &= gs.alpha * peak_opacity >= cfg.tau
    grow = keep & (avg_pos_grad > cfg.grad_threshold)
    room = cfg.max_count - int(keep.sum())
    cand = np.nonzero(grow)[0]
    if len(cand) > max(room, 0):
        # strongest gradients first; stable on ties
        order = np.argsort(-avg_pos_grad[cand], kind="stable")
        cand = np.sort(cand[order[: max(room, 0)]])
    grow = np.zeros(m, bool)
    grow[cand] = True

    scale = gs.scale
    max_scale = scale.max(axis=1)
    big = max_scale > cfg.split_extent_fraction * scene_extent(gs.bbox)
    clone = grow & ~big
    split = grow & big

    factor = 0.5 if cfg.densify_halve_alpha else 1.0
    half = np.clip(factor * gs.alpha, ALPHA_EPS, 1 - ALPHA_EPS)
    new_parts = []

    ci = np.nonzero(clone)[0]
    if len(ci):
        g = world_grad[ci]
        n = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(n > 0, -g / np.where(n > 0, n, 1.0), 0.0)
        mu = gs.mu[ci] + direction * max_scale[ci, None]
        new_parts.append(GaussianSet(mu, gs.log_scale[ci], gs.quat[ci], logit(half[ci]), gs.bbox))

    si = np.nonzero(split)[0]
    if len(si):
        cov_l = gs.subset(si).covariances()
        chol = np.linalg.cholesky(cov_l + 1e-12 * np.eye(3))
        kids = []
        for _ in range(2):
            z = rng.normal(size=(len(si), 3))
            mu = gs.mu[si] + np.einsum("mij,mj->mi", chol, z)
            ls = gs.log_scale[si] - math.log(cfg.split_factor)
            kids.append(GaussianSet(mu, ls, gs.quat[si], logit(half[si]), gs.bbox))
        new_parts.extend(kids)

    gs.alpha_raw[ci] = logit(half[ci])
    survivors = keep & ~split
    out = gs.subset(np.nonzero(survivors)[0])
    state.select(np.nonzero(survivors)[0])
    for part in new_parts:
        out = out.concat(part)
        state.append_zeros(len(part))
    return out


ProgressSink = Callable[[dict], None]


class QueueSink:
    """Hands progress records to another thread through a bounded queue.

    The fitting loop never blocks: when the queue is full the record is
    dropped and counted.
    """

    def __init__(self, maxsize: int = 64):
        self.queue: queue.Queue = queue.Queue(maxsize)
        self.dropped = 0

    def __call__(self, record: dict) -> None:
        try:
            self.queue.put_nowait(record)
        except queue.Full:
            self.dropped += 1


def fit(volume: VolumeGrid, psf: PsfSpec, cfg: FitConfig, progress: ProgressSink | None = None,
        init: GaussianSet | None = None, mod: float = DEFAULT_SCALE_MOD, tile: int = DEFAULT_TILE) -> GaussianSet:
    """Optimize a GaussianSet against the slices of ``volume``.

    Every ``log_interval`` iterations ``progress`` receives
    ``{iter, loss, count, psnr2d}`` where ``loss`` is the mean training loss
    since the previous record and ``psnr2d`` is measured on the middle slice.
    """
    volume.validate()
    if volume.dims[2] < 1:
        raise InvalidArgumentError("volume has no slices")
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(2)
    slice_rng = np.random.default_rng(seeds[0])
    densify_rng = np.random.default_rng(seeds[1])
    bbox = volume.bbox
    mean_spacing = float(np.mean(volume.spacing))
    if init is not None:
        gs = init.copy()
    elif cfg.init_mode == "grid":
        gs = init_grid(cfg.init_count, bbox, cfg.rng_seed, mean_spacing)
    else:
        gs = init_random(cfg.init_count, bbox, cfg.rng_seed, mean_spacing)
    pos_scale = cfg.position_lr_scale if cfg.position_lr_scale is not None else 0.5 * scene_extent(gs.bbox)
    state = AdamState.for_set(gs)
    stats = DensifyStats.zeros(len(gs))
    held_out = volume.dims[2] // 2
    window_loss = 0.0
    window_n = 0

    for it in range(1, cfg.iterations + 1):
        pose, target = sample_slice(volume, slice_rng)
        try:
            proj = project_set(gs, pose, psf, cfg.tau, mod=mod)
            image = rasterize_projection(proj, pose, tile)
            value, dI = loss(image, target.pixels, cfg.lambda_dssim, cfg.dssim_halved)
            grads = backward_projection(gs, proj, pose, psf, dI, tile, mod)
        except NumericFailureError as e:
            raise NumericFailureError(f"iteration {it}: {e}", index=e.index) from e
        if not math.isfinite(value):
            raise NumericFailureError(f"iteration {it}: non-finite loss")
        window_loss += value
        window_n += 1
        adam_step(gs, grads, state, learning_rates(cfg, it, pos_scale))

        if cfg.densify_start <= it <= cfg.densify_end:
            stats.add(grads, proj.visible)
            if it % cfg.densify_interval == 0 and it > cfg.densify_start:
                peak = peak_slice_opacity(gs, volume, psf, mod)
                gs = densify_and_prune(gs, state, stats.mean_norm(), cfg, densify_rng, stats.world_grad, peak)
                stats = DensifyStats.zeros(len(gs))

        if progress is not None and (it % cfg.log_interval == 0 or it == cfg.iterations):
            progress({
                "iter": it,
                "loss": window_loss / window_n,
                "count": len(gs),
                "psnr2d": evaluate_slice(gs, volume, psf, held_out, cfg.tau, mod, tile),
            })
            window_loss = 0.0
            window_n = 0
    return gs


def render_volume_slice(gs: GaussianSet, volume: VolumeGrid, psf: PsfSpec, k: int, tau: float = 0.02,
                        mod: float = DEFAULT_SCALE_MOD, tile: int = DEFAULT_TILE) -> np.ndarray:
    pose: SlicePose = volume.slice_pose(k)
    return rasterize_projection(project_set(gs, pose, psf, tau, mod=mod), pose, tile)


def evaluate_slice(gs: GaussianSet, volume: VolumeGrid, psf: PsfSpec, k: int, tau: float = 0.02,
                   mod: float = DEFAULT_SCALE_MOD, tile: int = DEFAULT_TILE) -> float:
    """2D PSNR of slice ``k``, rendering clamped to [0, 1]."""
    img = np.clip(render_volume_slice(gs, volume, psf, k, tau, mod, tile), 0.0, 1.0)
    return psnr(img, volume.data[k])
