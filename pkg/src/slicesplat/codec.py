"""Compact container for a GaussianSet.

Primitives are sorted along a Morton curve and each attribute is quantized
to a fixed number of bits.  Positions are delta coded along the sorted
order and zig-zag mapped; the quaternion w code is replaced by its zig-zag
residual against sqrt(1 - x^2 - y^2 - z^2); the other codes are stored as
they are.  Words are split into byte planes and compressed with raw LZMA2.

Container layout (all integers little-endian)::

    offset  size  field
    0       5     magic b"GPILC"
    5       2     version (u16, = 1)
    7       1     LZMA preset (u8)
    8       5     bit widths: pos, opacity, scale, quat, morton (u8 each)
    13      8     primitive count (u64)
    21      48    bbox min xyz, max xyz (f64)
    69      48    log-scale min xyz, max xyz (f64)
    117     4*28  stream table, one row per stream in the order
                  positions, opacities, log_scales, quaternions:
                  payload offset (u64, from file start), payload length (u64),
                  raw length (u64), CRC32 of the raw stream bytes (u32)
    229     4     CRC32 of bytes [0, 229)
    233     ...   LZMA2 payloads, back to back

A raw stream holds its components one after another (component-major).
Each component is ``count`` words, u16 when the bit width is at most 16
and u32 otherwise, written as byte planes: all low bytes, then the next
byte of every word, and so on.  An empty set has empty payloads.
"""

from __future__ import annotations

import lzma
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ALPHA_EPS, GaussianSet, VolumeGrid, checkpoint_bytes, logit
from .errors import CorruptContainerError, InvalidArgumentError

MAGIC = b"GPILC"
VERSION = 1
DEFAULT_PRESET = 9

_HEAD = struct.Struct("<5sHB5BQ6d6d")
_ROW = struct.Struct("<QQQI")
_CRC = struct.Struct("<I")
STREAMS = ("positions", "opacities", "log_scales", "quaternions")
HEADER_SIZE = _HEAD.size + len(STREAMS) * _ROW.size + _CRC.size


@dataclass(frozen=True)
class QuantSpec:
    pos_bits: int = 14
    opacity_bits: int = 12
    scale_bits: int = 12
    quat_bits: int = 12
    morton_bits: int | None = None

    def __post_init__(self):
        if self.morton_bits is None:
            object.__setattr__(self, "morton_bits", self.pos_bits)
        for name in ("pos_bits", "opacity_bits", "scale_bits", "quat_bits", "morton_bits"):
            b = getattr(self, name)
            if not (isinstance(b, (int, np.integer)) and 4 <= b <= 21):
                raise InvalidArgumentError(f"{name} must be an integer in [4, 21], got {b}")

    def bits(self, stream: str) -> int:
        return {"positions": self.pos_bits, "opacities": self.opacity_bits,
                "log_scales": self.scale_bits, "quaternions": self.quat_bits}[stream]


def _finite_bbox(bbox) -> np.ndarray:
    b = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if not np.all(np.isfinite(b)) or np.any(b[1] <= b[0]):
        raise InvalidArgumentError(f"codec needs a finite, non-degenerate bbox, got {b.tolist()}")
    return b


def _to_grid(u: np.ndarray, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    return np.rint(np.clip(u, 0.0, 1.0) * levels).astype(np.int64)


def morton_codes(cells: np.ndarray, bits: int) -> np.ndarray:
    """Interleave (M, 3) integer cells; x is the least significant bit of each level."""
    cells = np.asarray(cells, dtype=np.uint64)
    code = np.zeros(len(cells), dtype=np.uint64)
    for level in range(bits):
        for axis in range(3):
            bit = (cells[:, axis] >> np.uint64(level)) & np.uint64(1)
            code |= bit << np.uint64(3 * level + axis)
    return code


def morton_sort(gs: GaussianSet, bits: int = 14) -> np.ndarray:
    """Stable permutation ordering the set along the Morton curve of its bbox."""
    bbox = _finite_bbox(gs.bbox)
    if len(gs) == 0:
        return np.zeros(0, dtype=np.int64)
    u = (gs.mu - bbox[0]) / (bbox[1] - bbox[0])
    codes = morton_codes(_to_grid(u, bits), bits)
    return np.argsort(codes, kind="stable")


def canonical_quat(q: np.ndarray, bits: int = 12) -> np.ndarray:
    """Quaternions flipped so the first nonzero component is positive.

    Inputs whose norm is already 1 to within the grid resolution (and whose
    components lie in [-1, 1]) are kept as they are, so reconstructed grid
    points quantize back onto themselves; anything else is normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    tol = 4.0 / ((1 << bits) - 1)
    near = (np.abs(norm - 1.0) <= tol) & np.all(np.abs(q) <= 1.0, axis=1, keepdims=True)
    q = np.where(near, q, q / norm)
    nz = q != 0
    first = np.argmax(nz, axis=1)
    lead = q[np.arange(len(q)), first]
    return np.where((lead < 0)[:, None], -q, q)


@dataclass
class QuantizedSet:
    """Integer attribute streams plus what is needed to map them back."""

    positions: np.ndarray     # (M, 3)
    opacities: np.ndarray     # (M, 1)
    log_scales: np.ndarray    # (M, 3)
    quaternions: np.ndarray   # (M, 4)
    bbox: np.ndarray
    log_scale_range: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    def stream(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def same_integers(self, other: "QuantizedSet") -> bool:
        return all(np.array_equal(self.stream(s), other.stream(s)) for s in STREAMS)


def quantize(gs: GaussianSet, spec: QuantSpec = QuantSpec()) -> QuantizedSet:
    bbox = _finite_bbox(gs.bbox)
    bad = ~np.all(np.isfinite(gs.flat_params()), axis=1)
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise InvalidArgumentError(f"non-finite parameter in primitive {i}")
    m = len(gs)
    if m == 0:
        z = lambda c: np.zeros((0, c), np.int64)  # noqa: E731
        return QuantizedSet(z(3), z(1), z(3), z(4), bbox, np.zeros((2, 3)))
    pos = _to_grid((gs.mu - bbox[0]) / (bbox[1] - bbox[0]), spec.pos_bits)
    opa = _to_grid(gs.alpha[:, None], spec.opacity_bits)
    lo = gs.log_scale.min(axis=0)
    hi = gs.log_scale.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    sca = _to_grid((gs.log_scale - lo) / span, spec.scale_bits)
    qua = _to_grid((canonical_quat(gs.quat, spec.quat_bits) + 1.0) / 2.0, spec.quat_bits)
    return QuantizedSet(pos, opa, sca, qua, bbox, np.stack([lo, hi]))


def _from_grid(q: np.ndarray, bits: int, name: str) -> np.ndarray:
    levels = (1 << bits) - 1
    q = np.asarray(q)
    if q.size and (q.min() < 0 or q.max() > levels):
        raise CorruptContainerError(f"{name}: integer outside [0, {levels}]")
    return q.astype(np.float64) / levels


def dequantize(qs: QuantizedSet, spec: QuantSpec = QuantSpec()) -> GaussianSet:
    """Grid-point reconstruction of every attribute."""
    bbox = np.asarray(qs.bbox, dtype=np.float64)
    if len(qs) == 0:
        return GaussianSet.empty(bbox)
    mu = bbox[0] + _from_grid(qs.positions, spec.pos_bits, "positions") * (bbox[1] - bbox[0])
    alpha = _from_grid(qs.opacities[:, 0], spec.opacity_bits, "opacities")
    lo, hi = qs.log_scale_range
    ls = lo + _from_grid(qs.log_scales, spec.scale_bits, "log_scales") * (hi - lo)
    quat = _from_grid(qs.quaternions, spec.quat_bits, "quaternions") * 2.0 - 1.0
    if np.any(np.linalg.norm(quat, axis=1) == 0):
        raise CorruptContainerError("quaternions: zero-norm record")
    alpha = np.clip(alpha, ALPHA_EPS, 1 - ALPHA_EPS)
    # the grid point is stored as is; GaussianSet normalizes it whenever a
    # rotation is formed, which keeps quantize(dequantize(.)) a fixed point
    return GaussianSet(mu, ls, quat, logit(alpha), bbox)


def quantization_bounds(gs: GaussianSet, spec: QuantSpec = QuantSpec()) -> dict[str, np.ndarray]:
    """Largest admissible |x - x_hat| per attribute: range / (2 (2^b - 1))."""
    bbox = _finite_bbox(gs.bbox)
    half = lambda b: 0.5 / ((1 << b) - 1)  # noqa: E731
    ls = gs.log_scale
    ls_span = ls.max(axis=0) - ls.min(axis=0) if len(gs) else np.zeros(3)
    return {
        "positions": (bbox[1] - bbox[0]) * half(spec.pos_bits),
        "opacities": np.array([half(spec.opacity_bits)]),
        "log_scales": ls_span * half(spec.scale_bits),
        "quaternions": np.full(4, 2.0 * half(spec.quat_bits)),
    }


def _word_dtype(bits: int) -> str:
    return "<u2" if bits <= 16 else "<u4"


def delta_zigzag(values: np.ndarray, bits: int) -> np.ndarray:
    """(M, C) b-bit integers -> zig-zag mapped wrapping deltas along M."""
    v = np.asarray(values, dtype=np.int64)
    return _zigzag(np.diff(v, axis=0, prepend=np.zeros((1, v.shape[1]), np.int64)), bits)


def undelta_zigzag(codes: np.ndarray, bits: int) -> np.ndarray:
    mask = (1 << bits) - 1
    z = np.asarray(codes, dtype=np.int64)
    s = (z >> 1) ^ -(z & 1)
    return np.cumsum(s & mask, axis=0) & mask


def _zigzag(s: np.ndarray, bits: int) -> np.ndarray:
    mask = (1 << bits) - 1
    s = np.asarray(s, dtype=np.int64) & mask
    s = np.where(s >= 1 << (bits - 1), s - (1 << bits), s)
    return ((s << 1) ^ (s >> (bits - 1))) & mask


def _unzigzag(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    return (z >> 1) ^ -(z & 1)


def predict_w(xyz: np.ndarray, bits: int) -> np.ndarray:
    """Grid code of sqrt(1 - x^2 - y^2 - z^2) from the x, y, z grid codes."""
    levels = (1 << bits) - 1
    v = np.asarray(xyz, dtype=np.float64) / levels * 2.0 - 1.0
    w = np.sqrt(np.maximum(0.0, 1.0 - np.sum(v * v, axis=1)))
    return np.rint((w + 1.0) / 2.0 * levels).astype(np.int64)


def _to_words(name: str, values: np.ndarray, bits: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    if name == "positions":
        return delta_zigzag(v, bits)
    if name == "quaternions":
        w = _zigzag(v[:, 0] - predict_w(v[:, 1:], bits), bits)
        return np.column_stack([w, v[:, 1:]])
    return v


def _from_words(name: str, words: np.ndarray, bits: int) -> np.ndarray:
    if name == "positions":
        return undelta_zigzag(words, bits)
    if name == "quaternions":
        w = (_unzigzag(words[:, 0]) + predict_w(words[:, 1:], bits)) & ((1 << bits) - 1)
        return np.column_stack([w, words[:, 1:]])
    return words


def _serialize(name: str, values: np.ndarray, bits: int) -> bytes:
    words = np.ascontiguousarray(_to_words(name, values, bits).T).astype(_word_dtype(bits))
    comps, m = words.shape
    planes = words.view(np.uint8).reshape(comps, m, words.itemsize).transpose(0, 2, 1)
    return np.ascontiguousarray(planes).tobytes()


def _deserialize(raw: bytes, m: int, comps: int, bits: int, name: str) -> np.ndarray:
    dtype = np.dtype(_word_dtype(bits))
    if len(raw) != m * comps * dtype.itemsize:
        raise CorruptContainerError(f"{name}: raw stream has {len(raw)} bytes, expected {m * comps * dtype.itemsize}")
    planes = np.frombuffer(raw, dtype=np.uint8).reshape(comps, dtype.itemsize, m).transpose(0, 2, 1)
    words = np.ascontiguousarray(planes).view(dtype).reshape(comps, m).T.astype(np.int64)
    if words.size and words.max() > (1 << bits) - 1:
        raise CorruptContainerError(f"{name}: code exceeds {bits} bits")
    return _from_words(name, words, bits)


def _lzma_filters(preset: int):
    return [{"id": lzma.FILTER_LZMA2, "preset": preset}]


_COMPONENTS = {"positions": 3, "opacities": 1, "log_scales": 3, "quaternions": 4}


@dataclass
class CompressedContainer:
    spec: QuantSpec
    count: int
    bbox: np.ndarray
    log_scale_range: np.ndarray
    payloads: dict[str, bytes]
    raw_lengths: dict[str, int]
    crcs: dict[str, int]
    preset: int = DEFAULT_PRESET

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(MAGIC, VERSION, self.preset, self.spec.pos_bits, self.spec.opacity_bits,
                          self.spec.scale_bits, self.spec.quat_bits, self.spec.morton_bits, self.count,
                          *self.bbox.reshape(-1), *self.log_scale_range.reshape(-1))
        offset = HEADER_SIZE
        rows = b""
        for name in STREAMS:
            payload = self.payloads[name]
            rows += _ROW.pack(offset, len(payload), self.raw_lengths[name], self.crcs[name])
            offset += len(payload)
        header = head + rows
        header += _CRC.pack(zlib.crc32(header))
        return header + b"".join(self.payloads[n] for n in STREAMS)

    def __len__(self) -> int:
        return HEADER_SIZE + sum(len(p) for p in self.payloads.values())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedContainer":
        blob = bytes(blob)
        if len(blob) < HEADER_SIZE:
            raise CorruptContainerError(f"container truncated ({len(blob)} bytes < {HEADER_SIZE}-byte header)")
        if blob[:5] != MAGIC:
            raise CorruptContainerError("bad magic")
        (stored_crc,) = _CRC.unpack_from(blob, HEADER_SIZE - _CRC.size)
        if zlib.crc32(blob[:HEADER_SIZE - _CRC.size]) != stored_crc:
            raise CorruptContainerError("header checksum mismatch")
        magic, version, preset, pb, ob, sb, qb, mb, count, *rest = _HEAD.unpack_from(blob)
        if version != VERSION:
            raise CorruptContainerError(f"unsupported container version {version}")
        try:
            spec = QuantSpec(pb, ob, sb, qb, mb)
        except InvalidArgumentError as e:
            raise CorruptContainerError(str(e)) from e
        bbox = np.asarray(rest[:6], dtype=np.float64).reshape(2, 3)
        ls_range = np.asarray(rest[6:], dtype=np.float64).reshape(2, 3)
        payloads, raw_lengths, crcs = {}, {}, {}
        for i, name in enumerate(STREAMS):
            off, length, raw_len, crc = _ROW.unpack_from(blob, _HEAD.size + i * _ROW.size)
            if off + length > len(blob):
                raise CorruptContainerError(f"{name}: payload runs past end of file")
            payloads[name] = blob[off:off + length]
            raw_lengths[name] = raw_len
            crcs[name] = crc
        return cls(spec, count, bbox, ls_range, payloads, raw_lengths, crcs, preset)


def encode(gs: GaussianSet, spec: QuantSpec = QuantSpec(), preset: int = DEFAULT_PRESET) -> CompressedContainer:
    """Morton-sort, quantize and compress ``gs``; output is deterministic."""
    perm = morton_sort(gs, spec.morton_bits)
    qs = quantize(gs.subset(perm), spec)
    payloads, raw_lengths, crcs = {}, {}, {}
    for name in STREAMS:
        if len(qs) == 0:
            raw, payload = b"", b""
        else:
            raw = _serialize(name, qs.stream(name), spec.bits(name))
            try:
                payload = lzma.compress(raw, format=lzma.FORMAT_RAW, filters=_lzma_filters(preset))
            except lzma.LZMAError as e:
                raise CorruptContainerError(f"{name}: compression failed: {e}") from e
        payloads[name] = payload
        raw_lengths[name] = len(raw)
        crcs[name] = zlib.crc32(raw)
    return CompressedContainer(spec, len(qs), qs.bbox, qs.log_scale_range, payloads, raw_lengths, crcs, preset)


def decode_quantized(container: CompressedContainer | bytes) -> tuple[QuantizedSet, QuantSpec]:
    c = container if isinstance(container, CompressedContainer) else CompressedContainer.from_bytes(container)
    streams = {}
    for name in STREAMS:
        payload = c.payloads[name]
        if c.count == 0:
            raw = b""
        else:
            try:
                raw = lzma.decompress(payload, format=lzma.FORMAT_RAW, filters=_lzma_filters(c.preset))
            except lzma.LZMAError as e:
                raise CorruptContainerError(f"{name}: {e}") from e
        if len(raw) != c.raw_lengths[name] or zlib.crc32(raw) != c.crcs[name]:
            raise CorruptContainerError(f"{name}: stream checksum mismatch")
        streams[name] = _deserialize(raw, c.count, _COMPONENTS[name], c.spec.bits(name), name)
    return QuantizedSet(streams["positions"], streams["opacities"], streams["log_scales"],
                        streams["quaternions"], c.bbox, c.log_scale_range), c.spec


def decode(container: CompressedContainer | bytes) -> GaussianSet:
    qs, spec = decode_quantized(container)
    return dequantize(qs, spec)


def write_container(container: CompressedContainer, path: str | Path) -> int:
    blob = container.to_bytes()
    Path(path).write_bytes(blob)
    return len(blob)


def read_container(path: str | Path) -> CompressedContainer:
    return CompressedContainer.from_bytes(Path(path).read_bytes())


def report_ratio(gs: GaussianSet, container: CompressedContainer | bytes | int,
                 volume: VolumeGrid | tuple[int, int, int]) -> dict[str, float]:
    """Raw-size / compressed-size against the checkpoint and a 4-byte voxel grid."""
    size = container if isinstance(container, int) else len(container)
    if size <= 0:
        raise InvalidArgumentError("container size must be positive")
    dims = volume.dims if isinstance(volume, VolumeGrid) else tuple(volume)
    voxels = int(np.prod(dims, dtype=np.int64))
    return {
        "vs_checkpoint": len(checkpoint_bytes(gs)) / size,
        "vs_voxels": 4.0 * voxels / size,
    }
