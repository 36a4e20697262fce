import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicesplat.codec import (
    HEADER_SIZE,
    CompressedContainer,
    QuantSpec,
    canonical_quat,
    decode,
    decode_quantized,
    delta_zigzag,
    dequantize,
    encode,
    morton_codes,
    morton_sort,
    quantization_bounds,
    quantize,
    read_container,
    report_ratio,
    undelta_zigzag,
    write_container,
)
from slicesplat.core import GaussianSet, PsfSpec, SlicePose, checkpoint_bytes
from slicesplat.errors import CorruptContainerError, InvalidArgumentError
from slicesplat.render import rasterize_slice

from conftest import random_set


def fuzz_set(rng, m):
    gs = random_set(rng, m, lo=rng.uniform(-50, 0, 3), hi=rng.uniform(1, 50, 3), scale=(0.05, 8.0), alpha=(0.0, 1.0))
    gs.quat *= rng.uniform(0.2, 3.0, (m, 1))
    return gs


def test_morton_bit_interleaving():
    cells = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    assert morton_codes(cells, 1).tolist() == [0, 1, 2, 4]
    assert morton_codes(np.array([[3, 0, 0], [0, 0, 3]]), 2).tolist() == [0b001001, 0b100100]


def test_morton_sort_small_cases():
    bbox = [[0, 0, 0], [1, 1, 1]]
    one = GaussianSet.from_exposed([[0.3, 0.3, 0.3]], [[1, 1, 1]], [[1, 0, 0, 0]], [0.5], bbox)
    assert morton_sort(one).tolist() == [0]
    mu = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    four = GaussianSet.from_exposed(mu, [[1, 1, 1]] * 4, [[1, 0, 0, 0]] * 4, [0.5] * 4, bbox)
    assert morton_sort(four, bits=1).tolist() == [0, 1, 2, 3]
    ties = GaussianSet.from_exposed([[0.5, 0.5, 0.5]] * 5, [[1, 1, 1]] * 5, [[1, 0, 0, 0]] * 5, [0.5] * 5, bbox)
    assert morton_sort(ties).tolist() == [0, 1, 2, 3, 4]


def test_morton_locality(rng):
    gs = random_set(rng, 10_000)
    step = lambda mu: np.linalg.norm(np.diff(mu, axis=0), axis=1).mean()  # noqa: E731
    assert step(gs.mu[morton_sort(gs)]) < step(gs.mu[rng.permutation(len(gs))])


def test_position_endpoints():
    gs = GaussianSet.from_exposed([[0, 0, 0], [2, 4, 8]], [[1, 1, 1]] * 2, [[1, 0, 0, 0]] * 2, [0.5] * 2,
                                  [[0, 0, 0], [2, 4, 8]])
    q = quantize(gs)
    assert q.positions.tolist() == [[0, 0, 0], [16383, 16383, 16383]]
    back = dequantize(q)
    assert np.array_equal(back.mu[0], [0, 0, 0])


def test_half_sphere_symmetry(rng):
    gs = random_set(rng, 200)
    neg = gs.copy()
    neg.quat = -neg.quat
    assert np.array_equal(quantize(gs).quaternions, quantize(neg).quaternions)
    c = canonical_quat(np.array([[0.0, -0.6, 0.8, 0.0], [-1.0, 0.0, 0.0, 0.0]]))
    assert c.tolist() == [[0.0, 0.6, -0.8, 0.0], [1.0, 0.0, 0.0, 0.0]]


def test_position_error_bound_exhaustive(rng):
    bbox = np.array([[-3.0, 0.5, 10.0], [7.0, 2.5, 11.0]])
    mu = bbox[0] + rng.random((100_000, 3)) * (bbox[1] - bbox[0])
    gs = GaussianSet(mu, np.zeros((len(mu), 3)), np.tile([1.0, 0, 0, 0], (len(mu), 1)), np.zeros(len(mu)), bbox)
    err = np.abs(dequantize(quantize(gs)).mu - gs.mu)
    assert np.all(err <= (bbox[1] - bbox[0]) / (2 * (2**14 - 1)))


@pytest.mark.parametrize("seed", range(20))
def test_all_attribute_bounds(seed):
    rng = np.random.default_rng(seed)
    gs = fuzz_set(rng, 500)
    spec = QuantSpec(*(int(b) for b in rng.integers(4, 22, 4)))
    back = dequantize(quantize(gs, spec), spec)
    b = quantization_bounds(gs, spec)
    assert np.all(np.abs(back.mu - gs.mu) <= b["positions"])
    assert np.all(np.abs(back.alpha - gs.alpha) <= b["opacities"][0])
    assert np.all(np.abs(back.log_scale - gs.log_scale) <= b["log_scales"])
    assert np.all(np.abs(back.quat - canonical_quat(gs.quat, spec.quat_bits)) <= b["quaternions"])


def test_integer_fixed_point(rng):
    for _ in range(5):
        gs = fuzz_set(rng, 300)
        q1 = quantize(gs)
        q2 = quantize(dequantize(q1))
        assert q1.same_integers(q2)


def test_zero_integer_maps_to_range_minimum(rng):
    gs = fuzz_set(rng, 50)
    q = quantize(gs)
    q.positions[:] = 0
    q.log_scales[:] = 0
    back = dequantize(q)
    assert np.array_equal(back.mu, np.broadcast_to(gs.bbox[0], (50, 3)))
    np.testing.assert_array_equal(back.log_scale, np.broadcast_to(gs.log_scale.min(axis=0), (50, 3)))


def test_out_of_range_integer(rng):
    q = quantize(fuzz_set(rng, 5))
    q.opacities[2, 0] = 4096
    with pytest.raises(CorruptContainerError):
        dequantize(q)


def test_nan_rejected_with_index(rng):
    gs = fuzz_set(rng, 5)
    gs.log_scale[3, 1] = np.nan
    with pytest.raises(InvalidArgumentError, match="primitive 3"):
        quantize(gs)


@given(st.integers(4, 21), st.lists(st.integers(0, 2**21 - 1), min_size=1, max_size=50))
@settings(max_examples=200, deadline=None)
def test_delta_zigzag_roundtrip(bits, values):
    v = np.array(values, dtype=np.int64)[:, None] & ((1 << bits) - 1)
    codes = delta_zigzag(v, bits)
    assert codes.min() >= 0 and codes.max() < (1 << bits)
    assert np.array_equal(undelta_zigzag(codes, bits), v)


def test_small_deltas_stay_small():
    v = np.array([[100], [101], [99], [99]])
    assert delta_zigzag(v, 12)[1:, 0].tolist() == [2, 3, 0]


def test_empty_set_container():
    gs = GaussianSet.empty([[0, 0, 0], [1, 1, 1]])
    c = encode(gs)
    blob = c.to_bytes()
    assert len(blob) == HEADER_SIZE == 233
    back = decode(blob)
    assert len(back) == 0 and np.array_equal(back.bbox, gs.bbox)


def test_constant_positions_compress(rng):
    m = 10_000
    gs = GaussianSet.from_exposed(np.full((m, 3), 0.37), rng.uniform(0.5, 2, (m, 3)), rng.normal(size=(m, 4)),
                                  rng.random(m), [[0, 0, 0], [1, 1, 1]])
    c = encode(gs)
    q, _ = decode_quantized(c)
    assert delta_zigzag(q.positions, 14)[1:].max() == 0
    assert len(c.payloads["positions"]) < 0.01 * c.raw_lengths["positions"]


def test_decode_equals_dequantize_bitwise(rng):
    gs = fuzz_set(rng, 400)
    spec = QuantSpec()
    via_codec = decode(encode(gs, spec).to_bytes())
    direct = dequantize(quantize(gs.subset(morton_sort(gs, spec.morton_bits)), spec), spec)
    assert np.array_equal(via_codec.flat_params(), direct.flat_params())
    pose = SlicePose(np.eye(3), [0, 0, -gs.mu[0, 2]], 32, 32)
    psf = PsfSpec(1, 1, 1)
    assert np.array_equal(rasterize_slice(via_codec, pose, psf).pixels, rasterize_slice(direct, pose, psf).pixels)


def test_fuzz_roundtrip():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        m = int(rng.integers(0, 300))
        gs = fuzz_set(rng, m) if m else GaussianSet.empty([[0, 0, 0], [1, 1, 1]])
        spec = QuantSpec(int(rng.integers(4, 22)), int(rng.integers(4, 22)), int(rng.integers(4, 22)),
                         int(rng.integers(4, 22)))
        c = encode(gs, spec, preset=int(rng.integers(0, 10)))
        q, spec_back = decode_quantized(c.to_bytes())
        assert spec_back == spec
        expected = quantize(gs.subset(morton_sort(gs, spec.morton_bits)), spec)
        assert q.same_integers(expected)


def test_truncated_and_corrupted(rng):
    blob = encode(fuzz_set(rng, 200)).to_bytes()
    for n in (0, 4, HEADER_SIZE - 1, HEADER_SIZE, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptContainerError):
            decode(blob[:n])
    for pos in (0, 10, 120, HEADER_SIZE + 5, len(blob) - 3):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        with pytest.raises(CorruptContainerError):
            decode(bytes(bad))


def test_deterministic_bytes(rng):
    gs = fuzz_set(rng, 1000)
    assert encode(gs).to_bytes() == encode(gs.copy()).to_bytes()


def test_file_roundtrip(tmp_path, rng):
    gs = fuzz_set(rng, 100)
    c = encode(gs)
    n = write_container(c, tmp_path / "a.gpilc")
    assert n == len(c) == (tmp_path / "a.gpilc").stat().st_size
    back = read_container(tmp_path / "a.gpilc")
    assert back.to_bytes() == c.to_bytes()


def test_report_ratio(rng):
    gs = fuzz_set(rng, 10)
    size = len(checkpoint_bytes(gs))
    r = report_ratio(gs, size, (4, 4, 4))
    assert r["vs_checkpoint"] == 1.0
    assert r["vs_voxels"] == 256 / size
    with pytest.raises(InvalidArgumentError):
        report_ratio(gs, 0, (4, 4, 4))
    assert isinstance(report_ratio(gs, encode(gs), (8, 8, 8))["vs_checkpoint"], float)


@pytest.mark.parametrize("bad", [3, 22])
def test_quant_spec_validation(bad):
    with pytest.raises(InvalidArgumentError):
        QuantSpec(pos_bits=bad)


def test_container_header_fields(rng):
    gs = fuzz_set(rng, 20)
    c = CompressedContainer.from_bytes(encode(gs, QuantSpec(12, 10, 9, 8), preset=6).to_bytes())
    assert (c.count, c.preset) == (20, 6)
    assert c.spec == QuantSpec(12, 10, 9, 8, 12)
    assert np.array_equal(c.bbox, gs.bbox)


def test_w_prediction_is_close_on_unit_quaternions(rng):
    from slicesplat.codec import predict_w

    gs = fuzz_set(rng, 2000)
    q = quantize(gs).quaternions
    res = q[:, 0] - predict_w(q[:, 1:], 12)
    assert np.median(np.abs(res)) <= 2
