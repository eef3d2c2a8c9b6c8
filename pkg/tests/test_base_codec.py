import struct

import numpy as np
import pytest

from addl.autodiff import Tensor
from addl.base_codec import (
    DCT8,
    ZIGZAG,
    decode_base,
    encode_base,
    get_codec,
    parse_base_header,
    quant_table,
    quantized_coefficients,
    reconstruct,
    simulate_base,
)
from addl.corpus import toy_images
from addl.errors import FormatError
from addl.pipeline import psnr


def test_dct_matrix_is_orthonormal_and_matches_definition():
    np.testing.assert_allclose(DCT8 @ DCT8.T, np.eye(8), atol=1e-14)
    k, n = 3, 5
    expect = 0.5 * np.cos((2 * n + 1) * k * np.pi / 16)
    assert np.isclose(DCT8[k, n], expect, rtol=1e-14)
    assert np.allclose(DCT8[0], 1 / np.sqrt(8))


def test_zigzag_order():
    assert list(ZIGZAG[:10]) == [0, 1, 8, 16, 9, 2, 3, 10, 17, 24]
    assert sorted(ZIGZAG) == list(range(64))


def test_quant_table_scaling():
    assert quant_table(50)[0, 0] == 16
    assert (quant_table(100) == 1).all()
    assert quant_table(1).max() == 255
    assert (quant_table(10) >= quant_table(90)).all()
    for bad in (0, 101, 50.0):
        with pytest.raises(ValueError):
            quant_table(bad)


def test_constant_block_reconstruction_is_exact():
    img = np.full((16, 24), 128 / 255)
    idx = quantized_coefficients(img, 50)
    assert (idx == 0).all()
    np.testing.assert_allclose(decode_base(encode_base(img, 50)), img, atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 8), (16, 24), (13, 21), (32, 9)])
def test_round_trip_matches_direct_reconstruction(shape):
    rng = np.random.default_rng(sum(shape))
    img = rng.uniform(size=shape)
    data = encode_base(img, 60)
    assert parse_base_header(data) == (60, shape[1], shape[0])
    out = decode_base(data)
    assert out.shape == shape
    expect = reconstruct(quantized_coefficients(img, 60), 60, *shape)
    assert out.tobytes() == expect.tobytes()


def test_encoding_is_deterministic():
    img = toy_images(1, 32)[0]
    assert encode_base(img, 40) == encode_base(img, 40)
    a = decode_base(encode_base(img, 40))
    b = decode_base(encode_base(img, 40))
    assert a.tobytes() == b.tobytes()


def test_psnr_increases_with_quality():
    for img in toy_images(3, 32, seed=5):
        vals = [psnr(decode_base(encode_base(img, q)), img) for q in (10, 30, 50, 70, 90)]
        assert all(b > a for a, b in zip(vals, vals[1:])), vals


def test_size_grows_with_quality():
    img = toy_images(1, 64, seed=2)[0]
    sizes = [len(encode_base(img, q)) for q in (10, 50, 90)]
    assert sizes[0] < sizes[1] < sizes[2]


def test_fuzz_random_images_decode():
    rng = np.random.default_rng(0)
    for _ in range(60):
        h, w = rng.integers(8, 40, 2)
        img = rng.uniform(size=(h, w)) ** rng.uniform(0.3, 3)
        q = int(rng.integers(1, 101))
        out = decode_base(encode_base(img, q))
        assert out.shape == (h, w) and out.min() >= 0 and out.max() <= 1


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        encode_base(np.zeros((7, 8)), 50)
    with pytest.raises(ValueError):
        encode_base(np.full((8, 8), 1.5), 50)
    with pytest.raises(ValueError):
        encode_base(np.zeros((8, 8, 1)), 50)


def test_corrupt_payloads_raise_format_error():
    data = encode_base(toy_images(1, 16)[0], 50)
    with pytest.raises(FormatError):
        decode_base(data[:3])
    with pytest.raises(FormatError):
        decode_base(data + b"\x00")
    with pytest.raises(FormatError):
        decode_base(b"\x00" + data[1:])  # quality 0
    bad = bytearray(data)
    bad[5:9] = struct.pack("<I", 10_000)
    with pytest.raises(FormatError, match="at byte"):
        decode_base(bytes(bad))
    rng = np.random.default_rng(1)
    for n in rng.integers(0, len(data), 40):
        try:
            decode_base(data[:n])
        except FormatError:
            pass
        else:
            raise AssertionError(f"truncation at {n} decoded silently")


def test_codec_registry():
    assert get_codec(0).decode(get_codec(0).encode(np.full((8, 8), 0.5), 50)).shape == (8, 8)
    with pytest.raises(FormatError):
        get_codec(9)


def proxy_gap_db(img, q):
    real = psnr(decode_base(encode_base(img, q)), img)
    proxy = simulate_base(Tensor(img[None, None]), q).data[0, 0]
    return psnr(proxy, img) - real


@pytest.mark.parametrize("q", [10, 40, 100])
def test_proxy_within_cubic_bound_of_real_codec(q):
    # every coefficient moves by at most step/8; a 2-D DCT basis peaks at 1/4
    bound = 0.125 * 0.25 * quant_table(q).sum() / 255.0
    for img in toy_images(4, 24, seed=q):
        real = decode_base(encode_base(img, q))
        proxy = simulate_base(Tensor(img[None, None]), q).data[0, 0]
        assert np.abs(proxy - real).max() <= bound + 1e-12


@pytest.mark.xfail(strict=True, reason="cubic surrogate removes ~27% of the quantization error energy; measured gap ~1 dB")
def test_proxy_psnr_close_to_real_codec_at_q40():
    gaps = [abs(proxy_gap_db(img, 40)) for img in toy_images(6, 32, seed=11)]
    assert np.mean(gaps) < 0.5, gaps


def test_proxy_gap_stays_below_analytic_ceiling():
    # error shrinks by (1 - t^2)^2 >= 0.5625 per coefficient: at most 2.5 dB optimistic
    gaps = [proxy_gap_db(img, 40) for img in toy_images(6, 32, seed=11)]
    assert all(0.0 <= g <= 2.5 for g in gaps), gaps


def test_proxy_handles_ragged_sizes_and_per_sample_quality():
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 12, 20)))
    out = simulate_base(x, [20, 80])
    assert out.shape == (2, 1, 12, 20)
    assert 0 <= out.data.min() and out.data.max() <= 1
