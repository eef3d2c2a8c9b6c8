import math

import numpy as np
import pytest

from addl.errors import FormatError
from addl.gabor import GaborParamMaps
from addl.selftest import random_maps
from addl.side_codec import (
    CODE_UNIT,
    QuantizerSpec,
    ResidueCode,
    entropy_decode_residues,
    entropy_encode_residues,
    param_error,
    quantize_residue,
    rate_control,
    reconstruct_params,
    wrap_theta,
)


def maps(rng, h=6, w=7):
    return GaborParamMaps(random_maps(rng, 1, h, w, margin=0.0)[0])


def test_wrap_theta_range():
    d = np.linspace(-7, 7, 2001)
    w = wrap_theta(d)
    assert (w > -math.pi / 2 - 1e-12).all() and (w <= math.pi / 2 + 1e-12).all()
    np.testing.assert_allclose(np.cos(2 * w), np.cos(2 * d), atol=1e-12)


def test_step_codes():
    spec = QuantizerSpec.default()
    assert spec.codes == (1024,) * 5
    np.testing.assert_allclose(spec.steps, 1024 * CODE_UNIT)
    assert QuantizerSpec.from_scale(1e-9).codes == (1,) * 5
    assert QuantizerSpec.from_scale(1e9).codes == (65535,) * 5
    with pytest.raises(ValueError):
        QuantizerSpec((0, 1, 1, 1, 1))


def test_quantizer_error_bound_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        target, pred = maps(rng), maps(rng)
        spec = QuantizerSpec(tuple(int(c) for c in rng.integers(1, 5000, 5)))
        rec = reconstruct_params(pred, quantize_residue(target, pred, spec))
        assert rec.in_range()
        assert (param_error(rec, target) <= spec.steps / 2 + 1e-12).all()


def test_on_lattice_residues_reconstruct_exactly():
    rng = np.random.default_rng(1)
    spec = QuantizerSpec((300, 700, 1100, 90, 2000))
    for _ in range(20):
        pred = GaborParamMaps(random_maps(rng, 1, 4, 5, margin=0.3)[0])
        k = rng.integers(-3, 4, (5, 4, 5))
        target = GaborParamMaps(pred.data + k * spec.steps[:, None, None])
        if not target.in_range():
            continue
        code = quantize_residue(target, pred, spec, wrap=False)
        np.testing.assert_array_equal(code.indices, k)
        rec = reconstruct_params(pred, code)
        np.testing.assert_allclose(rec.data, target.data, rtol=0, atol=1e-15)


def test_theta_residue_uses_short_way_round():
    p = np.zeros((5, 1, 1)) + np.array([4, 0.05, 0, 1, 0.5])[:, None, None]
    t = p.copy()
    t[1] = math.pi - 0.05
    code = quantize_residue(GaborParamMaps(t), GaborParamMaps(p), QuantizerSpec((1,) * 5))
    assert code.indices[1, 0, 0] < 0
    rec = reconstruct_params(GaborParamMaps(p), code)
    assert param_error(rec, GaborParamMaps(t))[1] <= CODE_UNIT[1] / 2 + 1e-12


def test_payload_round_trip():
    rng = np.random.default_rng(2)
    idx = rng.integers(-40, 40, (5, 9, 11)) * (rng.uniform(size=(5, 9, 11)) < 0.3)
    code = ResidueCode(idx.astype(np.int64), QuantizerSpec((5, 6, 7, 8, 9)), budget_exceeded=True)
    data = entropy_encode_residues(code)
    back = entropy_decode_residues(data, 9, 11)
    np.testing.assert_array_equal(back.indices, code.indices)
    assert back.spec == code.spec and back.budget_exceeded
    assert entropy_encode_residues(back) == data


def test_payload_corruption_is_reported():
    code = ResidueCode(np.zeros((5, 3, 3), dtype=np.int64), QuantizerSpec.default())
    data = entropy_encode_residues(code)
    with pytest.raises(FormatError):
        entropy_decode_residues(data[:5], 3, 3)
    with pytest.raises(FormatError):
        entropy_decode_residues(data + b"x", 3, 3)
    bad = bytearray(data)
    bad[10] = 0x80
    with pytest.raises(FormatError, match="at byte 10"):
        entropy_decode_residues(bytes(bad), 3, 3)
    zero = bytearray(data)
    zero[0:2] = b"\x00\x00"
    with pytest.raises(FormatError):
        entropy_decode_residues(bytes(zero), 3, 3)


def test_rate_control_fits_budget_and_is_finest_found():
    rng = np.random.default_rng(4)
    target, pred = maps(rng, 16, 16), maps(rng, 16, 16)
    base_bits = 8000
    rc = rate_control(target, pred, base_bits)
    assert not rc.budget_exceeded
    assert rc.side_bits <= 0.2 * base_bits
    # the search bracket closes to within 12 / 2**12 with an over-budget finer scale
    over = [e for e, bits in rc.evaluations if bits > rc.budget_bits]
    assert max(over) < rc.scale_log2 <= max(over) + 12 / 2**12
    rec = reconstruct_params(pred, rc.code)
    assert (param_error(rec, target) <= rc.spec.steps / 2 + 1e-12).all()


def test_rate_control_generous_budget_picks_finest_scale():
    rng = np.random.default_rng(5)
    target, pred = maps(rng, 4, 4), maps(rng, 4, 4)
    rc = rate_control(target, pred, 10**7)
    assert rc.scale_log2 == -6.0
    assert len(rc.evaluations) == 1


def test_rate_control_impossible_budget_sets_flag():
    rng = np.random.default_rng(6)
    target, pred = maps(rng, 8, 8), maps(rng, 8, 8)
    rc = rate_control(target, pred, 8)
    assert rc.budget_exceeded and rc.code.budget_exceeded
    assert rc.spec.codes == QuantizerSpec.from_scale(64.0).codes
    assert entropy_decode_residues(rc.payload, 8, 8).budget_exceeded


def test_identical_maps_cost_almost_nothing():
    rng = np.random.default_rng(7)
    m = maps(rng, 16, 16)
    rc = rate_control(m, m, 4000)
    assert rc.scale_log2 == -6.0
    assert not rc.code.indices.any()
    assert rc.side_bits <= 8 * 20


def test_rate_control_needs_positive_base():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError):
        rate_control(maps(rng), maps(rng), 0)
