import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from otmr.errors import ValidationError
from otmr.kspace import (
    center_block,
    data_consistency,
    fft2c,
    ifft2c,
    magnitude,
    make_mask,
    real_to_complex,
    undersample,
)


def _rand(shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)


def test_fft_matches_numpy_centered_oracle():
    x = _rand((2, 2, 12, 10))
    z = x[:, 0].numpy() + 1j * x[:, 1].numpy()
    ref = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(z, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))
    k = fft2c(x)
    np.testing.assert_allclose(k[:, 0].numpy(), ref.real, atol=1e-12)
    np.testing.assert_allclose(k[:, 1].numpy(), ref.imag, atol=1e-12)


def test_zero_frequency_sits_at_center():
    x = real_to_complex(torch.ones(1, 1, 8, 6, dtype=torch.float64))
    k = magnitude(fft2c(x))[0, 0]
    assert torch.argmax(k).item() == 4 * 6 + 3
    assert k[4, 3].item() == pytest.approx(math.sqrt(48))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(2, 17), w=st.integers(2, 17), seed=st.integers(0, 10_000))
def test_round_trip_and_parseval(h, w, seed):
    x = _rand((1, 2, h, w), seed)
    k = fft2c(x)
    assert torch.max(torch.abs(ifft2c(k) - x)).item() < 1e-12
    assert (k**2).sum().item() == pytest.approx((x**2).sum().item(), rel=1e-12)


def test_fft_rejects_non_finite():
    x = torch.zeros(1, 2, 4, 4)
    x[0, 0, 1, 1] = float("nan")
    with pytest.raises(ValidationError):
        fft2c(x)


def test_fft_rejects_single_channel():
    with pytest.raises(ValidationError):
        fft2c(torch.zeros(1, 1, 4, 4))


def test_equispaced_320_quarter_counts():
    m = make_mask("equispaced", 0.25, 320, 320, seed=3)
    cols = m.kept_columns()
    assert cols.size == 80
    center = center_block(320, 80)
    assert center.size == 25
    assert set(center) <= set(cols)
    assert center[0] == 160 - 12 and center[-1] == 160 + 12


def test_center_block_even_size_extends_left():
    c = center_block(32, 8)  # floor(0.32 * 8) = 2
    assert list(c) == [15, 16]


@pytest.mark.parametrize("scheme", ["random", "equispaced", "radial"])
@pytest.mark.parametrize("ratio", [0.25, 0.125, 0.0625])
def test_mask_fraction_within_tolerance(scheme, ratio):
    m = make_mask(scheme, ratio, 320, 320, seed=0)
    assert m.within_tolerance()
    if scheme != "radial":
        n_keep = round(ratio * 320)
        assert set(center_block(320, n_keep)) <= set(m.kept_columns())


def test_column_masks_keep_whole_columns():
    m = make_mask("random", 0.25, 40, 32, seed=1)
    assert np.array_equal(m.keep, np.broadcast_to(m.keep[0], m.keep.shape))


def test_radial_is_symmetric_about_center_line_count():
    m = make_mask("radial", 0.125, 64, 64)
    assert m.keep[32, 32]
    assert abs(m.fraction - 0.125) <= 0.05 * 0.125


def test_mask_seed_determinism():
    a = make_mask("random", 0.25, 32, 32, seed=5).keep
    b = make_mask("random", 0.25, 32, 32, seed=5).keep
    c = make_mask("random", 0.25, 32, 32, seed=6).keep
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_full_ratio_keeps_everything():
    assert make_mask("radial", 1.0, 16, 16).keep.all()


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_bad_ratio(ratio):
    with pytest.raises(ValidationError):
        make_mask("random", ratio, 16, 16)


def test_unknown_scheme():
    with pytest.raises(ValidationError):
        make_mask("spiral", 0.25, 16, 16)


def test_data_consistency_restores_measured_samples():
    x = _rand((2, 2, 16, 16), 1)
    mask = make_mask("random", 0.25, 16, 16, seed=2)
    k = fft2c(x) * mask.tensor(torch.float64)
    y = data_consistency(_rand((2, 2, 16, 16), 9), k, mask)
    m = mask.tensor(torch.float64)
    assert torch.allclose(fft2c(y) * m, k, atol=1e-12)
    # idempotent on its own output
    assert torch.allclose(data_consistency(y, k, mask), y, atol=1e-12)


def test_data_consistency_shape_mismatch():
    mask = make_mask("random", 0.25, 8, 8)
    with pytest.raises(ValidationError):
        data_consistency(torch.zeros(1, 2, 8, 8), torch.zeros(2, 2, 8, 8), mask)


def test_undersample_full_mask_is_identity():
    x = _rand((1, 2, 8, 8), 4)
    assert torch.allclose(undersample(x, make_mask("random", 1.0, 8, 8)), x, atol=1e-12)
