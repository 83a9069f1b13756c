import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpit.fourier import (
    DimensionMismatch, NonRealResult, Spectrum, dft2, fourier_mix, half_spectrum, idft2, sample_lambda,
)


def brute_dft(channel):
    """Direct O(N^2) evaluation of sum_{y,x} f[y,x] exp(-2 pi i (u y / H + v x / W))."""
    h, w = channel.shape
    out = np.zeros((h, w), dtype=complex)
    ys, xs = np.mgrid[0:h, 0:w]
    for u in range(h):
        for v in range(w):
            out[u, v] = np.sum(channel * np.exp(-2j * np.pi * (u * ys / h + v * xs / w)))
    return out


def wrapped(d):
    return np.angle(np.exp(1j * d))


def pre_clamp_mix(x, style, lam):
    return fourier_mix(x, style, lam, clamp=False)


# --- dft2 ---------------------------------------------------------------------


def test_dft2_matches_direct_summation():
    img = np.random.default_rng(0).random((5, 7, 3))
    spec = dft2(img)
    for c in range(3):
        f = brute_dft(img[..., c])
        np.testing.assert_allclose(spec.amplitude[..., c], np.abs(f), atol=1e-11)
        # F = A exp(-jP): the stored phase is the negated argument
        mask = np.abs(f) > 1e-9
        np.testing.assert_allclose(wrapped(spec.phase[..., c] + np.angle(f))[mask], 0.0, atol=1e-9)


def test_phase_range():
    spec = dft2(np.random.default_rng(1).random((6, 8, 3)))
    assert np.all(spec.phase > -np.pi) and np.all(spec.phase <= np.pi)
    assert np.all(spec.amplitude >= 0)
    # even-sized real images have real Nyquist bins, so exactly pi occurs and -pi must not
    spec = dft2(np.tile([[0.0], [1.0]], (3, 4))[..., None].repeat(3, 2))
    assert not np.any(spec.phase == -np.pi)


def test_constant_image_has_only_dc():
    spec = dft2(np.full((4, 6, 3), 0.3))
    expected = np.zeros((4, 6, 3))
    expected[0, 0] = 0.3 * 24
    np.testing.assert_allclose(spec.amplitude, expected, atol=1e-9)


def test_unit_impulse_has_flat_amplitude():
    img = np.zeros((5, 4, 3))
    img[0, 0] = 1.0
    np.testing.assert_allclose(dft2(img).amplitude, 1.0, atol=1e-12)


def test_hand_built_2x2_spectrum():
    # 2x2 inverse by the four-term sum: x[y,x] = 1/4 sum_{u,v} F[u,v] (-1)^(u y + v x)
    f = np.array([[2.0, 0.4], [-0.6, 0.2]])
    amp = np.repeat(np.abs(f)[..., None], 3, axis=2)
    phase = np.repeat(np.where(f < 0, np.pi, 0.0)[..., None], 3, axis=2)
    out = idft2(Spectrum(amp, phase), clamp=False)
    for y in range(2):
        for x in range(2):
            value = sum(f[u, v] * (-1) ** (u * y + v * x) for u in range(2) for v in range(2)) / 4
            np.testing.assert_allclose(out[y, x], value, atol=1e-15)


def test_dc_only_spectrum_inverts_to_constant():
    amp = np.zeros((3, 5, 3))
    amp[0, 0] = 0.7 * 15
    np.testing.assert_allclose(idft2(Spectrum(amp, np.zeros_like(amp))), 0.7, atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (37, 53), (31, 2), (64, 63)])
def test_round_trip_and_parseval(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(25):
        img = rng.random(shape + (3,))
        spec = dft2(img)
        assert np.max(np.abs(idft2(spec, clamp=False) - img)) < 1e-9
        energy = np.sum(img ** 2, axis=(0, 1))
        np.testing.assert_allclose(np.sum(spec.amplitude ** 2, axis=(0, 1)), img.shape[0] * img.shape[1] * energy,
                                   rtol=1e-9)


def test_non_symmetric_spectrum_is_rejected():
    amp = np.zeros((4, 4, 3))
    amp[0, 1] = 1.0  # a lone non-DC bin has no conjugate partner
    with pytest.raises(NonRealResult):
        idft2(Spectrum(amp, np.zeros_like(amp)))


# --- fourier_mix -------------------------------------------------------------


def test_lambda_zero_is_identity():
    rng = np.random.default_rng(2)
    x, s = rng.random((37, 53, 3)), rng.random((37, 53, 3))
    assert np.max(np.abs(fourier_mix(x, s, 0.0) - x)) < 1e-6


def test_self_style_is_identity():
    x = np.random.default_rng(3).random((9, 10, 3))
    for lam in (0.2, 0.7, 1.0):
        assert np.max(np.abs(fourier_mix(x, x, lam) - x)) < 1e-6


def test_constant_images_lambda_one_gives_style():
    out = fourier_mix(np.full((6, 6, 3), 0.2), np.full((6, 6, 3), 0.65), 1.0)
    np.testing.assert_allclose(out, 0.65, atol=1e-6)


def test_mixed_amplitude_is_convex_combination():
    rng = np.random.default_rng(4)
    x, s = rng.random((12, 10, 3)), rng.random((12, 10, 3))
    lam = 0.35
    # the pre-clamp output may leave [0, 1], so take its spectrum directly
    raw = np.fft.fft2(pre_clamp_mix(x, s, lam), axes=(0, 1))
    expected = (1 - lam) * dft2(x).amplitude + lam * dft2(s).amplitude
    np.testing.assert_allclose(np.abs(raw), expected, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0.0, 1.0), h=st.integers(2, 20), w=st.integers(2, 20))
def test_phase_preservation(seed, lam, h, w):
    rng = np.random.default_rng(seed)
    x, s = rng.random((h, w, 3)), rng.random((h, w, 3))
    out = np.fft.fft2(pre_clamp_mix(x, s, lam), axes=(0, 1))
    ref = np.fft.fft2(x, axes=(0, 1))
    # phase is undefined at zero amplitude
    mask = (np.abs(out) > 1e-9) & (np.abs(ref) > 1e-9)
    diff = wrapped(-np.angle(out) + np.angle(ref))
    assert np.max(np.abs(diff[mask]), initial=0.0) < 1e-6


def test_real_output_for_real_inputs():
    rng = np.random.default_rng(5)
    x, s = rng.random((15, 22, 3)), rng.random((15, 22, 3))
    sx, ss = dft2(x), dft2(s)
    mixed = Spectrum(0.5 * sx.amplitude + 0.5 * ss.amplitude, sx.phase)
    assert np.max(np.abs(np.fft.ifft2(mixed.complex(), axes=(0, 1)).imag)) < 1e-6


def test_lambda_continuity():
    rng = np.random.default_rng(6)
    x, s = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    delta = 1e-6
    bound = np.max(np.abs(dft2(s).amplitude - dft2(x).amplitude))
    for lam in (0.0, 0.3, 0.8):
        step = np.max(np.abs(pre_clamp_mix(x, s, lam + delta) - pre_clamp_mix(x, s, lam)))
        assert step <= delta * bound + 1e-12


def test_mix_errors():
    x = np.zeros((4, 4, 3))
    with pytest.raises(DimensionMismatch):
        fourier_mix(x, np.zeros((4, 5, 3)), 0.5)
    with pytest.raises(ValueError):
        fourier_mix(x, x, 1.5)


# --- lambda sampling ---------------------------------------------------------


def test_sample_lambda():
    rng = np.random.default_rng(7)
    assert all(sample_lambda(0.0, rng) == 0.0 for _ in range(10))
    draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    a = [sample_lambda(0.6, np.random.default_rng(3)) for _ in range(3)]
    b = [sample_lambda(0.6, np.random.default_rng(3)) for _ in range(3)]
    assert a == b and max(a) <= 0.6
    with pytest.raises(ValueError):
        sample_lambda(1.5, rng)


def test_half_spectrum_matches_full():
    img = np.random.default_rng(8).random((6, 9, 3))
    amp, phasor = half_spectrum(img)
    full = dft2(img)
    np.testing.assert_allclose(amp, full.amplitude[:, :5], atol=1e-12)
    np.testing.assert_allclose(phasor, np.exp(-1j * full.phase[:, :5]), atol=1e-9)
