"""Amplitude/phase decomposition and the amplitude-mixing transform.

Convention: ``F(x) = A(x) * exp(-j * P(x))``, forward DFT unnormalised and the
inverse carrying ``1 / (H W)``.  The phase ``P`` is therefore the *negated*
argument of the numpy spectrum, kept in ``(-pi, pi]``.

numpy's pocketfft backend handles arbitrary sizes (including large prime
factors) in O(N log N), so patches are never padded or resized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ImageError, check_patch

IMAG_TOL = 1e-6


class NonRealResult(ArithmeticError):
    """The inverse transform left a significant imaginary part."""


class DimensionMismatch(ImageError):
    pass


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray  # (H, W, 3), >= 0
    phase: np.ndarray  # (H, W, 3), radians in (-pi, pi]

    @property
    def shape(self):
        return self.amplitude.shape

    def complex(self):
        return self.amplitude * np.exp(-1j * self.phase)


def _phase_of(f):
    phase = -np.angle(f)
    phase[phase <= -np.pi] += 2 * np.pi
    return phase


def dft2(img):
    """Per-channel 2-D DFT of a patch, returned as amplitude and phase."""
    img = check_patch(img)
    f = np.fft.fft2(img, axes=(0, 1))
    return Spectrum(np.abs(f), _phase_of(f))


def idft2(spec, clamp=True):
    """Invert a :class:`Spectrum`.

    Raises :class:`NonRealResult` if the imaginary residue exceeds 1e-6,
    which only happens for spectra without conjugate symmetry.
    """
    out = np.fft.ifft2(spec.complex(), axes=(0, 1))
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue > IMAG_TOL:
        raise NonRealResult(f"imaginary residue {residue:.3g} exceeds {IMAG_TOL}")
    real = out.real
    if clamp:
        np.clip(real, 0.0, 1.0, out=real)
    return real


def fourier_mix(x, x_style, lam, clamp=True):
    """Keep the phase of ``x`` and blend amplitudes: ``(1 - lam) A(x) + lam A(x_style)``.

    Every frequency is mixed, channel by channel.
    """
    x = check_patch(x, "x")
    x_style = check_patch(x_style, "x_style")
    if x.shape != x_style.shape:
        raise DimensionMismatch(f"x is {x.shape}, style is {x_style.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    sx, ss = dft2(x), dft2(x_style)
    mixed = Spectrum((1.0 - lam) * sx.amplitude + lam * ss.amplitude, sx.phase)
    return idft2(mixed, clamp=clamp)


def sample_lambda(eta, rng):
    """Mixing rate drawn uniformly from ``[0, eta)``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta={eta} outside [0, 1]")
    return eta * rng.random()


# half-spectrum helper for batched pipelines -----------------------------------


def half_spectrum(images, axes=(-3, -2)):
    """rfft2 over ``axes`` (default: the H, W axes of ``(..., H, W, 3)``).

    Returns the amplitude and the unit phasor ``exp(-j P)``.
    """
    f = np.fft.rfft2(images, axes=axes)
    amp = np.abs(f)
    # exp(-j P) == f / |f|; zero bins get phasor 1 (their amplitude is 0 anyway)
    with np.errstate(invalid="ignore", divide="ignore"):
        phasor = np.where(amp > 0, f / np.where(amp > 0, amp, 1.0), 1.0)
    return amp, phasor
