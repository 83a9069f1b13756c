# The two style interventions on a synthetic patch.
#
# Amplitude mixing keeps the Fourier phase of the patch and borrows amplitude
# from a style patch; colour transfer matches l-alpha-beta mean and std.
#
# Run: python demos/02_transforms.py [out_dir]

# %%
import sys
from pathlib import Path

import numpy as np

from cpit.datagen import GenSpec, generate
from cpit.fourier import dft2, fourier_mix
from cpit.imaging import save_png
from cpit.stain import lab_stats, reinhard_normalize

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

ds = generate(GenSpec(patches_per_domain=4, patch_side=64, seed=1))
x = ds.images[ds.domains == "domain0"][0]
style = ds.images[ds.domains == "domain2"][0]

# %% Fourier views along lambda: colour drifts towards the style, structure stays.
strip = [x]
for lam in (0.25, 0.5, 0.75, 1.0):
    y = fourier_mix(x, style, lam)
    strip.append(y)
    print(f"lambda={lam:.2f}  mean RGB {y.mean(axis=(0, 1))}  (style {style.mean(axis=(0, 1))})")
strip.append(style)
save_png(np.concatenate(strip, axis=1), out / "fourier_strip.png")

# %% The phase of a mixed patch is the phase of x wherever the amplitude is not ~0.
mixed = fourier_mix(x, style, 0.6, clamp=False)
f_mix, f_x = np.fft.fft2(mixed, axes=(0, 1)), np.fft.fft2(x, axes=(0, 1))
ok = (np.abs(f_mix) > 1e-9) & (np.abs(f_x) > 1e-9)
print("max phase change:", np.max(np.abs(np.angle(f_mix[ok] / f_x[ok]))))
print("DC amplitude x / style / mixed:", dft2(x).amplitude[0, 0], dft2(style).amplitude[0, 0],
      np.abs(f_mix[0, 0]))

# %% Colour transfer: the output takes the style's statistics.
ref = lab_stats(style)
y = reinhard_normalize(x, ref)
print("source stats   ", lab_stats(x).mean, lab_stats(x).std)
print("reference stats", ref.mean, ref.std)
print("output stats   ", lab_stats(y).mean, lab_stats(y).std)
save_png(np.concatenate([x, y, style], axis=1), out / "stain_strip.png")
print("wrote", out / "fourier_strip.png", "and", out / "stain_strip.png")
