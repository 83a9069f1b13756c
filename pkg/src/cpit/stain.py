"""Reinhard colour-statistics transfer in l-alpha-beta space."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import check_patch, lab_to_rgb, rgb_to_lab

STD_FLOOR = 1e-8
_STAT_KEYS = ("mean_l", "mean_a", "mean_b", "std_l", "std_a", "std_b")


@dataclass(frozen=True)
class LabStats:
    """Per-channel mean and population standard deviation in l-alpha-beta."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("LabStats must be finite")
        if np.any(std < 0):
            raise ValueError("LabStats.std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def of_lab(cls, lab):
        flat = np.asarray(lab).reshape(-1, 3)
        # shifting by one sample leaves std unchanged and makes it exactly 0 for constant input
        return cls(flat.mean(axis=0), (flat - flat[:1]).std(axis=0))


def lab_stats(img):
    """Colour statistics of the full patch (no tissue masking)."""
    return LabStats.of_lab(rgb_to_lab(check_patch(img)))


def reinhard_lab(source, reference):
    """Pre-clamp l-alpha-beta result of matching ``source`` to ``reference`` stats."""
    lab = rgb_to_lab(check_patch(source, "source"))
    src = LabStats.of_lab(lab)
    return (lab - src.mean) * (reference.std / np.maximum(src.std, STD_FLOOR)) + reference.mean


def reinhard_normalize(source, reference, clamp=True):
    """Map the colour distribution of ``source`` onto ``reference`` (a :class:`LabStats`)."""
    return lab_to_rgb(reinhard_lab(source, reference), clamp=clamp)


NORMALIZERS = {"reinhard": reinhard_normalize}


def get_normalizer(name):
    try:
        return NORMALIZERS[name]
    except KeyError:
        raise KeyError(f"unknown normalizer {name!r}; available: {sorted(NORMALIZERS)}") from None


def save_stats(stats, path):
    values = list(stats.mean) + list(stats.std)
    Path(path).write_text("".join(f"{k} = {v!r}\n" for k, v in zip(_STAT_KEYS, map(float, values))))


def load_stats(path):
    """Read the six-number ``key = value`` reference file."""
    found = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in _STAT_KEYS:
            raise ValueError(f"{path}:{lineno}: expected one of {_STAT_KEYS} = <number>")
        found[key] = float(value)
    missing = [k for k in _STAT_KEYS if k not in found]
    if missing:
        raise ValueError(f"{path}: missing {missing}")
    return LabStats([found[k] for k in _STAT_KEYS[:3]], [found[k] for k in _STAT_KEYS[3:]])
