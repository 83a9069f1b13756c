"""Front-door adjustment and causal-preserving image transforms for domain generalization."""

from .fourier import dft2, fourier_mix, idft2, sample_lambda
from .imaging import lab_to_rgb, load_png, rgb_to_lab, save_png
from .model import CpitConfig, init_classifier, predict, train
from .scm import DiscreteScm, frontdoor_estimate, interventional_truth, random_scm
from .stain import LabStats, lab_stats, reinhard_normalize

__version__ = "0.1.0"
