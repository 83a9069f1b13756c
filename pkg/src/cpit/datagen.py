"""Synthetic multi-domain patches with a controllable colour shortcut, and
ingestion of real patch folders laid out as ``root/<domain>/<class>/*.png``.

Class content lives in the spatial structure (stripe frequency and nucleus
density).  Domains differ by an affine l-alpha-beta colour transform plus
noise.  The confounder is a colour cast: with probability ``confound_rho`` the
cast is chosen by the label, otherwise at random.  The cast direction rotates
by ``2 pi / num_domains`` from one domain to the next, so a cast-reading
classifier fitted on some domains is misled on the remaining one.

An optional second shortcut, off by default, overlays a luminance grating
whose orientation follows the cast class.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path

import numpy as np

from .imaging import ImageError, check_patch, lab_to_rgb, load_png, resize_bilinear, rgb_to_lab, save_png

log = logging.getLogger(__name__)

BACKGROUND_RGB = np.array([0.93, 0.74, 0.84])
NUCLEUS_RGB = np.array([0.36, 0.22, 0.56])


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    stain_shift: tuple = (0.0, 0.0, 0.0)
    stain_scale: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        shift = np.asarray(self.stain_shift, dtype=float)
        scale = np.asarray(self.stain_scale, dtype=float)
        if shift.shape != (3,) or scale.shape != (3,):
            raise ValueError("stain_shift and stain_scale must be 3-vectors")
        if not (np.all(np.isfinite(shift)) and np.all(np.isfinite(scale))):
            raise ValueError("domain parameters must be finite")
        if np.any(scale <= 0):
            raise ValueError("stain_scale must be positive")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class GenSpec:
    num_domains: int = 3
    num_classes: int = 2
    patches_per_domain: int = 600
    patch_side: int = 64
    confound_rho: float = 0.8
    cast_strength: float = 0.12
    artifact_strength: float = 0.0
    artifact_freq: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1 or self.num_classes < 1 or self.patches_per_domain < 1:
            raise ValueError("counts must be positive")
        if self.patch_side < 8:
            raise ValueError("patch_side must be >= 8")
        if not 0.0 <= self.confound_rho <= 1.0:
            raise ValueError("confound_rho must lie in [0, 1]")
        if self.cast_strength < 0 or self.artifact_strength < 0:
            raise ValueError("cast_strength and artifact_strength must be >= 0")
        if self.artifact_strength > 0 and not 0 < self.artifact_freq < self.patch_side // 2:
            raise ValueError("artifact_freq must lie strictly between 0 and patch_side / 2")


@dataclass
class Dataset:
    """Labelled patches with their domain of origin."""

    images: np.ndarray  # (M, H, W, 3)
    labels: np.ndarray  # (M,) int
    domains: np.ndarray  # (M,) str
    num_classes: int
    casts: np.ndarray | None = None  # (M,) class index that chose the colour cast, synthetic only
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def domain_names(self):
        return sorted(set(self.domains.tolist()))

    def subset(self, mask_or_index):
        idx = np.arange(len(self))[mask_or_index]
        return Dataset(
            self.images[idx], self.labels[idx], self.domains[idx], self.num_classes,
            None if self.casts is None else self.casts[idx], 0, dict(self.meta),
        )


def default_domains(num_domains=3):
    """Domains with distinct global colour (stain) shifts and scanner noise levels."""
    out = []
    for d in range(num_domains):
        angle = 2 * np.pi * (d + 0.5) / num_domains
        out.append(DomainSpec(
            domain_id=f"domain{d}",
            stain_shift=(0.06 * np.cos(3 * angle), 0.05 * np.cos(angle), 0.05 * np.sin(angle)),
            stain_scale=(1.0 + 0.15 * np.sin(angle), 1.0 + 0.2 * np.cos(angle), 1.0 - 0.2 * np.sin(angle)),
            noise_sigma=0.01 + 0.01 * d,
        ))
    return out


def content_map(label, num_classes, side, rng):
    """Tissue density in ``[0, 1]``: stripes whose frequency and blob count grow with the class index."""
    yy, xx = np.mgrid[0:side, 0:side] / side
    freq = 2.0 + 2.0 * label
    phase = rng.uniform(-np.pi / 4, np.pi / 4)
    tilt = rng.uniform(-0.08, 0.08)
    t = 0.35 + 0.22 * np.sin(2 * np.pi * freq * (yy + tilt * xx) + phase)
    n_blobs = rng.poisson(4 + 6 * label / max(num_classes - 1, 1))
    radius = 0.05
    for cy, cx in rng.random((n_blobs, 2)):
        t += 0.45 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    return np.clip(t, 0.0, 1.0)


def render_patch(density):
    return (1.0 - density)[..., None] * BACKGROUND_RGB + density[..., None] * NUCLEUS_RGB


_BASE_LAB_MEAN = rgb_to_lab(0.6 * BACKGROUND_RGB + 0.4 * NUCLEUS_RGB)


def cast_vector(cast_class, num_classes, domain_index, num_domains, strength):
    """Colour cast in the (alpha, beta) plane for a given class, rotated per domain."""
    angle = 2 * np.pi * cast_class / max(num_classes, 2) + 2 * np.pi * domain_index / num_domains
    return np.array([0.0, strength * np.cos(angle), strength * np.sin(angle)])


def scanner_artifact(cast_class, num_classes, domain_index, num_domains, side, strength, freq):
    """Multiplicative luminance grating whose orientation encodes the cast class.

    The amplitude is fixed, so per-channel mean/std matching leaves it alone.
    The grating phase rotates by ``2 pi / num_domains`` per domain, like the
    colour cast direction, so its class association does not transfer.
    """
    theta = np.pi * cast_class / max(num_classes, 2)
    ky, kx = np.rint(freq * np.sin(theta)), np.rint(freq * np.cos(theta))
    yy, xx = np.meshgrid(np.arange(side) / side, np.arange(side) / side, indexing="ij")
    return strength * np.cos(2 * np.pi * (ky * yy + kx * xx) + 2 * np.pi * domain_index / num_domains)


def apply_domain_style(rgb, domain, rng=None, cast=(0.0, 0.0, 0.0), artifact=None):
    """Affine l-alpha-beta stain transform, optional cast and grating, then additive RGB noise."""
    lab = rgb_to_lab(rgb)
    lab = _BASE_LAB_MEAN + (lab - _BASE_LAB_MEAN) * np.asarray(domain.stain_scale) + np.asarray(domain.stain_shift)
    lab = lab + np.asarray(cast)
    out = lab_to_rgb(lab, clamp=False)
    if artifact is not None:
        out = out * (1.0 + artifact[..., None])
    if domain.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out = out + rng.normal(0.0, domain.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def _balanced_labels(n, k, rng):
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def generate(spec, domains=None):
    """Generate ``spec.patches_per_domain`` patches for each domain.

    Each patch draws from its own ``SeedSequence`` child, keyed by (domain,
    index), so patches are independent of generation order.
    """
    domains = default_domains(spec.num_domains) if domains is None else list(domains)
    if len(domains) != spec.num_domains:
        raise ValueError(f"got {len(domains)} domain specs for num_domains={spec.num_domains}")
    images, labels, names, casts = [], [], [], []
    for d, dom in enumerate(domains):
        label_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, d]))
        dom_labels = _balanced_labels(spec.patches_per_domain, spec.num_classes, label_rng)
        for i, y in enumerate(dom_labels):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, d, i]))
            if rng.random() < spec.confound_rho:
                cast_class = int(y)
            else:
                cast_class = int(rng.integers(spec.num_classes))
            density = content_map(int(y), spec.num_classes, spec.patch_side, rng)
            cast = cast_vector(cast_class, spec.num_classes, d, spec.num_domains, spec.cast_strength)
            artifact = None
            if spec.artifact_strength > 0:
                artifact = scanner_artifact(cast_class, spec.num_classes, d, spec.num_domains,
                                            spec.patch_side, spec.artifact_strength, spec.artifact_freq)
            images.append(apply_domain_style(render_patch(density), dom, rng, cast, artifact))
            labels.append(int(y))
            names.append(dom.domain_id)
            casts.append(cast_class)
    meta = {"genspec": asdict(spec), "domains": [_domain_json(d) for d in domains]}
    return Dataset(np.stack(images), np.array(labels), np.array(names), spec.num_classes, np.array(casts), 0, meta)


def _domain_json(dom):
    return {
        "domain_id": dom.domain_id,
        "stain_shift": [float(v) for v in dom.stain_shift],
        "stain_scale": [float(v) for v in dom.stain_scale],
        "noise_sigma": float(dom.noise_sigma),
    }


def write_dataset(dataset, out_dir):
    """Write ``out/<domain>/<class>/<index>.png`` plus ``manifest.json``."""
    out = Path(out_dir)
    counters = {}
    for img, y, dom in zip(dataset.images, dataset.labels, dataset.domains):
        key = (str(dom), int(y))
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        folder = out / str(dom) / str(int(y))
        folder.mkdir(parents=True, exist_ok=True)
        save_png(img, folder / f"{idx:05d}.png")
    manifest = dict(dataset.meta)
    manifest["num_classes"] = dataset.num_classes
    manifest["counts"] = {f"{d}/{y}": n for (d, y), n in sorted(counters.items())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _class_index(names):
    if all(n.isdigit() for n in names):
        return {n: int(n) for n in names}
    return {n: i for i, n in enumerate(sorted(names))}


def ingest(root, side=None):
    """Load a ``root/<domain>/<class>/*.png`` tree.

    Undecodable files are skipped with a warning and counted in
    ``Dataset.skipped``.  Patches must share one size unless ``side`` is
    given, in which case every patch is resampled to ``side x side``.
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"{root} is not a directory")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(domain_dirs) < 2:
        raise LayoutError(f"{root}: need at least 2 domain directories, found {len(domain_dirs)}")
    class_names = set()
    for dom in domain_dirs:
        classes = [p for p in dom.iterdir() if p.is_dir()]
        if not classes:
            raise LayoutError(f"{dom}: no class directories")
        class_names.update(p.name for p in classes)
    class_index = _class_index(sorted(class_names))
    images, labels, domains, skipped = [], [], [], 0
    for dom in domain_dirs:
        for cls_dir in sorted(p for p in dom.iterdir() if p.is_dir()):
            files = sorted(cls_dir.glob("*.png"))
            if not files:
                raise LayoutError(f"{cls_dir}: empty class directory")
            for f in files:
                try:
                    img = load_png(f)
                except ImageError as exc:
                    log.warning("skipping %s: %s", f, exc)
                    skipped += 1
                    continue
                if side is not None:
                    img = check_patch(np.clip(resize_bilinear(img, side, side), 0.0, 1.0))
                images.append(img)
                labels.append(class_index[cls_dir.name])
                domains.append(dom.name)
    if not images:
        raise LayoutError(f"{root}: no readable patches")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise LayoutError(f"{root}: mixed patch sizes {sorted(shapes)}; pass side= to resample")
    meta = {}
    manifest = root / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        meta.pop("counts", None)
        meta.pop("num_classes", None)
    return Dataset(np.stack(images), np.array(labels), np.array(domains),
                   max(class_index.values()) + 1, None, skipped, meta)
