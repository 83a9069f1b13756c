"""Shallow classifier and the marginalised CPIT objective.

The classifier ``F`` bilinearly downsamples a patch to ``input_side`` squared
pixels, centres the values at 0.5, flattens, and applies either one affine
map (multinomial logistic regression) or affine -> tanh -> affine.

Training and inference combine ``F`` over transformed views of the input::

    z = beta * F(x) + (1 - beta) / N * sum_i [gamma * F(TF_i(x)) + (1 - gamma) * F(TS_i(x))]

where ``TF_i`` keeps the Fourier phase of ``x`` and mixes in the amplitude of
a style patch ``x'_i``, and ``TS_i`` transfers the colour statistics of
``x'_i`` onto ``x``.  The transforms have no parameters, so gradients only
flow through ``F``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import functools
import io
import json
import logging
import zipfile
from pathlib import Path

import numpy as np

from .fourier import DimensionMismatch, fourier_mix, half_spectrum
from .imaging import (
    LAB_TO_LOGLMS, LMS_FLOOR, LMS_TO_RGB, LOGLMS_TO_LAB, RGB_TO_LMS,
    _bilinear_matrix, check_patch, resize_bilinear,
)
from .stain import STD_FLOOR, LabStats, reinhard_normalize

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MIX_SPACES = ("logits", "probs")


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CpitConfig:
    eta: float = 1.0
    gamma: float = 0.25
    beta: float = 0.2
    n_styles: int = 4
    seed: int = 0
    mix_space: str = "logits"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta={self.eta} outside [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma={self.gamma} outside [0, 1]")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta={self.beta} outside [0, 1)")
        if int(self.n_styles) != self.n_styles or self.n_styles < 1:
            raise ValueError(f"n_styles={self.n_styles} must be a positive integer")
        if self.mix_space not in MIX_SPACES:
            raise ValueError(f"mix_space must be one of {MIX_SPACES}")

    def view_weights(self):
        """Weights of (original, each Fourier view, each stain view); they sum to 1."""
        rest = (1.0 - self.beta) / self.n_styles
        return self.beta, rest * self.gamma, rest * (1.0 - self.gamma)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class Classifier:
    input_side: int
    num_classes: int
    hidden_dim: int = 0
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.input_side * self.input_side * 3

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def param_vector(self):
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_param_vector(self, vec):
        pos = 0
        for k in sorted(self.params):
            n = self.params[k].size
            self.params[k] = vec[pos:pos + n].reshape(self.params[k].shape).copy()
            pos += n


def init_classifier(input_side, num_classes, hidden_dim=0, rng=None, init_scale=0.1):
    """Zero weights for the linear model; Gaussian first layer for the hidden one."""
    d = input_side * input_side * 3
    if hidden_dim == 0:
        params = {"W": np.zeros((num_classes, d)), "b": np.zeros(num_classes)}
    else:
        if rng is None:
            raise ValueError("a hidden layer needs an rng for initialisation")
        params = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(d), (hidden_dim, d)),
            "b1": np.zeros(hidden_dim),
            "W2": rng.normal(0.0, init_scale, (num_classes, hidden_dim)),
            "b2": np.zeros(num_classes),
        }
    return Classifier(input_side, num_classes, hidden_dim, params)


@functools.lru_cache(maxsize=32)
def _sampler(side, height, width):
    """Bilinear downsampling restricted to the source rows/columns it reads.

    Returns ``(rows, cols, ry, rx)`` with ``small = ry @ img[rows][:, cols] @ rx.T``.
    """
    ry = _bilinear_matrix(side, height)
    rx = _bilinear_matrix(side, width)
    rows = np.flatnonzero(ry.any(axis=0))
    cols = np.flatnonzero(rx.any(axis=0))
    return rows, cols, np.ascontiguousarray(ry[:, rows]), np.ascontiguousarray(rx[:, cols])


def _featurise(sub, ry, rx):
    """``(..., 3, r, c)`` sampled pixels -> centred flat features (channel-major)."""
    small = ry @ np.ascontiguousarray(sub) @ rx.T
    return (small - 0.5).reshape(*small.shape[:-3], -1)


def features(clf, images):
    """Downsample ``(..., H, W, 3)`` images and flatten to ``(..., D)``."""
    images = np.asarray(images, dtype=np.float64)
    rows, cols, ry, rx = _sampler(clf.input_side, images.shape[-3], images.shape[-2])
    sub = np.moveaxis(images[..., rows[:, None], cols, :], -1, -3)
    return _featurise(sub, ry, rx)


def _logits(params, feats):
    if "W" in params:
        return feats @ params["W"].T + params["b"], None
    h = np.tanh(feats @ params["W1"].T + params["b1"])
    return h @ params["W2"].T + params["b2"], h


def _backprop(params, feats, hidden, dlogits):
    """Parameter gradients given ``dL/dlogits`` for a flat batch of inputs."""
    if "W" in params:
        return {"W": dlogits.T @ feats, "b": dlogits.sum(axis=0)}
    dh = (dlogits @ params["W2"]) * (1.0 - hidden ** 2)
    return {
        "W2": dlogits.T @ hidden,
        "b2": dlogits.sum(axis=0),
        "W1": dh.T @ feats,
        "b1": dh.sum(axis=0),
    }


def forward(clf, img):
    """Logits for a single patch."""
    return _logits(clf.params, features(clf, check_patch(img)))[0]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# style pool and transformed views


class PreparedPatches:
    """Patches with the per-image quantities the transforms reuse.

    Caches, channel-first, the half spectrum (amplitude and unit phasor) and
    the l-alpha-beta image with its statistics.  Used both for the samples
    being transformed and for the style pool.
    """

    def __init__(self, images, domains=None):
        images = np.asarray(images, dtype=np.float64)
        self.cf = np.ascontiguousarray(np.moveaxis(images, -1, -3))  # (M, 3, H, W)
        self.domains = None if domains is None else np.asarray(domains)
        # single precision halves the FFT cost of rendering views during training
        amp, phasor = half_spectrum(self.cf.astype(np.float32), axes=(-2, -1))
        self.amp, self.phasor = amp.astype(np.float32), phasor.astype(np.complex64)
        self.lab = np.einsum("kc,mchw->mkhw", LOGLMS_TO_LAB,
                             np.log10(np.maximum(np.einsum("kc,mchw->mkhw", RGB_TO_LMS, self.cf), LMS_FLOOR)))
        flat = self.lab.reshape(len(self.cf), 3, -1)
        self.lab_mean = flat.mean(axis=2)
        self.lab_std = flat.std(axis=2)

    def __len__(self):
        return len(self.cf)

    @property
    def images(self):
        return np.moveaxis(self.cf, -3, -1)

    @property
    def shape(self):
        return self.cf.shape[2:]

    def take(self, idx):
        out = object.__new__(PreparedPatches)
        out.cf = self.cf[idx]
        out.domains = None if self.domains is None else self.domains[idx]
        out.amp, out.phasor = self.amp[idx], self.phasor[idx]
        out.lab, out.lab_mean, out.lab_std = self.lab[idx], self.lab_mean[idx], self.lab_std[idx]
        return out


@dataclass(frozen=True)
class StyleEntry:
    image: np.ndarray
    stats: LabStats
    domain: str | None = None


class StylePool:
    """Style instances ``x'`` drawn from the training data, uniformly over domains.

    Sampling first picks a domain uniformly, then a patch uniformly within it.
    Style images are resampled to ``size`` when given.
    """

    def __init__(self, images, domains, size=None):
        images = np.asarray(images, dtype=np.float64)
        if len(images) == 0:
            raise ValueError("style pool must not be empty")
        if size is not None and tuple(images.shape[1:3]) != tuple(size):
            images = np.clip(resize_bilinear(images, size[0], size[1]), 0.0, 1.0)
        self.patches = PreparedPatches(images, domains)
        self._index_domains()

    @classmethod
    def from_prepared(cls, patches):
        """Pool over already prepared patches (their ``domains`` must be set)."""
        if len(patches) == 0:
            raise ValueError("style pool must not be empty")
        pool = cls.__new__(cls)
        pool.patches = patches
        pool._index_domains()
        return pool

    def _index_domains(self):
        self.domain_names = sorted(set(self.patches.domains.tolist()))
        self._members = [np.flatnonzero(self.patches.domains == d) for d in self.domain_names]

    def __len__(self):
        return len(self.patches)

    def entry(self, i):
        p = self.patches
        return StyleEntry(p.images[i], LabStats(p.lab_mean[i], p.lab_std[i]), str(p.domains[i]))

    def sample(self, rng, size):
        """Pool indices of shape ``size``."""
        dom = rng.integers(len(self._members), size=size)
        pick = rng.random(size)
        out = np.empty(np.shape(dom), dtype=np.int64)
        for k, members in enumerate(self._members):
            sel = dom == k
            out[sel] = members[(pick[sel] * len(members)).astype(np.int64)]
        return out


def cpit_transform(x, style, lam):
    """The two transformed views of ``x`` for one style instance."""
    fourier_view = fourier_mix(x, style.image, lam)
    stain_view = reinhard_normalize(x, style.stats)
    return fourier_view, stain_view


def draw_styles(pool, cfg, rng, batch):
    """Style indices and mixing rates for ``batch`` samples, shape ``(batch, N)``."""
    idx = pool.sample(rng, (batch, cfg.n_styles))
    lam = cfg.eta * rng.random((batch, cfg.n_styles))
    return idx, lam


def _check_shapes(samples, pool):
    if tuple(samples.shape) != tuple(pool.patches.shape):
        raise DimensionMismatch(f"samples are {samples.shape}, pool is {pool.patches.shape}; build the pool with size=")


def _fourier_cf(samples, pool, idx, lam, rows=None):
    """Unclamped Fourier views ``(B, N, 3, len(rows), W)`` (all rows by default)."""
    pp = pool.patches
    lam = lam.astype(np.float32)[..., None, None, None]
    mixed = ((1.0 - lam) * samples.amp[:, None] + lam * pp.amp[idx]) * samples.phasor[:, None]
    cols = np.fft.ifft(mixed, axis=-2)
    if rows is not None:
        cols = cols[..., rows, :]
    return np.fft.irfft(cols, n=samples.shape[1], axis=-1)


def _stain_cf(lab, src_mean, src_std, ref_mean, ref_std):
    """Reinhard + lab->RGB folded into one 3x3 map and exp per pixel.

    ``lab`` is ``(B, 3, ...)``; statistics are ``(B, N, 3)``.  Returns
    unclamped ``(B, N, 3, ...)``.
    """
    scale = ref_std / np.maximum(src_std[:, None], STD_FLOOR)
    shift = ref_mean - src_mean[:, None] * scale
    a = np.log(10.0) * LAB_TO_LOGLMS * scale[..., None, :]  # (B, N, 3, 3)
    o = np.log(10.0) * shift @ LAB_TO_LOGLMS.T  # (B, N, 3)
    b = lab.shape[0]
    flat = lab.reshape(b, 1, 3, -1)
    lms = np.exp(a @ flat + o[..., None])
    rgb = LMS_TO_RGB @ lms
    return rgb.reshape(*rgb.shape[:-1], *lab.shape[2:])


def render_views(samples, pool, idx, lam):
    """Full-resolution Fourier and stain views, each ``(B, N, H, W, 3)`` in ``[0, 1]``."""
    _check_shapes(samples, pool)
    pp = pool.patches
    fourier = np.clip(_fourier_cf(samples, pool, idx, lam).astype(np.float64), 0.0, 1.0)
    stain = np.clip(_stain_cf(samples.lab, samples.lab_mean, samples.lab_std, pp.lab_mean[idx], pp.lab_std[idx]), 0.0, 1.0)
    return np.moveaxis(fourier, -3, -1), np.moveaxis(stain, -3, -1)


def normalize_prepared(patches, ref):
    """Reinhard-normalise every prepared patch to one :class:`LabStats` reference."""
    out = _stain_cf(patches.lab, patches.lab_mean, patches.lab_std, ref.mean[None, None], ref.std[None, None])
    return np.moveaxis(np.clip(out[:, 0], 0.0, 1.0), -3, -1)


def view_features(clf, samples, pool, idx, lam):
    """Features of the Fourier and stain views, each ``(B, N, D)``.

    Both transforms are pointwise after the inverse FFT, so only the pixels
    read by the downsampler are evaluated (and clamped).
    """
    _check_shapes(samples, pool)
    pp = pool.patches
    rows, cols, ry, rx = _sampler(clf.input_side, *samples.shape)
    fourier = _fourier_cf(samples, pool, idx, lam, rows)[..., cols].astype(np.float64)
    lab = np.ascontiguousarray(samples.lab[:, :, rows[:, None], cols])
    stain = _stain_cf(lab, samples.lab_mean, samples.lab_std, pp.lab_mean[idx], pp.lab_std[idx])
    np.clip(fourier, 0.0, 1.0, out=fourier)
    np.clip(stain, 0.0, 1.0, out=stain)
    return _featurise(fourier, ry, rx), _featurise(stain, ry, rx)


@dataclass
class ViewBatch:
    """Downsampled features of every view of a batch, plus the mixing weights."""

    orig: np.ndarray  # (B, D)
    fourier: np.ndarray | None  # (B, N, D)
    stain: np.ndarray | None  # (B, N, D)
    cfg: CpitConfig | None


def build_views(clf, samples, pool, cfg, rng, orig_feats=None):
    """Draw styles and featurise all views.  ``cfg=None`` means the original view only."""
    if orig_feats is None:
        rows, cols, ry, rx = _sampler(clf.input_side, *samples.shape)
        orig_feats = _featurise(samples.cf[..., rows[:, None], cols], ry, rx)
    if cfg is None:
        return ViewBatch(orig_feats, None, None, None)
    idx, lam = draw_styles(pool, cfg, rng, len(samples))
    fourier, stain = view_features(clf, samples, pool, idx, lam)
    return ViewBatch(orig_feats, fourier, stain, cfg)


def _stack(views):
    b = views.orig.shape[0]
    if views.cfg is None:
        return views.orig[:, None], np.ones((b, 1))
    n = views.cfg.n_styles
    w0, wf, ws = views.cfg.view_weights()
    feats = np.concatenate([views.orig[:, None], views.fourier, views.stain], axis=1)
    weights = np.concatenate([[w0], np.full(n, wf), np.full(n, ws)])
    return feats, np.broadcast_to(weights, (b, 2 * n + 1))


def combine(params, views):
    """Per-view logits ``(B, V, K)``, view weights ``(B, V)`` and the hidden cache."""
    feats, weights = _stack(views)
    b, v, d = feats.shape
    logits, hidden = _logits(params, feats.reshape(b * v, d))
    return logits.reshape(b, v, -1), weights, feats, hidden


def mixed_scores(params, views):
    """Mixed prediction: logits (``mix_space='logits'``) or probabilities (``'probs'``)."""
    logits, weights, _, _ = combine(params, views)
    if views.cfg is not None and views.cfg.mix_space == "probs":
        return np.einsum("bv,bvk->bk", weights, softmax(logits))
    return np.einsum("bv,bvk->bk", weights, logits)


def _probs_of(scores, views):
    if views.cfg is not None and views.cfg.mix_space == "probs":
        return scores
    return softmax(scores)


def loss_and_grad(params, views, labels):
    """Mean cross-entropy of the mixed prediction and its parameter gradients."""
    logits, weights, feats, hidden = combine(params, views)
    b, v, k = logits.shape
    onehot = np.eye(k)[labels]
    if views.cfg is not None and views.cfg.mix_space == "probs":
        q = softmax(logits)
        p = np.einsum("bv,bvk->bk", weights, q)
        p_y = np.maximum(p[np.arange(b), labels], 1e-300)
        loss = -np.log(p_y)
        qy = q[np.arange(b), :, labels]  # (B, V)
        dlogits = -(weights * qy / p_y[:, None])[..., None] * (onehot[:, None, :] - q)
    else:
        z = np.einsum("bv,bvk->bk", weights, logits)
        zs = z - z.max(axis=1, keepdims=True)
        logz = np.log(np.exp(zs).sum(axis=1))
        loss = logz - zs[np.arange(b), labels]
        dz = softmax(z) - onehot
        dlogits = weights[..., None] * dz[:, None, :]
    dlogits = dlogits / b
    grads = _backprop(params, feats.reshape(b * v, -1), hidden, dlogits.reshape(b * v, k))
    return float(loss.mean()), grads


def _prepare_one(x):
    return PreparedPatches(check_patch(x)[None])


def mixed_logits(clf, x, pool, cfg, rng):
    """Mixed score vector for one patch (logits, or probabilities when ``mix_space='probs'``)."""
    views = build_views(clf, _prepare_one(x), pool, cfg, rng)
    return mixed_scores(clf.params, views)[0]


def loss(clf, x, y, pool, cfg, rng):
    """Single-sample objective and gradients."""
    views = build_views(clf, _prepare_one(x), pool, cfg, rng)
    return loss_and_grad(clf.params, views, np.array([y]))


def predict(clf, x, pool=None, cfg=None, rng=None, marginalize=True):
    """Label and class probabilities; ties go to the lowest class index.

    With ``marginalize=False`` (or no ``cfg``) this is ``softmax(F(x))``.
    """
    if not marginalize or cfg is None:
        probs = softmax(forward(clf, x))
    else:
        views = build_views(clf, _prepare_one(x), pool, cfg, rng)
        probs = _probs_of(mixed_scores(clf.params, views), views)[0]
    return int(np.argmax(probs)), probs


def predict_batch(clf, samples, pool=None, cfg=None, rng=None, batch_size=64, orig_feats=None):
    """Labels and probabilities for a :class:`PreparedPatches` set."""
    probs = []
    for start in range(0, len(samples), batch_size):
        sl = slice(start, start + batch_size)
        feats = None if orig_feats is None else orig_feats[sl]
        views = build_views(clf, samples.take(sl), pool, cfg, rng, feats)
        probs.append(_probs_of(mixed_scores(clf.params, views), views))
    probs = np.concatenate(probs) if probs else np.zeros((0, clf.num_classes))
    return np.argmax(probs, axis=1), probs


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    classifier: Classifier
    losses: list


def train(clf, samples, labels, pool, cfg, epochs=30, lr=0.05, rng=None, batch_size=32, on_epoch=None):
    """Mini-batch gradient descent on the marginalised objective (``cfg=None``: plain cross-entropy).

    ``samples`` is a :class:`PreparedPatches`.  ``on_epoch(epoch, clf)`` is
    called after every epoch.  Returns the final classifier and the per-epoch
    mean loss.
    """
    if rng is None:
        raise ValueError("train needs a seeded rng")
    clf = clf.copy()
    labels = np.asarray(labels)
    orig_feats = build_views(clf, samples, None, None, None).orig
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            views = build_views(clf, samples.take(idx), pool, cfg, rng, orig_feats[idx])
            value, grads = loss_and_grad(clf.params, views, labels[idx])
            if not np.isfinite(value):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss={value}; lr={lr}")
            for k, g in grads.items():
                clf.params[k] -= lr * g
            total += value * len(idx)
        losses.append(total / len(order))
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, clf)
    return TrainResult(clf, losses)


# ---------------------------------------------------------------------------
# gradient check


def grad_check(clf, x, y, pool=None, cfg=None, seed=0, n_coords=200, step=1e-5, grad_fn=None):
    """Largest relative error between backprop and central differences.

    Transforms are drawn once and held fixed.  Relative error per coordinate
    is ``|a - n| / max(|a| + |n|, 1e-8)``.  ``grad_fn`` replaces
    :func:`loss_and_grad` (used to inject faults).
    """
    grad_fn = loss_and_grad if grad_fn is None else grad_fn
    rng = np.random.default_rng(seed)
    xs = np.asarray(x, dtype=np.float64)
    if xs.ndim == 3:
        xs = xs[None]
    labels = np.atleast_1d(np.asarray(y))
    views = build_views(clf, PreparedPatches(xs), pool, cfg, rng)
    _, grads = grad_fn(clf.params, views, labels)
    keys = sorted(clf.params)
    analytic = np.concatenate([grads[k].ravel() for k in keys])
    theta = clf.param_vector()
    coords = np.arange(theta.size) if theta.size <= n_coords else rng.choice(theta.size, n_coords, replace=False)
    probe = clf.copy()
    worst = 0.0
    for i in coords:
        vals = []
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[i] += sign * step
            probe.set_param_vector(t)
            vals.append(loss_and_grad(probe.params, views, labels)[0])
        numeric = (vals[0] - vals[1]) / (2 * step)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]) + abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(clf, path, cfg=None, extra=None):
    header = {
        "version": CHECKPOINT_VERSION,
        "input_side": clf.input_side,
        "num_classes": clf.num_classes,
        "hidden_dim": clf.hidden_dim,
        "cpit": None if cfg is None else asdict(cfg),
        "extra": extra or {},
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    arrays.update(clf.params)
    # fixed member timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Returns ``(classifier, cpit_config_or_None, header)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "header" not in data:
            raise CheckpointError(f"{path}: no header")
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
        params = {k: data[k].copy() for k in data.files if k != "header"}
    clf = Classifier(header["input_side"], header["num_classes"], header["hidden_dim"], params)
    cfg = None if header["cpit"] is None else CpitConfig(**header["cpit"])
    return clf, cfg, header
