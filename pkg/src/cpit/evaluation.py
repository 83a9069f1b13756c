"""Leave-one-domain-out experiments and balanced-accuracy tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import io
import logging
from pathlib import Path

import numpy as np

from .model import (
    CpitConfig, PreparedPatches, StylePool, features, init_classifier, normalize_prepared, predict_batch, train,
)
from .stain import LabStats

log = logging.getLogger(__name__)

METHODS = ("baseline", "stainnorm", "clear", "clear_stain_only", "clear_fourier_only")
DISPLAY_NAMES = {
    "baseline": "Baseline",
    "stainnorm": "StainNorm",
    "clear": "CLEAR",
    "clear_stain_only": "CLEAR - Stain",
    "clear_fourier_only": "CLEAR - Fourier",
}
SPLIT_FRACTIONS = (0.80, 0.15, 0.05)

# seed-sequence role tags; shared by every method so methods see common random numbers
_SPLIT, _INIT, _TRAIN, _VAL, _TEST = range(5)


class MissingClass(ValueError):
    pass


class ProvenanceError(AssertionError):
    pass


def balanced_accuracy(preds, labels, num_classes):
    """Mean per-class recall over classes ``0 .. num_classes - 1``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ")
    recalls = []
    for k in range(num_classes):
        mask = labels == k
        if not mask.any():
            raise MissingClass(f"class {k} has no ground-truth instances")
        recalls.append(np.mean(preds[mask] == k))
    return float(np.mean(recalls))


@dataclass
class TrainSettings:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    input_side: int = 16
    hidden_dim: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.input_side < 1 or self.hidden_dim < 0:
            raise ValueError("invalid training settings")
        if not (np.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("lr must be finite and >= 0")


@dataclass
class ExperimentPlan:
    dataset: object  # datagen.Dataset
    held_out: tuple
    methods: tuple = ("baseline", "stainnorm", "clear")
    seeds: tuple = (1, 2, 3)
    cfg: CpitConfig = field(default_factory=CpitConfig)
    settings: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if isinstance(self.held_out, str):
            self.held_out = (self.held_out,)
        self.held_out = tuple(self.held_out)
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        names = self.dataset.domain_names
        for d in self.held_out:
            if d not in names:
                raise ValueError(f"held-out domain {d!r} not in dataset domains {names}")
        if len(names) < 2:
            raise ValueError("need at least two domains")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {METHODS}")


@dataclass
class ResultTable:
    """Held-out balanced accuracy per (method, held-out domain, seed)."""

    methods: list
    domains: list
    seeds: list
    values: dict = field(default_factory=dict)  # (method, domain) -> {seed: ba}

    def add(self, method, domain, seed, ba):
        if not 0.0 <= ba <= 1.0:
            raise ValueError(f"balanced accuracy {ba} outside [0, 1]")
        self.values.setdefault((method, domain), {})[seed] = float(ba)

    def per_seed(self, method, domain):
        cell = self.values.get((method, domain), {})
        return [cell[s] for s in self.seeds if s in cell]

    def mean(self, method, domain):
        vals = self.per_seed(method, domain)
        return float(np.mean(vals)) if vals else float("nan")

    def std(self, method, domain):
        vals = self.per_seed(method, domain)
        return float(np.std(vals)) if vals else float("nan")

    def mean_over_domains(self, method):
        return float(np.mean([self.mean(method, d) for d in self.domains]))

    def __eq__(self, other):
        return (
            isinstance(other, ResultTable)
            and list(self.methods) == list(other.methods)
            and list(self.domains) == list(other.domains)
            and list(self.seeds) == list(other.seeds)
            and self.values == other.values
        )


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test_in_domain: np.ndarray
    test_held_out: np.ndarray


def split_indices(dataset, held_out, seed):
    """80/15/5 split inside every training domain; the held-out domains go entirely to test."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT]))
    held = set(held_out)
    train, val, test = [], [], []
    for name in dataset.domain_names:
        idx = np.flatnonzero(dataset.domains == name)
        if name in held:
            continue
        idx = rng.permutation(idx)
        n_val = int(round(SPLIT_FRACTIONS[1] * len(idx)))
        n_test = int(round(SPLIT_FRACTIONS[2] * len(idx)))
        n_train = len(idx) - n_val - n_test
        train.append(idx[:n_train])
        val.append(idx[n_train:n_train + n_val])
        test.append(idx[n_train + n_val:])
    held_idx = np.flatnonzero(np.isin(dataset.domains, list(held)))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return Split(cat(train), cat(val), cat(test), held_idx)


def check_provenance(domains, held_out, role):
    leaked = sorted(set(np.asarray(domains).tolist()) & set(held_out))
    if leaked:
        raise ProvenanceError(f"{role} contains held-out domain(s) {leaked}")


def _method_cfg(method, cfg):
    if method in ("baseline", "stainnorm"):
        return None
    if method == "clear_stain_only":
        return replace(cfg, gamma=0.0)
    if method == "clear_fourier_only":
        return replace(cfg, gamma=1.0)
    return cfg


class PreparedDataset:
    """Per-dataset caches shared by every cell of a plan."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.patches = PreparedPatches(dataset.images, dataset.domains)


@dataclass
class Fit:
    """A trained, validation-selected classifier plus what inference needs."""

    classifier: object
    cfg: object  # CpitConfig or None
    pool: object  # StylePool or None
    reference: object  # LabStats for stainnorm, else None
    split: Split
    val_ba: float
    epoch: int


def fit_method(prep, method, held_out, seed, cfg, settings, provenance=None):
    """Train ``method`` on the non-held-out domains and keep the best validation epoch."""
    ds = prep.dataset
    split = split_indices(ds, held_out, seed)
    k = ds.num_classes
    train_dom, val_dom = ds.domains[split.train], ds.domains[split.val]
    check_provenance(train_dom, held_out, "training split")
    check_provenance(val_dom, held_out, "validation split")
    mcfg = _method_cfg(method, cfg)

    train_p = prep.patches.take(split.train)
    val_p = prep.patches.take(split.val)
    pool = ref = None
    if method == "stainnorm":
        ref = LabStats(train_p.lab_mean[0], train_p.lab_std[0])
        train_p = PreparedPatches(normalize_prepared(train_p, ref), train_p.domains)
        val_p = PreparedPatches(normalize_prepared(val_p, ref), val_p.domains)
    elif mcfg is not None:
        pool = StylePool.from_prepared(train_p)
        check_provenance(pool.patches.domains, held_out, "style pool")
    if provenance is not None:
        provenance.append({
            "method": method, "seed": seed, "held_out": tuple(held_out),
            "train": set(train_dom.tolist()), "val": set(val_dom.tolist()),
            "pool": set() if pool is None else set(pool.patches.domains.tolist()),
            "test": set(ds.domains[split.test_held_out].tolist()),
        })

    clf = init_classifier(settings.input_side, k, settings.hidden_dim,
                          np.random.default_rng(np.random.SeedSequence([seed, _INIT])))
    val_feats = features(clf, val_p.images)
    best = {"ba": -1.0, "clf": clf.copy(), "epoch": -1}

    def select(epoch, current):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _VAL]))
        preds, _ = predict_batch(current, val_p, pool, mcfg, rng, orig_feats=val_feats)
        ba = balanced_accuracy(preds, ds.labels[split.val], k)
        if ba > best["ba"]:
            best.update(ba=ba, clf=current.copy(), epoch=epoch)

    if settings.epochs == 0:
        select(-1, clf)
    train_rng = np.random.default_rng(np.random.SeedSequence([seed, _TRAIN]))
    train(clf, train_p, ds.labels[split.train], pool, mcfg, settings.epochs, settings.lr,
          train_rng, settings.batch_size, on_epoch=select)
    return Fit(best["clf"], mcfg, pool, ref, split, best["ba"], best["epoch"])


def run_cell(prep, method, held_out, seed, cfg, settings, provenance=None):
    """Train one method on one split and return the held-out balanced accuracy."""
    ds = prep.dataset
    fit = fit_method(prep, method, held_out, seed, cfg, settings, provenance)
    test_p = prep.patches.take(fit.split.test_held_out)
    if fit.reference is not None:
        test_p = PreparedPatches(normalize_prepared(test_p, fit.reference), test_p.domains)
    test_rng = np.random.default_rng(np.random.SeedSequence([seed, _TEST]))
    preds, _ = predict_batch(fit.classifier, test_p, fit.pool, fit.cfg, test_rng)
    ba = balanced_accuracy(preds, ds.labels[fit.split.test_held_out], ds.num_classes)
    log.info("%s held_out=%s seed=%d best_epoch=%d val_ba=%.4f test_ba=%.4f",
             method, ",".join(held_out), seed, fit.epoch, fit.val_ba, ba)
    return ba


def run_plan(plan, partial_csv=None, provenance=None):
    """Every (held-out domain, method, seed) cell of ``plan``.

    When ``partial_csv`` is given the table is re-written after each cell so
    a failure keeps the results obtained so far.
    """
    prep = PreparedDataset(plan.dataset)
    table = ResultTable(list(plan.methods), list(plan.held_out), list(plan.seeds))
    for domain in plan.held_out:
        for method in dict.fromkeys(plan.methods):
            for seed in plan.seeds:
                ba = run_cell(prep, method, (domain,), seed, plan.cfg, plan.settings, provenance)
                table.add(method, domain, seed, ba)
                if partial_csv is not None:
                    write_csv(table, partial_csv)
    return table


# ---------------------------------------------------------------------------
# output


def _csv_header(table):
    return ["method", "held_out", "mean_ba", "std_ba"] + [f"seed_{s}" for s in table.seeds]


def table_to_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_csv_header(table))
    for m in table.methods:
        for d in table.domains:
            cell = table.values.get((m, d), {})
            if not cell:
                continue
            raw = [repr(cell[s]) if s in cell else "" for s in table.seeds]
            w.writerow([m, d, repr(table.mean(m, d)), repr(table.std(m, d))] + raw)
    return buf.getvalue()


def write_csv(table, path):
    Path(path).write_text(table_to_csv(table))


def read_csv(path_or_text):
    text = str(path_or_text)
    if "\n" not in text:
        text = Path(path_or_text).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    seeds = [int(h.split("_", 1)[1]) for h in header[4:]]
    methods, domains = [], []
    table = ResultTable(methods, domains, seeds)
    for row in rows[1:]:
        m, d = row[0], row[1]
        if m not in methods:
            methods.append(m)
        if d not in domains:
            domains.append(d)
        for s, v in zip(seeds, row[4:]):
            if v != "":
                table.add(m, d, s, float(v))
    return table


def format_text(table):
    """Aligned table, methods as rows and held-out domains as columns.

    Each entry shows the mean balanced accuracy as a fraction and in percent.
    """
    cols = list(table.domains)
    show_mean = len(cols) > 1
    head = ["Method"] + cols + (["Mean"] if show_mean else [])
    body = []
    for m in table.methods:
        row = [DISPLAY_NAMES.get(m, m)]
        for d in cols:
            v = table.mean(m, d)
            row.append(f"{v:.4f} ({100 * v:.1f}%)")
        if show_mean:
            v = table.mean_over_domains(m)
            row.append(f"{v:.4f} ({100 * v:.1f}%)")
        body.append(row)
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    seeds_line = "seeds: " + ", ".join(str(s) for s in table.seeds)
    return "\n".join(lines + [seeds_line]) + "\n"


def emit(table, path, fmt="csv"):
    if fmt == "csv":
        write_csv(table, path)
    elif fmt == "text":
        Path(path).write_text(format_text(table))
    else:
        raise ValueError(f"unknown format {fmt!r}")
