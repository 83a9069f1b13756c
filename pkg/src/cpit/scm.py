"""Exact front-door computations on a four-variable discrete causal model.

The graph is fixed::

    C -> X -> S -> Y
    C ----------> Y

``C`` is a confounder of the image ``X`` and the label ``Y``, and ``S`` is the
semantic mediator.  Every quantity here is obtained by full enumeration of the
joint table, so the model cardinalities are kept small (at most 8 each).

Two routes to ``P(Y | do(X=x))`` are provided and must agree:

* :func:`interventional_truth` severs the ``C -> X`` edge and sums over the
  conditional probability tables directly (ground truth).
* :func:`frontdoor_estimate` only looks at the observational joint of
  ``(X, S, Y)``; ``C`` is marginalised out before anything else happens.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import configparser

import numpy as np

MAX_CARD = 8
ROW_TOL = 1e-12


class ZeroProbabilityEvidence(ValueError):
    """Raised when conditioning on an event with zero probability."""


class ScmError(ValueError):
    """Malformed conditional probability tables."""


def _check_rows(name, table, shape):
    table = np.asarray(table, dtype=np.float64)
    if table.shape != shape:
        raise ScmError(f"{name}: expected shape {shape}, got {table.shape}")
    if not np.all(np.isfinite(table)) or np.any(table < 0) or np.any(table > 1):
        raise ScmError(f"{name}: entries must lie in [0, 1]")
    sums = table.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > ROW_TOL:
        raise ScmError(f"{name}: rows must sum to 1 (worst {sums.ravel()[np.argmax(np.abs(sums - 1.0))]!r})")
    table = table.copy()
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class DiscreteScm:
    """Conditional probability tables for ``C -> X -> S -> Y <- C``.

    Attributes
    ----------
    p_c : (card_c,) array
    p_x_given_c : (card_c, card_x) array, row ``c`` is ``P(X | C=c)``
    p_s_given_x : (card_x, card_s) array, row ``x`` is ``P(S | X=x)``
    p_y_given_s_c : (card_s, card_c, card_y) array
    """

    p_c: np.ndarray
    p_x_given_c: np.ndarray
    p_s_given_x: np.ndarray
    p_y_given_s_c: np.ndarray

    def __post_init__(self):
        p_c = np.asarray(self.p_c, dtype=np.float64)
        p_x = np.asarray(self.p_x_given_c, dtype=np.float64)
        p_s = np.asarray(self.p_s_given_x, dtype=np.float64)
        p_y = np.asarray(self.p_y_given_s_c, dtype=np.float64)
        if p_c.ndim != 1 or p_x.ndim != 2 or p_s.ndim != 2 or p_y.ndim != 3:
            raise ScmError("tables have the wrong number of dimensions")
        cc, cx, cs, cy = p_c.shape[0], p_x.shape[1], p_s.shape[1], p_y.shape[2]
        for name, card in (("card_c", cc), ("card_x", cx), ("card_s", cs), ("card_y", cy)):
            if not 1 <= card <= MAX_CARD:
                raise ScmError(f"{name}={card} outside [1, {MAX_CARD}]")
        object.__setattr__(self, "p_c", _check_rows("p_c", p_c, (cc,)))
        object.__setattr__(self, "p_x_given_c", _check_rows("p_x_given_c", p_x, (cc, cx)))
        object.__setattr__(self, "p_s_given_x", _check_rows("p_s_given_x", p_s, (cx, cs)))
        object.__setattr__(self, "p_y_given_s_c", _check_rows("p_y_given_s_c", p_y, (cs, cc, cy)))

    @property
    def card_c(self):
        return self.p_c.shape[0]

    @property
    def card_x(self):
        return self.p_x_given_c.shape[1]

    @property
    def card_s(self):
        return self.p_s_given_x.shape[1]

    @property
    def card_y(self):
        return self.p_y_given_s_c.shape[2]

    @property
    def is_positive(self):
        """True when every ``P(s | x) > 0`` and every ``P(x) > 0``.

        Under positivity the front-door formula never touches a degenerate
        conditional.  Models violating it are still accepted.
        """
        p_x = self.p_c @ self.p_x_given_c
        return bool(np.all(self.p_s_given_x > 0) and np.all(p_x > 0))


def _normalise_rows(a):
    return a / a.sum(axis=-1, keepdims=True)


def random_scm(rng, max_card=4, min_card=2):
    """Draw a strictly positive model with cardinalities in ``[min_card, max_card]``."""
    if not 1 <= min_card <= max_card <= MAX_CARD:
        raise ScmError(f"cardinality range [{min_card}, {max_card}] not within [1, {MAX_CARD}]")
    cc, cx, cs, cy = rng.integers(min_card, max_card + 1, size=4)
    # uniform draws on (0, 1] keep every entry strictly positive
    draw = lambda *shape: _normalise_rows(1.0 - rng.random(shape))
    return DiscreteScm(draw(cc), draw(cc, cx), draw(cx, cs), draw(cs, cc, cy))


def joint(scm):
    """Full joint table indexed ``[c, x, s, y]``."""
    return np.einsum("c,cx,xs,scy->cxsy", scm.p_c, scm.p_x_given_c, scm.p_s_given_x, scm.p_y_given_s_c)


def _check_value(value, card, name):
    if not 0 <= value < card:
        raise IndexError(f"{name}={value} outside [0, {card})")


def observational(scm, x):
    """``P(Y | X=x)`` read off the joint; this still carries the confounding path."""
    _check_value(x, scm.card_x, "x")
    slab = joint(scm)[:, x]  # [c, s, y]
    p_x = slab.sum()
    if p_x <= 0:
        raise ZeroProbabilityEvidence(f"P(X={x}) = 0")
    return slab.sum(axis=(0, 1)) / p_x


def interventional_truth(scm, x):
    """``P(Y | do(X=x))`` by truncated factorisation (the ``C -> X`` edge removed)."""
    _check_value(x, scm.card_x, "x")
    p_y_given_s = np.einsum("c,scy->sy", scm.p_c, scm.p_y_given_s_c)
    return scm.p_s_given_x[x] @ p_y_given_s


def mediator_intervention(scm, x):
    """``P(S | do(X=x))``, which equals ``P(S | X=x)`` because nothing opens a back door into S."""
    _check_value(x, scm.card_x, "x")
    return scm.p_s_given_x[x].copy()


def _observed_xsy(scm):
    # C is unobserved: everything downstream works only with this marginal
    return joint(scm).sum(axis=0)  # [x, s, y]


def _y_given_x_s(p_xsy):
    """``P(Y | X, S)`` with uniform rows wherever ``P(x, s) = 0``."""
    p_xs = p_xsy.sum(axis=-1, keepdims=True)
    card_y = p_xsy.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(p_xs > 0, p_xsy / np.where(p_xs > 0, p_xs, 1.0), 1.0 / card_y)
    return cond


def outcome_intervention(scm, s):
    """``P(Y | do(S=s)) = sum_x' P(Y | s, x') P(x')`` (back door blocked by X)."""
    _check_value(s, scm.card_s, "s")
    p_xsy = _observed_xsy(scm)
    p_x = p_xsy.sum(axis=(1, 2))
    return p_x @ _y_given_x_s(p_xsy)[:, s, :]


def frontdoor_estimate(scm, x):
    """``P(Y | do(X=x))`` through the mediator, using only the observed ``(X, S, Y)`` joint."""
    _check_value(x, scm.card_x, "x")
    p_xsy = _observed_xsy(scm)
    p_x = p_xsy.sum(axis=(1, 2))
    if p_x[x] <= 0:
        raise ZeroProbabilityEvidence(f"P(X={x}) = 0")
    p_s_given_x = p_xsy[x].sum(axis=-1) / p_x[x]
    y_given_xs = _y_given_x_s(p_xsy)
    # sum_s P(s|x) sum_x' P(Y|x', s) P(x')
    return np.einsum("s,k,ksy->y", p_s_given_x, p_x, y_given_xs)


def is_distribution(p, tol=ROW_TOL):
    p = np.asarray(p)
    return bool(p.ndim == 1 and np.all(p >= 0) and abs(p.sum() - 1.0) <= tol)


def frontdoor_gap(scm):
    """Largest L-infinity gap between the front-door estimate and ground truth over all x."""
    gap = 0.0
    for x in range(scm.card_x):
        gap = max(gap, float(np.max(np.abs(frontdoor_estimate(scm, x) - interventional_truth(scm, x)))))
    return gap


def confounded_example():
    """Binary model where observing X says a lot about C, and C dominates Y.

    Its observational and interventional distributions differ by more than
    0.1 in L1 for both values of X.
    """
    return DiscreteScm(
        p_c=[0.5, 0.5],
        p_x_given_c=[[0.9, 0.1], [0.1, 0.9]],
        p_s_given_x=[[0.8, 0.2], [0.2, 0.8]],
        p_y_given_s_c=[
            [[0.9, 0.1], [0.3, 0.7]],
            [[0.6, 0.4], [0.05, 0.95]],
        ],
    )


# ---------------------------------------------------------------------------
# plain-text model files
#
#   [scm]
#   p_c = 0.5 0.5
#   p_x_given_c = 0.9 0.1; 0.1 0.9
#   p_s_given_x = 0.8 0.2; 0.2 0.8
#   p_y_given_s_c = 0.9 0.1; 0.3 0.7; 0.6 0.4; 0.05 0.95
#
# Rows are separated by ';'.  p_y_given_s_c rows run over (s, c) with c fastest.


def _parse_rows(text):
    return np.array([[float(v) for v in row.split()] for row in text.split(";") if row.strip()])


def _format_rows(table):
    table = np.atleast_2d(table)
    return "; ".join(" ".join(repr(float(v)) for v in row) for row in table)


def load_scm(path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "scm" not in parser:
        raise ScmError(f"{path}: missing [scm] section")
    sec = parser["scm"]
    expected = {"p_c", "p_x_given_c", "p_s_given_x", "p_y_given_s_c"}
    unknown = set(sec) - expected
    if unknown or expected - set(sec):
        raise ScmError(f"{path}: keys must be exactly {sorted(expected)}")
    p_c = _parse_rows(sec["p_c"]).ravel()
    p_x = _parse_rows(sec["p_x_given_c"])
    p_s = _parse_rows(sec["p_s_given_x"])
    p_y = _parse_rows(sec["p_y_given_s_c"])
    cs, cc = p_s.shape[1], p_c.shape[0]
    if p_y.shape[0] != cs * cc:
        raise ScmError(f"{path}: p_y_given_s_c needs {cs * cc} rows, got {p_y.shape[0]}")
    return DiscreteScm(p_c, p_x, p_s, p_y.reshape(cs, cc, -1))


def save_scm(scm, path):
    lines = [
        "[scm]",
        f"p_c = {_format_rows(scm.p_c)}",
        f"p_x_given_c = {_format_rows(scm.p_x_given_c)}",
        f"p_s_given_x = {_format_rows(scm.p_s_given_x)}",
        f"p_y_given_s_c = {_format_rows(scm.p_y_given_s_c.reshape(-1, scm.card_y))}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
