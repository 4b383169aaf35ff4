"""Pixel-wise decision rules on softmax volumes and positional prior estimation."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .arrayio import IGNORE_LABEL, validate_probs
from .errors import (
    EmptyInput,
    IoFailure,
    NonpositivePrior,
    ShapeMismatch,
    ValidationError,
    ZeroPrior,
)

log = logging.getLogger(__name__)


def bayes_decide(p: np.ndarray) -> np.ndarray:
    """MAP rule: the most probable class per pixel, lowest index on ties."""
    validate_probs(p)
    return np.argmax(p, axis=2).astype(np.int32)


def validate_costs(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValidationError("cost matrix entries must be finite and non-negative")
    if np.any(np.diag(c) != 0):
        raise ValidationError("cost matrix diagonal must be 0")
    return c


def expected_costs(p: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """``out[..., j] = sum_y costs[j, y] * p[..., y]`` (the diagonal is zero)."""
    return np.asarray(p, dtype=np.float64) @ costs.T


def cost_decide(p: np.ndarray, costs) -> np.ndarray:
    """Pick the class with minimal expected confusion cost per pixel.

    ``costs[j, y]`` is the price of predicting ``j`` when the truth is ``y``.
    """
    validate_probs(p)
    c = validate_costs(costs)
    if c.shape[0] != p.shape[2]:
        raise ShapeMismatch(f"cost matrix is {c.shape[0]}x{c.shape[0]} but q={p.shape[2]}")
    if not np.any(c):
        log.warning("all confusion costs are zero; every class is optimal, returning class 0")
        return np.zeros(p.shape[:2], dtype=np.int32)
    return np.argmin(expected_costs(p, c), axis=2).astype(np.int32)


def constant_costs(q: int, value: float = 1.0) -> np.ndarray:
    return value * (1.0 - np.eye(q))


def ml_costs(priors_at_pixel: np.ndarray) -> np.ndarray:
    """Cost matrix charging ``1 / prior(y)`` for every confusion of class ``y``."""
    pr = np.asarray(priors_at_pixel, dtype=np.float64)
    return (1.0 - np.eye(pr.size)) / pr[None, :]


def _check_priors(priors: np.ndarray, shape) -> np.ndarray:
    priors = np.asarray(priors)
    if priors.ndim == 1:
        priors = np.broadcast_to(priors, shape)
    if priors.shape != tuple(shape):
        raise ShapeMismatch(f"priors shape {priors.shape} does not match probabilities {tuple(shape)}")
    if not np.all(np.isfinite(priors)) or np.any(priors <= 0):
        raise NonpositivePrior("priors must be finite and strictly positive")
    return priors


def ml_decide(p: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Maximum-likelihood rule: argmax of softmax divided by the positional prior.

    ``priors`` is H x W x q (or a length-q vector applied everywhere).
    """
    validate_probs(p)
    priors = _check_priors(priors, p.shape)
    ratio = np.asarray(p, dtype=np.float64) / priors
    return np.argmax(ratio, axis=2).astype(np.int32)


def decide(p: np.ndarray, rule: str, priors=None, costs=None) -> np.ndarray:
    if rule == "bayes":
        return bayes_decide(p)
    if rule == "ml":
        if priors is None:
            raise ValidationError("the ml rule needs priors")
        return ml_decide(p, priors)
    if rule == "cost":
        if costs is None:
            raise ValidationError("the cost rule needs a cost matrix")
        return cost_decide(p, costs)
    raise ValidationError(f"unknown decision rule {rule!r}")


# ---------------------------------------------------------------------------
# priors


def class_counts(labels, q: int, ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Integer per-position class counts over a collection of label maps."""
    counts = None
    for lab in labels:
        lab = np.asarray(lab)
        if lab.ndim != 2:
            raise ShapeMismatch(f"label maps must be 2-D, got {lab.shape}")
        if counts is None:
            counts = np.zeros(lab.shape + (q,), dtype=np.int64)
        elif lab.shape != counts.shape[:2]:
            raise ShapeMismatch(f"label map {lab.shape} differs from {counts.shape[:2]}")
        valid = lab != ignore
        if np.any(lab[valid] >= q) or np.any(lab[valid] < 0):
            raise ValidationError(f"label ids must lie in [0, {q}) or equal {ignore}")
        rows, cols = np.nonzero(valid)
        np.add.at(counts, (rows, cols, lab[valid].astype(np.int64)), 1)
    if counts is None:
        raise EmptyInput("no label maps given")
    return counts


def priors_from_counts(counts: np.ndarray, alpha: float = 1.0, downscale: int = 1) -> np.ndarray:
    """Laplace-smoothed relative frequencies ``(n_y + alpha) / (n + alpha q)``.

    With ``downscale > 1`` counts are pooled over ``downscale``-sized blocks
    (ragged edge blocks included) and the result is expanded back to full size.
    """
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")
    counts = np.asarray(counts, dtype=np.int64)
    h, w, q = counts.shape
    if downscale > 1:
        rows = np.arange(0, h, downscale)
        cols = np.arange(0, w, downscale)
        pooled = np.add.reduceat(np.add.reduceat(counts, rows, axis=0), cols, axis=1)
        small = priors_from_counts(pooled, alpha)
        return np.repeat(np.repeat(small, downscale, axis=0), downscale, axis=1)[:h, :w]
    total = counts.sum(axis=2, keepdims=True)
    num = counts + alpha
    den = total + alpha * q
    if alpha == 0 and (np.any(total == 0) or np.any(counts == 0)):
        raise ZeroPrior("some class never occurs at some position; use alpha > 0")
    return num / den


def estimate_priors(labels, q: int, alpha: float = 1.0, downscale: int = 1,
                    ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Positional class priors from ground-truth label maps (H x W x q, float64)."""
    return priors_from_counts(class_counts(labels, q, ignore), alpha, downscale)


def read_cost_csv(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(x.strip() for x in r)]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        c = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric cost entry") from exc
    return validate_costs(c)


def write_cost_csv(path, costs) -> None:
    c = validate_costs(costs)
    Path(path).write_text("\n".join(",".join(repr(float(v)) for v in row) for row in c) + "\n")
