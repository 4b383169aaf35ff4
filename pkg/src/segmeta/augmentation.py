"""Training-set enlargement: SMOTE for IoU targets, pseudo labels, compositions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaMismatch, TooFewRows, ValidationError
from .metrics import MetricsDataset
from .segments import MatchResult, SegmentSet, match_segments

COMPOSITIONS = {
    "R": ("real",),
    "RA": ("real", "augmented"),
    "RAP": ("real", "augmented", "pseudo"),
    "RP": ("real", "pseudo"),
    "P": ("pseudo",),
}


@dataclass(frozen=True)
class AugmentConfig:
    k_neighbors: int = 5
    factor: float = 1.0
    n_bins: int = 10
    rare_mass: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValidationError("k_neighbors must be >= 1")
        if self.factor < 0:
            raise ValidationError("factor must be >= 0")


def rare_rows(iou: np.ndarray, n_bins: int = 10, rare_mass: float = 0.10) -> np.ndarray:
    """Rows with IoU exactly 0 plus rows in IoU bins holding < ``rare_mass`` of the data."""
    iou = np.asarray(iou, float)
    bins = np.minimum((iou * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    sparse = counts[bins] < rare_mass * iou.size
    return np.flatnonzero((iou == 0) | sparse)


def interpolate_target(y_a: float, y_b: float, d_a: float, d_b: float) -> float:
    """Inverse-distance weighted mean of two targets (plain mean on equal distances)."""
    if d_a == d_b:
        return 0.5 * (y_a + y_b)
    if d_a == 0:
        return y_a
    if d_b == 0:
        return y_b
    wa, wb = 1.0 / d_a, 1.0 / d_b
    return (wa * y_a + wb * y_b) / (wa + wb)


def synthesize(x: np.ndarray, x_nn: np.ndarray, y: float, y_nn: float, u: float,
               scale: np.ndarray) -> tuple[np.ndarray, float]:
    """One synthetic sample on the segment from ``x`` towards ``x_nn``."""
    new = (1.0 - u) * x + u * x_nn
    d_a = float(np.linalg.norm((new - x) / scale))
    d_b = float(np.linalg.norm((x_nn - new) / scale))
    return new, interpolate_target(y, y_nn, d_a, d_b)


def smote_rows(M: MetricsDataset, cfg: AugmentConfig = AugmentConfig(),
               return_parents: bool = False):
    """Synthetic rows interpolated between rare rows and their nearest rare neighbours.

    ``round(factor * n_rare)`` rows are produced. Neighbours are searched in
    z-scored feature space among the rare rows.
    """
    if M.iou is None:
        raise ValidationError("SMOTE needs IoU targets")
    rare = rare_rows(M.iou, cfg.n_bins, cfg.rare_mass)
    if rare.size < cfg.k_neighbors + 1:
        raise TooFewRows(f"{rare.size} rare rows, need at least {cfg.k_neighbors + 1}")
    scale = M.X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = M.X[rare] / scale
    sq = (Z ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    neighbours = np.argsort(d2, axis=1, kind="stable")[:, :cfg.k_neighbors]

    n_new = int(round(cfg.factor * rare.size))
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, rare.size, n_new)
    picks = rng.integers(0, cfg.k_neighbors, n_new)
    us = rng.uniform(0.0, 1.0, n_new)

    X = np.empty((n_new, M.X.shape[1]))
    y = np.empty(n_new)
    parents = np.empty((n_new, 2), dtype=np.int64)
    for i, (s, k, u) in enumerate(zip(seeds, picks, us)):
        a, b = rare[s], rare[neighbours[s, k]]
        X[i], y[i] = synthesize(M.X[a], M.X[b], M.iou[a], M.iou[b], u, scale)
        parents[i] = a, b
    out = MetricsDataset(
        list(M.features), X, M.frame_ids[parents[:, 0]], np.arange(n_new),
        y, np.full(n_new, "augmented", dtype=object), M.depth,
    )
    return (out, parents) if return_parents else out


def pseudo_targets(pred: SegmentSet, reference: SegmentSet) -> MatchResult:
    """IoU targets of ``pred`` measured against a reference model's segments."""
    return match_segments(pred, reference, source="pseudo")


def compose(real: MetricsDataset | None, augmented: MetricsDataset | None,
            pseudo: MetricsDataset | None, spec: str) -> MetricsDataset:
    """Concatenate the training sources named by ``spec`` (R, RA, RAP, RP, P)."""
    if spec not in COMPOSITIONS:
        raise ValidationError(f"unknown composition {spec!r}; expected one of {list(COMPOSITIONS)}")
    pool = {"real": real, "augmented": augmented, "pseudo": pseudo}
    parts = []
    for name in COMPOSITIONS[spec]:
        part = pool[name]
        if part is None:
            raise ValidationError(f"composition {spec} needs {name} rows")
        parts.append(part)
    schema = parts[0].features
    if any(p.features != schema for p in parts):
        raise SchemaMismatch("composition sources have different schemas")
    return MetricsDataset.concat(parts)


def training_set_factory(spec: str, pseudo: MetricsDataset | None = None,
                         cfg: AugmentConfig = AugmentConfig()):
    """``make_train`` hook for :func:`segmeta.models.evaluate`.

    Augmented rows are generated from the real training rows of each run only,
    so validation and test rows never leak into training.
    """
    def make_train(real_train: MetricsDataset, run_seed: int) -> MetricsDataset:
        aug = None
        if "augmented" in COMPOSITIONS[spec]:
            run_cfg = AugmentConfig(cfg.k_neighbors, cfg.factor, cfg.n_bins, cfg.rare_mass,
                                    cfg.seed + run_seed)
            aug = smote_rows(real_train, run_cfg)
        return compose(real_train, aug, pseudo, spec)

    return make_train
