"""Corpus-level reports: empirical CDFs, stochastic dominance, heatmap images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arrayio import IGNORE_LABEL, _atomic_write
from .errors import EmptySample, KindMismatch, ValidationError

KINDS = ("precision", "recall")


@dataclass(frozen=True)
class EmpiricalCdf:
    values: np.ndarray  # sorted
    kind: str = "recall"
    class_id: object = None
    rule: str = "bayes"

    @property
    def n(self) -> int:
        return self.values.size

    def __call__(self, v):
        """Fraction of samples <= v."""
        return np.searchsorted(self.values, v, side="right") / self.n

    def points(self) -> list[list[float]]:
        grid = np.unique(self.values)
        return [[float(v), float(f)] for v, f in zip(grid, self(grid))]

    def to_dict(self) -> dict:
        return {
            "class": self.class_id,
            "kind": self.kind,
            "rule": self.rule,
            "n": self.n,
            "points": self.points(),
            "f_r_zero": nondetection_rate(self) if self.kind == "recall" else None,
        }


def build_cdf(values, kind: str = "recall", class_id=None, rule: str = "bayes") -> EmpiricalCdf:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise EmptySample("cannot build a CDF from an empty sample")
    if kind not in KINDS:
        raise ValidationError(f"unknown metric kind {kind!r}")
    return EmpiricalCdf(v, kind, class_id, rule)


@dataclass(frozen=True)
class DominanceResult:
    verdict: str  # A_dominates_B, B_dominates_A, crossing, equal
    max_violation: float
    violation_a: float  # how far F_A rises above F_B (breaks "A dominates B")
    violation_b: float  # how far F_B rises above F_A (breaks "B dominates A")
    grid_size: int


def dominance(a: EmpiricalCdf, b: EmpiricalCdf, tol: float = 0.0) -> DominanceResult:
    """First-order stochastic dominance on the merged sample grid.

    ``B_dominates_A`` means B's values are shifted to the right, i.e.
    ``F_B <= F_A + tol`` everywhere and ``F_B < F_A - tol`` somewhere.
    """
    if a.kind != b.kind:
        raise KindMismatch(f"cannot compare a {a.kind} CDF with a {b.kind} CDF")
    grid = np.union1d(a.values, b.values)
    fa, fb = a(grid), b(grid)
    diff = fb - fa
    viol_b = float(max(diff.max(), 0.0))
    viol_a = float(max((-diff).max(), 0.0))
    if viol_a <= tol and viol_b <= tol:
        verdict, worst = "equal", max(viol_a, viol_b)
    elif viol_b <= tol:
        verdict, worst = "B_dominates_A", viol_b
    elif viol_a <= tol:
        verdict, worst = "A_dominates_B", viol_a
    else:
        verdict, worst = "crossing", min(viol_a, viol_b)
    return DominanceResult(verdict, worst, viol_a, viol_b, grid.size)


def nondetection_rate(cdf: EmpiricalCdf) -> float:
    """Share of reference segments with recall exactly 0."""
    if cdf.kind != "recall":
        raise KindMismatch("non-detection rate is defined on recall CDFs")
    return float(np.count_nonzero(cdf.values == 0) / cdf.n)


# ---------------------------------------------------------------------------
# images


def _ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    _atomic_write(path, _ppm_bytes(rgb))


def heatmap_rgb(values, labels: np.ndarray, ignore: np.ndarray | None = None) -> np.ndarray:
    """Red (0) to green (1) colouring of each segment by its value.

    ``labels`` holds segment ids per pixel (negative = no segment); pixels with
    ``ignore == 255`` (or True) and pixels outside every segment are white.
    """
    values = np.asarray(values, dtype=float)
    if values.size and (values.min() < 0 or values.max() > 1):
        raise ValidationError("heatmap values must lie in [0, 1]")
    h, w = labels.shape
    rgb = np.full((h, w, 3), 255, dtype=np.uint8)
    seg = labels >= 0
    v = values[labels[seg]]
    rgb[seg, 0] = np.rint(255 * (1.0 - v)).astype(np.uint8)
    rgb[seg, 1] = np.rint(255 * v).astype(np.uint8)
    rgb[seg, 2] = 0
    if ignore is not None:
        ignore = np.asarray(ignore)
        white = ignore if ignore.dtype == bool else ignore == IGNORE_LABEL
        rgb[white] = 255
    return rgb


def render_heatmap(values, labels: np.ndarray, ignore, path) -> None:
    write_ppm(path, heatmap_rgb(values, labels, ignore))


def palette(q: int) -> np.ndarray:
    """Fixed, well separated colours for class ids."""
    base = np.array([
        [128, 64, 128], [220, 20, 60], [70, 70, 70], [0, 0, 142], [107, 142, 35],
        [250, 170, 30], [70, 130, 180], [153, 153, 153], [244, 35, 232], [0, 80, 100],
    ], dtype=np.uint8)
    reps = -(-q // len(base))
    return np.tile(base, (reps, 1))[:q]


def class_rgb(mask: np.ndarray, q: int, ignore=None) -> np.ndarray:
    mask = np.asarray(mask)
    rgb = np.full(mask.shape + (3,), 255, dtype=np.uint8)
    valid = (mask >= 0) & (mask < q)
    rgb[valid] = palette(q)[mask[valid]]
    if ignore is not None:
        ignore = np.asarray(ignore)
        rgb[ignore if ignore.dtype == bool else ignore == IGNORE_LABEL] = 255
    return rgb
