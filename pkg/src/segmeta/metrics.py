"""Dispersion heatmaps, segment-wise aggregation and the metrics table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .arrayio import write_text_atomic
from .errors import (
    InsufficientData,
    IoFailure,
    SchemaMismatch,
    ShapeMismatch,
    ValidationError,
)
from .segments import MatchResult, SegmentSet

SIZE_FEATURES = ["S", "S_in", "S_bd", "S_rel", "S_rel_in"]
DISPERSION = ("E", "V", "M")
DISPERSION_FEATURES = [f"{d}{s}" for d in DISPERSION for s in ("_mean", "_bd", "_in")]
SOURCES = ("real", "augmented", "pseudo")


def feature_names(q: int) -> list[str]:
    return (
        SIZE_FEATURES
        + DISPERSION_FEATURES
        + [f"prob_{y}" for y in range(q)]
        + ["class_id", "has_interior"]
    )


@dataclass
class DispersionMaps:
    entropy: np.ndarray
    variation_ratio: np.ndarray
    margin: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        return [self.entropy, self.variation_ratio, self.margin]


def dispersion_maps(p: np.ndarray) -> DispersionMaps:
    """Normalised entropy, variation ratio and probability margin per pixel."""
    p = np.asarray(p, dtype=np.float64)
    q = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = -plogp.sum(axis=-1) / np.log(q)
    top2 = np.sort(p, axis=-1)[..., -2:]
    variation = 1.0 - top2[..., 1]
    margin = 1.0 - (top2[..., 1] - top2[..., 0])
    return DispersionMaps(np.clip(entropy, 0.0, 1.0), variation, margin)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class MetricsDataset:
    """Rows of segment metrics with identifiers, provenance and optional targets."""

    features: list[str]
    X: np.ndarray
    frame_ids: np.ndarray
    segment_ids: np.ndarray
    iou: np.ndarray | None = None
    source: np.ndarray | None = None
    depth: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, len(self.features))
        n = self.X.shape[0]
        self.frame_ids = np.asarray(self.frame_ids, dtype=object).reshape(n)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64).reshape(n)
        if self.iou is not None:
            self.iou = np.asarray(self.iou, dtype=np.float64).reshape(n)
        if self.source is None:
            self.source = np.full(n, "real", dtype=object)
        else:
            self.source = np.asarray(self.source, dtype=object).reshape(n)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def has_targets(self) -> bool:
        return self.iou is not None and not np.any(np.isnan(self.iou))

    @property
    def is_fp(self) -> np.ndarray:
        if self.iou is None:
            raise InsufficientData("dataset has no targets")
        return (self.iou == 0).astype(np.int64)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.features.index(name)]
        except ValueError:
            raise SchemaMismatch(f"no feature named {name!r}") from None

    def select_features(self, names) -> MetricsDataset:
        idx = [self.features.index(n) for n in names]
        return replace(self, features=list(names), X=self.X[:, idx])

    def subset(self, index) -> MetricsDataset:
        index = np.asarray(index)
        return MetricsDataset(
            list(self.features), self.X[index], self.frame_ids[index], self.segment_ids[index],
            None if self.iou is None else self.iou[index], self.source[index], self.depth,
        )

    @classmethod
    def concat(cls, parts: list[MetricsDataset]) -> MetricsDataset:
        parts = [p for p in parts if p is not None]
        if not parts:
            raise InsufficientData("nothing to concatenate")
        schema = parts[0].features
        for p in parts[1:]:
            if p.features != schema:
                raise SchemaMismatch("datasets have different feature schemas")
        with_targets = all(p.iou is not None for p in parts)
        return cls(
            list(schema),
            np.vstack([p.X for p in parts]),
            np.concatenate([p.frame_ids for p in parts]),
            np.concatenate([p.segment_ids for p in parts]),
            np.concatenate([p.iou for p in parts]) if with_targets else None,
            np.concatenate([p.source for p in parts]),
            parts[0].depth,
        )


def _segment_means(values: np.ndarray, ids: np.ndarray, n: int, counts: np.ndarray) -> np.ndarray:
    sums = np.bincount(ids, weights=values, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def aggregate(segs: SegmentSet, maps: DispersionMaps, p: np.ndarray,
              match: MatchResult | None = None) -> MetricsDataset:
    """One metrics row per segment of ``segs``.

    Means over the interior are 0 for segments without interior pixels; the
    ``has_interior`` column tells the two cases apart.
    """
    p = np.asarray(p, dtype=np.float64)
    h, w, q = p.shape
    if segs.shape != (h, w) or maps.entropy.shape != (h, w):
        raise ShapeMismatch(f"segments {segs.shape}, maps {maps.entropy.shape}, probabilities {p.shape}")
    n = len(segs)
    labels = segs.labels.ravel()
    valid = labels >= 0
    ids = labels[valid]
    bnd = segs.boundary_mask().ravel()[valid]
    ids_bd, ids_in = ids[bnd], ids[~bnd]

    size = np.bincount(ids, minlength=n).astype(float)
    size_bd = np.bincount(ids_bd, minlength=n).astype(float)
    size_in = size - size_bd

    cols = [size, size_in, size_bd, size / size_bd, size_in / size_bd]
    for m in maps.as_list():
        v = m.ravel()[valid]
        cols.append(_segment_means(v, ids, n, size))
        cols.append(_segment_means(v[bnd], ids_bd, n, size_bd))
        cols.append(_segment_means(v[~bnd], ids_in, n, size_in))
    flat_p = p.reshape(-1, q)[valid]
    for y in range(q):
        cols.append(_segment_means(flat_p[:, y], ids, n, size))
    cols.append(segs.segment_classes.astype(float))
    cols.append((size_in > 0).astype(float))

    X = np.column_stack(cols) if n else np.zeros((0, len(feature_names(q))))
    if match is not None and len(match.iou) != n:
        raise ShapeMismatch("match result does not belong to this segment set")
    return MetricsDataset(
        feature_names(q), X,
        np.full(n, segs.frame_id, dtype=object), np.arange(n),
        None if match is None else match.iou,
        np.full(n, "pseudo" if match is not None and match.source == "pseudo" else "real", dtype=object),
    )


def frame_metrics(p: np.ndarray, segs: SegmentSet, match: MatchResult | None = None) -> MetricsDataset:
    return aggregate(segs, dispersion_maps(p), p, match)


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def correlation_report(M: MetricsDataset) -> dict[str, float | None]:
    """Pearson R of every feature against the IoU target (None if constant)."""
    if M.iou is None:
        raise InsufficientData("correlation needs IoU targets")
    if len(M) < 2:
        raise InsufficientData("correlation needs at least two rows")
    return {name: pearson(M.X[:, j], M.iou) for j, name in enumerate(M.features)}


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.9g}"


def dataset_to_csv(M: MetricsDataset) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["frame_id", "segment_id", "source", *M.features, "iou", "is_fp"])
    for i in range(len(M)):
        if M.iou is None or np.isnan(M.iou[i]):
            target = ["", ""]
        else:
            target = [_fmt(M.iou[i]), str(int(M.iou[i] == 0))]
        out.writerow([M.frame_ids[i], int(M.segment_ids[i]), M.source[i],
                      *(_fmt(v) for v in M.X[i]), *target])
    return buf.getvalue()


def write_dataset(M: MetricsDataset, path) -> None:
    write_text_atomic(path, dataset_to_csv(M))


def dataset_from_csv(text: str, name: str = "<csv>") -> MetricsDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValidationError(f"{name}: empty CSV")
    header = rows[0]
    if header[:3] != ["frame_id", "segment_id", "source"] or header[-2:] != ["iou", "is_fp"]:
        raise SchemaMismatch(f"{name}: not a metrics table")
    features = header[3:-2]
    body = [r for r in rows[1:] if r]
    try:
        X = np.array([[float(v) for v in r[3:-2]] for r in body], dtype=np.float64)
        iou = np.array([float(r[-2]) if r[-2] != "" else np.nan for r in body])
    except ValueError as exc:
        raise ValidationError(f"{name}: non-numeric entry") from exc
    if any(s not in SOURCES for s in (r[2] for r in body)):
        raise ValidationError(f"{name}: source must be one of {SOURCES}")
    depth = None
    if any(f.startswith("present@") for f in features):
        depth = sum(f.startswith("present@") for f in features) - 1
    return MetricsDataset(
        features, X.reshape(len(body), len(features)),
        [r[0] for r in body], [int(r[1]) for r in body],
        None if np.all(np.isnan(iou)) and len(body) else iou,
        [r[2] for r in body], depth,
    )


def read_dataset(path) -> MetricsDataset:
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return dataset_from_csv(text, str(path))
