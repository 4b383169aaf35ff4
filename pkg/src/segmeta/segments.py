"""Connected components of label masks and segment-wise matching.

Components use 8-connectivity; a pixel is on the boundary of its component
when one of its 4-neighbours lies outside it (the image border counts as
outside). Pixels are stored as horizontal runs ``(row, col_start, col_stop)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrayio import IGNORE_LABEL

VOID = -1


@dataclass(frozen=True)
class Segment:
    segment_id: int
    class_id: int
    runs: tuple[tuple[int, int, int], ...]
    size: int
    boundary_size: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (inclusive)
    centroid: tuple[float, float]

    @property
    def interior_size(self) -> int:
        return self.size - self.boundary_size

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.concatenate([np.full(c1 - c0, r) for r, c0, c1 in self.runs])
        cols = np.concatenate([np.arange(c0, c1) for _, c0, c1 in self.runs])
        return rows, cols

    def pixel_set(self) -> set[tuple[int, int]]:
        return {(r, c) for r, c0, c1 in self.runs for c in range(c0, c1)}

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        for r, c0, c1 in self.runs:
            out[r, c0:c1] = True
        return out


@dataclass(frozen=True)
class SegmentSet:
    """All components of one frame plus a per-pixel segment-id image."""

    segments: tuple[Segment, ...]
    labels: np.ndarray  # segment id per pixel, VOID where excluded
    classes: np.ndarray  # class id per pixel, VOID where excluded
    frame_id: str = ""
    source: str = "predicted"

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i) -> Segment:
        return self.segments[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def segment_classes(self) -> np.ndarray:
        return np.array([s.class_id for s in self.segments], dtype=np.int64)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.segments], dtype=np.int64)

    def boundary_mask(self) -> np.ndarray:
        return boundary_pixels(self.labels)


class _DisjointSet:
    def __init__(self):
        self.parent: list[int] = []

    def add(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the older run as root so ids follow raster order
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _row_runs(row: np.ndarray):
    """Yield (start, stop, value) runs of one row."""
    if row.size == 0:
        return
    change = np.flatnonzero(row[1:] != row[:-1]) + 1
    starts = np.concatenate(([0], change))
    stops = np.concatenate((change, [row.size]))
    for s, e in zip(starts.tolist(), stops.tolist()):
        yield s, e, int(row[s])


def boundary_pixels(labels: np.ndarray) -> np.ndarray:
    """Boolean map of pixels with a 4-neighbour carrying a different id."""
    padded = np.pad(labels, 1, constant_values=-2)
    centre = padded[1:-1, 1:-1]
    diff = (
        (padded[:-2, 1:-1] != centre)
        | (padded[2:, 1:-1] != centre)
        | (padded[1:-1, :-2] != centre)
        | (padded[1:-1, 2:] != centre)
    )
    return diff & (labels != VOID)


def _exclusion(mask: np.ndarray, ignore) -> np.ndarray:
    excluded = mask == IGNORE_LABEL
    if ignore is not None:
        ignore = np.asarray(ignore)
        if ignore.shape != mask.shape:
            raise ValueError(f"ignore map {ignore.shape} does not match mask {mask.shape}")
        excluded |= ignore if ignore.dtype == bool else ignore == IGNORE_LABEL
    return excluded


def extract_segments(mask: np.ndarray, ignore=None, frame_id: str = "",
                     source: str = "predicted") -> SegmentSet:
    """Maximal same-class 8-connected components of ``mask``.

    Pixels equal to the ignore label, or flagged by ``ignore`` (a label map
    whose 255 entries mark unlabeled regions, or a boolean array), belong to
    no segment. Segment ids follow the raster order of each segment's first
    pixel.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    classes = mask.astype(np.int64)
    classes[_exclusion(mask, ignore)] = VOID
    h, w = classes.shape

    ds = _DisjointSet()
    runs: list[tuple[int, int, int, int]] = []  # row, start, stop, class
    prev: list[int] = []
    for r in range(h):
        cur = []
        for s, e, v in _row_runs(classes[r]):
            if v == VOID:
                continue
            idx = ds.add()
            runs.append((r, s, e, v))
            cur.append(idx)
        # merge with diagonal/vertical neighbours in the row above
        j = 0
        for idx in cur:
            _, s, e, v = runs[idx]
            while j < len(prev) and runs[prev[j]][2] < s:
                j += 1
            k = j
            while k < len(prev) and runs[prev[k]][1] <= e:
                if runs[prev[k]][3] == v:
                    ds.union(idx, prev[k])
                k += 1
        prev = cur

    labels = np.full((h, w), VOID, dtype=np.int32)
    seg_of_root: dict[int, int] = {}
    seg_runs: list[list[tuple[int, int, int]]] = []
    seg_class: list[int] = []
    for idx, (r, s, e, v) in enumerate(runs):
        root = ds.find(idx)
        sid = seg_of_root.get(root)
        if sid is None:
            sid = seg_of_root[root] = len(seg_runs)
            seg_runs.append([])
            seg_class.append(v)
        seg_runs[sid].append((r, s, e))
        labels[r, s:e] = sid

    n = len(seg_runs)
    flat = labels.ravel()
    valid = flat >= 0
    ids = flat[valid]
    rr, cc = np.divmod(np.flatnonzero(valid), w)
    sizes = np.bincount(ids, minlength=n)
    bnd = np.bincount(flat[boundary_pixels(labels).ravel()], minlength=n)
    sum_r = np.bincount(ids, weights=rr, minlength=n)
    sum_c = np.bincount(ids, weights=cc, minlength=n)

    segments = []
    for sid in range(n):
        sr = seg_runs[sid]
        bbox = (
            sr[0][0], min(x[1] for x in sr), sr[-1][0], max(x[2] for x in sr) - 1,
        )
        segments.append(Segment(
            segment_id=sid,
            class_id=seg_class[sid],
            runs=tuple(sr),
            size=int(sizes[sid]),
            boundary_size=int(bnd[sid]),
            bbox=bbox,
            centroid=(float(sum_r[sid] / sizes[sid]), float(sum_c[sid] / sizes[sid])),
        ))
    return SegmentSet(tuple(segments), labels, classes.astype(np.int32), frame_id, source)


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    """Per-segment targets of a predicted set against a reference set."""

    iou: np.ndarray  # per predicted segment
    precision: np.ndarray  # per predicted segment
    recall: np.ndarray  # per reference segment
    pred_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    ref_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    source: str = "real"

    @property
    def is_fp(self) -> np.ndarray:
        return self.iou == 0

    def for_classes(self, class_ids) -> tuple[np.ndarray, np.ndarray]:
        """(precision of predicted, recall of reference) segments in ``class_ids``."""
        class_ids = np.atleast_1d(class_ids)
        return (
            self.precision[np.isin(self.pred_classes, class_ids)],
            self.recall[np.isin(self.ref_classes, class_ids)],
        )


def _pair_counts(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    """Dense na x nb overlap counts between two id images (VOID skipped)."""
    sel = (a >= 0) & (b >= 0)
    flat = a[sel].astype(np.int64) * nb + b[sel]
    return np.bincount(flat, minlength=na * nb).reshape(na, nb)


def match_segments(pred: SegmentSet, gt: SegmentSet, source: str = "real") -> MatchResult:
    """IoU, precision and recall for every segment of ``pred`` and ``gt``."""
    if pred.shape != gt.shape:
        raise ValueError(f"frame shapes differ: {pred.shape} vs {gt.shape}")
    npred, ngt = len(pred), len(gt)
    pc, gc = pred.segment_classes, gt.segment_classes
    overlap = _pair_counts(pred.labels, gt.labels, npred, ngt)
    overlap = overlap * (pc[:, None] == gc[None, :])

    touching = overlap > 0
    inter = overlap.sum(axis=1)
    union_size = touching.astype(np.int64) @ gt.sizes
    psize = pred.sizes
    union = psize + union_size - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(inter > 0, inter / np.maximum(union, 1), 0.0)
        precision = np.where(psize > 0, inter / np.maximum(psize, 1), 0.0)
        recall = np.where(gt.sizes > 0, overlap.sum(axis=0) / np.maximum(gt.sizes, 1), 0.0)
    return MatchResult(iou.astype(float), precision.astype(float), recall.astype(float), pc, gc, source)


def segment_iou(k: Segment, gt: SegmentSet) -> float:
    """IoU of ``k`` with the union of same-class reference segments it touches."""
    rows, cols = k.pixels()
    ids = gt.labels[rows, cols]
    hit = (ids >= 0) & (gt.classes[rows, cols] == k.class_id)
    touched = np.unique(ids[hit])
    if touched.size == 0:
        return 0.0
    inter = int(hit.sum())
    k_prime = int(gt.sizes[touched].sum())
    return inter / (k.size + k_prime - inter)


def segment_precision_recall(pred: SegmentSet, gt: SegmentSet, class_ids) -> MatchResult:
    """Segment-wise precision/recall restricted to the given class ids."""
    m = match_segments(pred, gt)
    class_ids = np.atleast_1d(class_ids)
    psel = np.isin(m.pred_classes, class_ids)
    gsel = np.isin(m.ref_classes, class_ids)
    return MatchResult(m.iou[psel], m.precision[psel], m.recall[gsel],
                       m.pred_classes[psel], m.ref_classes[gsel], m.source)
