"""Light-weight segment tracking and metric time series.

Segments of consecutive frames are linked greedily by their pixel overlap
after shifting each previous segment by its expected displacement (the last
centroid step of its track).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingMetrics, ResolutionMismatch, ValidationError
from .metrics import MetricsDataset
from .segments import SegmentSet


@dataclass(frozen=True)
class MatchConfig:
    min_overlap: int = 1
    shift: str = "linear"  # or "none"

    def __post_init__(self):
        if self.min_overlap < 1:
            raise ValidationError("min_overlap must be >= 1")
        if self.shift not in ("none", "linear"):
            raise ValidationError(f"unknown shift mode {self.shift!r}")


@dataclass
class Track:
    track_id: int
    class_id: int
    members: list[tuple[int, int]] = field(default_factory=list)  # (frame index, segment id)
    centroids: list[tuple[float, float]] = field(default_factory=list)
    shifts: list[tuple[int, int]] = field(default_factory=list)

    @property
    def start(self) -> int:
        return self.members[0][0]

    @property
    def end(self) -> int:
        return self.members[-1][0]

    def segment_at(self, frame: int) -> int | None:
        i = frame - self.start
        if 0 <= i < len(self.members):
            return self.members[i][1]
        return None


def expected_shift(cur_centroid, prev_centroid) -> tuple[int, int]:
    return (int(np.rint(cur_centroid[0] - prev_centroid[0])),
            int(np.rint(cur_centroid[1] - prev_centroid[1])))


def shifted_overlaps(prev: SegmentSet, cur: SegmentSet, shifts=None) -> np.ndarray:
    """Overlap counts between every shifted previous segment and every current one.

    Only same-class pairs count. Pixels shifted outside the frame are dropped.
    """
    if prev.shape != cur.shape:
        raise ResolutionMismatch(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    h, w = cur.shape
    shifts = shifts or {}
    out = np.zeros((len(prev), len(cur)), dtype=np.int64)
    ncur = len(cur)
    for seg in prev:
        dr, dc = shifts.get(seg.segment_id, (0, 0))
        rows, cols = seg.pixels()
        rows, cols = rows + dr, cols + dc
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        rows, cols = rows[inside], cols[inside]
        same = cur.classes[rows, cols] == seg.class_id
        ids = cur.labels[rows, cols][same]
        out[seg.segment_id] = np.bincount(ids, minlength=ncur)
    return out


def match_frames(prev: SegmentSet, cur: SegmentSet, cfg: MatchConfig = MatchConfig(),
                 prev2: SegmentSet | None = None, links: dict[int, int] | None = None,
                 ) -> list[tuple[int, int, int]]:
    """Greedy one-to-one links ``(prev_id, cur_id, overlap)``.

    With linear shift mode, ``links`` maps previous segment ids to their
    predecessor in ``prev2`` and each segment is moved by the centroid step
    between the two before overlaps are counted.
    """
    shifts = {}
    if cfg.shift == "linear" and prev2 is not None and links:
        for pid, qid in links.items():
            shifts[pid] = expected_shift(prev[pid].centroid, prev2[qid].centroid)
    ov = shifted_overlaps(prev, cur, shifts)
    cand = np.argwhere(ov >= cfg.min_overlap)
    order = sorted(((-int(ov[i, j]), int(i), int(j)) for i, j in cand))
    used_p, used_c, pairs = set(), set(), []
    for neg, i, j in order:
        if i in used_p or j in used_c:
            continue
        used_p.add(i)
        used_c.add(j)
        pairs.append((i, j, -neg))
    return pairs


def build_tracks(seq: list[SegmentSet], cfg: MatchConfig = MatchConfig()) -> list[Track]:
    """Chain frame-to-frame links into tracks; ``seq[t]`` is frame index ``t``."""
    tracks: list[Track] = []
    active: dict[int, Track] = {}  # segment id in previous frame -> track
    links: dict[int, int] = {}  # segment id in previous frame -> id in the frame before
    for t, cur in enumerate(seq):
        nxt: dict[int, Track] = {}
        nxt_links: dict[int, int] = {}
        if t > 0:
            pairs = match_frames(seq[t - 1], cur, cfg, seq[t - 2] if t > 1 else None, links)
            shifts = {}
            if cfg.shift == "linear" and t > 1:
                shifts = {p: expected_shift(seq[t - 1][p].centroid, seq[t - 2][q].centroid)
                          for p, q in links.items()}
            for pid, cid, _ in sorted(pairs, key=lambda x: x[1]):
                tr = active[pid]
                tr.members.append((t, cid))
                tr.centroids.append(cur[cid].centroid)
                tr.shifts.append(shifts.get(pid, (0, 0)))
                nxt[cid] = tr
                nxt_links[cid] = pid
        for seg in cur:
            if seg.segment_id not in nxt:
                tr = Track(len(tracks), seg.class_id, [(t, seg.segment_id)], [seg.centroid], [(0, 0)])
                tracks.append(tr)
                nxt[seg.segment_id] = tr
        active, links = nxt, nxt_links
    return tracks


def track_lookup(tracks: list[Track]) -> dict[tuple[int, int], Track]:
    return {m: tr for tr in tracks for m in tr.members}


def lag_feature_names(features: list[str], depth: int) -> list[str]:
    names = []
    for lag in range(depth, -1, -1):
        names += [f if lag == 0 else f"{f}@-{lag}" for f in features]
    return names + [f"present@-{lag}" if lag else "present@0" for lag in range(depth, -1, -1)]


def assemble_time_series(tracks: list[Track], frames: list[MetricsDataset], depth: int,
                         frame_indices: list[int] | None = None) -> MetricsDataset:
    """Concatenate each anchor's metrics with those of its last ``depth`` frames.

    ``frames[t]`` holds the metrics of frame ``t``. Anchors are the rows of
    frames with targets; lag slots before the track started repeat the
    earliest available metrics and carry presence flag 0.
    """
    if not 0 <= depth <= 10:
        raise ValidationError("time-series depth must lie in [0, 10]")
    if not frames:
        raise MissingMetrics("no per-frame metrics")
    features = frames[0].features
    lookup = track_lookup(tracks)
    rows = {}
    for t, M in enumerate(frames):
        rows[t] = {int(s): i for i, s in enumerate(M.segment_ids)}
    anchors = range(len(frames)) if frame_indices is None else frame_indices

    X, fids, sids, ious, srcs = [], [], [], [], []
    for t in anchors:
        M = frames[t]
        if M.iou is None:
            continue
        for i, sid in enumerate(M.segment_ids):
            tr = lookup.get((t, int(sid)))
            if tr is None:
                raise MissingMetrics(f"segment {sid} of frame {t} is not on any track")
            blocks, flags = [], []
            for lag in range(depth, -1, -1):
                f = t - lag
                seg = tr.segment_at(f)
                if seg is None:
                    f, seg = tr.members[0]
                    flags.append(0.0)
                else:
                    flags.append(1.0)
                j = rows[f].get(seg)
                if j is None:
                    raise MissingMetrics(f"no metrics for segment {seg} of frame {f}")
                blocks.append(frames[f].X[j])
            X.append(np.concatenate(blocks + [np.array(flags)]))
            fids.append(M.frame_ids[i])
            sids.append(int(sid))
            ious.append(M.iou[i])
            srcs.append(M.source[i])
    names = lag_feature_names(features, depth)
    return MetricsDataset(
        names, np.array(X).reshape(len(X), len(names)), fids, sids,
        np.array(ious, float), srcs, depth,
    )
