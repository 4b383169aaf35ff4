import numpy as np
import pytest
from oracles import random_probs

from segmeta.errors import MissingMetrics, ResolutionMismatch, ValidationError
from segmeta.metrics import frame_metrics
from segmeta.segments import extract_segments, match_segments
from segmeta.synth import SceneSpec, generate_sequence
from segmeta.tracking import (
    MatchConfig,
    assemble_time_series,
    build_tracks,
    lag_feature_names,
    match_frames,
    shifted_overlaps,
    track_lookup,
)


def square(col, size=4, shape=(8, 16), cls=1):
    m = np.zeros(shape, np.uint8)
    m[2:2 + size, col:col + size] = cls
    return m


def segs(masks):
    return [extract_segments(m) for m in masks]


def test_identical_frames_match_every_segment():
    m = np.array([[0, 1, 1, 2], [0, 0, 2, 2], [3, 0, 0, 0]])
    a, b = segs([m, m])
    pairs = match_frames(a, b)
    assert sorted((p, c) for p, c, _ in pairs) == [(i, i) for i in range(len(a))]


def test_disjoint_segments_do_not_match():
    a, b = segs([square(0), square(10)])
    cls1 = [(p, c) for p, c, _ in match_frames(a, b) if a[p].class_id == 1]
    assert cls1 == []


def brute_shifted_overlap(prev_mask, cur_mask, dr, dc, cls=1):
    h, w = prev_mask.shape
    n = 0
    for r in range(h):
        for c in range(w):
            if prev_mask[r, c] == cls and 0 <= r + dr < h and 0 <= c + dc < w and cur_mask[r + dr, c + dc] == cls:
                n += 1
    return n


def test_shift_correction_on_moving_square():
    masks = [square(0), square(2), square(4)]
    s0, s1, s2 = segs(masks)
    links = {1: 1}
    plain = match_frames(s1, s2, MatchConfig(shift="none"))
    shifted = match_frames(s1, s2, MatchConfig(shift="linear"), prev2=s0, links=links)
    ov = dict(((p, c), o) for p, c, o in plain)
    ovs = dict(((p, c), o) for p, c, o in shifted)
    assert ov[(1, 1)] == brute_shifted_overlap(masks[1], masks[2], 0, 0) == 8
    assert ovs[(1, 1)] == brute_shifted_overlap(masks[1], masks[2], 0, 2) == 16
    tracks = build_tracks([s0, s1, s2])
    sq = [t for t in tracks if t.class_id == 1][0]
    assert sq.shifts[-1] == (0, 2)
    assert len(sq.members) == 3


def test_greedy_assignment_is_one_to_one():
    # one big previous segment overlapping two current ones of the same class
    a = np.zeros((4, 8), np.uint8)
    a[:, 1:7] = 1
    b = np.zeros((4, 8), np.uint8)
    b[:, 1:3] = 1
    b[:, 4:7] = 1
    sa, sb = segs([a, b])
    pairs = [(p, c, o) for p, c, o in match_frames(sa, sb) if sa[p].class_id == 1]
    assert len(pairs) == 1
    # the larger overlap wins
    assert sb[pairs[0][1]].size == 12
    ov = shifted_overlaps(sa, sb)
    assert ov[pairs[0][0], pairs[0][1]] == pairs[0][2]


def test_ties_prefer_lower_ids():
    a = np.zeros((3, 7), np.uint8)
    a[1, 2:5] = 1
    b = np.zeros((3, 7), np.uint8)
    b[1, 1:3] = 1
    b[1, 4:6] = 1
    sa, sb = segs([a, b])
    pairs = [(p, c) for p, c, _ in match_frames(sa, sb) if sa[p].class_id == 1]
    ones = [s.segment_id for s in sb if s.class_id == 1]
    assert pairs == [(1, min(ones))]


def test_resolution_mismatch():
    a, b = segs([np.zeros((3, 3)), np.zeros((4, 3))])
    with pytest.raises(ResolutionMismatch):
        match_frames(a, b)


def test_track_building_rules():
    m = np.array([[0, 1], [2, 2]])
    tracks = build_tracks(segs([m, m, m]))
    assert len(tracks) == 3 and all(len(t.members) == 3 for t in tracks)
    gone = np.zeros((8, 16), np.uint8)
    tracks = build_tracks(segs([square(4), gone, square(4)]))
    sq = [t for t in tracks if t.class_id == 1]
    assert len(sq) == 2 and [t.start for t in sq] == [0, 2]
    assert build_tracks([]) == []
    empty = extract_segments(np.full((3, 3), 255, np.uint8))
    assert build_tracks([empty, empty]) == []


def test_track_ids_follow_frame_then_segment_order():
    a = np.zeros((6, 12), np.uint8)
    a[1:3, 1:3] = 1
    b = a.copy()
    b[4:6, 8:11] = 2
    tracks = build_tracks(segs([a, b]))
    starts = [(t.start, t.members[0][1]) for t in tracks]
    assert starts == sorted(starts)
    assert [t.track_id for t in tracks] == list(range(len(tracks)))


def test_lag_names():
    assert lag_feature_names(["a", "b"], 2) == [
        "a@-2", "b@-2", "a@-1", "b@-1", "a", "b", "present@-2", "present@-1", "present@0"]


def _metrics(masks, gts, seed=0):
    rng = np.random.default_rng(seed)
    frames, rows = [], []
    for t, (m, g) in enumerate(zip(masks, gts)):
        p = random_probs(rng, *m.shape, 3)
        s = extract_segments(m, frame_id=f"s_{t:05d}")
        frames.append(s)
        rows.append(frame_metrics(p, s, match_segments(s, extract_segments(g))))
    return frames, rows


def test_time_series_layout():
    masks = [square(0, cls=1), square(2, cls=1), square(4, cls=1)]
    frames, rows = _metrics(masks, masks)
    tracks = build_tracks(frames)
    ts0 = assemble_time_series(tracks, rows, 0)
    single = np.vstack([r.X for r in rows])
    assert np.array_equal(ts0.X[:, :-1], single)
    assert np.all(ts0.X[:, -1] == 1)
    ts2 = assemble_time_series(tracks, rows, 2)
    m = len(rows[0].features)
    assert ts2.X.shape[1] == 3 * m + 3
    look = track_lookup(tracks)
    # square of the last frame: full history
    last = [i for i in range(len(ts2)) if ts2.frame_ids[i] == rows[2].frame_ids[0]]
    sid = 1
    i = [j for j in last if ts2.segment_ids[j] == sid][0]
    tr = look[(2, sid)]
    for lag, block in zip((2, 1, 0), range(3)):
        seg = tr.segment_at(2 - lag)
        j = list(rows[2 - lag].segment_ids).index(seg)
        assert np.array_equal(ts2.X[i, block * m:(block + 1) * m], rows[2 - lag].X[j])
    assert ts2.X[i, -3:].tolist() == [1, 1, 1]
    # first frame: both lag slots copy frame-0 metrics with flag 0
    i0 = [j for j in range(len(ts2)) if ts2.frame_ids[j] == "s_00000"][1]
    assert np.array_equal(ts2.X[i0, :m], ts2.X[i0, 2 * m:3 * m])
    assert ts2.X[i0, -3:].tolist() == [0, 0, 1]
    assert ts2.depth == 2


def test_time_series_anchors_need_targets():
    masks = [square(0), square(2)]
    frames, rows = _metrics(masks, masks)
    rows[0].iou = None
    ts = assemble_time_series(build_tracks(frames), rows, 1)
    assert len(ts) == len(rows[1])


def test_time_series_errors():
    masks = [square(0), square(2)]
    frames, rows = _metrics(masks, masks)
    with pytest.raises(ValidationError):
        assemble_time_series(build_tracks(frames), rows, 11)
    with pytest.raises(MissingMetrics):
        assemble_time_series([], rows, 1)
    with pytest.raises(MissingMetrics):
        assemble_time_series([], [], 0)


def test_tracks_are_deterministic_on_synthetic_sequences():
    spec = SceneSpec(seed=3)
    seq = [f.segments for f in generate_sequence(spec, 6)]
    a = build_tracks(seq)
    b = build_tracks(seq)
    assert [(t.track_id, t.members) for t in a] == [(t.track_id, t.members) for t in b]
    used = [m for t in a for m in t.members]
    assert len(used) == len(set(used)) == sum(len(s) for s in seq)
