import numpy as np
import pytest
from oracles import brute_iou, flood_fill, on_segment, random_mask

from segmeta.augmentation import (
    COMPOSITIONS,
    AugmentConfig,
    compose,
    interpolate_target,
    pseudo_targets,
    rare_rows,
    smote_rows,
    synthesize,
    training_set_factory,
)
from segmeta.errors import SchemaMismatch, TooFewRows, ValidationError
from segmeta.metrics import MetricsDataset
from segmeta.models import evaluate
from segmeta.segments import extract_segments, match_segments


def rows(n=200, seed=0, m=3, source="real"):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m)) * np.array([1.0, 10.0, 0.1])[:m]
    iou = np.where(rng.uniform(size=n) < 0.3, 0.0, rng.beta(5, 2, n))
    return MetricsDataset([f"f{j}" for j in range(m)], X, [f"a_{i:05d}" for i in range(n)],
                          np.zeros(n, int), iou, [source] * n)


def test_endpoints_and_midpoint():
    a, b = np.array([0.0, 2.0]), np.array([4.0, 6.0])
    scale = np.ones(2)
    x, y = synthesize(a, b, 0.2, 0.8, 0.0, scale)
    assert np.array_equal(x, a) and y == 0.2
    x, y = synthesize(a, b, 0.2, 0.8, 1.0, scale)
    assert np.array_equal(x, b) and y == 0.8
    x, y = synthesize(a, b, 0.2, 0.8, 0.5, scale)
    assert np.allclose(x, [2.0, 4.0]) and y == pytest.approx(0.5)


def test_inverse_distance_weighting():
    assert interpolate_target(0.0, 1.0, 1.0, 3.0) == pytest.approx(0.25)
    assert interpolate_target(0.2, 0.6, 2.0, 2.0) == pytest.approx(0.4)
    assert interpolate_target(0.2, 0.6, 0.0, 1.0) == 0.2


def test_rare_rows_rule():
    iou = np.r_[np.zeros(5), np.full(80, 0.55), np.full(15, 0.95)]
    rare = rare_rows(iou)
    # the top bin holds 15% of the rows, so only the zeros are rare
    assert set(rare) == set(range(5))
    iou2 = np.r_[np.zeros(20), np.full(75, 0.55), np.full(5, 0.95)]
    assert set(rare_rows(iou2)) == set(range(20)) | set(range(95, 100))


def test_smote_rows_lie_on_parent_segments():
    M = rows()
    cfg = AugmentConfig(k_neighbors=5, factor=2.0, seed=3)
    A, parents = smote_rows(M, cfg, return_parents=True)
    rare = rare_rows(M.iou)
    assert len(A) == round(2.0 * rare.size)
    assert set(A.source) == {"augmented"}
    scale = M.X.std(axis=0)
    for x, y, (a, b) in zip(A.X, A.iou, parents):
        assert a in rare and b in rare and a != b
        assert on_segment(x, M.X[a], M.X[b], scale)
        lo, hi = sorted((M.iou[a], M.iou[b]))
        assert lo - 1e-12 <= y <= hi + 1e-12


def test_smote_is_reproducible_and_seed_sensitive():
    M = rows()
    a = smote_rows(M, AugmentConfig(seed=1))
    b = smote_rows(M, AugmentConfig(seed=1))
    c = smote_rows(M, AugmentConfig(seed=2))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.iou, b.iou)
    assert not np.array_equal(a.X, c.X)


def test_neighbours_are_nearest_in_standardised_space():
    M = rows(60, seed=4)
    k = 3
    _, parents = smote_rows(M, AugmentConfig(k_neighbors=k, seed=0), return_parents=True)
    rare = rare_rows(M.iou)
    Z = M.X / M.X.std(axis=0)
    for a, b in parents:
        d = np.linalg.norm(Z[rare] - Z[a], axis=1)
        d[list(rare).index(a)] = np.inf
        assert np.linalg.norm(Z[b] - Z[a]) <= np.sort(d)[k - 1] + 1e-12


def test_smote_errors():
    with pytest.raises(TooFewRows):
        smote_rows(rows(8))
    with pytest.raises(ValidationError):
        AugmentConfig(k_neighbors=0)
    with pytest.raises(ValidationError):
        AugmentConfig(factor=-1)
    no_targets = MetricsDataset(["a"], np.zeros((3, 1)), ["f"] * 3, range(3))
    with pytest.raises(ValidationError):
        smote_rows(no_targets)


def test_factor_zero_gives_no_rows():
    assert len(smote_rows(rows(), AugmentConfig(factor=0.0))) == 0


def test_pseudo_targets():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pm, rm = random_mask(rng, 16, 16, 3), random_mask(rng, 16, 16, 3)
        pred, ref = extract_segments(pm), extract_segments(rm, source="pseudo")
        m = pseudo_targets(pred, ref)
        rcomps = flood_fill(rm)
        for k, (cls, pix) in zip(pred, flood_fill(pm)):
            assert m.iou[k.segment_id] == brute_iou(cls, pix, rcomps)
        assert m.source == "pseudo"
        assert np.array_equal(m.iou, match_segments(pred, ref).iou)
    same = pseudo_targets(pred, pred)
    assert np.all(same.iou == 1) and not same.is_fp.any()


def test_compositions():
    R, A, P = rows(50, 1), rows(20, 2, source="augmented"), rows(30, 3, source="pseudo")
    assert len(compose(R, A, P, "R")) == 50
    assert len(compose(R, A, P, "RA")) == 70
    assert len(compose(R, A, P, "RAP")) == 100
    assert len(compose(R, A, P, "RP")) == 80
    out = compose(R, A, P, "P")
    assert len(out) == 30 and set(out.source) == {"pseudo"}
    assert set(COMPOSITIONS) == {"R", "RA", "RAP", "RP", "P"}
    with pytest.raises(ValidationError):
        compose(R, None, P, "RA")
    with pytest.raises(ValidationError):
        compose(R, A, P, "X")
    with pytest.raises(SchemaMismatch):
        compose(R, A.select_features(["f0", "f1"]), P, "RA")


def test_training_sets_never_leak_into_evaluation_splits():
    R = rows(300, 5)
    P = rows(100, 6, source="pseudo")
    pool_ids = set(R.frame_ids)
    seen = []
    inner = training_set_factory("RAP", P, AugmentConfig(seed=2))

    def spy(real_train, run_seed):
        assert set(real_train.source) == {"real"}
        out = inner(real_train, run_seed)
        seen.append((set(real_train.frame_ids), out))
        return out

    report = evaluate(MetricsDataset.concat([R, P]), "iou", "linear", n_runs=3, seed=0, make_train=spy)
    assert report["n_rows"] == 300
    for train_ids, out in seen:
        counts = {s: int(np.sum(out.source == s)) for s in ("real", "augmented", "pseudo")}
        assert counts["real"] == 240 and counts["pseudo"] == 100 and counts["augmented"] > 0
        # augmented rows descend from training rows of this run only
        assert set(out.frame_ids[out.source == "augmented"]) <= train_ids
        assert train_ids <= pool_ids
