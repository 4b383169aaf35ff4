"""Meta classifiers / regressors on segment metrics and their evaluation.

Tasks: ``fp`` predicts whether a segment is a false positive (IoU = 0),
``iou`` regresses the segment IoU. Kinds: ``linear``, ``logistic``, ``gbt``
(gradient-boosted depth-limited trees) and ``mlp`` (one tanh hidden layer).
All training is full-batch and fully determined by the data and the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .arrayio import assign_splits, split_names, write_text_atomic
from .errors import (
    DegenerateTargets,
    InsufficientData,
    IoFailure,
    NonfiniteFeature,
    SchemaMismatch,
    SingleClass,
    ValidationError,
)
from .metrics import MetricsDataset

TASKS = ("fp", "iou")
KINDS = ("linear", "logistic", "gbt", "mlp")
PENALTIES = ("none", "l1", "l2")
DEFAULT_LAMBDA = {"none": 0.0, "l1": 0.01, "l2": 1e-3}

LOGISTIC_TOL = 1e-6
LOGISTIC_MAX_ITER = 10000
RIDGE_JITTER = 1e-8


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray  # columns with non-zero training variance

    @classmethod
    def fit(cls, X: np.ndarray) -> Standardizer:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        active = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(mean, np.where(active, std, 1.0), active)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) / self.std)[:, self.active]


@dataclass
class MetaModel:
    task: str
    kind: str
    features: list[str]
    scaler: Standardizer
    params: dict
    penalty: str = "none"
    lam: float = 0.0
    seed: int = 0
    info: dict = field(default_factory=dict)

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, list):
                return [enc(x) for x in v]
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            return v

        return {
            "task": self.task,
            "kind": self.kind,
            "schema": list(self.features),
            "standardization": {
                "mean": self.scaler.mean.tolist(),
                "std": self.scaler.std.tolist(),
                "active": self.scaler.active.astype(int).tolist(),
            },
            "parameters": enc(self.params),
            "penalty": {"type": self.penalty, "lambda": self.lam},
            "seed": self.seed,
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetaModel:
        try:
            st = d["standardization"]
            scaler = Standardizer(
                np.asarray(st["mean"], float), np.asarray(st["std"], float),
                np.asarray(st["active"], bool),
            )
            params = d["parameters"]
            if d["kind"] == "gbt":
                params = dict(params, trees=[
                    {k: np.asarray(v) for k, v in t.items()} for t in params["trees"]
                ])
            else:
                params = {k: np.asarray(v, float) if isinstance(v, list) else v
                          for k, v in params.items()}
            return cls(d["task"], d["kind"], list(d["schema"]), scaler, params,
                       d["penalty"]["type"], float(d["penalty"]["lambda"]),
                       int(d["seed"]), d.get("info", {}))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model description: {exc}") from exc

    def save(self, path) -> None:
        write_text_atomic(path, json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> MetaModel:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoFailure(f"cannot read model {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# convex models


def _prox_grad(grad_fn, w0, lipschitz, l1, tol=LOGISTIC_TOL, max_iter=LOGISTIC_MAX_ITER):
    """Accelerated proximal gradient with adaptive restart.

    ``grad_fn(w)`` is the gradient of the smooth part; ``l1`` holds the
    per-coordinate soft-threshold weights (0 for unpenalised coordinates).
    Stops when the gradient-mapping norm drops below ``tol``.
    """
    step = 1.0 / lipschitz
    w = w0.copy()
    y = w.copy()
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        g = grad_fn(y)
        z = y - step * g
        w_new = np.sign(z) * np.maximum(np.abs(z) - step * l1, 0.0)
        if np.linalg.norm(w_new - y) / step < tol:
            w = w_new
            break
        if (y - w_new) @ (w_new - w) > 0:
            t = 1.0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, t = w_new, t_new
    return w, it


def _design(Z: np.ndarray) -> np.ndarray:
    return np.hstack([Z, np.ones((Z.shape[0], 1))])


def fit_logistic(Z, y, penalty="none", lam=0.0):
    n, m = Z.shape
    A = _design(Z)
    l2 = lam if penalty == "l2" else 0.0
    l1 = np.full(m + 1, lam if penalty == "l1" else 0.0)
    l1[-1] = 0.0
    reg = np.ones(m + 1)
    reg[-1] = 0.0

    def grad(w):
        return A.T @ (_sigmoid(A @ w) - y) / n + l2 * reg * w

    lip = 0.25 * np.linalg.norm(A, 2) ** 2 / n + l2
    w, iters = _prox_grad(grad, np.zeros(m + 1), lip, l1)
    return {"weights": w[:-1], "bias": float(w[-1])}, {"iterations": iters}


def fit_linear(Z, y, penalty="none", lam=0.0):
    n, m = Z.shape
    A = _design(Z)
    if penalty == "l1":
        l1 = np.full(m + 1, lam)
        l1[-1] = 0.0

        def grad(w):
            return 2.0 * A.T @ (A @ w - y) / n

        lip = 2.0 * np.linalg.norm(A, 2) ** 2 / n
        w, iters = _prox_grad(grad, np.zeros(m + 1), lip, l1)
        return {"weights": w[:-1], "bias": float(w[-1])}, {"iterations": iters}
    ridge = np.full(m + 1, RIDGE_JITTER + (n * lam if penalty == "l2" else 0.0))
    ridge[-1] = 0.0
    w = np.linalg.solve(A.T @ A + np.diag(ridge), A.T @ y)
    return {"weights": w[:-1], "bias": float(w[-1])}, {}


# ---------------------------------------------------------------------------
# gradient-boosted trees


class _Binner:
    """Per-feature split candidates; at most ``max_bins`` bins per feature."""

    def __init__(self, Z: np.ndarray, max_bins: int = 64):
        self.edges = []
        for j in range(Z.shape[1]):
            u = np.unique(Z[:, j])
            if u.size <= max_bins:
                e = 0.5 * (u[1:] + u[:-1])
            else:
                e = np.unique(np.quantile(Z[:, j], np.linspace(0, 1, max_bins + 1)[1:-1]))
            self.edges.append(e)
        self.n_bins = max(len(e) for e in self.edges) + 1

    def transform(self, Z: np.ndarray) -> np.ndarray:
        cols = [np.searchsorted(e, Z[:, j], side="right") for j, e in enumerate(self.edges)]
        return np.column_stack(cols).astype(np.int64) if cols else np.zeros((len(Z), 0), np.int64)


def _fit_tree(B, g, binner, depth, min_leaf):
    """Least-squares regression tree on binned features; leaves hold mean of ``g``."""
    n, m = B.shape
    nb = binner.n_bins
    offsets = (np.arange(m) * nb)[None, :]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, d = stack.pop()
        gi = g[idx]
        value[node] = float(gi.mean())
        if d >= depth or idx.size < 2 * min_leaf or m == 0:
            continue
        flat = (B[idx] + offsets).ravel()
        sums = np.bincount(flat, weights=np.repeat(gi, m), minlength=m * nb).reshape(m, nb)
        cnts = np.bincount(flat, minlength=m * nb).reshape(m, nb)
        cs = np.cumsum(sums, axis=1)[:, :-1]
        cn = np.cumsum(cnts, axis=1)[:, :-1]
        total, ntot = gi.sum(), idx.size
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cs ** 2 / cn + (total - cs) ** 2 / (ntot - cn) - total ** 2 / ntot
        ok = (cn >= min_leaf) & (ntot - cn >= min_leaf)
        gain = np.where(ok, gain, -np.inf)
        j, b = np.unravel_index(np.argmax(gain), gain.shape)
        if not np.isfinite(gain[j, b]) or gain[j, b] <= 1e-12:
            continue
        go_left = B[idx, j] <= b
        feature[node] = int(j)
        threshold[node] = float(binner.edges[j][b])
        left[node], right[node] = new_node(), new_node()
        stack.append((right[node], idx[~go_left], d + 1))
        stack.append((left[node], idx[go_left], d + 1))
    return {
        "feature": np.array(feature, np.int64),
        "threshold": np.array(threshold, float),
        "left": np.array(left, np.int64),
        "right": np.array(right, np.int64),
        "value": np.array(value, float),
    }


def _tree_predict(tree, Z):
    node = np.zeros(len(Z), dtype=np.int64)
    feat, thr, left, right = tree["feature"], tree["threshold"], tree["left"], tree["right"]
    while True:
        f = feat[node]
        inner = f >= 0
        if not inner.any():
            return tree["value"][node]
        rows = np.flatnonzero(inner)
        go_left = Z[rows, f[rows]] <= thr[node[rows]]
        node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])


def _gbt_loss(task, y, F):
    if task == "fp":
        return float(np.mean(np.logaddexp(0.0, F) - y * F))
    return float(np.mean((y - F) ** 2))


def fit_gbt(Z, y, task, n_stages=100, depth=3, rate=0.1, min_leaf=5, max_bins=64):
    """Stagewise least-squares trees on the negative gradient of the loss."""
    mean = float(y.mean())
    if task == "fp":
        init = float(np.log(mean / (1.0 - mean)))
    else:
        init = mean
    F = np.full(len(y), init)
    binner = _Binner(Z, max_bins)
    B = binner.transform(Z)
    trees, losses = [], [_gbt_loss(task, y, F)]
    for _ in range(n_stages):
        resid = y - (_sigmoid(F) if task == "fp" else F)
        tree = _fit_tree(B, resid, binner, depth, min_leaf)
        tree["value"] = tree["value"] * rate
        F = F + _tree_predict(tree, Z)
        trees.append(tree)
        losses.append(_gbt_loss(task, y, F))
    return {"init": init, "rate": rate, "depth": depth, "trees": trees}, {"train_loss": losses}


# ---------------------------------------------------------------------------
# shallow network


def _mlp_unpack(theta, m, h):
    i = 0
    W1 = theta[i:i + m * h].reshape(m, h); i += m * h
    b1 = theta[i:i + h]; i += h
    W2 = theta[i:i + h]; i += h
    return W1, b1, W2, theta[i]


def _mlp_forward(params, Z):
    H = np.tanh(Z @ params["W1"] + params["b1"])
    return H @ params["W2"] + params["b2"]


def fit_mlp(Z, y, task, hidden=50, lam=1e-3, seed=0, max_iter=300):
    """One tanh hidden layer, L2 on the weights, full-batch L-BFGS."""
    n, m = Z.shape
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (m + hidden))
    lim2 = np.sqrt(6.0 / (hidden + 1))
    theta0 = np.concatenate([
        rng.uniform(-lim1, lim1, m * hidden), np.zeros(hidden),
        rng.uniform(-lim2, lim2, hidden), [0.0],
    ])

    def objective(theta):
        W1, b1, W2, b2 = _mlp_unpack(theta, m, hidden)
        H = np.tanh(Z @ W1 + b1)
        out = H @ W2 + b2
        if task == "fp":
            loss = np.mean(np.logaddexp(0.0, out) - y * out)
            d_out = (_sigmoid(out) - y) / n
        else:
            loss = 0.5 * np.mean((out - y) ** 2)
            d_out = (out - y) / n
        loss += 0.5 * lam * (np.sum(W1 ** 2) + np.sum(W2 ** 2))
        gW2 = H.T @ d_out + lam * W2
        gb2 = d_out.sum()
        dH = np.outer(d_out, W2) * (1.0 - H ** 2)
        gW1 = Z.T @ dH + lam * W1
        gb1 = dH.sum(axis=0)
        return loss, np.concatenate([gW1.ravel(), gb1, gW2, [gb2]])

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-7})
    W1, b1, W2, b2 = _mlp_unpack(res.x, m, hidden)
    return ({"W1": W1, "b1": b1, "W2": W2, "b2": float(b2)},
            {"iterations": int(res.nit), "loss": float(res.fun)})


# ---------------------------------------------------------------------------
# public API


def _targets(M: MetricsDataset, task: str) -> np.ndarray:
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    if M.iou is None or np.any(np.isnan(M.iou)):
        raise InsufficientData("training rows need IoU targets")
    return M.is_fp.astype(float) if task == "fp" else M.iou.astype(float)


def train(M: MetricsDataset, task: str, kind: str, penalty: str = "none",
          lam: float | None = None, seed: int = 0, **hyper) -> MetaModel:
    """Fit a meta model on the rows of ``M``."""
    if kind not in KINDS:
        raise ValidationError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if penalty not in PENALTIES:
        raise ValidationError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")
    if kind == "logistic" and task != "fp":
        raise ValidationError("logistic models only serve the fp task")
    if kind == "mlp" and penalty == "none":
        penalty = "l2"
    lam = DEFAULT_LAMBDA[penalty] if lam is None else float(lam)
    if len(M) == 0:
        raise InsufficientData("no training rows")
    y = _targets(M, task)
    if not np.all(np.isfinite(M.X)):
        raise NonfiniteFeature("training features contain NaN or Inf")
    if task == "fp" and (y.min() == y.max()):
        raise DegenerateTargets("classification needs both false positives and true positives")

    scaler = Standardizer.fit(M.X)
    Z = scaler.transform(M.X)
    if kind == "logistic":
        params, info = fit_logistic(Z, y, penalty, lam)
    elif kind == "linear":
        params, info = fit_linear(Z, y, penalty, lam)
    elif kind == "gbt":
        params, info = fit_gbt(Z, y, task, **hyper)
    else:
        params, info = fit_mlp(Z, y, task, lam=lam, seed=seed, **hyper)
    return MetaModel(task, kind, list(M.features), scaler, params, penalty, lam, seed, info)


def raw_output(model: MetaModel, Z: np.ndarray) -> np.ndarray:
    p = model.params
    if model.kind in ("linear", "logistic"):
        return Z @ np.asarray(p["weights"], float) + float(p["bias"])
    if model.kind == "gbt":
        out = np.full(len(Z), float(p["init"]))
        for tree in p["trees"]:
            out = out + _tree_predict(tree, Z)
        return out
    return _mlp_forward(p, Z)


def predict(model: MetaModel, rows: MetricsDataset) -> np.ndarray:
    """Probability of being a false positive (fp) or clamped IoU estimate (iou)."""
    if list(rows.features) != list(model.features):
        raise SchemaMismatch("feature schema differs from the one the model was trained on")
    out = raw_output(model, model.scaler.transform(rows.X))
    if model.task == "fp":
        if model.kind == "linear":
            return np.clip(out, 0.0, 1.0)
        return _sigmoid(out)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# scores


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size)
    start = 0
    # average ranks inside tie groups
    bounds = np.flatnonzero(np.diff(s)) + 1
    for stop in list(bounds) + [s.size]:
        ranks[start:stop] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    rank_of = np.empty(s.size)
    rank_of[order] = ranks
    u = rank_of[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    return float(np.mean((np.asarray(scores) >= threshold) == np.asarray(labels).astype(bool)))


def r_squared(pred, target) -> float:
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    sst = np.sum((target - target.mean()) ** 2)
    if sst == 0:
        raise InsufficientData("R^2 undefined for constant targets")
    return float(1.0 - np.sum((target - pred) ** 2) / sst)


def rmse(pred, target) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred, float) - np.asarray(target, float)) ** 2)))


def score(model_task: str, scores: np.ndarray, M: MetricsDataset) -> dict:
    if model_task == "fp":
        labels = M.is_fp
        out = {"acc": accuracy(scores, labels)}
        out["auroc"] = auroc(scores, labels) if 0 < labels.sum() < len(labels) else None
        return out
    return {"r2": r_squared(scores, M.iou), "sigma": rmse(scores, M.iou)}


def naive_random_scores(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=n)


BASELINE_FEATURES = {"entropy_only": ["E_mean"]}


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {
        "mean": float(np.mean(vals)),
        "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
        "n": len(vals),
    }


def evaluate(M: MetricsDataset, task: str, kind: str, penalty: str = "none",
             lam: float | None = None, n_runs: int = 10, seed: int = 0,
             ratios=(0.8, 0.2), features=None, baseline: str | None = None,
             make_train=None, **hyper) -> dict:
    """Repeated random-split protocol; run ``i`` splits with seed ``seed + i``.

    ``baseline`` may be ``entropy_only`` (restrict to mean entropy) or
    ``naive_random`` (uniform random scores, fp task only). ``make_train``
    optionally maps the real training rows and a seed to the training set
    actually used (augmentation / pseudo labels); evaluation splits stay real.
    """
    if M.iou is None:
        raise InsufficientData("evaluation needs IoU targets")
    real = np.flatnonzero(M.source == "real")
    if real.size < 2 * len(ratios):
        raise InsufficientData(f"only {real.size} real rows")
    if baseline == "entropy_only":
        features = BASELINE_FEATURES["entropy_only"]
    if features is not None:
        M = M.select_features(features)
    names = split_names(len(ratios))
    runs = []
    for i in range(n_runs):
        run_seed = seed + i
        parts = assign_splits(real.size, ratios, run_seed)
        split_rows = {name: M.subset(real[parts == s]) for s, name in enumerate(names)}
        run = {}
        if baseline == "naive_random":
            for name, rows in split_rows.items():
                run[name] = score("fp", naive_random_scores(len(rows), run_seed), rows)
        else:
            train_rows = split_rows["train"]
            if make_train is not None:
                train_rows = make_train(train_rows, run_seed)
            model = train(train_rows, task, kind, penalty, lam, seed=run_seed, **hyper)
            for name, rows in split_rows.items():
                if len(rows):
                    run[name] = score(task, predict(model, rows), rows)
        runs.append(run)
    summary = {
        name: {metric: _summary([r[name][metric] for r in runs if name in r])
               for metric in (runs[0].get(name) or {})}
        for name in names
    }
    return {
        "task": task,
        "kind": "naive_random" if baseline == "naive_random" else kind,
        "penalty": penalty,
        "baseline": baseline,
        "features": list(M.features),
        "n_rows": len(real),
        "n_runs": n_runs,
        "seed": seed,
        "ratios": list(ratios),
        "runs": runs,
        "summary": summary,
    }
