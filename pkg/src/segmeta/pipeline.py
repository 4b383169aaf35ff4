"""End-to-end orchestration over a corpus with content-hash stage caching."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .arrayio import (
    CorpusConfig,
    Frame,
    load_corpus,
    load_labels,
    load_probs,
    read_array,
    write_array,
    write_text_atomic,
)
from .augmentation import AugmentConfig, training_set_factory
from .decision import decide, estimate_priors, read_cost_csv
from .errors import IoFailure, SegmetaError, StageFailure, ValidationError
from .metrics import MetricsDataset, frame_metrics, read_dataset, write_dataset
from .models import evaluate
from .segments import SegmentSet, extract_segments, match_segments
from .synth import SceneSpec, write_corpus
from .tracking import MatchConfig, assemble_time_series, build_tracks

log = logging.getLogger(__name__)


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("SEGMETA_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items, threads: int | None = None):
    items = list(items)
    workers = min(threads or n_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# per-frame work


def frame_dataset(probs: np.ndarray, mask: np.ndarray, gt: np.ndarray | None = None,
                  pseudo: np.ndarray | None = None, fid: str = "") -> tuple[SegmentSet, MetricsDataset]:
    """Segments and metric rows of one frame.

    With ground truth the rows get real IoU targets and ignore pixels are
    excluded; otherwise pseudo labels (if any) provide the targets.
    """
    segs = extract_segments(mask, gt, frame_id=fid)
    match = None
    if gt is not None:
        match = match_segments(segs, extract_segments(gt, source="ground-truth"))
    elif pseudo is not None:
        match = match_segments(segs, extract_segments(pseudo, source="pseudo"), source="pseudo")
    return segs, frame_metrics(probs, segs, match)


def mask_path(workdir: Path, frame: Frame) -> Path:
    return workdir / "masks" / f"{frame.frame_id}.npy"


def corpus_datasets(frames: list[Frame], workdir: Path, use_pseudo: bool = True,
                    threads: int | None = None):
    """Per-frame (segments, rows) for a list of frames in manifest order."""
    def work(f: Frame):
        probs = load_probs(f.probs)
        mask = read_array(mask_path(workdir, f))
        gt = load_labels(f.gt) if f.gt is not None else None
        pseudo = load_labels(f.pseudo) if (gt is None and use_pseudo and f.pseudo) else None
        return frame_dataset(probs, mask, gt, pseudo, f.frame_id)

    return parallel_map(work, frames, threads)


def time_series_dataset(layout, workdir: Path, depth: int, cfg: MatchConfig = MatchConfig(),
                        use_pseudo: bool = True, threads: int | None = None) -> MetricsDataset:
    parts = []
    for seq_frames in layout.sequences.values():
        per_frame = corpus_datasets(seq_frames, workdir, use_pseudo, threads)
        tracks = build_tracks([s for s, _ in per_frame], cfg)
        parts.append(assemble_time_series(tracks, [m for _, m in per_frame], depth))
    return MetricsDataset.concat(parts)


# ---------------------------------------------------------------------------
# caching


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_of(params, paths=()) -> str:
    h = hashlib.sha256(json.dumps(params, sort_keys=True, default=str).encode())
    for p in sorted(str(p) for p in paths):
        h.update(p.encode())
        h.update(file_digest(Path(p)).encode() if Path(p).exists() else b"missing")
    return h.hexdigest()


@dataclass
class StageCache:
    root: Path
    status: dict = field(default_factory=dict)

    def _record(self, stage):
        return self.root / ".cache" / f"{stage}.json"

    def run(self, stage: str, key: str, outputs, fn):
        """Run ``fn`` unless a record for ``key`` exists and every output matches it."""
        rec = self._record(stage)
        if rec.exists():
            try:
                saved = json.loads(rec.read_text())
            except json.JSONDecodeError:
                saved = {}
            if saved.get("input") == key and all(
                Path(p).exists() and file_digest(Path(p)) == d
                for p, d in saved.get("outputs", {}).items()
            ) and saved.get("outputs"):
                self.status[stage] = "cached"
                return
        try:
            produced = fn()
        except SegmetaError as exc:
            raise StageFailure(stage, exc) from exc
        except OSError as exc:
            raise StageFailure(stage, IoFailure(str(exc))) from exc
        outs = list(outputs) if produced is None else list(produced)
        write_text_atomic(rec, json.dumps({
            "input": key,
            "outputs": {str(p): file_digest(Path(p)) for p in outs},
        }, indent=1))
        self.status[stage] = "ran"


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "corpus": "",
    "workdir": "segmeta-run",
    "synth": "true",
    "frames": "200",
    "sequence_length": "1",
    "pseudo_every": "0",
    "rule": "bayes",
    "alpha": "1.0",
    "cost": "",
    "fp_model": "logistic",
    "iou_model": "linear",
    "penalty": "none",
    "depth": "-1",
    "runs": "10",
    "seed": "42",
    "ratios": "0.8,0.2",
    "composition": "R",
    "smote_k": "5",
    "smote_factor": "1.0",
    "shift": "linear",
    "threads": "",
    "verbosity": "warning",
}


def parse_bool(v: str) -> bool:
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off", ""):
        return False
    raise ValidationError(f"not a boolean: {v!r}")


def pipeline_config(values: dict) -> dict:
    """Merge with defaults; ``scene.<name>`` keys configure the synthetic scene."""
    cfg = dict(DEFAULTS)
    for k, v in values.items():
        if k not in DEFAULTS and not k.startswith("scene."):
            raise ValidationError(f"unknown configuration key {k!r}")
        cfg[k] = str(v)
    return cfg


def scene_spec(cfg: dict) -> SceneSpec:
    values = {k[len("scene."):]: v for k, v in cfg.items() if k.startswith("scene.")}
    values.setdefault("seed", cfg["seed"])
    return SceneSpec.from_mapping(values)


def run_pipeline(values: dict) -> dict:
    """Run synth -> priors -> predict -> metrics -> [time series] -> evaluate."""
    cfg = pipeline_config(values)
    work = Path(cfg["workdir"])
    work.mkdir(parents=True, exist_ok=True)
    cache = StageCache(work)
    seed = int(cfg["seed"])
    ratios = tuple(float(x) for x in cfg["ratios"].split(","))
    depth = int(cfg["depth"])
    try:
        threads = int(cfg["threads"]) if cfg["threads"] else None
        logging.getLogger("segmeta").setLevel(cfg["verbosity"].upper())
    except ValueError as exc:
        raise ValidationError(f"bad threads/verbosity setting: {exc}") from exc
    if threads is not None and threads < 1:
        raise ValidationError("threads must be >= 1")

    corpus = Path(cfg["corpus"]) if cfg["corpus"] else work / "corpus"
    if parse_bool(cfg["synth"]):
        spec = scene_spec(cfg)
        n_frames, seq_len = int(cfg["frames"]), int(cfg["sequence_length"])
        params = {"scene": spec.__dict__, "frames": n_frames, "seq": seq_len,
                  "pseudo_every": cfg["pseudo_every"]}

        def synth_stage():
            frames = write_corpus(corpus, spec, n_frames, seq_len, int(cfg["pseudo_every"]))
            outs = [corpus / "manifest.tsv"]
            for f in frames:
                outs += [p for p in (f.probs, f.gt, f.pseudo) if p is not None]
            return outs

        cache.run("synth", digest_of(params), [], synth_stage)

    layout = load_corpus(corpus, CorpusConfig(ratios=ratios, seed=seed))
    frames = layout.frames
    inputs = [f.probs for f in frames]

    priors_path = work / "priors.npy"
    rule = cfg["rule"]
    costs = read_cost_csv(cfg["cost"]) if rule == "cost" else None
    priors = None
    if rule == "ml":
        train_gt = [f.gt for f in layout.split("train") if f.gt is not None]

        def priors_stage():
            q = load_probs(frames[0].probs).shape[2]
            pri = estimate_priors([load_labels(p) for p in train_gt], q, float(cfg["alpha"]))
            write_array(pri.astype(np.float32), priors_path)
            return [priors_path]

        cache.run("priors", digest_of({"alpha": cfg["alpha"], "seed": seed, "ratios": ratios}, train_gt),
                  [priors_path], priors_stage)
        priors = read_array(priors_path).astype(np.float64)

    masks = [mask_path(work, f) for f in frames]

    def predict_stage():
        def one(item):
            f, out = item
            write_array(decide(load_probs(f.probs), rule, priors, costs), out)
        parallel_map(one, zip(frames, masks), threads)
        return masks

    pred_inputs = inputs + ([priors_path] if rule == "ml" else []) + ([cfg["cost"]] if costs is not None else [])
    cache.run("predict", digest_of({"rule": rule}, pred_inputs), masks, predict_stage)

    data_path = work / ("metrics.csv" if depth < 0 else f"timeseries_d{depth}.csv")
    labels_in = [p for f in frames for p in (f.gt, f.pseudo) if p is not None]
    match_cfg = MatchConfig(shift=cfg["shift"])

    def metrics_stage():
        if depth < 0:
            M = MetricsDataset.concat([m for _, m in corpus_datasets(frames, work, threads=threads)])
        else:
            M = time_series_dataset(layout, work, depth, match_cfg, threads=threads)
        write_dataset(M, data_path)
        return [data_path]

    cache.run("metrics", digest_of({"depth": depth, "shift": cfg["shift"]}, inputs + masks + labels_in),
              [data_path], metrics_stage)

    report_path = work / "report.json"

    def evaluate_stage():
        M = read_dataset(data_path)
        report = evaluation_report(M, cfg)
        report["config"] = cfg
        report["version"] = __version__
        write_text_atomic(report_path, json.dumps(report, indent=1))
        return [report_path]

    eval_keys = {k: cfg[k] for k in ("fp_model", "iou_model", "penalty", "runs", "seed", "ratios",
                                     "composition", "smote_k", "smote_factor")}
    cache.run("evaluate", digest_of(eval_keys, [data_path]), [report_path], evaluate_stage)

    report = json.loads(report_path.read_text())
    report["stages"] = dict(cache.status)
    write_text_atomic(work / "stages.json", json.dumps(report["stages"], indent=1))
    return report


def evaluation_report(M: MetricsDataset, cfg: dict) -> dict:
    """Both meta tasks with entropy-only and (fp) naive random baselines."""
    runs, seed = int(cfg["runs"]), int(cfg["seed"])
    ratios = tuple(float(x) for x in cfg["ratios"].split(","))
    penalty = cfg["penalty"]
    pseudo = M.subset(np.flatnonzero(M.source == "pseudo"))
    make_train = None
    if cfg["composition"] != "R":
        aug_cfg = AugmentConfig(int(cfg["smote_k"]), float(cfg["smote_factor"]), seed=seed)
        make_train = training_set_factory(cfg["composition"], pseudo if len(pseudo) else None, aug_cfg)
    common = dict(n_runs=runs, seed=seed, ratios=ratios, make_train=make_train)
    results = {
        "fp": {
            "full": evaluate(M, "fp", cfg["fp_model"], penalty, **common),
            "entropy_only": evaluate(M, "fp", cfg["fp_model"], penalty, baseline="entropy_only", **common),
            "naive_random": evaluate(M, "fp", cfg["fp_model"], baseline="naive_random", **common),
        },
        "iou": {
            "full": evaluate(M, "iou", cfg["iou_model"], penalty, **common),
            "entropy_only": evaluate(M, "iou", cfg["iou_model"], penalty, baseline="entropy_only", **common),
        },
    }
    test = "test"
    headline = {
        "acc": results["fp"]["full"]["summary"][test]["acc"],
        "auroc": results["fp"]["full"]["summary"][test]["auroc"],
        "r2": results["iou"]["full"]["summary"][test]["r2"],
        "sigma": results["iou"]["full"]["summary"][test]["sigma"],
    }
    return {"metrics": headline, "results": results, "n_rows": len(M), "seed": seed}
