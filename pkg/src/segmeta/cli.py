"""``segmeta`` command line interface.

Exit codes: 0 success, 1 validation error, 2 I/O error. Errors are printed
to stderr as ``error[<CODE>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .arrayio import (
    CorpusConfig,
    load_corpus,
    load_labels,
    load_probs,
    read_array,
    write_array,
    write_text_atomic,
)
from .augmentation import AugmentConfig, compose, smote_rows
from .decision import decide, estimate_priors, read_cost_csv
from .errors import ConfigError, IoFailure, SegmetaError, UsageError
from .evaluation import build_cdf, class_rgb, heatmap_rgb, write_ppm
from .metrics import MetricsDataset, read_dataset, write_dataset
from .models import MetaModel, evaluate, predict, score, train
from .pipeline import corpus_datasets, frame_dataset, mask_path, run_pipeline
from .segments import extract_segments, match_segments
from .synth import SceneSpec, write_corpus
from .tracking import MatchConfig, assemble_time_series, build_tracks

log = logging.getLogger("segmeta")

SUBCOMMANDS = ("synth", "predict", "segments", "metrics", "train-meta", "eval-meta", "track",
               "augment", "compose", "priors", "cdf", "render", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_kv_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = _Parser(prog="segmeta", argument_default=default)
    p.add_argument("--version", action="store_true", default=default if suppress else False)
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="count", default=default if suppress else 0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, **kw):
        s = sub.add_parser(name, argument_default=default, **kw)
        # accepted after the command too; left unset unless given
        s.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        return s

    def d(v):
        return default if suppress else v

    s = cmd("synth", help="write a synthetic corpus")
    s.add_argument("--spec", help="scene parameters as key=value lines")
    s.add_argument("--frames", type=int, default=d(200))
    s.add_argument("--sequence-length", type=int, default=d(1))
    s.add_argument("--pseudo-every", type=int, default=d(0))
    s.add_argument("--seed", type=int, default=d(42))
    s.add_argument("--out", required=not suppress)

    s = cmd("predict", help="turn softmax volumes into masks")
    s.add_argument("--rule", choices=["bayes", "cost", "ml"], default=d("bayes"))
    s.add_argument("--probs")
    s.add_argument("--corpus", help="predict every frame of a corpus instead of one file")
    s.add_argument("--priors")
    s.add_argument("--cost")
    s.add_argument("--out", required=not suppress)

    s = cmd("priors", help="estimate positional class priors")
    s.add_argument("--gt", nargs="+")
    s.add_argument("--corpus")
    s.add_argument("--q", type=int)
    s.add_argument("--alpha", type=float, default=d(1.0))
    s.add_argument("--downscale", type=int, default=d(1))
    s.add_argument("--out", required=not suppress)

    s = cmd("segments", help="segment table with IoU targets")
    s.add_argument("--mask", required=not suppress)
    s.add_argument("--gt")
    s.add_argument("--frame-id", default=d(""))
    s.add_argument("--out", required=not suppress)

    s = cmd("metrics", help="segment metrics table")
    s.add_argument("--probs")
    s.add_argument("--mask")
    s.add_argument("--gt")
    s.add_argument("--pseudo")
    s.add_argument("--frame-id", default=d(""))
    s.add_argument("--corpus", help="all frames of a corpus (masks from --masks)")
    s.add_argument("--masks", help="directory written by predict --corpus")
    s.add_argument("--out", required=not suppress)

    s = cmd("train-meta", help="train a meta classifier / regressor")
    s.add_argument("--task", choices=["fp", "iou"], required=not suppress)
    s.add_argument("--model", choices=["linear", "logistic", "gbt", "mlp"], required=not suppress)
    s.add_argument("--penalty", choices=["none", "l1", "l2"], default=d("none"))
    s.add_argument("--lam", type=float)
    s.add_argument("--features", help="comma separated subset of feature names")
    s.add_argument("--seed", type=int, default=d(0))
    s.add_argument("--in", dest="input", required=not suppress)
    s.add_argument("--out", required=not suppress)

    s = cmd("eval-meta", help="repeated-split evaluation of trained model settings")
    s.add_argument("--model", nargs="+", required=not suppress)
    s.add_argument("--in", dest="input", required=not suppress)
    s.add_argument("--runs", type=int, default=d(10))
    s.add_argument("--seed", type=int, default=d(0))
    s.add_argument("--ratios", default=d("0.8,0.2"))
    s.add_argument("--report", required=not suppress)

    s = cmd("track", help="track segments through sequences and build time series")
    s.add_argument("--manifest", required=not suppress)
    s.add_argument("--masks", help="mask directory (default: Bayes masks of the probabilities)")
    s.add_argument("--depth", type=int, default=d(10))
    s.add_argument("--shift", choices=["none", "linear"], default=d("linear"))
    s.add_argument("--series-out", help="also write the time-series metrics table")
    s.add_argument("--out", required=not suppress)

    s = cmd("augment", help="SMOTE rows for rare IoU values")
    s.add_argument("--in", dest="input", required=not suppress)
    s.add_argument("--k", type=int, default=d(5))
    s.add_argument("--factor", type=float, default=d(1.0))
    s.add_argument("--seed", type=int, default=d(1))
    s.add_argument("--out", required=not suppress)

    s = cmd("compose", help="concatenate training sources")
    s.add_argument("--spec", choices=["R", "RA", "RAP", "RP", "P"], required=not suppress)
    s.add_argument("--real")
    s.add_argument("--aug")
    s.add_argument("--pseudo")
    s.add_argument("--out", required=not suppress)

    s = cmd("cdf", help="segment-wise precision / recall CDF of some classes")
    s.add_argument("--pred", nargs="+", required=not suppress)
    s.add_argument("--gt", nargs="+", required=not suppress)
    s.add_argument("--class", dest="class_ids", type=int, nargs="+", required=not suppress)
    s.add_argument("--kind", choices=["precision", "recall"], default=d("recall"))
    s.add_argument("--rule-tag", default=d("bayes"))
    s.add_argument("--out", required=not suppress)

    s = cmd("render", help="ground truth / prediction / IoU heatmaps as PPM files")
    s.add_argument("--mode", choices=["all", "iou-true", "iou-pred"], default=d("all"))
    s.add_argument("--mask", required=not suppress)
    s.add_argument("--gt")
    s.add_argument("--probs")
    s.add_argument("--model", help="IoU regression model for the predicted-IoU panel")
    s.add_argument("--q", type=int)
    s.add_argument("--out-dir", required=not suppress)

    s = cmd("pipeline", help="synth -> predict -> metrics -> evaluate with caching")
    s.add_argument("--set", nargs="+", metavar="KEY=VALUE", help="pipeline settings")
    s.add_argument("--workdir")
    s.add_argument("--depth", type=int)
    s.add_argument("--rule", choices=["bayes", "cost", "ml"])
    s.add_argument("--seed", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--report", help="copy of the report JSON")
    return p


def _effective(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("verbose", "version")}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _write_json(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=1, default=_json_default))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a):
    values = read_kv_file(a.spec) if a.spec else {}
    values.setdefault("seed", str(a.seed))
    spec = SceneSpec.from_mapping(values)
    frames = write_corpus(a.out, spec, a.frames, a.sequence_length, a.pseudo_every)
    print(f"wrote {len(frames)} frames to {a.out}")


def _priors_and_costs(a, shape=None):
    priors = costs = None
    if a.rule == "ml":
        if not a.priors:
            raise UsageError("--rule ml needs --priors")
        priors = read_array(a.priors).astype(np.float64)
    if a.rule == "cost":
        if not a.cost:
            raise UsageError("--rule cost needs --cost")
        costs = read_cost_csv(a.cost)
    return priors, costs


def cmd_predict(a):
    priors, costs = _priors_and_costs(a)
    if a.corpus:
        layout = load_corpus(a.corpus)
        out = Path(a.out)
        for f in layout.frames:
            write_array(decide(load_probs(f.probs), a.rule, priors, costs), mask_path(out, f))
        return
    if not a.probs:
        raise UsageError("predict needs --probs or --corpus")
    write_array(decide(load_probs(a.probs), a.rule, priors, costs), a.out)


def cmd_priors(a):
    if a.corpus:
        layout = load_corpus(a.corpus)
        paths = [f.gt for f in layout.frames if f.gt is not None]
        q = a.q or load_probs(layout.frames[0].probs).shape[2]
    else:
        if not a.gt or not a.q:
            raise UsageError("priors needs --gt and --q (or --corpus)")
        paths, q = a.gt, a.q
    pri = estimate_priors([load_labels(p) for p in paths], q, a.alpha, a.downscale)
    write_array(pri.astype(np.float32), a.out)


SEGMENT_COLUMNS = ["frame_id", "segment_id", "class_id", "size", "boundary_size", "interior_size",
                   "bbox", "centroid_r", "centroid_c", "iou", "is_fp", "precision"]


def cmd_segments(a):
    mask = read_array(a.mask)
    gt = load_labels(a.gt) if a.gt else None
    segs = extract_segments(mask, gt, frame_id=a.frame_id)
    match = match_segments(segs, extract_segments(gt)) if gt is not None else None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEGMENT_COLUMNS)
    for s in segs:
        row = [a.frame_id, s.segment_id, s.class_id, s.size, s.boundary_size, s.interior_size,
               " ".join(map(str, s.bbox)), f"{s.centroid[0]:.9g}", f"{s.centroid[1]:.9g}"]
        if match is None:
            row += ["", "", ""]
        else:
            i = s.segment_id
            row += [f"{match.iou[i]:.9g}", int(match.iou[i] == 0), f"{match.precision[i]:.9g}"]
        w.writerow(row)
    write_text_atomic(a.out, buf.getvalue())


def cmd_metrics(a):
    if a.corpus:
        if not a.masks:
            raise UsageError("metrics --corpus needs --masks")
        layout = load_corpus(a.corpus)
        parts = corpus_datasets(layout.frames, Path(a.masks))
        write_dataset(MetricsDataset.concat([m for _, m in parts]), a.out)
        return
    if not (a.probs and a.mask):
        raise UsageError("metrics needs --probs and --mask (or --corpus)")
    _, M = frame_dataset(
        load_probs(a.probs), read_array(a.mask),
        load_labels(a.gt) if a.gt else None,
        load_labels(a.pseudo) if a.pseudo else None, a.frame_id,
    )
    write_dataset(M, a.out)


def cmd_train_meta(a):
    M = read_dataset(a.input)
    if a.features:
        M = M.select_features(a.features.split(","))
    model = train(M, a.task, a.model, a.penalty, a.lam, seed=a.seed)
    model.info["config"] = _effective(a)
    model.save(a.out)


def cmd_eval_meta(a):
    M = read_dataset(a.input)
    ratios = tuple(float(x) for x in a.ratios.split(","))
    report = {"config": _effective(a), "version": __version__, "models": {}, "metrics": {}}
    for path in a.model:
        model = MetaModel.load(path)
        rows = M.select_features(model.features)
        fixed = score(model.task, predict(model, rows), rows)
        protocol = evaluate(rows, model.task, model.kind, model.penalty, model.lam,
                            n_runs=a.runs, seed=a.seed, ratios=ratios)
        report["models"][str(path)] = {"task": model.task, "kind": model.kind,
                                       "fixed_model": fixed, "protocol": protocol}
        for metric, summary in protocol["summary"]["test"].items():
            report["metrics"][metric] = summary["mean"]
    _write_json(a.report, report)


def cmd_track(a):
    layout = load_corpus(Path(a.manifest).parent, CorpusConfig(manifest=Path(a.manifest).name))
    cfg = MatchConfig(shift=a.shift)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["track_id", "frame_index", "segment_id", "class_id", "centroid", "shift_est"])
    series = []
    next_id = 0
    for seq_id, seq in layout.sequences.items():
        if a.masks:
            parts = corpus_datasets(seq, Path(a.masks))
        else:
            parts = [frame_dataset(load_probs(f.probs), decide(load_probs(f.probs), "bayes"),
                                   load_labels(f.gt) if f.gt else None,
                                   load_labels(f.pseudo) if (f.pseudo and not f.gt) else None,
                                   f.frame_id) for f in seq]
        tracks = build_tracks([s for s, _ in parts], cfg)
        for tr in tracks:
            for (t, sid), c, sh in zip(tr.members, tr.centroids, tr.shifts):
                w.writerow([next_id + tr.track_id, seq[t].frame_index, sid, tr.class_id,
                            f"{c[0]:.9g} {c[1]:.9g}", f"{sh[0]} {sh[1]}"])
        next_id += len(tracks)
        if a.series_out:
            series.append(assemble_time_series(tracks, [m for _, m in parts], a.depth))
    write_text_atomic(a.out, buf.getvalue())
    if a.series_out:
        write_dataset(MetricsDataset.concat(series), a.series_out)


def cmd_augment(a):
    M = read_dataset(a.input)
    real = M.subset(np.flatnonzero(M.source == "real"))
    write_dataset(smote_rows(real, AugmentConfig(a.k, a.factor, seed=a.seed)), a.out)


def cmd_compose(a):
    load = (lambda p: read_dataset(p) if p else None)
    write_dataset(compose(load(a.real), load(a.aug), load(a.pseudo), a.spec), a.out)


def cmd_cdf(a):
    if len(a.pred) != len(a.gt):
        raise UsageError("--pred and --gt need the same number of files")
    values = []
    for pp, gp in zip(a.pred, a.gt):
        gt = load_labels(gp)
        m = match_segments(extract_segments(read_array(pp), gt), extract_segments(gt))
        prec, rec = m.for_classes(a.class_ids)
        values.extend(prec if a.kind == "precision" else rec)
    cdf = build_cdf(values, a.kind, a.class_ids if len(a.class_ids) > 1 else a.class_ids[0], a.rule_tag)
    report = cdf.to_dict()
    report["config"] = _effective(a)
    _write_json(a.out, report)


def cmd_render(a):
    out = Path(a.out_dir)
    mask = read_array(a.mask)
    gt = load_labels(a.gt) if a.gt else None
    q = a.q or int(max(mask.max(), 0 if gt is None else gt[gt != 255].max(initial=0))) + 1
    segs = extract_segments(mask, gt)
    if gt is not None:
        write_ppm(out / "ground_truth.ppm", class_rgb(gt, q, gt))
    write_ppm(out / "prediction.ppm", class_rgb(mask, q))
    if a.mode in ("all", "iou-true"):
        if gt is None:
            raise UsageError("the true-IoU panel needs --gt")
        match = match_segments(segs, extract_segments(gt))
        write_ppm(out / "iou_true.ppm", heatmap_rgb(match.iou, segs.labels, gt))
    if a.mode in ("all", "iou-pred") and a.model:
        if not a.probs:
            raise UsageError("the predicted-IoU panel needs --probs")
        model = MetaModel.load(a.model)
        _, rows = frame_dataset(load_probs(a.probs), mask, gt)
        est = predict(model, rows.select_features(model.features))
        write_ppm(out / "iou_pred.ppm", heatmap_rgb(est, segs.labels, gt))


def cmd_pipeline(a, file_values):
    values = dict(file_values)
    for item in a.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k] = v
    for key in ("workdir", "depth", "rule", "seed", "runs"):
        v = getattr(a, key, None)
        if v is not None:
            values[key] = str(v)
    report = run_pipeline(values)
    if a.report:
        _write_json(a.report, report)
    print(json.dumps({"metrics": report["metrics"], "stages": report["stages"]}))


COMMANDS = {
    "synth": cmd_synth, "predict": cmd_predict, "priors": cmd_priors, "segments": cmd_segments,
    "metrics": cmd_metrics, "train-meta": cmd_train_meta, "eval-meta": cmd_eval_meta,
    "track": cmd_track, "augment": cmd_augment, "compose": cmd_compose, "cdf": cmd_cdf,
    "render": cmd_render,
}


def _apply_config(args, argv, values):
    """File values fill every option not given explicitly on the command line."""
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    allowed = {k for k in vars(args) if k not in ("command", "config", "version", "verbose")}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in allowed:
            raise ConfigError(f"unknown configuration key {key!r} for '{args.command}'")
        if dest in explicit:
            continue
        current = getattr(args, dest)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        elif isinstance(current, list):
            value = raw.split()
        else:
            value = raw
        setattr(args, dest, value)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        positional = [x for x in argv if not x.startswith("-")]
        if positional and positional[0] not in SUBCOMMANDS and "--config" not in argv[:1]:
            first = positional[0]
            # allow "--config file" before the command
            idx = argv.index(first)
            if idx == 0 or argv[idx - 1] != "--config":
                raise UsageError(f"unknown command {first!r}")
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.version:
            print(f"segmeta {__version__}")
            return 0
        if args.command is None:
            raise UsageError("no command given")
        values = read_kv_file(args.config) if args.config else {}
        if args.command == "pipeline":
            cmd_pipeline(args, values)
        else:
            _apply_config(args, argv, values)
            COMMANDS[args.command](args)
        return 0
    except SegmetaError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[IO]: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
