"""Command line interface: ``streamkf <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

A dataset directory (as written by ``synth``) holds ``index.json`` listing
video names, and per video ``NAME.fts`` (frames, F x C x H x W),
``NAME.features.fts`` (F x d descriptors) and ``NAME.json`` (annotations).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .data_io import (AnnotationDoc, FormatError, SynthConfig, atomic_write, classifier_from_json,
                      classifier_to_json, dump_json, format_word_vectors, frame_features, load_fts,
                      model_from_json, model_to_json, read_annotations, read_word_vectors, save_fts,
                      synth_video, synth_word_vectors)
from .pipeline import KTS_PENALTY, SEGMENT_LENGTH, extract, fallback_record, segment_video
from .plot import timeline_svg
from .recognizer import SINGLE_PASS, IttsConfig, IttsModel, evaluate, init_plugin, itts_train, \
    pool_keyframes
from .stream import FIRST_FRAME_POLICIES, NEVER_KEYFRAME, OkfemConfig, init_model
from .summarize import DEFAULT_BUDGET, Summary, f_score, importance_to_keyshots, keyframes_to_keyshots
from .tensor import NumericalError, OptimizerConfig, ShapeError
from .training import LossConfig, format_sweep_table, sweep_alpha_beta, train
from .validation import check_video

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("streamkf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- small helpers -----------------------------------------------------------

def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _write_json(path, doc):
    atomic_write(path, dump_json(doc))


def _shape(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected C,H,W, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents, got {text!r}")
    return dims


def _grid(text: str) -> list:
    try:
        pairs = [tuple(float(v) for v in item.split(":")) for item in text.split(",") if item]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected alpha:beta,alpha:beta,... got {text!r}")
    if not pairs or any(len(p) != 2 for p in pairs):
        raise argparse.ArgumentTypeError(f"expected alpha:beta,alpha:beta,... got {text!r}")
    return pairs


def _sample(text: str) -> float:
    kind, _, frac = text.partition(":")
    try:
        value = float(frac)
    except ValueError:
        value = -1.0
    if kind != "random" or not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"expected random:FRACTION with FRACTION in (0, 1], got {text!r}")
    return value


def _seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _parallel(fn, items, jobs):
    if jobs == 1 or len(items) < 2:
        return [fn(item) for item in items]
    from joblib import Parallel, delayed

    return list(Parallel(n_jobs=jobs)(delayed(fn)(item) for item in items))


@dataclass
class Video:
    name: str
    frames: np.ndarray
    features: np.ndarray
    annotation: AnnotationDoc

    @property
    def references(self):
        return self.annotation.references()


def load_dataset(directory) -> list:
    index = _read_json(os.path.join(directory, "index.json"))
    names = index.get("videos") if isinstance(index, dict) else None
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError(f"{directory}/index.json: 'videos' must be a list of names")
    videos = []
    for name in names:
        base = os.path.join(directory, name)
        try:
            frames = check_video(load_fts(base + ".fts"), name=name)
            feat_path = base + ".features.fts"
            features = load_fts(feat_path) if os.path.exists(feat_path) else frame_features(frames)
            with open(base + ".json", encoding="utf-8") as fh:
                ann = read_annotations(fh.read())
        except (FormatError, ShapeError) as exc:
            raise FormatError(f"{base}: {exc}") from exc
        if ann.num_frames != len(frames) or len(features) != len(frames):
            raise FormatError(f"{base}: frames ({len(frames)}), features ({len(features)}) and "
                              f"annotation ({ann.num_frames}) disagree on the frame count")
        videos.append(Video(name, frames, features, ann))
    if not videos:
        raise FormatError(f"{directory}: dataset is empty")
    return videos


def _load_model(path):
    return model_from_json(_read_json(path))


def _summaries_from(doc, path):
    """``{name: Summary}`` from a collection file, or ``{None: Summary}`` for a single summary."""
    try:
        if "summaries" in doc:
            return {name: Summary.from_json(s) for name, s in doc["summaries"].items()}
        return {None: Summary.from_json(doc)}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _pick(table, name, path):
    if None in table:
        return table[None]
    if name not in table:
        raise FormatError(f"{path}: no summary for video {name!r}")
    return table[name]


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    names = []
    for i in range(args.count):
        label = i % args.classes if args.classes else 0
        cfg = SynthConfig(num_frames=args.frames, frame_shape=args.shape, num_events=args.events,
                          noise_level=args.noise, seed=_seed_for(args.seed, i), min_gap=args.min_gap,
                          budget=args.budget, num_classes=args.classes, class_index=label)
        video = synth_video(cfg)
        name = f"video_{i:03d}"
        base = os.path.join(args.out, name)
        save_fts(base + ".fts", video.frames)
        save_fts(base + ".features.fts", video.features)
        ann = AnnotationDoc(args.frames, list(video.gt.keyframe_indices),
                            reference_summaries=[[list(s) for s in video.reference.shots]],
                            class_label=f"class{label}" if args.classes else None)
        _write_json(base + ".json", ann.to_json())
        names.append(name)
    _write_json(os.path.join(args.out, "index.json"),
                {"videos": names, "frame_shape": list(args.shape), "num_frames": args.frames,
                 "seed": args.seed})
    if args.classes:
        table = synth_word_vectors([f"class{k}" for k in range(args.classes)], seed=args.seed)
        atomic_write(os.path.join(args.out, "word_vectors.txt"), format_word_vectors(table))
    print(f"wrote {len(names)} videos to {args.out}")
    return EXIT_OK


def cmd_train(args):
    videos = load_dataset(args.data)
    shape = videos[0].frames.shape[1:]
    cfg = OkfemConfig(shape, args.backbone_layers, args.backbone_channels, args.deform_kernel_size,
                      args.first_frame_policy)
    model = init_model(cfg, seed=args.seed, response_scale=args.response_scale)
    opt = OptimizerConfig(args.lr, args.momentum, args.decay, args.decay_every, args.epochs)
    loss = LossConfig(args.alpha, args.beta, args.tau, args.sigma)
    dataset = [(v.frames, _gt(v)) for v in videos]
    result = train(model, dataset, opt, loss, seed=args.seed,
                   callback=lambda e, r: print(f"epoch {e}\tloss {r.losses[-1]:.6f}\t"
                                               f"keyframe ratio {r.keyframe_ratios[-1]:.4f}", flush=True))
    _write_json(args.out, model_to_json(result.model))
    if args.metrics:
        _write_json(args.metrics, {"loss": result.losses, "keyframe_ratio": result.keyframe_ratios,
                                   "alpha": args.alpha, "beta": args.beta, "seed": args.seed})
    print(f"model written to {args.out}")
    return EXIT_OK


def _gt(video):
    from .training import GroundTruthKeyframes

    return GroundTruthKeyframes(video.annotation.keyframe_indices or [], video.annotation.num_frames)


def _extract_one(job):
    model, name, frames, precomputed = job
    ext = extract(model, frames, precomputed=precomputed)
    records = ext.records
    fallback = False
    if not records and not precomputed:
        rec = fallback_record(model, frames, ext)
        fallback = rec is not None
    return name, ext, (rec if fallback else None)


def cmd_extract(args):
    model = _load_model(args.model)
    if args.data:
        videos = [(v.name, v.frames) for v in load_dataset(args.data)]
    else:
        videos = []
        for path in args.input:
            name = os.path.splitext(os.path.basename(path))[0]
            arr = load_fts(path)
            videos.append((name, arr if args.precomputed else check_video(arr, name=name)))
    if not videos:
        raise UsageError("extract needs --data or --input")
    os.makedirs(args.out, exist_ok=True)
    c, h, w = model.config.input_shape
    results = _parallel(_extract_one, [(model, n, f, args.precomputed) for n, f in videos], args.jobs)
    index = {}
    for i, (name, ext, fallback) in enumerate(results):
        recs = ext.records
        kfm = np.stack([r.k_fm for r in recs]) if recs else np.zeros((0, 1, h, w), np.float32)
        kfa = np.stack([r.k_fa for r in recs]) if recs else np.zeros((0, c, h, w), np.float32)
        save_fts(os.path.join(args.out, f"{name}.kfm.fts"), kfm)
        save_fts(os.path.join(args.out, f"{name}.kfa.fts"), kfa)
        entry = {"num_frames": ext.num_frames, "keyframes": ext.keyframes,
                 "scores": [None if s is None else float(s) for s in ext.scores],
                 "record_scores": [float(r.score) for r in recs], "ratio": ext.ratio,
                 "fallback_frame": fallback.frame_index if fallback else None}
        if args.sample is not None:
            entry["sampled"] = _random_frames(ext, args.sample, args.exclude_keyframes,
                                              _seed_for(args.seed, i))
        index[name] = entry
    ratios = [e["ratio"] for e in index.values()]
    mean_ratio = float(np.mean(ratios))
    _write_json(os.path.join(args.out, "index.json"),
                {"model_checksum": model.checksum(), "videos": index, "mean_keyframe_ratio": mean_ratio})
    print(f"keyframe ratio {mean_ratio:.4f}")
    return EXIT_OK


def _random_frames(ext, fraction, exclude_keyframes, seed):
    """Frame indices for the random-sampling ablation: ``round(fraction * F)`` frames."""
    rng = np.random.default_rng(seed)
    keyframes = set(ext.keyframes)
    pool = [i for i in range(ext.num_frames) if not (exclude_keyframes and i in keyframes)]
    count = min(len(pool), int(round(fraction * ext.num_frames)))
    return sorted(int(i) for i in rng.choice(pool, size=count, replace=False))


def cmd_summarize(args):
    videos = load_dataset(args.data)
    extraction = _read_json(args.extraction).get("videos", {})
    out = {}
    for v in videos:
        if v.name not in extraction:
            raise FormatError(f"{args.extraction}: no entry for video {v.name!r}")
        entry = extraction[v.name]
        segs = segment_video(v.features, args.segment_length, args.kts_penalty)
        if args.selection == "greedy":
            summary = keyframes_to_keyshots(segs, entry["keyframes"], args.budget)
        else:
            scores = [max(s, 0.0) if s is not None else 0.0 for s in entry["scores"]]
            summary = importance_to_keyshots(scores, segs, args.budget)
        out[v.name] = summary.to_json()
    _write_json(args.out, {"budget": args.budget, "selection": args.selection, "summaries": out})
    print(f"wrote {len(out)} summaries to {args.out}")
    return EXIT_OK


def cmd_eval_summary(args):
    preds = _summaries_from(_read_json(args.pred), args.pred)
    if args.ref:
        refs_table = _summaries_from(_read_json(args.ref), args.ref)
        names = [n for n in preds] if None not in preds else list(refs_table)
        refs = {n: [_pick(refs_table, n, args.ref)] for n in names}
    elif args.data:
        refs = {v.name: v.references for v in load_dataset(args.data)}
        names = list(refs)
    else:
        raise UsageError("eval-summary needs --ref or --data")
    scores = {}
    for name in names:
        if not refs[name]:
            raise FormatError(f"video {name!r} has no reference summaries")
        scores[name] = f_score(_pick(preds, name, args.pred), refs[name], args.aggregation)
        if name is not None:
            print(f"{name}\t{scores[name]:.4f}")
    mean = float(np.mean(list(scores.values())))
    if args.out:
        _write_json(args.out, {"aggregation": args.aggregation, "mean_f_score": mean,
                               "per_video": {str(k): v for k, v in scores.items()}})
    print(f"{mean:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    videos = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else videos
    shape = videos[0].frames.shape[1:]
    model = init_model(OkfemConfig(shape, args.backbone_layers, args.backbone_channels),
                       seed=args.seed, response_scale=args.response_scale)
    opt = OptimizerConfig(args.lr, args.momentum, args.decay, args.decay_every, args.epochs)
    base = LossConfig(args.alpha, args.beta, args.tau, args.sigma)
    results = sweep_alpha_beta(args.grid, [(v.frames, _gt(v)) for v in videos], opt, args.seed,
                               model, eval_set, base, args.jobs, budget=args.budget,
                               aggregation=args.aggregation)
    table = format_sweep_table(results)
    sys.stdout.write(table)
    if args.out_tsv:
        atomic_write(args.out_tsv, table)
    if args.out_json:
        _write_json(args.out_json, [r.to_json() for r in results])
    return EXIT_OK


def _pooled(model, videos, jobs):
    def one(v):
        _, ext, fallback = _extract_one((model, v.name, v.frames, False))
        records = ext.records or [fallback]
        return pool_keyframes(records)

    return _parallel(one, videos, jobs)


def cmd_train_classifier(args):
    model = _load_model(args.model)
    videos = load_dataset(args.data)
    table = read_word_vectors(open(args.word_vectors, encoding="utf-8").read())
    labels = [v.annotation.class_label for v in videos]
    if any(lab is None for lab in labels):
        raise FormatError("every training video needs a class_label annotation")
    feats = _pooled(model, videos, args.jobs)
    classes = sorted(set(labels))
    clf = IttsModel(init_plugin(len(feats[0]), len(classes), args.seed), classes)
    opt = OptimizerConfig(args.lr, args.momentum, args.decay, args.decay_every, args.epochs)
    cfg = IttsConfig(args.max_iter, args.stability_run)
    clf, itlog = itts_train(clf, list(zip(feats, labels)), table, cfg, opt, args.seed)
    _write_json(args.out, classifier_to_json(clf))
    rate = float(np.mean([e.converged for e in itlog])) if itlog else 0.0
    if args.log:
        _write_json(args.log, [{"sample": e.sample, "epoch": e.epoch, "labels": e.labels,
                                "converged": e.converged} for e in itlog])
    print(f"converged before the cap: {rate:.4f}")
    return EXIT_OK


def cmd_classify(args):
    model = _load_model(args.model)
    clf = classifier_from_json(_read_json(args.classifier))
    videos = load_dataset(args.data)
    table = read_word_vectors(open(args.word_vectors, encoding="utf-8").read())
    feats = _pooled(model, videos, args.jobs)
    cfg = SINGLE_PASS if args.single_pass else IttsConfig(args.max_iter, min(args.stability_run, args.max_iter))
    labels = [v.annotation.class_label for v in videos]
    acc, records = evaluate(clf, list(zip(feats, labels)), table, cfg)
    out = {v.name: r.to_json() for v, r in zip(videos, records)}
    if args.out:
        _write_json(args.out, {"predictions": out, "accuracy": acc if None not in labels else None})
    for v, r in zip(videos, records):
        print(f"{v.name}\t{r.label}")
    if None not in labels:
        print(f"accuracy {acc:.4f}")
    return EXIT_OK


def cmd_plot(args):
    tables = [(p, _summaries_from(_read_json(p), p)) for p in args.summaries]
    labels = args.labels.split(",") if args.labels else [os.path.splitext(os.path.basename(p))[0]
                                                         for p in args.summaries]
    if len(labels) != len(tables):
        raise UsageError(f"{len(labels)} labels for {len(tables)} summary files")
    summaries = [_pick(t, args.video, p) for p, t in tables]
    reference = None
    if args.reference:
        reference = _pick(_summaries_from(_read_json(args.reference), args.reference), args.video,
                          args.reference)
    elif args.data:
        match = [v for v in load_dataset(args.data) if v.name == args.video]
        if not match:
            raise FormatError(f"{args.data}: no video {args.video!r}")
        refs = match[0].references
        reference = refs[0] if refs else None
    scores = keyframes = None
    if args.extraction:
        entries = _read_json(args.extraction).get("videos", {})
        if args.video not in entries:
            raise FormatError(f"{args.extraction}: no entry for video {args.video!r}")
        scores, keyframes = entries[args.video]["scores"], entries[args.video]["keyframes"]
    try:
        svg = timeline_svg(summaries, labels, reference, scores, keyframes, title=args.title)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    atomic_write(args.out, svg)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _common(parser):
    g = parser.add_argument_group("common options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--config", help="flat JSON file of option values; flags override it")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    g.add_argument("--budget", type=float, default=DEFAULT_BUDGET,
                   help="summary length as a fraction of the video (default 0.15)")
    g.add_argument("--aggregation", choices=("mean", "max"), default="mean",
                   help="how F-scores combine over several references (default mean)")
    g.add_argument("--alpha", type=float, default=0.6, help="weight of the selection-error term (default 0.6)")
    g.add_argument("--beta", type=float, default=0.42, help="weight of the score term (default 0.42)")
    g.add_argument("--max-iter", type=int, default=10,
                   help="iteration cap of the iterative classifier (default 10)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_opts(parser):
    parser.add_argument("--backbone-layers", type=int, default=2)
    parser.add_argument("--backbone-channels", type=int, default=16)
    parser.add_argument("--response-scale", type=float, default=0.02,
                        help="init scale of the response kernel")


def _opt_opts(parser, epochs=30, lr=1e-4):
    parser.add_argument("--epochs", type=int, default=epochs, help=f"training epochs (default {epochs})")
    parser.add_argument("--lr", type=float, default=lr, help=f"learning rate (default {lr:g})")
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--decay", type=float, default=0.96, help="learning-rate decay factor")
    parser.add_argument("--decay-every", type=int, default=10, help="epochs between decays")


def _loss_opts(parser):
    parser.add_argument("--tau", type=float, default=1.0, help="gate surrogate temperature")
    parser.add_argument("--sigma", type=float, default=1.0, help="score scale inside tanh")


def build_parser() -> _Parser:
    parser = _Parser(prog="streamkf", description="Online keyframe extraction, key-shot summaries "
                                                  "and keyframe classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--events", type=int, default=3)
    p.add_argument("--shape", type=_shape, default=(3, 32, 32), help="frame shape C,H,W")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--min-gap", type=int, default=4)
    p.add_argument("--classes", type=int, default=0,
                   help="tint each video by one of this many classes and write word_vectors.txt")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the keyframe extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model bundle (JSON)")
    p.add_argument("--metrics", help="write loss and keyframe-ratio curves here")
    p.add_argument("--deform-kernel-size", type=int, default=3)
    p.add_argument("--first-frame-policy", choices=FIRST_FRAME_POLICIES, default=NEVER_KEYFRAME)
    _model_opts(p)
    _opt_opts(p)
    _loss_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="stream videos through a model and save keyframe records")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--input", nargs="+", default=[], help="FTS1 files (frames, or maps with --precomputed)")
    p.add_argument("--precomputed", action="store_true",
                   help="inputs are receptive-field maps of shape F x 1 x H x W")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sample", type=_sample, metavar="random:FRACTION",
                   help="also draw this fraction of frames at random per video")
    p.add_argument("--exclude-keyframes", action="store_true",
                   help="random sampling skips the extracted keyframes")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("summarize", help="turn extracted keyframes into key-shot summaries")
    p.add_argument("--data", required=True)
    p.add_argument("--extraction", required=True, help="index.json written by extract")
    p.add_argument("--out", required=True)
    p.add_argument("--selection", choices=("greedy", "knapsack"), default="greedy",
                   help="greedy by keyframe ratio, or knapsack on positive frame scores")
    p.add_argument("--segment-length", type=int, default=SEGMENT_LENGTH,
                   help="target frames per temporal segment")
    p.add_argument("--kts-penalty", type=float, default=KTS_PENALTY)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("eval-summary", help="F-score of summaries against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", help="reference summary file")
    p.add_argument("--data", help="dataset directory whose annotations hold the references")
    p.add_argument("--out", help="write per-video scores as JSON")
    p.set_defaults(func=cmd_eval_summary)

    p = sub.add_parser("sweep", help="train and score one model per (alpha, beta) pair")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="held-out dataset (default: the training set)")
    p.add_argument("--grid", type=_grid, default=None,
                   help="alpha:beta,... (default: the ten standard pairs)")
    p.add_argument("--out-tsv")
    p.add_argument("--out-json")
    _model_opts(p)
    _opt_opts(p)
    _loss_opts(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-classifier", help="train the iterative keyframe classifier")
    p.add_argument("--model", required=True, help="extractor model bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="write the per-sample iteration log here")
    p.add_argument("--stability-run", type=int, default=3)
    _opt_opts(p)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("classify", help="classify videos from their keyframes")
    p.add_argument("--model", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--out")
    p.add_argument("--stability-run", type=int, default=3)
    p.add_argument("--single-pass", action="store_true", help="one forward pass per class, no iteration")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("plot", help="draw summary timelines as SVG")
    p.add_argument("--summaries", nargs="+", required=True)
    p.add_argument("--labels", help="comma-separated method names")
    p.add_argument("--video", help="video name inside summary collections")
    p.add_argument("--reference", help="reference summary file")
    p.add_argument("--data", help="dataset directory to take the reference from")
    p.add_argument("--extraction", help="extract index.json; adds the score curve and keyframe ticks")
    p.add_argument("--title")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    for p in sub.choices.values():
        _common(p)
    return parser


def _apply_config(parser, argv):
    """Re-parse with values from ``--config`` as defaults, so flags still win."""
    # first pass only locates the command and --config; required options may live in the file
    relaxed = [a for p in parser._subparsers._group_actions[0].choices.values() for a in p._actions
               if a.required]
    for a in relaxed:
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in relaxed:
            a.required = True
    if not args.config:
        return parser.parse_args(argv)
    try:
        doc = _read_json(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    except FormatError as exc:
        raise UsageError(str(exc)) from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{args.config}: config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, value in doc.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        action = actions[dest]
        if action.type is not None and not isinstance(value, (list, bool)):
            try:
                value = action.type(str(value))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}: {key!r} must be one of {list(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # required options may now come from the file
    for dest in defaults:
        actions[dest].required = False
    return parser.parse_args(argv)


def _validate(args):
    if not 0 < args.budget <= 1:
        raise UsageError(f"--budget must be in (0, 1], got {args.budget}")
    for name in ("alpha", "beta"):
        if not 0 <= getattr(args, name) <= 1:
            raise UsageError(f"--{name} must be in [0, 1], got {getattr(args, name)}")
    if args.max_iter < 1:
        raise UsageError("--max-iter must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    for name in ("epochs", "count", "frames", "segment_length", "stability_run"):
        value = getattr(args, name, None)
        if value is not None and value < (0 if name == "epochs" else 1):
            raise UsageError(f"--{name.replace('_', '-')} is out of range: {value}")
    if getattr(args, "stability_run", None) is not None and args.stability_run > args.max_iter \
            and args.command == "train-classifier":
        raise UsageError("--stability-run cannot exceed --max-iter")
    for name in ("lr", "noise", "kts_penalty"):
        value = getattr(args, name, None)
        if value is not None and not (value >= 0 and math.isfinite(value)):
            raise UsageError(f"--{name.replace('_', '-')} must be a finite value >= 0")
    for name in ("tau", "sigma"):
        value = getattr(args, name, None)
        if value is not None and not value > 0:
            raise UsageError(f"--{name} must be > 0")
    momentum = getattr(args, "momentum", None)
    if momentum is not None and not 0 <= momentum < 1:
        raise UsageError("--momentum must be in [0, 1)")
    decay = getattr(args, "decay", None)
    if decay is not None and not 0 < decay <= 1:
        raise UsageError("--decay must be in (0, 1]")
    if getattr(args, "command", None) == "synth":
        try:
            SynthConfig(num_frames=args.frames, frame_shape=args.shape, num_events=args.events,
                        noise_level=args.noise, min_gap=args.min_gap, num_classes=args.classes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if getattr(args, "command", None) == "train":
        try:
            OkfemConfig((3, 32, 32), args.backbone_layers, args.backbone_channels,
                        args.deform_kernel_size, args.first_frame_policy)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        _validate(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError, KeyError, TypeError) as exc:
        # FormatError, ShapeError and schema errors are ValueErrors
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
