"""Command line entry point: ``procver <subcommand> ...``.

Exit codes: 0 success or clean stream, 2 usage or bad config, 3 data error,
4 numeric divergence, 5 warning raised by ``warn``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, GeneratorConfig, all_pairs, generate_dataset, load_manifest, read_features, sample_pairs, sample_segments, summarize
from .evaluation import MetricError, MetricsReport, auc, build_report, embed_videos, pair_distances, score, split_variance, wdr, write_report
from .model import CatModel, CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import NumericError
from .online import StreamClosed, feed, open_stream, read_stream
from .training import TrainConfig, Trainer, TrainingDivergence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_WARNED = 0, 2, 3, 4, 5

log = logging.getLogger("procver")


class UsageError(Exception):
    pass


def _json_arg(text: str | None) -> dict:
    """A JSON object given inline (starting with '{') or as a file path."""
    if text is None:
        return {}
    try:
        if text.lstrip().startswith("{"):
            obj = json.loads(text)
        else:
            obj = json.loads(Path(text).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {text}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON config {text!r}: {exc}")
    if not isinstance(obj, dict):
        raise UsageError(f"config {text!r} must be a JSON object")
    return obj


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("PROCVER_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"PROCVER_WORKERS must be an integer, got {env!r}")
    return 1


def _pairs_arg(text: str):
    if text == "all":
        return None
    try:
        n_pos, n_neg = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected n_pos,n_neg or 'all'")
    if n_pos < 1 or n_neg < 1:
        raise argparse.ArgumentTypeError("pair counts must be positive")
    return n_pos, n_neg


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _json_arg(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = GeneratorConfig.from_dict(raw)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator config: {exc}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    ds = generate_dataset(cfg, out, workers=_workers(args))
    print(f"wrote {len(ds.videos)} videos to {out}")
    print(f"{'split':<6} {'tasks':>6} {'procedures':>11} {'videos':>7} {'steps':>6}")
    for name, row in summarize(ds).items():
        print(f"{name:<6} {row['tasks']:>6} {row['procedures']:>11} {row['videos']:>7} {row['steps']:>6}")
    return EXIT_OK


def _model_config(raw: dict, ds) -> ModelConfig:
    raw = dict(raw)
    raw.setdefault("D_in", ds.dim)
    raw.setdefault("C", len(ds.train.procedures))
    try:
        return ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}")


def cmd_train(args) -> int:
    ds = load_manifest(Path(args.data) / "manifest.json")
    try:
        tcfg = TrainConfig.from_dict(_json_arg(args.train_config))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}")
    mraw = _json_arg(args.model_config)
    mraw.setdefault("K", tcfg.K)
    mcfg = _model_config(mraw, ds)
    out = Path(args.out)
    try:
        if args.resume:
            tr = Trainer.resume(ds, args.resume)
        else:
            tr = Trainer(ds, mcfg, tcfg)
    except ValueError as exc:
        raise UsageError(str(exc))
    tr.run(out)
    if tr.best_state is None:
        # no validation split: the final model doubles as the best one
        save_checkpoint(out / "best.ckpt", tr.model, extra={"epoch": tr.tcfg.epochs, "val_auc": None})
    last = tr.log.steps[-1]
    print(f"trained {tr.step} steps; final loss {last['total']:.4f} (cls {last['cls']:.4f}, seq {last['seq']:.4f})")
    if tr.best_auc >= 0:
        print(f"best validation AUC {100 * tr.best_auc:.2f}")
    print(f"checkpoints in {out}")
    return EXIT_OK


def _load_model(path: str) -> CatModel:
    return load_checkpoint(path).model


def cmd_eval(args) -> int:
    ds = load_manifest(Path(args.data) / "manifest.json")
    model = _load_model(args.checkpoint)
    n_train = len(ds.train.procedures)
    if model.cfg.C != n_train:
        raise DataError(f"checkpoint has C={model.cfg.C} classes, dataset has {n_train} training procedures")
    if model.cfg.D_in != ds.dim:
        raise DataError(f"checkpoint expects D_in={model.cfg.D_in}, dataset has dim {ds.dim}")
    split = ds.split(args.split)
    if not split:
        raise DataError(f"split {args.split!r} is empty")
    if args.pairs is None:
        pairs = all_pairs(split)
    else:
        pairs = sample_pairs(split, *args.pairs, np.random.default_rng(args.seed))
    workers = _workers(args)

    def distances(m):
        vids = {}
        for p in pairs:
            vids[p.a.video_id] = p.a
            vids[p.b.video_id] = p.b
        return pair_distances(pairs, embed_videos(m, ds, list(vids.values()), workers=workers))

    d = distances(model)
    rep = build_report(d, with_splits=args.splits, tau=args.tau)
    if args.variance:
        rep.variance = split_variance(model, ds, args.split, workers=workers)
    for path in args.curve:
        dc = distances(_load_model(path))
        rep.checkpoint_curve.append({"checkpoint": path, "wdr": wdr(dc), "auc": auc(dc)})
    rep.meta = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split, "pairs": "all" if args.pairs is None else list(args.pairs), "seed": args.seed}
    write_report(rep, args.out)
    print(rep.summary())
    return EXIT_OK


def cmd_score(args) -> int:
    if not args.cand:
        raise UsageError("score needs at least one --cand file")
    model = _load_model(args.checkpoint)
    K = model.cfg.K

    def emb(path):
        frames = read_features(path)
        if frames.shape[1] != model.cfg.D_in:
            raise DataError(f"{path}: dim {frames.shape[1]} differs from model D_in={model.cfg.D_in}")
        return model.embed(sample_segments(frames, K, "eval"))

    ref = emb(args.ref)
    rows = [(score(ref, emb(c)), c) for c in args.cand]
    rows.sort(key=lambda r: (-r[0], r[1]))
    for s, c in rows:
        print(f"{s:.6f}\t{c}")
    return EXIT_OK


def cmd_warn(args) -> int:
    model = _load_model(args.checkpoint)
    reference = read_features(args.reference)
    if reference.shape[1] != model.cfg.D_in:
        raise DataError(f"reference dim {reference.shape[1]} differs from model D_in={model.cfg.D_in}")
    state = open_stream(reference, model, window_k=args.k, warn_threshold=args.threshold, stride=args.stride)
    fh = sys.stdin.buffer if args.stream == "-" else open(args.stream, "rb")
    try:
        dim, chunks = read_stream(fh, chunk_frames=args.chunk)
        if dim != model.cfg.D_in:
            raise DataError(f"stream dim {dim} differs from model D_in={model.cfg.D_in}")
        emitted = 0
        for chunk in chunks:
            events = {ev.t: ev for ev in feed(state, chunk, model)}
            for t, d in state.history[emitted:]:
                print(json.dumps({"t": t, "distance": d}, sort_keys=True), flush=True)
                if t in events:
                    ev = events[t]
                    print(json.dumps({"event": "warning", "t": ev.t, "distance": ev.distance, "threshold": ev.threshold}, sort_keys=True), flush=True)
            emitted = len(state.history)
    finally:
        state.close()
        if fh is not sys.stdin.buffer:
            fh.close()
    return EXIT_WARNED if state.warned_at is not None else EXIT_OK


def cmd_report(args) -> int:
    reps = []
    for path in args.inputs:
        try:
            reps.append((path, MetricsReport.from_dict(json.loads(Path(path).read_text()))))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise DataError(f"{path}: not a metrics report ({exc})")
    split_names = sorted({k for _, r in reps for k in r.per_split_auc})
    header = ["report", "auc", "wdr", "tau"] + [f"auc_{s}" for s in split_names]
    rows = []
    for path, r in reps:
        rows.append([path, f"{100 * r.auc:.2f}", f"{r.wdr:.4f}", f"{r.tau:.4f}"] + [f"{100 * r.per_split_auc[s]:.2f}" if s in r.per_split_auc else "" for s in split_names])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="procver", description="Procedure-aware video verification on frame-feature sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def workers_flag(sp):
        sp.add_argument("--workers", type=int, default=None, help="worker threads (default: $PROCVER_WORKERS or 1); never changes outputs")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="generator config as a JSON file or inline JSON object (default: built-in defaults)")
    g.add_argument("--out", required=True, help="output directory for manifest.json and features/")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    workers_flag(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    t.add_argument("--model-config", help="model config JSON (file or inline); D_in and C default to the data")
    t.add_argument("--train-config", help="training config JSON (file or inline)")
    t.add_argument("--out", required=True, help="directory for best.ckpt, last.ckpt and train_log.jsonl")
    t.add_argument("--resume", help="resume from a full checkpoint written by a previous run (configs are taken from it)")
    workers_flag(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on verification pairs")
    e.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    e.add_argument("--checkpoint", required=True, help="model checkpoint")
    e.add_argument("--pairs", type=_pairs_arg, default=None, help="n_pos,n_neg sampled pairs, or 'all' (default: all)")
    e.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to evaluate (default: test)")
    e.add_argument("--splits", action="store_true", help="add alter-number / alter-order AUC")
    e.add_argument("--variance", action="store_true", help="add intra/inter procedure embedding variance")
    e.add_argument("--curve", nargs="*", default=[], metavar="CKPT", help="extra checkpoints for the WDR-vs-AUC curve")
    e.add_argument("--tau", type=float, help="fixed decision threshold (default: equal error rate)")
    e.add_argument("--seed", type=int, default=0, help="pair sampling seed (default: 0)")
    e.add_argument("--out", required=True, help="report JSON path; CSV curves are written next to it")
    workers_flag(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="cosine scores of candidate videos against a reference")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--ref", required=True, help="reference PVFT feature file")
    s.add_argument("--cand", nargs="*", default=[], help="candidate PVFT feature files")
    s.set_defaults(func=cmd_score)

    w = sub.add_parser("warn", help="online early warning over a feature stream")
    w.add_argument("--checkpoint", required=True, help="model checkpoint")
    w.add_argument("--reference", required=True, help="complete reference PVFT file")
    w.add_argument("--stream", required=True, help="PVFT stream file, or '-' for stdin")
    w.add_argument("--k", type=int, default=30, help="half window in frames (default: 30)")
    w.add_argument("--threshold", type=float, required=True, help="warning threshold on the windowed distance")
    w.add_argument("--stride", type=int, default=25, help="frames between evaluations (default: 25)")
    w.add_argument("--chunk", type=int, default=25, help="frames read per chunk (default: 25)")
    w.set_defaults(func=cmd_warn)

    r = sub.add_parser("report", help="tabulate one or more eval reports")
    r.add_argument("inputs", nargs="+", help="report JSON files")
    r.add_argument("--out", help="also write the table as CSV")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "k", 0) < 0 or getattr(args, "stride", 1) < 1 or getattr(args, "chunk", 1) < 1:
        parser.error("--k must be >= 0, --stride and --chunk >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"procver {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, NumericError) as exc:
        print(f"procver {args.command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, MetricError, StreamClosed, OSError) as exc:
        print(f"procver {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
