"""``covernet`` command line: prepare, train, evaluate, predict, project, gradcheck.

Exit codes: 0 success, 2 data-protocol violation, 3 parse error,
4 I/O or decode error, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import classes, data, gradcheck, metrics, projection, synthetic
from .config import load_config
from .errors import CovernetError, DataProtocolError, ImageDecodeError

log = logging.getLogger("covernet")

EXIT_OK, EXIT_PROTOCOL, EXIT_PARSE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5


@contextlib.contextmanager
def _thread_limit(threads):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def _write(path, payload):
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(payload)


def _read_bytes(path, what):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read {what} {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args):
    cfg = load_config(args.config) if args.config else None
    manifest = args.manifest or (cfg and cfg.manifest)
    class_table_path = args.class_table or (cfg and cfg.classTable)
    out = args.out or (cfg and cfg.splitDir)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    if not manifest or not out:
        raise DataProtocolError("prepare needs --manifest and --out (or a config with manifest/splitDir)")
    table = (data.parse_class_table(_read_bytes(class_table_path, "class table"))
             if class_table_path else classes.DEFAULT_CLASS_TABLE)
    records = data.parse_manifest(_read_bytes(manifest, "manifest"), table)
    include = [int(c) for c in args.include.split(",")] if args.include else None
    split = data.prepare(records, seed, args.per_class, args.class_count, include, args.train_frac)
    written = data.save_split(out, split)
    print(f"train={len(split.train)} test={len(split.test)} classes={len(split.label_map)} "
          f"perClass={split.per_class} seed={seed}")
    for cid, n in sorted(split.excluded.items()):
        print(f"excluded {table[cid]!r}: {n} books")
    log.info("wrote %s to %s", ", ".join(written), out)
    return EXIT_OK


def cmd_train(args):
    from .training import train

    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    cfg = load_config(args.config, **overrides)
    cfg.require_paths("splitDir", dirs=("checkpointDir",))
    if cfg.imageRoot:
        cfg.require_paths("imageRoot")
    if cfg.pretrained:
        cfg.require_paths("pretrained")
    started = time.perf_counter()

    def progress(step, loss, rate):
        if args.verbose and (step % args.log_every == 0):
            print(f"iter {step} loss {loss:.4f} lr {rate:g}", flush=True)

    last = train(cfg, resume=args.resume, threads=args.threads, until=args.until, progress=progress)
    print(f"checkpoint {last} ({time.perf_counter() - started:.1f}s)")
    return EXIT_OK


def _parse_checkpoint_args(values):
    out = []
    for v in values:
        label, sep, path = v.partition("=")
        if not sep:
            label, path = "", v
        out.append((label, path))
    return out


def cmd_evaluate(args):
    from .training import Model

    cfg = load_config(args.config)
    cfg.require_paths("splitDir")
    split = data.load_split(cfg.splitDir)
    os.makedirs(args.out, exist_ok=True)
    reports = {}
    names = None
    for label, path in _parse_checkpoint_args(args.checkpoint):
        model = Model.load(path)
        if len(model.class_names) != len(split.label_map) or model.class_names != split.label_map.class_names:
            raise DataProtocolError(
                f"{path}: checkpoint head has {len(model.class_names)} classes, split has {len(split.label_map)}"
            )
        records = split.test if args.part == "test" else split.train
        probs, kept = model.predict_records(records, cfg.imageRoot or None, args.batch_size, args.threads)
        preds = metrics.PredictionSet(probs, split.label_map.encode(kept), split.label_map.class_names)
        report = metrics.per_class_report(preds)
        label = label or {"lenet": "LeNet", "alexnet30": "AlexNet"}[model.store.meta["model"]]
        reports[label] = report
        names = split.label_map.class_names
        stem = label.lower()
        _write(os.path.join(args.out, f"{stem}_report.csv"), metrics.report_csv(report))
        _write(os.path.join(args.out, f"{stem}_overall.csv"), metrics.overall_csv(report))
        _write(os.path.join(args.out, f"{stem}_confusion.csv"), metrics.confusion_csv(report))
        _write(os.path.join(args.out, f"{stem}_confusion_pairs.csv"), _confusion_pairs(report, names))
        print(f"[{label}] " + metrics.render_summary(report).replace("\n", "  ").strip())
    table = metrics.render_table(reports)
    _write(os.path.join(args.out, "table.txt"), table)
    sys.stdout.write(table)
    return EXIT_OK


def _confusion_pairs(report, names, top=3):
    lines = ["source,target,count"]
    for c in range(len(names)):
        for target, count in metrics.top_confusions(report, c)[:top]:
            lines.append(",".join(json.dumps(x) if isinstance(x, str) else str(x)
                                  for x in (names[c], names[target], count)))
    return "\n".join(lines) + "\n"


def cmd_predict(args):
    from .training import Model

    model = Model.load(args.checkpoint)
    loader = model.loader(on_error="raise")
    batch, _ = loader.load([data.BookRecord("predict", args.image, "", "", -1, "")])
    probs = model.predict(batch)[0].astype(np.float64)
    k = min(args.k, len(model.class_names))
    top = metrics.top_k_classes(probs, k)
    pairs = [(model.class_names[i], float(probs[i])) for i in top]
    if args.json:
        print(json.dumps([{"class": n, "probability": p} for n, p in pairs]))
    else:
        for name, p in pairs:
            print(f"{p:.6f}\t{name}")
    return EXIT_OK


def cmd_project(args):
    from .training import Model

    cfg = load_config(args.config)
    cfg.require_paths("splitDir")
    split = data.load_split(cfg.splitDir)
    model = Model.load(args.checkpoint)
    records = split.test if args.part == "test" else split.train
    probs, kept = model.predict_records(records, cfg.imageRoot or None, args.batch_size, args.threads)
    labels = split.label_map.encode(kept)
    proj = projection.pca_project(probs, labels)
    csv_bytes, svg_bytes = projection.export_projection(proj, model.class_names)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "projection.csv"), csv_bytes)
    _write(os.path.join(args.out, "projection.svg"), svg_bytes)
    print(f"points={len(kept)} axes={len(model.class_names)} "
          f"variance=({proj.explained_variance[0]:.6g}, {proj.explained_variance[1]:.6g})")
    return EXIT_OK


def cmd_gradcheck(args):
    started = time.perf_counter()
    results = gradcheck.run_suite(args.seed, args.inject_conv_fault)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<26} max rel err {r.max_rel_error:.3e}")
    print(f"{len(results) - failed}/{len(results)} passed in {time.perf_counter() - started:.1f}s")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_synth(args):
    table = classes.DEFAULT_CLASS_TABLE
    ids = sorted(table)[: args.classes]
    counts = {cid: args.per_class for cid in ids}
    sub = {cid: table[cid] for cid in ids}
    records = synthetic.write_dataset(args.out, counts, args.height, args.width, args.seed, sub)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="covernet", description="Book-cover genre CNN toolkit")
    p.add_argument("--threads", type=int, default=1,
                   help="image decode threads (results do not depend on it)")
    p.add_argument("--blas-threads", type=int, default=1,
                   help="BLAS threads; values above 1 may change low-order bits of training results")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="balance and split a manifest")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--class-table")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="split directory")
    s.add_argument("--per-class", type=int, default=classes.PER_CLASS)
    s.add_argument("--class-count", type=int, default=classes.EXPERIMENT_CLASSES)
    s.add_argument("--train-frac", type=float, default=0.9)
    s.add_argument("--include", help="comma-separated class ids (default: every class large enough)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--iterations", type=int, help="override the configured iteration count")
    s.add_argument("--until", type=int, help="stop early at this iteration (for staged runs)")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="top-k report on the test split")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", action="append", required=True, metavar="[LABEL=]PATH")
    s.add_argument("--out", default="report")
    s.add_argument("--part", choices=("test", "train"), default="test")
    s.add_argument("--batch-size", type=int, default=64)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="top-k genres for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("-k", type=int, default=5)
    s.add_argument("--json", action="store_true", help="single-line JSON output")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("project", help="PCA projection of softmax outputs (CSV + SVG)")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", default="projection")
    s.add_argument("--part", choices=("test", "train"), default="test")
    s.add_argument("--batch-size", type=int, default=64)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("gradcheck", help="finite-difference check of every kernel")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject-conv-fault", type=float, default=0.0, metavar="DELTA",
                   help="add DELTA to analytic conv gradients (the check must then fail)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic cover dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=30)
    s.add_argument("--per-class", type=int, default=10)
    s.add_argument("--height", type=int, default=56)
    s.add_argument("--width", type=int, default=56)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.blas_threads):
            return args.func(args)
    except CovernetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
