"""``cact`` command line: generate | pretrain | train | infer | report | dataset-validate.

Each verb writes a fresh timestamped directory under ``out_dir`` holding the
resolved config, a log file, and the verb's artifacts. Failures print one
JSON line to stderr and exit nonzero:

    1  runtime or data error
    2  invalid configuration (the offending key is named)
    3  missing checkpoint
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .context_net import ContextModel, load_model, save_model
from .data import CLASS_NAMES, derive_patch_dataset, generate, ingest, validate
from .errors import CactError, ConfigurationError
from .evaluation import accuracy, rank_cells, read_matrix_csv, render_report
from .inference import grade_image, overlay_data, plan_windows, write_window_csv
from .local_repr import grid_shape, pretrain_patch_classifier
from .training import STRATEGIES, History, fit, predict_images, run_folds, train

log = logging.getLogger("cact")

EXIT_ERROR, EXIT_CONFIG, EXIT_CHECKPOINT = 1, 2, 3


class CliFailure(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


# ---------------------------------------------------------------------------
# run directory plumbing
# ---------------------------------------------------------------------------
def make_run_dir(cfg: RunConfig, verb: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = Path(cfg.out_dir) / f"{verb}-{stamp}"
    run.mkdir(parents=True, exist_ok=False)
    (run / "config.json").write_text(cfg.to_json() + "\n")
    return run


def setup_logging(run: Path | None) -> None:
    level = os.environ.get("CACT_LOG", "WARNING").upper()
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_cact", False):
            root.removeHandler(h)
            h.close()
    root.setLevel(getattr(logging, level, logging.WARNING))
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stderr)]
    if run is not None:
        handlers.append(logging.FileHandler(run / "run.log"))
    for h in handlers:
        h.setFormatter(fmt)
        h._cact = True
        root.addHandler(h)


def _require_file(path, what: str) -> Path:
    if not path:
        raise CliFailure(EXIT_CHECKPOINT, "missing_checkpoint", f"no {what} given", path=None)
    p = Path(path)
    if not p.is_file():
        raise CliFailure(EXIT_CHECKPOINT, "missing_checkpoint", f"{what} not found: {p}", path=str(p))
    return p


def _dataset(cfg: RunConfig):
    return ingest(cfg.data_root, cfg.patch_size)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------
def cmd_generate(cfg: RunConfig, run: Path) -> dict:
    root = Path(cfg.data_root)
    if (root / "manifest.csv").exists():
        raise CliFailure(EXIT_ERROR, "exists", f"dataset already present at {root}", path=str(root))
    generate(root, cfg.synthetic_spec(), splits=dict(cfg.per_class))
    ds = ingest(root)
    summary = {"data_root": str(root), "images": len(ds), "class_histogram": ds.class_histogram()}
    (run / "dataset.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_validate(cfg: RunConfig, run: Path) -> dict:
    issues = validate(cfg.data_root, cfg.patch_size)
    (run / "issues.txt").write_text("".join(f"{i}\n" for i in issues))
    if issues:
        raise CliFailure(EXIT_ERROR, "invalid_dataset", f"{len(issues)} issue(s); first: {issues[0]}",
                         issues=len(issues))
    return {"data_root": cfg.data_root, "issues": 0}


def cmd_pretrain(cfg: RunConfig, run: Path) -> dict:
    ds = _dataset(cfg)
    arch = cfg.architecture()
    model = ContextModel(arch)
    patches, labels = derive_patch_dataset(ds.subset(cfg.train_folds), cfg.patch_size, cfg.pretrain_cap,
                                           seed=cfg.seed)
    result = pretrain_patch_classifier(model.encoder, patches, labels, arch.n_classes,
                                       epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.seed)
    digest = checkpoint.save(run / "encoder.ckpt", model.encoder.state_dict())
    with open(run / "pretrain_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss"])
        writer.writerows([e, repr(l)] for e, l in enumerate(result.losses))
    return {"checkpoint": str(run / "encoder.ckpt"), "sha256": digest, "patches": int(labels.size)}


def cmd_train(cfg: RunConfig, run: Path) -> dict:
    ds = _dataset(cfg)
    tc = cfg.train_config()
    pretrained = None
    if cfg.pretrained:
        pretrained = checkpoint.load(_require_file(cfg.pretrained, "pretrained encoder checkpoint"))
    if cfg.kfold >= 2:
        items = list(ds)
        configs = [(kind, cfg.architecture(), cfg.strategy_obj(kind)) for kind in (cfg.strategies or [cfg.strategy])]
        table = run_folds(items, cfg.kfold, configs, tc, workers=cfg.workers)
        table.write_csv(run / "fold_table.csv")
        return {"fold_table": str(run / "fold_table.csv"),
                "mean": {name: table.summary(name)[0] for name in table.rows}}
    tr, va, te = ds.subset(cfg.train_folds), ds.subset(cfg.val_folds), ds.subset(cfg.test_folds)
    model, history = fit(cfg.architecture(), cfg.strategy_obj(), tr, va, tc, pretrained=pretrained)
    history.write_csv(run / "history.csv")
    digest = save_model(run / "model.ckpt", model)
    out = {"checkpoint": str(run / "model.ckpt"), "sha256": digest,
           "best_val_accuracy": max(history.val_accuracy)}
    if te:
        out["test_accuracy"] = accuracy(predict_images(model, te).argmax(axis=1), [it.label for it in te])
    return out


def cmd_infer(cfg: RunConfig, run: Path) -> dict:
    path = _require_file(cfg.checkpoint, "checkpoint")
    if not Path(str(path) + ".json").is_file():
        raise CliFailure(EXIT_CHECKPOINT, "missing_checkpoint", f"architecture sidecar not found: {path}.json",
                         path=str(path) + ".json")
    model = load_model(path)
    ds = _dataset(cfg)
    items = ds.subset(cfg.test_folds)
    p = model.arch.extractor.patch_size
    (run / "windows").mkdir()
    vote_maps = {}
    rows = []
    for it in items:
        M, N = grid_shape(*it.pixels.shape[1:], p)
        plan = plan_windows(M, N, min(cfg.window_cells, M, N), cfg.stride_cells)
        result = grade_image(it.pixels, model, plan)
        write_window_csv(run / "windows" / f"{it.id}.csv", result.windows)
        vote_maps[it.id] = overlay_data(result, p)
        v = result.vote
        rows.append({"id": it.id, "truth": CLASS_NAMES[it.label], "outcome": v.outcome,
                     "tie": int(v.tie), "windows": len(v.window_classes),
                     **{f"votes_{CLASS_NAMES[c]}": v.tally.get(c, 0) for c in range(1, len(CLASS_NAMES))}})
    fields = ["id", "truth", "outcome", "tie", "windows"] + [f"votes_{n}" for n in CLASS_NAMES[1:]]
    with open(run / "votes.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    (run / "overlays.json").write_text(json.dumps(vote_maps, indent=1, sort_keys=True) + "\n")
    hits = [r["outcome"] == r["truth"] or (r["outcome"] == "no-glandular-region" and r["truth"] == "background")
            for r in rows]
    return {"votes": str(run / "votes.csv"), "images": len(rows),
            "accuracy": float(np.mean(hits)) if rows else None}


def _history_matrix(histories: list[History]) -> tuple[list[str], list[str], np.ndarray]:
    """Best validation accuracy (percent) per (fold/seed row, strategy column)."""
    best: dict[tuple[str, str], float] = {}
    for hist in histories:
        for r in hist.rows:
            row = f"fold={r['fold'] or '-'} seed={r['seed']}"
            key = (row, r["strategy"])
            best[key] = max(best.get(key, -1.0), 100.0 * r["val_accuracy"])
    rows = sorted({k[0] for k in best})
    cols = [s for s in STRATEGIES if any(k[1] == s for k in best)]
    missing = [(r, c) for r in rows for c in cols if (r, c) not in best]
    if missing:
        raise CliFailure(EXIT_ERROR, "incomplete_histories", f"no history for {missing[0][1]} at {missing[0][0]}")
    return rows, cols, np.array([[best[(r, c)] for c in cols] for r in rows])


def cmd_report(cfg: RunConfig, run: Path, inputs=()) -> dict:
    paths = [Path(p) for p in (list(inputs) or cfg.report_inputs)]
    if not paths:
        raise CliFailure(EXIT_ERROR, "no_inputs", "report needs history, matrix, or overlay files")
    for p in paths:
        if not p.is_file():
            raise CliFailure(EXIT_ERROR, "missing_input", f"report input not found: {p}", path=str(p))
    histories, matrices, vote_maps = [], [], {}
    for p in paths:
        if p.suffix == ".json":
            vote_maps.update(json.loads(p.read_text()))
            continue
        header = p.read_text().split("\n", 1)[0]
        if header.startswith("label,"):
            matrices.append(read_matrix_csv(p))
        else:
            histories.append(History.read_csv(p))
    if matrices:
        if len(matrices) > 1 or histories:
            raise CliFailure(EXIT_ERROR, "mixed_inputs", "give either one matrix CSV or history CSVs")
        rows, cols, values = matrices[0]
    elif histories:
        rows, cols, values = _history_matrix(histories)
    else:
        raise CliFailure(EXIT_ERROR, "no_inputs", "report needs a matrix or history CSV besides overlays")
    table = rank_cells(values, rows, cols)
    written = render_report(table, run, histories, vote_maps)
    return {"columns": cols, "rank_sums": table.rank_sums, "files": sorted(str(p) for p in written.values())}


VERBS = {
    "generate": cmd_generate,
    "dataset-validate": cmd_validate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "infer": cmd_infer,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------
def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # verb-level copies use SUPPRESS so they never clobber flags given before the verb
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON run config", **kw)
    parser.add_argument("--seed", type=int, **kw)
    parser.add_argument("--out", help="parent directory for run directories", **kw)
    parser.add_argument("--workers", type=int, **kw)
    parser.add_argument("--data", help="dataset directory (data_root)", **kw)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key; VALUE is parsed as JSON when possible", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cact")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        _global_flags(p, suppress=True)
        if verb == "infer":
            p.add_argument("--checkpoint")
        if verb == "train":
            p.add_argument("--pretrained")
        if verb == "report":
            p.add_argument("inputs", nargs="*")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}", key=key)
        cfg.override(key, value)
    flags = {"seed": args.seed, "out_dir": args.out, "workers": args.workers, "data_root": args.data,
             "checkpoint": getattr(args, "checkpoint", None), "pretrained": getattr(args, "pretrained", None)}
    for key, value in flags.items():
        if value is not None:
            cfg.override(key, value)
    cfg.architecture()  # surface inconsistent model settings before any work starts
    return cfg


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigurationError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key)
    except OSError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=None)
    run = make_run_dir(cfg, args.verb)
    setup_logging(run)
    try:
        if args.verb == "report":
            summary = cmd_report(cfg, run, args.inputs)
        else:
            summary = VERBS[args.verb](cfg, run)
    except CliFailure as exc:
        log.error("%s", exc)
        return _fail(exc.code, exc.kind, str(exc), run=str(run), **exc.extra)
    except ConfigurationError as exc:
        log.error("%s", exc)
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key, run=str(run))
    except (CactError, OSError) as exc:
        log.error("%s", exc)
        return _fail(EXIT_ERROR, type(exc).__name__, " ".join(str(exc).split()), run=str(run))
    summary = {"run": str(run), **summary}
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
