"""Command-line entry point: ``hesrn {train,eval,check,bench,synth}``.

Every config key is also a ``--key value`` flag (underscores or dashes).  Reports
go to stdout as ``key<TAB>value`` lines followed by a ``# summary`` block, or as
one JSON object when ``report_format = json``.

Exit codes: 0 ok, 1 check failure, 2 config error (including unreadable or
incompatible checkpoints), 3 data error (missing/invalid graph, unwritable
output), 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import physical_memory, run_bench
from .checks import SUITES, run_suites
from .config import RunConfig, apply_overrides, emit_config, known_keys, load_config
from .errors import ConfigError, DivergenceError, ParameterError, ParseError, ShapeError, ValidationError
from .graph import HeteroGraph, SynthSpec, load_graph, save_graph, synth_graph
from .model import GraphContext
from .train import CheckpointError, TrainReport, check_compatible, evaluate, load_checkpoint, save_checkpoint, split_labels, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("hesrn")


class DataError(Exception):
    """Input or output path problem; maps to exit code 3."""


REPORT_FORMATS = ("tsv", "json")


def _emit(out, fmt, pairs, summary=None):
    if fmt == "json":
        doc = {key: _plain(value) for key, value in pairs}
        doc["summary"] = {key: _plain(value) for key, value in summary or []}
        out.write(json.dumps(doc, sort_keys=False) + "\n")
        out.flush()
        return
    for key, value in pairs:
        out.write(f"{key}\t{_fmt(value)}\n")
    if summary:
        out.write("# summary\n")
        for key, value in summary:
            out.write(f"{key}\t{_fmt(value)}\n")
    out.flush()


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, int, float, str, dict)) or value is None:
        return value
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# argument handling


def _common(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true", default=default)
    for key in known_keys():
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        common.add_argument(*flags, dest=f"set_{key}", metavar="VALUE", default=default)
    return common


def build_parser() -> argparse.ArgumentParser:
    # flags are accepted before or after the command; the per-command copies
    # suppress their defaults so they do not clobber values given up front
    sub_common = _common(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(
        prog="hesrn", description="Heterogeneous slot-aware retentive network", parents=[_common(None)]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[sub_common], help="train and write report, metric log and checkpoint")
    sub.add_parser("eval", parents=[sub_common], help="test-split F1 of a checkpoint on a graph")
    p = sub.add_parser("check", parents=[sub_common], help="run self-check suites")
    p.add_argument("suites", nargs="*", help=f"subset of {', '.join(SUITES)}")
    sub.add_parser("bench", parents=[sub_common], help="forward-time scaling against dense attention")
    p = sub.add_parser("synth", parents=[sub_common], help="write a synthetic majority-neighbor-type graph")
    p.add_argument("path", nargs="?", help="output file (default <out>/graph.hgraph)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
    cfg = apply_overrides(cfg, overrides)
    if cfg.report_format not in REPORT_FORMATS:
        raise ConfigError(f"report_format must be one of {', '.join(REPORT_FORMATS)}, got {cfg.report_format!r}")
    return cfg


# ---------------------------------------------------------------------------
# commands


def _read_graph(path: str) -> HeteroGraph:
    if not path:
        raise DataError("no graph given (set graph = <path> or pass --graph)")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"graph file not found: {p}")
    try:
        return load_graph(p)
    except (ParseError, ValidationError) as exc:
        raise DataError(f"{p}: {exc}") from None


def _prepare_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {p}: {exc}") from None
    probe = p / ".write-test"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {p} is not writable: {exc}") from None
    return p


def report_pairs(report: TrainReport) -> list[tuple[str, object]]:
    return [
        ("epochs", report.epochs),
        ("num_parameters", report.num_parameters),
        ("initial_val_micro_f1", report.initial_val_micro_f1),
        ("initial_val_macro_f1", report.initial_val_macro_f1),
        ("best_epoch", report.best_epoch),
        ("final_train_loss", report.train_loss[-1] if report.train_loss else float("nan")),
        ("best_val_micro_f1", max([report.initial_val_micro_f1, *report.val_micro_f1])),
        ("train_seconds", float(sum(report.epoch_seconds))),
        ("test_micro_f1", report.test_micro_f1),
        ("test_macro_f1", report.test_macro_f1),
    ]


def metric_log(report: TrainReport) -> str:
    """Per-epoch metrics without timing, so identical runs give identical files."""
    lines = ["epoch\ttrain_loss\tval_micro_f1\tval_macro_f1"]
    lines.append(f"0\tnan\t{report.initial_val_micro_f1!r}\t{report.initial_val_macro_f1!r}")
    for i, (loss, mi, ma) in enumerate(zip(report.train_loss, report.val_micro_f1, report.val_macro_f1), start=1):
        lines.append(f"{i}\t{loss!r}\t{mi!r}\t{ma!r}")
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig, out=sys.stdout) -> int:
    cfg.model.validate()
    g = _read_graph(cfg.graph)
    run_dir = _prepare_dir(cfg.out)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else run_dir / "model.ckpt"
    _prepare_dir(ckpt.parent)
    try:
        report, model = train(cfg.model, g)
    except ValidationError as exc:
        raise DataError(f"{cfg.graph}: {exc}") from None
    pairs = report_pairs(report)
    (run_dir / "config.txt").write_text(emit_config(cfg))
    (run_dir / "report.tsv").write_text("".join(f"{k}\t{_fmt(v)}\n" for k, v in pairs))
    (run_dir / "metrics.tsv").write_text(metric_log(report))
    save_checkpoint(model, ckpt)
    _emit(
        out,
        cfg.report_format,
        [("command", "train"), ("graph", cfg.graph), ("checkpoint", ckpt), *pairs[:-2]],
        [("test_micro_f1", report.test_micro_f1), ("test_macro_f1", report.test_macro_f1)],
    )
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out=sys.stdout) -> int:
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ckpt"
    model = load_checkpoint(ckpt)
    g = _read_graph(cfg.graph)
    check_compatible(model, g)
    try:
        test_ids, test_y = split_labels(g, "test")
    except ValidationError as exc:
        raise DataError(str(exc)) from None
    ctx = GraphContext.build(g, model.cfg, test_ids)
    scores = evaluate(model, ctx, test_ids, test_y)
    _emit(
        out,
        cfg.report_format,
        [("command", "eval"), ("checkpoint", ckpt), ("graph", cfg.graph), ("test_nodes", test_ids.size)],
        [("test_micro_f1", scores["micro_f1"]), ("test_macro_f1", scores["macro_f1"])],
    )
    return EXIT_OK


def cmd_check(cfg: RunConfig, suites=None, out=sys.stdout) -> int:
    suites = list(suites or cfg.check_suites)
    results = run_suites(suites, grad_tol=cfg.grad_tol, equiv_tol=cfg.equiv_tol, gamma=cfg.check_gamma)
    failed = [f"{r.suite}.{r.name}" for r in results if not r.passed]
    if cfg.report_format == "tsv":
        for r in results:
            out.write(r.line() + "\n")
        listing = []
    else:
        listing = [("checks_run", [{"check": f"{r.suite}.{r.name}", "passed": r.passed, "detail": r.detail}
                                   for r in results])]
    _emit(
        out,
        cfg.report_format,
        listing,
        [("checks", len(results)), ("passed", len(results) - len(failed)), ("failed", len(failed)),
         ("failures", ",".join(failed) or "-")],
    )
    return EXIT_CHECK if failed else EXIT_OK


def cmd_bench(cfg: RunConfig, out=sys.stdout) -> int:
    run_dir = _prepare_dir(cfg.out)
    budget = int(cfg.bench_memory_fraction * physical_memory())
    report = run_bench(
        cfg.bench_sizes, seq_len=cfg.bench_seq_len, reps=cfg.bench_reps, hidden=cfg.bench_hidden,
        seed=cfg.model.seed, memory_budget=budget,
    )
    rows = ["n\tnum_nodes\tnum_edges\tretention_seconds\tattention_seconds\tretention_bytes\tattention_bytes"]
    pairs = [("command", "bench"), ("seq_len", report.seq_len), ("reps", report.reps), ("memory_budget_bytes", budget)]
    for p in report.points:
        att = "OOM" if p.attention_seconds is None else repr(p.attention_seconds)
        rows.append(
            f"{p.n}\t{p.num_nodes}\t{p.num_edges}\t{p.retention_seconds!r}\t{att}\t{p.retention_bytes}\t{p.attention_bytes}"
        )
        pairs += [
            (f"n{p.n}.retention_seconds", p.retention_seconds),
            (f"n{p.n}.attention_seconds", att),
            (f"n{p.n}.retention_bytes", p.retention_bytes),
            (f"n{p.n}.attention_bytes", p.attention_bytes),
        ]
    (run_dir / "bench.tsv").write_text("\n".join(rows) + "\n")
    _emit(
        out,
        cfg.report_format,
        pairs,
        [("retention_slope", report.retention_slope), ("attention_slope", report.attention_slope),
         ("total_seconds", report.total_seconds)],
    )
    return EXIT_OK


def cmd_synth(cfg: RunConfig, path=None, out=sys.stdout) -> int:
    target = Path(path) if path else Path(cfg.out) / "graph.hgraph"
    spec = SynthSpec(
        num_types=cfg.synth_types,
        nodes_per_type=cfg.synth_nodes_per_type,
        feature_dim=cfg.synth_feature_dim,
        avg_degree=cfg.synth_avg_degree,
        skew=cfg.synth_skew,
        split=tuple(cfg.synth_split),
        seed=cfg.model.seed,
    )
    if len(spec.split) != 3 or abs(sum(spec.split) - 1.0) > 1e-9 or min(spec.split) < 0:
        raise ConfigError(f"synth_split must be three non-negative fractions summing to 1, got {spec.split}")
    g = synth_graph(spec)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        save_graph(g, target)
    except OSError as exc:
        raise DataError(f"cannot write {target}: {exc}") from None
    counts = np.bincount(g.labels[g.labeled], minlength=g.num_classes)
    _emit(
        out,
        cfg.report_format,
        [("command", "synth"), ("path", target), ("num_nodes", g.num_nodes), ("num_edges", g.edges.shape[0]),
         ("num_types", g.num_types), ("class_counts", counts.tolist())],
        [("path", target)],
    )
    return EXIT_OK


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "check":
            return cmd_check(cfg, args.suites, out)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        return cmd_synth(cfg, args.path, out)
    except (ConfigError, ParameterError, CheckpointError, ShapeError) as exc:
        print(f"hesrn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"hesrn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"hesrn: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
