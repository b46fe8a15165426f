"""Command-line experiment runner.

Subcommands::

    streamanchor generate     --config PATH --out DIR [--seed N]
    streamanchor train        --config PATH --out DIR [--seed N] [--dataset DIR]
    streamanchor eval         --checkpoint FILE --dataset DIR [--config PATH] [--out DIR]
    streamanchor compare      --config PATH --out DIR [--seed N] [--seeds N]
    streamanchor plot-weights --T N --anchor A [--out FILE]

``--out`` falls back to the config's ``out_dir`` and then to the
``STREAMANCHOR_OUT`` environment variable.

Exit codes: 0 success, 2 config error, 3 runtime or training failure,
4 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as datamod
from .anchors import TaskKind
from .config import ConfigError, RunConfig, default_run_config, dump_config, load_config
from .losses import LossSpec, anchor_weights
from .metrics import EvalReport, evaluate_scores
from .models import ArchitectureError, CheckpointError, build, load_checkpoint, save_checkpoint
from .numerics import ShapeError
from .trainer import TrainConfig, TrainingError, predict_sequences, train

log = logging.getLogger("streamanchor")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DATA = 0, 2, 3, 4
OUT_ENV = "STREAMANCHOR_OUT"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- shared pieces -------------------------------------------------------------

def dataset_checksum(path: Path | str) -> str:
    """sha256 over the manifest and the sequence blob."""
    h = hashlib.sha256()
    for name in (datamod.MANIFEST_NAME, datamod.BLOB_NAME):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def seed_offsets(cfg: RunConfig, n_seeds: int) -> list[RunConfig]:
    """Configs for ``n_seeds`` repeats; repeat i shifts the data and model seeds by i."""
    return [replace(cfg.with_seed(cfg.seed + i), gen=replace(cfg.gen, seed=cfg.gen.seed + i))
            for i in range(n_seeds)]


def materialise(cfg: RunConfig, out: Path) -> tuple[datamod.Dataset, str]:
    """Generate, split and write the dataset for ``cfg``; read it back from disk."""
    ds = datamod.split(datamod.generate(cfg.gen), cfg.ratios, seed=cfg.gen.seed)
    datamod.write(ds, out)
    return datamod.read(out), dataset_checksum(out)


def train_one(cfg: RunConfig, ds: datamod.Dataset, spec: LossSpec):
    model = build(cfg.model)
    tc = replace(cfg.train, loss=spec)
    return train(ds, model, tc)


def evaluate_model(model, ds: datamod.Dataset, target_fpr: float,
                   task: TaskKind) -> EvalReport:
    val, test = ds.subset("validation"), ds.subset("test")
    if not val or not test:
        raise ValueError("evaluation needs nonempty validation and test splits")
    return evaluate_scores(val, predict_sequences(model, val), test,
                           predict_sequences(model, test), target_fpr, task)


@dataclass
class RunRow:
    loss: str
    seed: int
    report: EvalReport | None
    error: str | None = None


def run_sweep(cfg: RunConfig, n_seeds: int, work: Path,
              specs: Sequence[LossSpec] | None = None) -> tuple[list[RunRow], list[str]]:
    """Train and evaluate every loss on every seed repeat.

    Returns the rows (ordered by seed, then by the loss list) and provenance
    lines naming each dataset checksum and model seed.
    """
    specs = list(specs or cfg.losses)
    rows: list[RunRow] = []
    prov: list[str] = []
    for rcfg in seed_offsets(cfg, n_seeds):
        ds, digest = materialise(rcfg, work / f"data-seed{rcfg.gen.seed}")
        prov.append(f"data_seed={rcfg.gen.seed} model_seed={rcfg.model.seed} "
                    f"dataset_sha256={digest}")
        for spec in specs:
            t0 = time.perf_counter()
            try:
                model, hist = train_one(rcfg, ds, spec)
                report = evaluate_model(model, ds, rcfg.target_fpr, rcfg.task)
                rows.append(RunRow(spec.kind.label, rcfg.seed, report))
                log.info("seed %d %s: auc %.4f latency %.4f (%.1fs, best epoch %d)",
                         rcfg.seed, spec.kind.label, report.auc, report.latency_mean,
                         time.perf_counter() - t0, hist.best_epoch)
            except (TrainingError, ArchitectureError, ShapeError, ValueError) as exc:
                log.error("seed %d %s failed: %s", rcfg.seed, spec.kind.label, exc)
                rows.append(RunRow(spec.kind.label, rcfg.seed, None, str(exc)))
    return rows, prov


# -- tables -----------------------------------------------------------------

def _pct(x: float) -> float:
    return 100.0 * x


def table_columns(task: TaskKind, target_fpr: float):
    """(header, extractor, text decimals) per column for each task's comparison table."""
    if task is TaskKind.KWS:
        return [("AUC ROC (%)", lambda r: _pct(r.auc), 2),
                ("Mean Latency (secs)", lambda r: r.latency_mean, 3)]
    if task is TaskKind.MTD:
        fpr = f"{_pct(target_fpr):g}"
        return [(f"% FNR @ {fpr}% FPR", lambda r: _pct(r.fnr_at_target_fpr), 2),
                ("Mean Latency (ms)", lambda r: 1000.0 * r.latency_mean, 1),
                ("Brier (%)", lambda r: _pct(r.brier), 2)]
    return [("Mean (secs)", lambda r: r.latency_mean, 3),
            ("p25 (secs)", lambda r: r.latency_p25, 3),
            ("p50 (secs)", lambda r: r.latency_p50, 3),
            ("p75 (secs)", lambda r: r.latency_p75, 3)]


def median_rows(rows: list[RunRow], columns) -> list[tuple[str, list[float], int, int]]:
    """Per-loss medians over successful seeds: (loss, values, n_ok, n_total)."""
    order: list[str] = []
    for r in rows:
        if r.loss not in order:
            order.append(r.loss)
    out = []
    for loss in order:
        mine = [r for r in rows if r.loss == loss]
        ok = [r.report for r in mine if r.report is not None]
        vals = [float(np.median([f(rep) for rep in ok])) if ok else math.nan
                for _, f, _ in columns]
        out.append((loss, vals, len(ok), len(mine)))
    return out


def _fmt(x: float, decimals: int) -> str:
    return "nan" if math.isnan(x) else f"{x:.{decimals}f}"


def render_tables(cfg: RunConfig, rows: list[RunRow], prov: list[str],
                  n_seeds: int) -> tuple[str, str]:
    """Aligned text and tab-separated versions of the comparison table."""
    columns = table_columns(cfg.task, cfg.target_fpr)
    meds = median_rows(rows, columns)
    head = ["Loss"] + [c[0] for c in columns] + ["Seeds OK"]

    body = []
    for loss, vals, n_ok, n_all in meds:
        cells = [_fmt(v, c[2]) for v, c in zip(vals, columns)]
        if n_ok == 0:
            cells = ["FAILED"] * len(columns)
        body.append([loss] + cells + [f"{n_ok}/{n_all}"])
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))).rstrip()
    title = f"{cfg.task.value}: median over {n_seeds} seed(s), threshold at " \
            f"{_pct(cfg.target_fpr):g}% validation FPR"
    text = [title, line(head), line(["-" * w for w in widths])]
    text += [line(r) for r in body]
    failures = [r for r in rows if r.report is None]
    if failures:
        text.append("")
        text += [f"FAILED seed={r.seed} loss={r.loss}: {r.error}" for r in failures]
    text.append("")
    text += ["# " + p for p in prov]

    tsv = ["\t".join(["loss", "seed", "status"] + [c[0] for c in columns]
                     + ["auc", "latency_mean", "latency_p25", "latency_p50", "latency_p75",
                        "fnr_at_target_fpr", "brier", "threshold"])]
    for r in rows:
        if r.report is None:
            tsv.append("\t".join([r.loss, str(r.seed), "failed"]
                                 + ["nan"] * (len(columns) + 8)))
            continue
        rep = r.report
        vals = [f(rep) for _, f, _ in columns] + [
            rep.auc, rep.latency_mean, rep.latency_p25, rep.latency_p50, rep.latency_p75,
            rep.fnr_at_target_fpr, rep.brier, rep.threshold]
        tsv.append("\t".join([r.loss, str(r.seed), "ok"] + [repr(float(v)) for v in vals]))
    for loss, vals, n_ok, n_all in meds:
        tsv.append("\t".join([loss, "median", f"{n_ok}/{n_all}"]
                             + [repr(v) for v in vals] + ["nan"] * 8))
    tsv += ["# " + p for p in prov]
    return "\n".join(text) + "\n", "\n".join(tsv) + "\n"


def weight_table(T: int, anchor: int) -> str:
    if T < 1 or not 1 <= anchor <= T:
        raise ValueError(f"need 1 <= anchor <= T, got T={T}, anchor={anchor}")
    w = anchor_weights(T, anchor)
    lines = ["t\tsal_weight\tfcel_weight"]
    lines += [f"{t}\t{float(w[t - 1])!r}\t1.0" for t in range(1, T + 1)]
    return "\n".join(lines) + "\n"


def report_text(report: EvalReport) -> str:
    return "".join(f"{k}\t{v!r}\n" for k, v in report.as_dict().items())


# -- commands -----------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_run_config(args.task or "KWS")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = args.out or (cfg.out_dir if cfg else None) or os.environ.get(OUT_ENV)
    if not out:
        raise CliError(f"no output directory: pass --out, set out_dir, or set {OUT_ENV}",
                       EXIT_CONFIG)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds, digest = materialise(cfg, out)
    counts = ds.counts()
    print("\t".join(f"{k}={counts[k]}" for k in datamod.SPLITS) + f"\tsha256={digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.dataset:
        ds = datamod.read(args.dataset)
    else:
        ds, _ = materialise(cfg, out / "data")
    model, hist = train_one(cfg, ds, cfg.train.loss)
    save_checkpoint(model, out / "model.asck")
    (out / "history.tsv").write_text(hist.to_table(), encoding="utf-8")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    report = evaluate_model(model, ds, cfg.target_fpr, cfg.task)
    (out / "report.tsv").write_text(report_text(report), encoding="utf-8")
    sys.stdout.write(report_text(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    model = load_checkpoint(args.checkpoint)
    ds = datamod.read(args.dataset)
    if ds.splits is None:
        raise datamod.DataFormatError("dataset has no split tags", path=args.dataset)
    dims = {s.D for s in ds.sequences}
    if dims != {model.config.input_dim}:
        raise ShapeError("eval", (model.config.input_dim,), tuple(sorted(dims)),
                         detail="checkpoint input_dim vs dataset feature dims")
    task = cfg.task if cfg else ds.sequences[0].task
    target = cfg.target_fpr if cfg else 0.02
    try:
        report = evaluate_model(model, ds, target, task)
    except ValueError as exc:
        raise CliError(f"evaluating {args.checkpoint} on {args.dataset}: {exc}",
                       EXIT_RUNTIME) from None
    text = report_text(report)
    if args.out:
        out = _out_dir(args, cfg)
        (out / "report.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1", EXIT_CONFIG)
    rows, prov = run_sweep(cfg, args.seeds, out)
    text, tsv = render_tables(cfg, rows, prov, args.seeds)
    (out / "results.txt").write_text(text, encoding="utf-8")
    (out / "results.tsv").write_text(tsv, encoding="utf-8")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_RUNTIME if any(r.report is None for r in rows) else EXIT_OK


def cmd_plot_weights(args) -> int:
    try:
        text = weight_table(args.T, args.anchor)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamanchor",
                                description="Anchor-weighted streaming detector experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds: bool = False):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--task", choices=[t.value for t in TaskKind],
                        help="task defaults to use when no --config is given")
        sp.add_argument("--out", help=f"output directory (default: config out_dir or ${OUT_ENV})")
        sp.add_argument("--seed", type=int, help="overrides the config's model/training seed")
        if seeds:
            sp.add_argument("--seeds", type=int, default=1,
                            help="repeat with N derived seeds and report medians")

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train one model with the config's loss.kind")
    common(sp)
    sp.add_argument("--dataset", help="existing dataset directory (default: generate)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--config", help="config supplying task and target_fpr")
    sp.add_argument("--out", help="also write report.tsv here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="train and evaluate every loss in the config")
    common(sp, seeds=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("plot-weights", help="emit anchor loss weights as TSV")
    sp.add_argument("--T", type=int, required=True, help="sequence length")
    sp.add_argument("--anchor", type=int, required=True, help="1-based anchor frame")
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_plot_weights)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (datamod.DataFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ArchitectureError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
