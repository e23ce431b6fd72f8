"""Command-line front end: ``eventsleep <command> [options]``.

Commands: encode, sweep, infer, train, ops, bench, synth. Every command is
deterministic for fixed inputs, config and seed (bench timings excepted) and
exits nonzero on error. ``sweep`` exits 3 when no operating point is feasible.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import efficiency as eff
from . import network as net
from .config import RunConfig, load_config, with_overrides
from .corpus import LabeledSequence, write_corpus
from .encoder import encode_ramsdm, event_density, load_events, save_events
from .exceptions import EventSleepError, ParameterError
from .operating_point import SweepGrid, grid_search, write_sweep_csv
from .s2e import EpochBatch, build_epoch_batch, dense_epoch_batch, write_manifest
from .signal_io import STAGE_NAMES, load_labels, load_signal, preprocess
from .training import (
    cv_split,
    evaluate,
    predict_corpus,
    predict_sequence,
    train,
    write_confusion,
    write_history,
    write_per_class,
    write_plan,
)

log = logging.getLogger("eventsleep")

EXIT_ERROR = 2
EXIT_INFEASIBLE = 3


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.paths.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _signal_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.nsig"))
    else:
        files = [path]
    if not files:
        raise ParameterError(f"{path}: no .nsig files found")
    return files


def _batch_for(path: Path, cfg: RunConfig) -> tuple[EpochBatch, np.ndarray | None]:
    """Epoch batch from an NSIG or NEVT file, plus the filtered signal when available."""
    mcfg = cfg.model_config()
    if path.suffix == ".nevt":
        if mcfg.dense_input:
            raise ParameterError("dense input needs a signal file, not an event file")
        return build_epoch_batch(load_events(path)), None
    rec = preprocess(load_signal(path))
    if mcfg.dense_input:
        return dense_epoch_batch(rec.samples, rec.fs), rec.samples
    return build_epoch_batch(encode_ramsdm(rec.samples, cfg.encoder, rec.fs)), rec.samples


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands


def cmd_encode(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    for path in _signal_files(Path(args.input)):
        rec = preprocess(load_signal(path))
        stream = encode_ramsdm(rec.samples, cfg.encoder, rec.fs)
        target = out / f"{path.stem}.nevt"
        save_events(stream, target)
        if len(stream.slow) + len(stream.fast) and stream.length >= rec.fs * 30:
            write_manifest(build_epoch_batch(stream), out / f"{path.stem}.epochs.csv")
        d = event_density(stream)
        print(f"{path.name}: rho_slow={d.slow:.6f} rho_fast={d.fast:.6f} rho_combined={d.combined:.6f} -> {target}")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    signals = []
    for path in _signal_files(Path(args.input)):
        rec = preprocess(load_signal(path))
        signals.append(rec.samples)
    grid = SweepGrid(tuple(args.k_values)) if args.k_values else cfg.grid
    res = grid_search(signals, grid, cfg.thresholds, cfg.encoder, fs=100.0)
    write_sweep_csv(res.table, out / "sweep.csv")
    sel = res.selected
    rows = [] if sel is None else [[repr(sel.k_slow), repr(sel.k_fast), repr(sel.rho)]]
    _write_rows(out / "selected.csv", ["k_slow", "k_fast", "rho_combined"], rows)
    if sel is None:
        print("status: no_feasible_point")
        return EXIT_INFEASIBLE
    print(f"status: ok k_slow={sel.k_slow} k_fast={sel.k_fast} rho={sel.rho:.6f}")
    return 0


def _load_model(cfg: RunConfig, checkpoint):
    mcfg = cfg.model_config()
    if checkpoint is None:
        return net.init_params(mcfg, cfg.seed), mcfg
    params, _ = net.load_checkpoint(checkpoint, expect=mcfg)
    return params, mcfg


def cmd_infer(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    params, mcfg = _load_model(cfg, args.checkpoint)
    path = Path(args.input)
    batch, _ = _batch_for(path, cfg)
    probs = predict_sequence(params, mcfg, batch)
    header = ["epoch_index", "predicted_stage", *(f"prob_{s}" for s in STAGE_NAMES)]
    rows = [
        [int(batch.epoch_indices[i]), STAGE_NAMES[int(np.argmax(p))], *(repr(float(v)) for v in p)]
        for i, p in enumerate(probs)
    ]
    _write_rows(out / f"{path.stem}.predictions.csv", header, rows)
    if len(batch):
        insd = eff.measure_insd(batch, mcfg.dense_input) if batch.mask.any() else float("nan")
        log.info("insd=%s", insd)
        print(f"{path.name}: {len(batch)} epochs, insd={insd:.6f}")
    else:
        print(f"{path.name}: 0 epochs")
    return 0


def _read_corpus(directory: Path, cfg: RunConfig) -> list[LabeledSequence]:
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise ParameterError(f"{directory}: missing manifest.csv")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    data = []
    for r in rows:
        batch, _ = _batch_for(directory / r["signal"], cfg)
        labels = load_labels(directory / r["labels"]).labels
        n = min(len(batch), labels.size)
        if n != len(batch):
            batch = batch.subset(np.arange(n))
        data.append(LabeledSequence(r["subject_id"], batch, labels[:n]))
    return data


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    data = _read_corpus(Path(args.input), cfg)
    by_subject: dict[str, list[LabeledSequence]] = {}
    for seq in data:
        by_subject.setdefault(seq.subject_id, []).append(seq)
    plan = cv_split(list(by_subject), cfg.cv.n_folds, cfg.cv.val_fraction, cfg.seed)
    write_plan(plan, out / "cv_plan.csv")
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    n_run = plan.n_folds if args.folds is None else min(args.folds, plan.n_folds)
    metrics = []
    for k, fold in enumerate(plan.folds[:n_run]):
        pick = lambda ids: [s for i in ids for s in by_subject[i]]  # noqa: E731
        res = train(pick(fold.train), pick(fold.val), mcfg, tcfg)
        pred, y = predict_corpus(res.params, mcfg, pick(fold.test))
        rep = evaluate(pred, y)
        fd = out / f"fold_{k}"
        fd.mkdir(exist_ok=True)
        net.save_checkpoint(res.params, mcfg, fd / "checkpoint.nckp")
        write_history(res.history, fd / "history.csv")
        write_confusion(rep, fd / "confusion.csv")
        write_per_class(rep, fd / "per_class.csv")
        metrics.append((k, rep.accuracy, rep.macro_f1, rep.kappa))
        print(f"fold {k}: accuracy={rep.accuracy:.4f} macro_f1={rep.macro_f1:.4f} kappa={rep.kappa:.4f}")
    m = np.array([r[1:] for r in metrics], dtype=np.float64)
    mean = m.mean(axis=0)
    rows = [[k, repr(a), repr(f), repr(kp)] for k, a, f, kp in metrics]
    rows.append(["mean", *(repr(float(v)) for v in mean)])
    _write_rows(out / "metrics.csv", ["fold", "accuracy", "macro_f1", "kappa"], rows)
    print(f"mean: accuracy={mean[0]:.4f} macro_f1={mean[1]:.4f} kappa={mean[2]:.4f}")
    return 0


def cmd_ops(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    params, mcfg = _load_model(cfg, args.checkpoint)
    batches = [_batch_for(p, cfg)[0] for f in args.inputs for p in _signal_or_events(Path(f))]
    latency = None
    if args.latency:
        latency = eff.bench_latency(params, mcfg, args.latency, warmup=2, seed=cfg.seed)
    rep = eff.ops_report(params, mcfg, batches, latency)
    eff.write_ops_report([rep], out / "ops.csv")
    b = rep.breakdown
    print(
        f"profile={mcfg.profile} params={b.params} flops={b.total_flops} "
        f"effective={rep.effective_ops:.1f} insd={rep.insd:.6f} spike_rate={rep.row()[7]}"
    )
    return 0


def _signal_or_events(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted([*path.glob("*.nsig"), *path.glob("*.nevt")])
        if not files:
            raise ParameterError(f"{path}: no input files")
        return files
    return [path]


def cmd_bench(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    params, mcfg = _load_model(cfg, args.checkpoint)
    lat = eff.bench_latency(params, mcfg, args.samples, args.warmup, seed=cfg.seed)
    _write_rows(
        out / "bench.csv",
        ["profile", "n_samples", "latency_ms_median", "latency_ms_p90"],
        [[mcfg.profile, args.samples, repr(lat.median_ms), repr(lat.p90_ms)]],
    )
    print(f"latency median={lat.median_ms:.3f} ms p90={lat.p90_ms:.3f} ms (this machine only)")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    pairs = write_corpus(out, args.subjects, args.epochs, cfg.seed, stay=args.stay)
    print(f"wrote {len(pairs)} subjects to {out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--profile", choices=sorted(net.PROFILES), default=None)
    common.add_argument("--dense-input", action="store_true", default=None, help="ablation A1")
    common.add_argument("--single-branch", action="store_true", default=None, help="ablation A2")
    common.add_argument("--no-elif", action="store_true", default=None, help="ablation A4")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eventsleep", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode", parents=[common], help="signal file(s) -> event files")
    s.add_argument("input", help=".nsig file or directory")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("sweep", parents=[common], help="operating-point grid search")
    s.add_argument("input", help=".nsig file or directory")
    s.add_argument("--k-values", type=float, nargs="+", default=None)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("infer", parents=[common], help="per-epoch stage predictions")
    s.add_argument("input", help=".nsig or .nevt file")
    s.add_argument("--checkpoint", default=None)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("train", parents=[common], help="subject-wise cross-validated training")
    s.add_argument("input", help="corpus directory with manifest.csv")
    s.add_argument("--folds", type=int, default=None, help="run only the first N folds")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ops", parents=[common], help="FLOPs / effective ops / inSD report")
    s.add_argument("inputs", nargs="+", help=".nsig/.nevt files or directories")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--latency", type=int, default=0, help="also time N forward passes")
    s.set_defaults(func=cmd_ops)

    s = sub.add_parser("bench", parents=[common], help="latency micro-benchmark")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--warmup", type=int, default=3)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic labelled corpus")
    s.add_argument("--subjects", type=int, default=200)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--stay", type=float, default=1.0, help="stage persistence probability")
    s.set_defaults(func=cmd_synth)
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return with_overrides(
        cfg,
        seed=args.seed,
        profile=args.profile,
        dense_input=args.dense_input,
        single_branch=args.single_branch,
        no_elif=args.no_elif,
        out=args.out,
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except (EventSleepError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
