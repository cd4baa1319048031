"""Command-line interface.

Subcommands: layout, synth, stats, train, eval, infer, inspect, ablate.
Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure (non-finite loss). Set PAFUSE_LOG=debug|info|warning to control
verbosity. Report-style commands write matplotlib figures and CSV next to
their JSON outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import figures
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SynthConfig,
    dataset_windows,
    gap_histogram,
    load_dataset,
    pooled_gap_histogram,
    save_dataset,
    synth_generate,
)
from .denoiser import count_parameters
from .diffusion import cosine_schedule, derive_seed
from .errors import DataError, NumericError, UsageError
from .harness import run_ablation
from .objective import MetricsReport, aggregate_hypotheses, write_report
from .skeleton import default_layout, load_layout
from .training import TrainConfig, evaluate, load_train_config, predict_window, train

log = logging.getLogger("pafuse")

_METRIC_KEYS = ("wb", "pb", "body", "face", "hands")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we use 1
        raise UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--seed", type=int, default=None, help="base random seed")
    p.add_argument("--threads", type=int, default=None, help="worker thread cap")


def _add_train_overrides(p: _Parser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None, help="batch size")
    p.add_argument("--frames", type=int, default=None, help="window length N")


def build_parser() -> _Parser:
    parser = _Parser(prog="pafuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("layout", help="emit the built-in skeleton layout")
    p.add_argument("--dump", action="store_true", required=True)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--amplitude", type=float, default=80.0, help="motion amplitude (mm)")
    p.add_argument("--focal", type=float, default=1100.0)
    p.add_argument("--image-size", type=int, nargs=2, default=(1000, 1000),
                   metavar=("W", "H"))
    p.add_argument("--gaps", choices=("even", "uneven"), default="even")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="gap histograms of annotated frames")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="output prefix for JSON/CSV/PNG")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train denoisers on a dataset")
    p.add_argument("--data", default=None, help="dataset JSON (overrides config [data])")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--layout", default=None, help="layout JSON overriding the dataset's")
    p.add_argument("--out", required=True, help="checkpoint output path")
    _add_train_overrides(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hypotheses", type=int, default=1, metavar="H")
    p.add_argument("--iterations", type=int, default=1, metavar="K")
    p.add_argument("--out", required=True, help="report JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="export predicted 3D poses (JSON lines)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hypotheses", type=int, default=1, metavar="H")
    p.add_argument("--iterations", type=int, default=1, metavar="K")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect", help="print checkpoint config and parameter counts")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="train/evaluate all four model variants")
    p.add_argument("--data", default=None, help="dataset JSON (overrides config [data])")
    p.add_argument("--config", default=None)
    p.add_argument("--outdir", required=True)
    p.add_argument("--holdout", type=int, default=1, help="held-out sequence count")
    p.add_argument("--hypotheses", type=int, default=None, metavar="H")
    p.add_argument("--iterations", type=int, default=None, metavar="K")
    _add_train_overrides(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def cmd_layout(args) -> int:
    text = json.dumps(default_layout().to_json_dict(), indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote layout to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    config = SynthConfig(
        sequences=args.sequences,
        frames=args.frames,
        amplitude=args.amplitude,
        focal=args.focal,
        image_size=tuple(args.image_size),
        seed=args.seed,
        gap_profile=args.gaps,
    )
    dataset = synth_generate(config)
    try:
        save_dataset(dataset, args.out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(
        f"wrote {len(dataset.sequences)} sequences x {config.frames} frames "
        f"x {dataset.layout.total_joints} joints to {args.out}"
    )
    return 0


def cmd_stats(args) -> int:
    dataset = load_dataset(args.data)
    per_seq = {seq.id: gap_histogram(seq) for seq in dataset.sequences}
    pooled = pooled_gap_histogram(dataset)

    print(f"gap histogram for {args.data}")
    for sid, hist in per_seq.items():
        if not hist:
            print(f"  {sid}: single frame, no gaps")
    header = f"{'gap':>6}  {'count':>8}"
    print("pooled:")
    print("  " + header)
    for gap, count in pooled.items():
        print(f"  {gap:>6}  {count:>8}")

    if args.out:
        doc = {
            "pooled": {str(g): c for g, c in pooled.items()},
            "sequences": {
                sid: {str(g): c for g, c in hist.items()} for sid, hist in per_seq.items()
            },
        }
        with open(args.out + ".json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        with open(args.out + ".csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gap", "count"])
            for gap, count in pooled.items():
                writer.writerow([gap, count])
        figures.save_gap_figure({"pooled": pooled}, args.out + ".png")
        print(f"wrote {args.out}.json, {args.out}.csv, {args.out}.png")
    return 0


def _resolve_config(args, need_data: bool = True) -> tuple[TrainConfig, dict]:
    if getattr(args, "config", None):
        config, paths = load_train_config(args.config)
    else:
        config, paths = TrainConfig(), {}
    config = config.with_overrides(
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch", None),
        frames=getattr(args, "frames", None),
        seed=getattr(args, "seed", None),
        threads=getattr(args, "threads", None),
    )
    return config, paths


def cmd_train(args) -> int:
    config, paths = _resolve_config(args)
    data_path = args.data or paths.get("dataset")
    if not data_path:
        raise UsageError("no dataset given: pass --data or set [data] dataset in the config")
    dataset = load_dataset(data_path)
    layout_path = args.layout or paths.get("layout")
    if layout_path:
        layout = load_layout(layout_path)
        if layout.total_joints != dataset.layout.total_joints:
            raise DataError(
                f"layout {layout_path} has {layout.total_joints} joints but "
                f"dataset {data_path} has {dataset.layout.total_joints}"
            )
        dataset.layout = layout
    log.info("training config: %s", config.resolved())

    log_path = args.out + ".log.jsonl"
    log_lines: list[str] = []

    def on_epoch(bank, epoch, entry):
        log_lines.append(json.dumps(entry))
        if config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            schedule = cosine_schedule(config.timesteps, config.schedule_offset)
            save_checkpoint(f"{args.out}.epoch{epoch}", bank, schedule,
                            config.resolved(), extra={"epochs": epoch})

    bank, train_log = train(dataset, config, on_epoch=on_epoch)
    schedule = cosine_schedule(config.timesteps, config.schedule_offset)
    try:
        save_checkpoint(args.out, bank, schedule, config.resolved(),
                        extra={"epochs": config.epochs})
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in log_lines))
    except OSError as exc:
        raise DataError(f"cannot write outputs to {args.out}: {exc}") from exc
    if train_log:
        figures.save_loss_figure(train_log, args.out + ".loss.png")
        print(f"final epoch loss {train_log[-1]['loss']:.6g}")
    print(f"wrote checkpoint {args.out} and log {log_path}")
    return 0


def _print_report(report: MetricsReport) -> None:
    header = "".join(f"{k.upper():>10}" for k in _METRIC_KEYS)
    print(f"{'':8}{header}")
    for label, block in (("P-Best", report.p_best), ("P-Agg", report.p_agg)):
        row = "".join(f"{getattr(block, k):>10.3f}" for k in _METRIC_KEYS)
        print(f"{label:<8}{row}")


def _report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol"] + [k.upper() for k in _METRIC_KEYS])
        for label, block in (("p_best", report.p_best), ("p_agg", report.p_agg)):
            writer.writerow([label] + [round(getattr(block, k), 3) for k in _METRIC_KEYS])


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    bank, schedule, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig(**meta["config"])
    seed = 0 if args.seed is None else args.seed
    threads = args.threads or config.threads
    # threads is deliberately not echoed: it cannot affect the results.
    echo = {
        "train": meta["config"],
        "eval": {
            "data": args.data,
            "checkpoint": args.checkpoint,
            "hypotheses": args.hypotheses,
            "iterations": args.iterations,
            "seed": seed,
        },
    }
    report = evaluate(
        bank, dataset, args.hypotheses, args.iterations, config,
        seed=seed, threads=threads, echo_config=echo,
    )
    write_report(report, args.out)
    _report_csv(report, args.out + ".csv")
    figures.save_report_figure(report, args.out + ".png")
    _print_report(report)
    print(f"wrote {args.out} ({report.windows} windows)")
    return 0


def cmd_infer(args) -> int:
    dataset = load_dataset(args.data)
    bank, schedule, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig(**meta["config"])
    seed = 0 if args.seed is None else args.seed
    stride = config.eval_stride or config.frames
    windows = dataset_windows(dataset, config.frames, stride)
    if not windows:
        raise DataError(f"no windows of length {config.frames} in {args.data}")
    try:
        fh = open(args.out, "w", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write poses to {args.out}: {exc}") from exc
    with fh:
        for idx, window in enumerate(windows):
            hyps = predict_window(
                bank, window, schedule, config, args.hypotheses, args.iterations,
                derive_seed(seed, idx), dataset.image_size,
            )
            pose = aggregate_hypotheses(hyps)
            fh.write(json.dumps({
                "sequence": window.sequence_id,
                "window_start": window.start,
                "frame_ids": [int(f) for f in window.frame_ids],
                "kp3d": pose.coords.tolist(),
            }))
            fh.write("\n")
    print(f"wrote {len(windows)} windows to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    bank, schedule, meta = load_checkpoint(args.checkpoint)
    print(f"checkpoint {args.checkpoint}")
    print(f"layout hash {meta['layout_hash']}")
    print(f"schedule T={schedule.timesteps} s={schedule.offset}")
    print("config:")
    for key, value in meta["config"].items():
        print(f"  {key} = {value}")
    print("networks:")
    counts = bank.parameter_counts()
    uses = {key: sum(1 for gkey, _ in bank.groups if gkey == key) for key in bank.nets}
    by_width = sorted(bank.nets, key=lambda k: bank.nets[k].config.channels, reverse=True)
    for key in by_width:
        net = bank.nets[key]
        tag = " (shared)" if uses.get(key, 0) > 1 else ""
        print(
            f"  {key}{tag}: channels={net.config.channels} depth={net.config.depth} "
            f"joints={net.config.joints} parameters={counts[key]}"
        )
    print(f"total parameters {count_parameters(bank)}")
    return 0


def cmd_ablate(args) -> int:
    config, paths = _resolve_config(args)
    data_path = args.data or paths.get("dataset")
    if not data_path:
        raise UsageError("no dataset given: pass --data or set [data] dataset in the config")
    dataset = load_dataset(data_path)
    results, summary = run_ablation(
        dataset, config,
        out_dir=args.outdir,
        holdout=args.holdout,
        hypotheses=args.hypotheses,
        iterations=args.iterations,
        eval_seed=0 if args.seed is None else args.seed,
        threads=args.threads or config.threads,
    )
    with open(os.path.join(args.outdir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "parameters"] + [f"p_best_{k}" for k in _METRIC_KEYS])
        for res in results:
            writer.writerow(
                [res.variant, res.parameters]
                + [round(getattr(res.report.p_best, k), 3) for k in _METRIC_KEYS]
            )
    figures.save_ablation_figure(
        results, os.path.join(args.outdir, "summary.png"),
        baseline_wb=summary["baseline_mean_pose_wb"],
    )
    print(f"mean-pose baseline WB {summary['baseline_mean_pose_wb']:.3f}")
    for res in results:
        print(f"{res.variant:<12} params={res.parameters}  P-Best WB {res.report.p_best.wb:.3f}")
    print(f"P-Best WB ordering: {' < '.join(summary['p_best_wb_ordering'])}")
    print(f"wrote reports to {args.outdir}")
    return 0


def main(argv=None) -> int:
    level = os.environ.get("PAFUSE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
