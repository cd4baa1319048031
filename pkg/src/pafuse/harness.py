"""Ablation harness: the four model variants under one parameter budget.

Variants cross the two part-based ingredients:

  monolithic   no part-frame shift, one whole-body network
  shift_only   part-frame shift, one whole-body network
  parts_only   no shift (all parts rooted at the body root), part networks
  full         part-frame shift, part networks

Single-network variants get their channel width from the budget allocator
so every variant carries the same parameter total as the part-based bank.
Each variant trains from scratch on the training split and is evaluated
on the held-out split; the harness emits one report per variant plus a
summary with the mean-pose baseline. The relative ordering is reported,
not asserted.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .checkpoint import save_checkpoint
from .data import DatasetFile, split_holdout
from .denoiser import count_parameters
from .diffusion import cosine_schedule
from .objective import MetricsReport, write_report
from .training import (
    VARIANTS,
    TrainConfig,
    constant_pose_wb,
    evaluate,
    mean_pose,
    train,
)


@dataclass
class VariantResult:
    variant: str
    report: MetricsReport
    parameters: int
    checkpoint_path: str | None
    report_path: str | None


def run_ablation(
    dataset: DatasetFile,
    config: TrainConfig,
    out_dir: str | None = None,
    holdout: int = 1,
    hypotheses: int | None = None,
    iterations: int | None = None,
    eval_seed: int = 0,
    threads: int = 1,
) -> tuple[list[VariantResult], dict]:
    """Train and evaluate all four variants; returns results + summary."""
    train_ds, test_ds = split_holdout(dataset, holdout)
    hypotheses = config.hypotheses if hypotheses is None else hypotheses
    iterations = config.iterations if iterations is None else iterations
    baseline_wb = constant_pose_wb(mean_pose(train_ds), test_ds, config)

    results: list[VariantResult] = []
    for variant in VARIANTS:
        cfg = config.with_overrides(variant=variant)
        bank, log = train(train_ds, cfg)
        report = evaluate(
            bank, test_ds, hypotheses, iterations, cfg,
            seed=eval_seed, threads=threads, echo_config=cfg.resolved(),
        )
        ckpt_path = report_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            ckpt_path = os.path.join(out_dir, f"{variant}.ckpt")
            report_path = os.path.join(out_dir, f"{variant}.report.json")
            schedule = cosine_schedule(cfg.timesteps, cfg.schedule_offset)
            save_checkpoint(ckpt_path, bank, schedule, cfg.resolved(),
                            extra={"epochs": cfg.epochs, "variant": variant})
            write_report(report, report_path)
        results.append(
            VariantResult(variant, report, count_parameters(bank), ckpt_path, report_path)
        )

    summary = {
        "baseline_mean_pose_wb": round(baseline_wb, 3),
        "holdout_sequences": [s.id for s in test_ds.sequences],
        "settings": {
            "N": config.frames,
            "H": hypotheses,
            "K": iterations,
            "epochs": config.epochs,
        },
        "variants": [
            {
                "variant": r.variant,
                "parameters": r.parameters,
                "p_best": r.report.p_best.to_json_dict(),
                "p_agg": r.report.p_agg.to_json_dict(),
            }
            for r in results
        ],
        "p_best_wb_ordering": [
            r.variant
            for r in sorted(results, key=lambda r: r.report.p_best.wb)
        ],
    }
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    return results, summary
