"""Desk-scale dehazing run: synthesize, train, then score against the baselines.

Usage: python3 scripts/desk_experiment.py --out results/desk [--config my.cfg] [--refine]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from dehaze.config import Config, load_config
from dehaze.evaluation import baseline_report, evaluate_dataset, format_csv, format_table
from dehaze.haze_model import build_dataset
from dehaze.training import (
    dehaze_model_from_checkpoint,
    refinement_pools,
    run_pipeline,
    split_pool,
    train_dehazing,
    train_refinement,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--config")
    parser.add_argument("--refine", action="store_true", help="also run both refinement phases")
    args = parser.parse_args()
    cfg = load_config(args.config) if args.config else Config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train, val = build_dataset(cfg.seed, cfg.train_scenes, cfg.samples_per_scene, cfg.height, cfg.width, val_scenes=cfg.val_scenes)
    start = time.perf_counter()
    ckpt, log = train_dehazing(train, val, cfg)
    print(f"dehazing: {cfg.dehaze_steps} steps in {time.perf_counter() - start:.0f}s")
    (out / "dehaze.ckpt").write_bytes(ckpt.to_bytes())
    (out / "dehaze_log.jsonl").write_text(log.to_jsonl())

    stage = "dehaze"
    if args.refine:
        dehazed, target = refinement_pools(cfg, dehaze_model_from_checkpoint(ckpt, cfg))
        pool, held_out = split_pool(dehazed)
        ckpt, rlog = train_refinement(pool, target, cfg, val_pool=held_out, base=ckpt)
        (out / "refine.ckpt").write_bytes(ckpt.to_bytes())
        (out / "refine_log.jsonl").write_text(rlog.to_jsonl())
        stage = "refine"

    identity, oracle = baseline_report(val, "val", cfg.ssim)
    result = run_pipeline(np.concatenate([s.hazy for s in val]), ckpt, stage)
    truths = [s.clear for s in val]
    reports = [identity, evaluate_dataset([d[None] for d in result.dehazed], truths, "dehaze", "val", cfg=cfg.ssim)]
    if result.refined is not None:
        reports.append(evaluate_dataset([r[None] for r in result.refined], truths, "refine", "val", cfg=cfg.ssim))
    reports.append(oracle)
    (out / "report.txt").write_text(format_table(reports))
    (out / "report.csv").write_text(format_csv(reports))
    print(format_table(reports), end="")


if __name__ == "__main__":
    main()
