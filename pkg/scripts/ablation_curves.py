"""Paired training runs with and without the transmission networks.

Writes validation-MSE-vs-step curves for both runs (CSV) and a one-line
summary of how many steps each needs to reach the ablation's final MSE.

Usage: python3 scripts/ablation_curves.py --out results/ablation [--config my.cfg]
"""

import argparse
from pathlib import Path

from dehaze.config import Config, load_config
from dehaze.haze_model import build_dataset
from dehaze.training import ablation_study


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--config")
    args = parser.parse_args()
    cfg = load_config(args.config) if args.config else Config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train, val = build_dataset(cfg.seed, cfg.train_scenes, cfg.samples_per_scene, cfg.height, cfg.width, val_scenes=cfg.val_scenes)
    report = ablation_study(train, val, cfg)
    (out / "ablation_curves.csv").write_text(report.to_csv())
    (out / "full_log.jsonl").write_text(report.full.to_jsonl())
    (out / "ablation_log.jsonl").write_text(report.ablation.to_jsonl())
    (out / "summary.txt").write_text(report.summary())
    print(report.to_csv(), end="")
    print(report.summary(), end="")


if __name__ == "__main__":
    main()
