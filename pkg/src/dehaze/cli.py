"""Command-line entry point: synth, train, run, eval.

Errors are reported as a single JSON line on stderr with a nonzero exit code.
``DEHAZE_LOG_LEVEL`` sets log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, load_checkpoint
from .config import Config, ConfigError, load_config, parse_config
from .evaluation import baseline_report, evaluate_dataset, format_csv, format_table
from .haze_model import A_RANGE, BETA_RANGE, HazeParams, Sample, Scene, build_dataset, make_sample
from .imageio import load_rgbd, read_image, read_image16, write_image, write_image16
from .training import (
    TrainLog,
    ablation_study,
    dehaze_model_from_checkpoint,
    refinement_pools,
    run_pipeline,
    split_pool,
    train_dehazing,
    train_refinement,
)

log = logging.getLogger("dehaze")

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- manifest


@dataclass
class Manifest:
    root: Path
    config_text: str
    records: dict[str, list[dict]] = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"config": self.config_text.splitlines(), "splits": self.records, "version": 1}
        return json.dumps(body, sort_keys=True, indent=1) + "\n"

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            body = json.loads(path.read_text())
            return cls(path.parent, "\n".join(body["config"]) + "\n", body["splits"])
        except FileNotFoundError:
            raise ManifestError(f"manifest not found: {path}") from None
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed manifest ({exc})") from exc

    def validate(self) -> None:
        """Every referenced file exists with the recorded size; haze parameters in range."""
        for split, recs in self.records.items():
            for rec in recs:
                if not (A_RANGE[0] <= rec["A"] <= A_RANGE[1] and BETA_RANGE[0] <= rec["beta"] <= BETA_RANGE[1]):
                    raise ManifestError(f"{split} sample {rec['id']}: A/beta outside sampling ranges")
                for key in ("clear", "hazy", "transmission", "depth"):
                    p = self.root / rec[key]
                    if not p.is_file():
                        raise ManifestError(f"{split} sample {rec['id']}: missing file {rec[key]}")
                    with Image.open(p) as img:
                        if (img.height, img.width) != (rec["height"], rec["width"]):
                            raise ManifestError(
                                f"{split} sample {rec['id']}: {rec[key]} is {img.width}x{img.height}, "
                                f"manifest says {rec['width']}x{rec['height']}"
                            )

    def samples(self, split: str) -> list[Sample]:
        """Re-synthesize hazy samples from the stored clear image, depth, A and beta."""
        if split not in self.records:
            raise ManifestError(f"manifest has no split {split!r}")
        self.validate()
        out = []
        scenes: dict[str, Scene] = {}
        for rec in self.records[split]:
            key = rec["clear"]
            if key not in scenes:
                depth = read_image16(self.root / rec["depth"]) / 65535.0
                scenes[key] = Scene(read_image(self.root / rec["clear"]), depth[None, None])
            out.append(make_sample(scenes[key], HazeParams(rec["A"], rec["beta"]), rec["scene_id"], rec["sample_id"]))
        return out


def _rgbd_scenes(list_path: Path) -> list[Scene]:
    """Scenes from a text file of ``image depth`` path pairs (relative to the file)."""
    scenes = []
    for line in list_path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"{list_path}: expected 'image depth' per line, got {line!r}")
            scenes.append(load_rgbd(list_path.parent / parts[0], list_path.parent / parts[1]))
    return scenes


def synthesize(config: Config, out: Path, config_dir: Path | None = None) -> Manifest:
    scenes = None
    if config.rgbd_list:
        list_path = Path(config.rgbd_list)
        if not list_path.is_absolute() and config_dir is not None:
            list_path = config_dir / list_path
        scenes = _rgbd_scenes(list_path)
    train, val = build_dataset(
        config.seed, config.train_scenes, config.samples_per_scene, config.height, config.width,
        val_scenes=config.val_scenes, scenes=scenes,
    )
    for sub in ("clear", "depth", "hazy", "transmission"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, config.to_text())
    written = set()
    for split, samples in (("train", train), ("val", val)):
        recs = []
        for s in samples:
            scene = f"{s.scene_id:05d}"
            sid = f"{scene}_{s.sample_id:02d}"
            rec = {
                "id": sid,
                "scene_id": s.scene_id,
                "sample_id": s.sample_id,
                "clear": f"clear/{scene}.png",
                "depth": f"depth/{scene}.png",
                "hazy": f"hazy/{sid}.png",
                "transmission": f"transmission/{sid}.png",
                "A": s.params.A,
                "beta": s.params.beta,
                "seed": [config.seed + s.scene_id, 1, s.sample_id],
                "height": s.clear.shape[2],
                "width": s.clear.shape[3],
            }
            if scene not in written:
                write_image(out / rec["clear"], s.clear)
                write_image16(out / rec["depth"], s.depth)
                written.add(scene)
            write_image(out / rec["hazy"], s.hazy)
            write_image16(out / rec["transmission"], s.transmission)
            recs.append(rec)
        manifest.records[split] = recs
    (out / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


# ---------------------------------------------------------------- commands


def _run_dir(out: Path, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = out / f"run-{stamp}-seed{seed}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _write_new(path: Path, data: bytes | str) -> None:
    """Create ``path``; refuses to overwrite an existing file."""
    mode = "xb" if isinstance(data, bytes) else "x"
    with open(path, mode) as fh:
        fh.write(data)


def _save_log(run: Path, name: str, train_log: TrainLog) -> None:
    _write_new(run / f"{name}.jsonl", train_log.to_jsonl())
    _write_new(run / f"{name}_timings.tsv", "".join(f"{s}\t{t:.3f}\n" for s, t in train_log.timings))


def cmd_synth(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = synthesize(config, out, Path(args.config).parent)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    n = {k: len(v) for k, v in manifest.records.items()}
    print(f"wrote {n['train']} train and {n['val']} val samples to {out / MANIFEST_NAME}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    manifest = Manifest.load(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    run = _run_dir(Path(args.out), config.seed)
    _write_new(run / "config.txt", config.to_text())

    def keep(tag):
        return lambda step, ckpt: _write_new(run / f"{tag}_{step}.ckpt", ckpt.to_bytes())

    if args.mode == "dehaze":
        ckpt, train_log = train_dehazing(
            manifest.samples("train"), manifest.samples("val"), config, resume=resume, on_checkpoint=keep("dehaze_step")
        )
        _save_log(run, "dehaze_log", train_log)
    elif args.mode == "ablation":
        report = ablation_study(manifest.samples("train"), manifest.samples("val"), config)
        _save_log(run, "full_log", report.full)
        _save_log(run, "ablation_log", report.ablation)
        _write_new(run / "ablation_curves.csv", report.to_csv())
        _write_new(run / "ablation_summary.txt", report.summary())
        ckpt = report.ablation_checkpoint
        _write_new(run / "full_final.ckpt", report.full_checkpoint.to_bytes())
        print(report.summary(), end="")
    else:
        if resume is None or resume.metadata.get("stage") != "dehaze":
            raise UsageError("train --mode refine needs --resume <dehaze checkpoint>")
        dehaze = dehaze_model_from_checkpoint(resume, config)
        dehazed, target = refinement_pools(config, dehaze)
        train_pool, val_pool = split_pool(dehazed)
        ckpt, train_log = train_refinement(
            train_pool, target, config, val_pool=val_pool, base=resume, on_checkpoint=keep("refine")
        )
        _save_log(run, "refine_log", train_log)
    _write_new(run / "final.ckpt", ckpt.to_bytes())
    print(f"run directory: {run}")
    return 0


def _as_rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, axis=1) if image.shape[1] == 1 else image


def cmd_run(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.inputs:
        image = _as_rgb(read_image(src))
        result = run_pipeline(image, ckpt, args.stage)
        stem = Path(src).stem
        if result.transmission is not None:
            write_image(out / f"{stem}_transmission.png", result.transmission)
        write_image(out / f"{stem}_dehazed.png", result.dehazed)
        if result.refined is not None:
            write_image(out / f"{stem}_refined.png", result.refined)
    print(f"wrote outputs for {len(args.inputs)} image(s) to {out}")
    return 0


def evaluate_checkpoint(ckpt: Checkpoint, samples: list[Sample], config: Config, dataset: str):
    """Identity and oracle baselines plus the learned stage(s) on ``samples``."""
    if not samples:
        raise ManifestError(f"split {dataset!r} is empty")
    cfg = config.ssim
    identity, oracle = baseline_report(samples, dataset, cfg)
    ids = [f"{s.scene_id}_{s.sample_id}" for s in samples]
    truths = [s.clear for s in samples]
    stage = "refine" if "generator" in ckpt.metadata else "dehaze"
    outputs = [run_pipeline(s.hazy, ckpt, stage) for s in samples]
    reports = [identity]
    tag = "ablation" if ckpt.metadata.get("architecture", {}).get("ablation") else "dehaze"
    reports.append(evaluate_dataset([o.dehazed for o in outputs], truths, tag, dataset, ids, cfg))
    if stage == "refine":
        reports.append(evaluate_dataset([o.refined for o in outputs], truths, "refine", dataset, ids, cfg))
    reports.append(oracle)
    return reports


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.data)
    config = parse_config(manifest.config_text)
    reports = evaluate_checkpoint(ckpt, manifest.samples(args.split), config, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = format_table(reports)
    csv_path = out.with_suffix(".csv") if out.suffix != ".csv" else out
    table_path = out if out.suffix != ".csv" else out.with_suffix(".txt")
    table_path.write_text(table)
    csv_path.write_text(format_csv(reports))
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dehaze", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a hazy dataset and its manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train dehazing, refinement, or the ablation pair")
    p.add_argument("--mode", choices=("dehaze", "refine", "ablation"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="manifest file or dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume (dehaze) or build on (refine)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="dehaze (and optionally refine) images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", choices=("dehaze", "refine"), default="dehaze")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="metrics and baselines on a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DEHAZE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line report for any failure
        message = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
