"""MSE / PSNR / SSIM metrics and dataset-level reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .haze_model import Sample, analytic_dehaze
from .losses import SsimConfig, ssim_map

PSNR_CAP = 99.0
SCALES = {"unit": 1.0, "eight_bit": 255.0}


def _check(pred, truth):
    if np.shape(pred) != np.shape(truth):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(truth)}")


def mse_metric(pred: np.ndarray, truth: np.ndarray, scale: str = "unit") -> float:
    _check(pred, truth)
    peak = SCALES[scale]
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.mean(diff * diff)) * peak * peak


def psnr_from_mse(mse: float, peak: float = 255.0) -> float:
    """10 log10(peak^2 / mse), capped at ``PSNR_CAP`` (identical images hit the cap)."""
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr_metric(pred: np.ndarray, truth: np.ndarray) -> float:
    return psnr_from_mse(mse_metric(pred, truth, "eight_bit"), 255.0)


def ssim_metric(pred: np.ndarray, truth: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean per-pixel SSIM, per channel, averaged over channels (and batch)."""
    _check(pred, truth)
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[None], b[None]
    return float(np.mean(ssim_map(a, b, cfg)))


@dataclass
class EvalRow:
    id: str
    mse: float
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    method: str
    dataset: str
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def mean_mse(self) -> float:
        return float(np.mean([r.mse for r in self.rows]))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def averages(self) -> tuple[float, float, float]:
        return self.mean_mse, self.mean_psnr, self.mean_ssim


def evaluate_dataset(
    outputs: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    tag: str,
    dataset: str = "",
    ids: Sequence[str] | None = None,
    cfg: SsimConfig = SsimConfig(),
) -> EvalReport:
    """Per-image rows (MSE on the 0-255 scale) and their plain averages.

    The averaged PSNR is the mean of per-image PSNRs.
    """
    if len(outputs) != len(truths):
        raise ValueError(f"{len(outputs)} outputs but {len(truths)} ground-truth images")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(outputs))]
    report = EvalReport(tag, dataset, metadata={"ssim": "per-channel mean", "mse_scale": "eight_bit"})
    for i, (out, truth) in enumerate(zip(outputs, truths)):
        mse = mse_metric(out, truth, "eight_bit")
        report.rows.append(EvalRow(ids[i], mse, psnr_from_mse(mse), ssim_metric(out, truth, cfg)))
    return report


def baseline_report(samples: Sequence[Sample], dataset: str = "", cfg: SsimConfig = SsimConfig()):
    """(identity, oracle) reports: raw hazy input, and exact inversion with true t and A."""
    if not samples:
        raise ValueError("baseline report needs at least one sample")
    ids = [f"{s.scene_id}_{s.sample_id}" for s in samples]
    truths = [s.clear for s in samples]
    identity = evaluate_dataset([s.hazy for s in samples], truths, "identity", dataset, ids, cfg)
    oracle = evaluate_dataset(
        [analytic_dehaze(s.hazy, s.transmission, s.params.A) for s in samples], truths, "oracle", dataset, ids, cfg
    )
    return identity, oracle


def format_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'method':<12} {'dataset':<10} {'n':>5} {'MSE':>10} {'PSNR':>8} {'SSIM':>7}"]
    for r in reports:
        lines.append(
            f"{r.method:<12} {r.dataset:<10} {len(r.rows):>5} {r.mean_mse:>10.2f} {r.mean_psnr:>8.2f} {r.mean_ssim:>7.4f}"
        )
    return "\n".join(lines) + "\n"


def format_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "id", "mse", "psnr", "ssim"])
    for r in reports:
        for row in r.rows:
            writer.writerow([r.method, r.dataset, row.id, repr(row.mse), repr(row.psnr), repr(row.ssim)])
    return buf.getvalue()


def read_csv(text: str) -> list[EvalReport]:
    reports: dict[tuple[str, str], EvalReport] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        key = (rec["method"], rec["dataset"])
        rep = reports.setdefault(key, EvalReport(*key))
        rep.rows.append(EvalRow(rec["id"], float(rec["mse"]), float(rec["psnr"]), float(rec["ssim"])))
    return list(reports.values())
