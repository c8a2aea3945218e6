"""Stage-wise training: joint dehazing, then two-phase refinement.

All randomness derives from ``config.seed``; given the same data and config,
every logged number and checkpoint byte is reproducible.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_into, network_state
from .config import Config
from .evaluation import ssim_metric
from .haze_model import Sample, generate_scene, make_sample, sample_haze_params, vivid
from .losses import adversarial_losses, d_total, mse_loss, rf_content, rf_total, tp_total
from .networks import CoarseNet, DiscriminatorNet, FineNet, GeneratorNet, HazeRemovalNet, init_weights
from .numerics import AdamState, adam_step, gradcheck

log = logging.getLogger(__name__)

DTYPE = np.float32


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    """Raised on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainLog:
    """Per-step records. Wall-clock lives in ``timings`` so records stay reproducible."""

    records: list[dict] = field(default_factory=list)
    timings: list[tuple[int, float]] = field(default_factory=list)

    def add(self, record: dict) -> None:
        if self.records and record["step"] < self.records[-1]["step"]:
            raise TrainingError("log step indices must not decrease")
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def losses(self, stage: str | None = None) -> list[dict]:
        return [r for r in self.records if "total" in r and (stage is None or r["stage"] == stage)]

    def validation(self, stage: str | None = None) -> list[dict]:
        return [r for r in self.records if "val" in r and (stage is None or r["stage"] == stage)]


def stack(samples: Sequence[Sample], name: str, dtype=DTYPE) -> np.ndarray:
    return np.concatenate([getattr(s, name) for s in samples], axis=0).astype(dtype)


def batch_indices(seed: int, n: int, batch: int, step: int, stream: int = 0) -> np.ndarray:
    """Indices for ``step``: consecutive slices of per-epoch permutations."""
    out = []
    pos = step * batch
    while len(out) < batch:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 11, stream, epoch]).permutation(n)
        take = min(batch - len(out), n - offset)
        out.extend(perm[offset : offset + take])
        pos += take
    return np.asarray(out)


# ---------------------------------------------------------------- dehazing model


class DehazeModel:
    """Coarse + fine transmission networks feeding the haze removal network.

    With ``ablation=True`` the transmission networks are dropped and haze
    removal sees only the 3-channel hazy image.
    """

    def __init__(self, config: Config, ablation: bool = False, dtype=DTYPE):
        self.ablation = ablation
        self.config = config
        self.coarse = None if ablation else CoarseNet(dtype)
        self.fine = None if ablation else FineNet(dtype)
        self.haze = HazeRemovalNet(
            3 if ablation else 4, config.haze_width, config.haze_blocks, config.haze_layers_per_block, dtype
        )

    @property
    def nets(self) -> list:
        return [n for n in (self.coarse, self.fine, self.haze) if n is not None]

    def init(self, rng: np.random.Generator, zero_heads: bool = True) -> "DehazeModel":
        for net in self.nets:
            init_weights(net, rng, zero_output=zero_heads)
        return self

    def params(self) -> dict[str, np.ndarray]:
        return {f"{n.name}/{k}": v for n in self.nets for k, v in n.params().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n.name}/{k}": v for n in self.nets for k, v in n.grads.items()}

    def zero_grad(self) -> None:
        for n in self.nets:
            n.zero_grad()

    def architecture(self) -> dict:
        c = self.config
        return {
            "ablation": self.ablation,
            "haze_width": c.haze_width,
            "haze_blocks": c.haze_blocks,
            "haze_layers_per_block": c.haze_layers_per_block,
        }

    def forward(self, hazy: np.ndarray):
        """Returns (coarse_t, fine_t, residual, dehazed); transmissions are None under ablation."""
        if self.ablation:
            residual, dehazed = self.haze.forward(hazy)
            return None, None, residual, dehazed
        tc = self.coarse.forward(hazy)
        tf = self.fine.forward(hazy, tc)
        residual, dehazed = self.haze.forward(hazy, tf)
        return tc, tf, residual, dehazed

    def loss(self, hazy, clear, transmission, backward: bool = True):
        """Joint objective (transmission total + haze removal total); fills grads.

        Returns (total, components, weights) with total = sum of weight * component.
        """
        c = self.config
        tc, tf, residual, _ = self.forward(hazy)
        d = d_total(residual, hazy, clear, c.ssim, (c.weight_d_mse, c.weight_d_ssim))
        comps, weights = dict(d.components), dict(d.weights)
        total = d.total
        tp = None
        if not self.ablation:
            tp = tp_total(tc, tf, transmission, c.ssim, (c.weight_cs_mse, c.weight_fs_mse, c.weight_fs_ssim))
            comps.update(tp.components)
            weights.update(tp.weights)
            total = tp.total + d.total
        if backward:
            self.zero_grad()
            _, g_t = self.haze.backward(d.grads["residual"])
            if tp is not None:
                _, g_c = self.fine.backward(tp.grads["fs_pred"] + g_t)
                self.coarse.backward(tp.grads["cs_pred"] + g_c)
        return float(total), comps, weights

    def infer(self, hazy: np.ndarray, batch: int = 8):
        """Clamped (transmission, dehazed) for a stack of images."""
        ts, ds = [], []
        for i in range(0, len(hazy), batch):
            _, tf, _, dehazed = self.forward(hazy[i : i + batch])
            ds.append(np.clip(dehazed, 0, 1))
            if tf is not None:
                ts.append(tf)
        return (np.concatenate(ts) if ts else None), np.concatenate(ds)

    def to_dtype(self, dtype) -> "DehazeModel":
        twin = DehazeModel(self.config, self.ablation, dtype)
        for mine, other in zip(self.nets, twin.nets):
            for k, v in mine.params().items():
                other.params()[k][...] = v
        return twin


def validate_dehazing(model: DehazeModel, samples: Sequence[Sample], batch: int) -> dict[str, float]:
    """Mean unit-scale MSE and SSIM of clamped dehazed outputs against the clear images."""
    hazy, clear = stack(samples, "hazy"), stack(samples, "clear", np.float64)
    _, dehazed = model.infer(hazy, batch)
    mses = [float(np.mean((dehazed[i].astype(np.float64) - clear[i]) ** 2)) for i in range(len(samples))]
    ssims = [ssim_metric(dehazed[i : i + 1], clear[i : i + 1], model.config.ssim) for i in range(len(samples))]
    return {"mse": float(np.mean(mses)), "ssim": float(np.mean(ssims))}


def _adam_tensors(prefix: str, state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for k in state.m:
        out[f"adam/{prefix}/m/{k}"] = np.array(state.m[k], dtype=np.float32)
        out[f"adam/{prefix}/v/{k}"] = np.array(state.v[k], dtype=np.float32)
    return out


def _restore_adam(prefix: str, state: AdamState, ckpt: Checkpoint, params: dict, step: int) -> None:
    state.step = step
    for k, p in params.items():
        m, v = ckpt.tensors.get(f"adam/{prefix}/m/{k}"), ckpt.tensors.get(f"adam/{prefix}/v/{k}")
        if m is None or v is None:
            raise CheckpointError(f"checkpoint lacks optimizer state for {k!r}")
        state.m[k] = m.astype(p.dtype)
        state.v[k] = v.astype(p.dtype)


def _new_adam(config: Config) -> AdamState:
    return AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)


def dehaze_model_from_checkpoint(ckpt: Checkpoint, config: Config | None = None) -> DehazeModel:
    arch = ckpt.metadata.get("architecture")
    if arch is None:
        raise CheckpointError("checkpoint has no dehazing architecture metadata")
    base = config or Config()
    cfg = base.replace(
        haze_width=arch["haze_width"], haze_blocks=arch["haze_blocks"], haze_layers_per_block=arch["haze_layers_per_block"]
    )
    model = DehazeModel(cfg, arch["ablation"])
    load_into(model.nets, ckpt)
    return model


def spot_check_gradients(model: DehazeModel, sample: Sample, entries: int, seed: int) -> float:
    """Finite-difference check of the joint objective on a float64 copy.

    Uses a 16x16 crop of one sample and ``entries`` random entries per parameter.
    """
    twin = model.to_dtype(np.float64)
    crop = (slice(None), slice(None), slice(0, 16), slice(0, 16))
    hazy, clear, t = (getattr(sample, f)[crop].astype(np.float64) for f in ("hazy", "clear", "transmission"))
    twin.loss(hazy, clear, t)
    grads = {k: v.copy() for k, v in twin.grads().items()}
    return gradcheck(
        lambda: twin.loss(hazy, clear, t, backward=False)[0],
        twin.params(),
        grads,
        max_entries=entries,
        rng=np.random.default_rng([seed, 12]),
    )


def train_dehazing(
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: Config,
    resume: Checkpoint | None = None,
    on_checkpoint: Callable[[int, Checkpoint], None] | None = None,
    ablation: bool | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Joint ADAM training of the transmission and haze removal networks.

    Runs until ``config.dehaze_steps`` updates have been applied in total, so a
    resumed run continues the step numbering of its checkpoint.
    """
    if not train:
        raise TrainingError("training split is empty")
    if not val:
        raise TrainingError("validation split is empty")
    ablation = config.ablation_no_transmission if ablation is None else ablation
    stage = "ablation" if ablation else "dehaze"
    model = DehazeModel(config, ablation)
    adam = _new_adam(config)
    start = 0
    if resume is not None:
        if resume.metadata.get("stage") != stage:
            raise CheckpointError(f"cannot resume {stage} training from a {resume.metadata.get('stage')!r} checkpoint")
        model = dehaze_model_from_checkpoint(resume, config)
        start = int(resume.metadata["step"])
        _restore_adam("dehaze", adam, resume, model.params(), int(resume.metadata["adam_step"]))
    else:
        model.init(np.random.default_rng([config.seed, 10]), config.zero_init_heads)

    hazy_all, clear_all, t_all = stack(train, "hazy"), stack(train, "clear"), stack(train, "transmission")
    batch = min(config.batch_size_dehaze, len(train))
    log_ = TrainLog()

    def snapshot(step: int) -> Checkpoint:
        meta = {
            "stage": stage,
            "step": step,
            "adam_step": adam.step,
            "seed": config.seed,
            "config_hash": config.digest(),
            "architecture": model.architecture(),
        }
        return Checkpoint({**network_state(model.nets), **_adam_tensors("dehaze", adam)}, meta)

    if start == 0:
        err = spot_check_gradients(model, train[0], config.gradcheck_entries, config.seed) if config.gradcheck_entries else None
        rec = {"stage": stage, "step": 0, "val": validate_dehazing(model, val, batch)}
        if err is not None:
            rec["gradcheck_max_rel_err"] = err
            if err > 1e-3:
                log.warning("gradient spot check: max relative error %.2e", err)
        log_.add(rec)
    last_good = snapshot(start)
    t0 = time.perf_counter()
    for step in range(start, config.dehaze_steps):
        idx = batch_indices(config.seed, len(train), batch, step)
        total, comps, weights = model.loss(hazy_all[idx], clear_all[idx], t_all[idx])
        if not np.isfinite(total):
            raise TrainingDivergedError(f"non-finite loss at step {step}", last_good)
        adam_step(model.params(), model.grads(), adam)
        rec = {"stage": stage, "step": step + 1, "total": total, "losses": comps, "weights": weights}
        done = step + 1
        if done % config.val_every == 0 or done == config.dehaze_steps:
            rec["val"] = validate_dehazing(model, val, batch)
            log.info("%s step %d loss %.4f val %s", stage, done, total, rec["val"])
        log_.add(rec)
        log_.timings.append((done, time.perf_counter() - t0))
        if done % config.checkpoint_every == 0 or done == config.dehaze_steps:
            last_good = snapshot(done)
            if on_checkpoint:
                on_checkpoint(done, last_good)
    if start >= config.dehaze_steps:
        last_good = snapshot(start)
    return last_good, log_


def train_ablation(train, val, config: Config, **kwargs) -> tuple[Checkpoint, TrainLog]:
    """Dehazing without the transmission networks (3-channel haze removal)."""
    return train_dehazing(train, val, config, ablation=True, **kwargs)


@dataclass
class AblationReport:
    full: TrainLog
    ablation: TrainLog
    full_checkpoint: Checkpoint | None = None
    ablation_checkpoint: Checkpoint | None = None

    def curves(self) -> list[tuple[int, float, float]]:
        full = {r["step"]: r["val"]["mse"] for r in self.full.validation()}
        abl = {r["step"]: r["val"]["mse"] for r in self.ablation.validation()}
        return [(s, full[s], abl[s]) for s in sorted(set(full) & set(abl))]

    def steps_to_reach(self, target: float) -> tuple[int | None, int | None]:
        """First logged step at which each run's validation MSE is <= target."""
        def first(log):
            return next((r["step"] for r in log.validation() if r["val"]["mse"] <= target), None)
        return first(self.full), first(self.ablation)

    def to_csv(self) -> str:
        lines = ["step,full_val_mse,ablation_val_mse"]
        lines += [f"{s},{f!r},{a!r}" for s, f, a in self.curves()]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        curves = self.curves()
        final_abl = curves[-1][2]
        full_steps, abl_steps = self.steps_to_reach(final_abl)
        return (
            f"final val MSE: full {curves[-1][1]:.6f}, ablation {final_abl:.6f}; "
            f"steps to reach ablation's final MSE: full {full_steps}, ablation {abl_steps}\n"
        )


def ablation_study(train, val, config: Config) -> AblationReport:
    """Paired runs, identical seeds: full model vs. no transmission networks."""
    full_ckpt, full = train_dehazing(train, val, config, ablation=False)
    abl_ckpt, abl = train_dehazing(train, val, config, ablation=True)
    return AblationReport(full, abl, full_ckpt, abl_ckpt)


# ---------------------------------------------------------------- refinement


def refinement_pools(config: Config, dehaze: DehazeModel) -> tuple[np.ndarray, np.ndarray]:
    """(low-quality pool, high-quality pool) for refinement training.

    The low-quality pool is the dehazing output on freshly synthesized hazy
    scenes; the high-quality pool is an unrelated set of clear scenes with a
    saturation/contrast boost.
    """
    h, w = config.height, config.width
    hazy = []
    for i in range(config.refine_scenes):
        rng = np.random.default_rng([config.seed, 30, i])
        scene = generate_scene(rng, h, w)
        hazy.append(make_sample(scene, sample_haze_params(rng)).hazy)
    target = []
    for j in range(config.target_images):
        scene = generate_scene(np.random.default_rng([config.seed, 31, j]), h, w)
        target.append(vivid(scene.clear, config.vivid_saturation, config.vivid_contrast))
    if hazy:
        _, dehazed = dehaze.infer(np.concatenate(hazy).astype(DTYPE), config.batch_size_refine)
    else:
        dehazed = np.zeros((0, 3, h, w), DTYPE)
    tgt = np.concatenate(target).astype(DTYPE) if target else np.zeros((0, 3, h, w), DTYPE)
    return dehazed, tgt


def split_pool(pool: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the last quarter (at least one image) for validation."""
    n_val = max(1, len(pool) // 4)
    return pool[:-n_val], pool[-n_val:]


def _content_validation(gen: GeneratorNet, pool: np.ndarray, config: Config) -> dict[str, float]:
    gen.eval()
    out = np.concatenate([gen.forward(pool[i : i + 8]) for i in range(0, len(pool), 8)])
    gen.train()
    return {"rf_mse": mse_loss(out.astype(np.float64), pool.astype(np.float64))[0]}


def train_refinement(
    dehazed_pool: np.ndarray,
    target_pool: np.ndarray,
    config: Config,
    val_pool: np.ndarray | None = None,
    base: Checkpoint | None = None,
    on_checkpoint: Callable[[str, Checkpoint], None] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Phase 1: generator on content losses only (until converged or the step
    budget runs out). Phase 2: alternate one discriminator and one generator
    update with the adversarial term added.

    ``base`` tensors (e.g. the dehazing networks) are carried into the output
    checkpoint unchanged.
    """
    if len(dehazed_pool) == 0 or len(target_pool) == 0:
        raise TrainingError("refinement needs non-empty low-quality and high-quality pools")
    c = config
    gen = GeneratorNet(c.generator_depth, c.generator_width, c.generator_skips, DTYPE)
    disc = DiscriminatorNet(DTYPE)
    rng = np.random.default_rng([c.seed, 20])
    init_weights(gen, rng)
    init_weights(disc, rng)
    g_adam, d_adam = _new_adam(c), _new_adam(c)
    b = min(c.batch_size_refine, len(dehazed_pool))
    bt = min(c.batch_size_refine, len(target_pool))
    weights = (c.weight_rf_mse, c.weight_rf_ssim)
    log_ = TrainLog()
    base_tensors = {k: v.copy() for k, v in (base.tensors.items() if base else []) if not k.startswith("adam/")}
    base_meta = dict(base.metadata) if base else {}

    def g_params():
        return {f"generator/{k}": v for k, v in gen.params().items()}

    def d_params():
        return {f"discriminator/{k}": v for k, v in disc.params().items()}

    def snapshot(step, content_steps, adv_steps):
        meta = {
            **base_meta,
            "stage": "refine",
            "step": step,
            "content_steps": content_steps,
            "adversarial_steps": adv_steps,
            "seed": c.seed,
            "config_hash": c.digest(),
            "generator": {"depth": c.generator_depth, "width": c.generator_width, "skips": c.generator_skips},
        }
        tensors = {**base_tensors, **network_state([gen, disc])}
        tensors.update(_adam_tensors("generator", g_adam))
        tensors.update(_adam_tensors("discriminator", d_adam))
        return Checkpoint(tensors, meta)

    # phase 1: content losses only
    history: list[float] = []
    step = 0
    window = c.early_stop_window
    for k in range(c.refine_content_steps):
        x = dehazed_pool[batch_indices(c.seed, len(dehazed_pool), b, k, stream=1)]
        gen.zero_grad()
        refined = gen.forward(x)
        rep = rf_content(refined, x, c.ssim, weights)
        if not np.isfinite(rep.total):
            raise TrainingDivergedError(f"non-finite refinement loss at step {step}", snapshot(step, k, 0))
        gen.backward(rep.grads["refined"])
        adam_step(g_params(), {f"generator/{n}": g for n, g in gen.grads.items()}, g_adam)
        step += 1
        history.append(rep.total)
        rec = {"stage": "refine_content", "step": step, "total": rep.total, "losses": rep.components, "weights": rep.weights}
        if val_pool is not None and (step % c.val_every == 0):
            rec["val"] = _content_validation(gen, val_pool, c)
        log_.add(rec)
        if len(history) >= 2 * window:
            prev = float(np.mean(history[-2 * window : -window]))
            cur = float(np.mean(history[-window:]))
            if prev > 0 and (prev - cur) / prev < c.early_stop_tolerance:
                break
    content_steps = step
    end = {"stage": "refine_content", "step": step, "event": "phase_end"}
    if val_pool is not None:
        end["val"] = _content_validation(gen, val_pool, c)
    log_.add(end)
    phase1 = snapshot(step, content_steps, 0)
    if on_checkpoint:
        on_checkpoint("content", phase1)
    if c.refine_adversarial_steps == 0:
        return phase1, log_

    # phase 2: alternate discriminator and generator updates
    saturated = 0
    for k in range(c.refine_adversarial_steps):
        x = dehazed_pool[batch_indices(c.seed, len(dehazed_pool), b, k, stream=2)]
        y = target_pool[batch_indices(c.seed, len(target_pool), bt, k, stream=3)]

        fake = gen.forward(x)
        disc.zero_grad()
        d_real = disc.forward(y)
        _, _, g_real = adversarial_losses(d_real, np.full_like(d_real, 0.5))
        disc.backward(g_real["d_real"])
        d_fake = disc.forward(fake)
        d_loss, _, g_fake = adversarial_losses(d_real, d_fake)
        disc.backward(g_fake["d_fake"])
        adam_step(d_params(), {f"discriminator/{n}": g for n, g in disc.grads.items()}, d_adam)

        gen.zero_grad()
        refined = gen.forward(x)
        d_out = disc.forward(refined)
        rep = rf_total(refined, x, d_out, c.ssim, weights, c.adversarial_weight)
        g_img = disc.backward(rep.grads["d_fake"])
        gen.backward(rep.grads["refined"] + g_img)
        if not (np.isfinite(rep.total) and np.isfinite(d_loss)):
            raise TrainingDivergedError(f"non-finite adversarial loss at step {step}", phase1)
        adam_step(g_params(), {f"generator/{n}": g for n, g in gen.grads.items()}, g_adam)
        step += 1

        spread = float(np.mean(np.abs(np.concatenate([d_real, d_fake]) - 0.5)))
        saturated = saturated + 1 if spread > 0.499 else 0
        rec = {
            "stage": "refine_adversarial",
            "step": step,
            "total": rep.total,
            "losses": rep.components,
            "weights": rep.weights,
            "d_loss": d_loss,
        }
        if saturated == 100:
            rec["warning"] = "discriminator saturated for 100 consecutive steps"
            log.warning("discriminator saturated at step %d", step)
        if val_pool is not None and (step % c.val_every == 0 or k == c.refine_adversarial_steps - 1):
            rec["val"] = _content_validation(gen, val_pool, c)
        log_.add(rec)
    return snapshot(step, content_steps, c.refine_adversarial_steps), log_


# ---------------------------------------------------------------- inference


@dataclass
class PipelineOutput:
    transmission: np.ndarray | None
    dehazed: np.ndarray
    refined: np.ndarray | None = None


def generator_from_checkpoint(ckpt: Checkpoint) -> GeneratorNet:
    spec = ckpt.metadata.get("generator")
    if spec is None:
        raise CheckpointError("checkpoint holds no refinement generator")
    gen = GeneratorNet(spec["depth"], spec["width"], spec["skips"], DTYPE)
    load_into([gen], ckpt)
    return gen.eval()


def run_pipeline(hazy: np.ndarray, ckpt: Checkpoint, stage: str = "dehaze") -> PipelineOutput:
    """Deterministic inference; outputs are clamped to [0, 1]."""
    if stage not in ("dehaze", "refine"):
        raise ValueError(f"stage must be 'dehaze' or 'refine', got {stage!r}")
    model = dehaze_model_from_checkpoint(ckpt)
    hazy = np.asarray(hazy, dtype=DTYPE)
    t, dehazed = model.infer(hazy)
    refined = None
    if stage == "refine":
        gen = generator_from_checkpoint(ckpt)
        refined = np.clip(gen.forward(dehazed), 0, 1)
    return PipelineOutput(t, dehazed, refined)
