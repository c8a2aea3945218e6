"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary).
The desk-scale training run is shared by the generalization, refinement and
ablation checks.
"""

import math
import time

import numpy as np
import pytest

from acceptance_log import record
from dehaze.cli import main
from dehaze.config import Config
from dehaze.evaluation import baseline_report, evaluate_dataset, psnr_from_mse
from dehaze.haze_model import T_MIN, analytic_dehaze, build_dataset, generate_scene, make_sample, sample_haze_params
from dehaze.losses import (
    SsimConfig,
    adversarial_losses,
    d_total,
    mse_loss,
    rf_content,
    rf_total,
    ssim_loss,
    ssim_map,
    tp_total,
)
from dehaze.networks import DiscriminatorNet, GeneratorNet, HazeRemovalNet, init_weights
from dehaze.numerics import (
    ACTIVATIONS,
    BatchNorm,
    ConvLayer,
    activation_backward,
    activation_forward,
    batch_norm_backward,
    batch_norm_forward,
    conv2d_backward,
    conv2d_forward,
    gradcheck,
)
from dehaze.training import (
    AblationReport,
    dehaze_model_from_checkpoint,
    refinement_pools,
    run_pipeline,
    split_pool,
    train_ablation,
    train_dehazing,
    train_refinement,
)
from oracles import ssim_sliding_window

INSTANCES = 50


def _finish(number, ok, detail):
    record(number, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------- 1: gradients


def _layer_errors(rng):
    """Worst relative error per layer kind over one random instance each."""
    errs = {}
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    h, w = rng.integers(k, 8), rng.integers(k, 8)
    x = rng.normal(size=(n, cin, h, w))
    layer = ConvLayer.zeros(cin, cout, k, stride)
    layer.kernel[...] = rng.normal(size=layer.kernel.shape)
    layer.bias[...] = rng.normal(size=cout)
    g = rng.normal(size=conv2d_forward(x, layer).shape)
    gx, gk, gb = conv2d_backward(x, layer, g)
    f = lambda: float(np.sum(conv2d_forward(x, layer) * g))
    errs["conv"] = gradcheck(f, {"x": x, "k": layer.kernel, "b": layer.bias}, {"x": gx, "k": gk, "b": gb}, h=1e-5)

    for kind in ACTIVATIONS:
        a = rng.normal(size=(2, 2, 3, 3))
        ga = rng.normal(size=a.shape)
        f = lambda: float(np.sum(activation_forward(a, kind) * ga))
        errs[kind] = max(errs.get(kind, 0.0), gradcheck(f, {"a": a}, {"a": activation_backward(a, kind, ga)}, h=1e-6))

    c = int(rng.integers(1, 4))
    xb = rng.normal(1.0, 2.0, size=(int(rng.integers(2, 4)), c, 3, 4))
    bn = BatchNorm.create(c)
    bn.gamma[...] = rng.normal(size=c)
    bn.beta[...] = rng.normal(size=c)
    gy = rng.normal(size=xb.shape)
    _, cache = batch_norm_forward(xb, bn, "train")
    gxb, gg, gbeta = batch_norm_backward(cache, gy)
    f = lambda: float(np.sum(batch_norm_forward(xb, bn, "train")[0] * gy))
    errs["batch_norm"] = gradcheck(f, {"x": xb, "gamma": bn.gamma, "beta": bn.beta}, {"x": gxb, "gamma": gg, "beta": gbeta}, h=1e-5)
    return errs


def _loss_errors(rng):
    errs = {}
    hw = (int(rng.integers(13, 17)), int(rng.integers(13, 17)))
    n = int(rng.integers(1, 3))
    img = lambda c=3: rng.uniform(0.05, 0.95, size=(n, c) + hw)
    cfg = SsimConfig(patch_size=int(rng.choice([3, 7, 13])))
    pick = dict(max_entries=40, rng=rng, h=1e-6)

    p, t = img(), img()
    errs["mse"] = gradcheck(lambda: mse_loss(p, t)[0], {"p": p}, {"p": mse_loss(p, t)[1]}, **pick)
    errs["ssim"] = gradcheck(lambda: ssim_loss(p, t, cfg)[0], {"p": p}, {"p": ssim_loss(p, t, cfg)[1]}, **pick)

    dr, df = rng.uniform(0.05, 0.95, size=(2, 4))
    _, _, g = adversarial_losses(dr, df)
    errs["gan_discriminator"] = gradcheck(
        lambda: adversarial_losses(dr, df)[0], {"r": dr, "f": df}, {"r": g["d_real"], "f": g["d_fake"]}, h=1e-6
    )
    errs["gan_generator"] = gradcheck(lambda: adversarial_losses(None, df)[1], {"f": df}, {"f": g["g_fake"]}, h=1e-6)

    cs, fs, tt = img(1), img(1), img(1)
    rep = tp_total(cs, fs, tt, cfg)
    errs["tp_total"] = gradcheck(
        lambda: tp_total(cs, fs, tt, cfg).total, {"cs": cs, "fs": fs}, {"cs": rep.grads["cs_pred"], "fs": rep.grads["fs_pred"]}, **pick
    )
    res, hazy, clear = rng.normal(0, 0.1, size=(n, 3) + hw), img(), img()
    rep = d_total(res, hazy, clear, cfg)
    errs["d_total"] = gradcheck(lambda: d_total(res, hazy, clear, cfg).total, {"r": res}, {"r": rep.grads["residual"]}, **pick)
    ref, x = img(), img()
    rep = rf_content(ref, x, cfg)
    errs["rf_content"] = gradcheck(lambda: rf_content(ref, x, cfg).total, {"r": ref}, {"r": rep.grads["refined"]}, **pick)
    dfk = rng.uniform(0.05, 0.95, size=n)
    rep = rf_total(ref, x, dfk, cfg)
    errs["rf_total"] = gradcheck(
        lambda: rf_total(ref, x, dfk, cfg).total, {"r": ref, "d": dfk}, {"r": rep.grads["refined"], "d": rep.grads["d_fake"]}, **pick
    )
    return errs


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    layer_worst, loss_worst = {}, {}
    for i in range(INSTANCES):
        rng = np.random.default_rng([1, i])
        for k, v in _layer_errors(rng).items():
            layer_worst[k] = max(layer_worst.get(k, 0.0), v)
        for k, v in _loss_errors(rng).items():
            loss_worst[k] = max(loss_worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - start
    ok = max(layer_worst.values()) < 1e-4 and max(loss_worst.values()) < 1e-3 and elapsed < 120
    worst_layer = max(layer_worst, key=layer_worst.get)
    worst_loss = max(loss_worst, key=loss_worst.get)
    _finish(
        1, ok,
        f"{INSTANCES} instances each; worst layer {worst_layer} {layer_worst[worst_layer]:.1e} (<1e-4), "
        f"worst loss {worst_loss} {loss_worst[worst_loss]:.1e} (<1e-3), {elapsed:.0f}s (<120s)",
    )


# ---------------------------------------------------------------- 2-4: oracles


def test_criterion_2_haze_physics_inverse():
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([2, i])
        s = make_sample(generate_scene(rng, 24, 32), sample_haze_params(rng))
        rec = analytic_dehaze(s.hazy, s.transmission, s.params.A)
        mask = np.broadcast_to(s.transmission >= T_MIN, rec.shape)
        worst = max(worst, float(np.abs(rec - s.clear)[mask].max()))
    _finish(2, worst < 1e-6, f"max-abs recovery error {worst:.1e} over 100 scenes (<1e-6)")


def test_criterion_3_ssim_oracle():
    worst = ident = sym = 0.0
    for i in range(20):
        rng = np.random.default_rng([3, i])
        x, y = rng.uniform(size=(2, 1, 1, 16, 20))
        worst = max(worst, float(np.abs(ssim_map(x, y)[0, 0] - ssim_sliding_window(x[0, 0], y[0, 0])).max()))
        ident = max(ident, float(np.abs(ssim_map(x, x) - 1).max()))
        sym = max(sym, float(np.abs(ssim_map(x, y) - ssim_map(y, x)).max()))
    ok = worst < 1e-6 and ident < 1e-12 and sym < 1e-9
    _finish(3, ok, f"oracle diff {worst:.1e} (<1e-6), |S(x,x)-1| {ident:.1e}, asymmetry {sym:.1e} (<1e-9)")


def test_criterion_4_table_metric_consistency():
    psnr = psnr_from_mse(2053)
    ladder = [psnr_from_mse(m) for m in (2053, 1381, 1048, 655, 526, 477)]
    ok = abs(psnr - 15.0) <= 0.05 and all(a < b for a, b in zip(ladder, ladder[1:]))
    assert psnr == pytest.approx(10 * math.log10(255**2 / 2053))
    _finish(4, ok, f"MSE 2053 -> {psnr:.3f} dB (15.0 +/- 0.05); ladder {', '.join(f'{p:.2f}' for p in ladder)}")


# ---------------------------------------------------------------- 5: overfit


def test_criterion_5_overfit_single_batch():
    start = time.perf_counter()
    cfg = Config(height=32, width=32, dehaze_steps=500, batch_size_dehaze=4, val_every=500, checkpoint_every=500)
    train, val = build_dataset(5, 1, 4, 32, 32, val_scenes=1)
    _, log = train_dehazing(train, val, cfg)
    losses = log.losses()
    ratio = losses[-1]["total"] / losses[0]["total"]
    elapsed = time.perf_counter() - start
    _finish(
        5, ratio < 0.1 and elapsed < 300,
        f"total {losses[0]['total']:.4f} -> {losses[-1]['total']:.4f} ({100 * ratio:.1f}% of initial, <10%), {elapsed:.0f}s (<300s)",
    )


# ---------------------------------------------------------------- 6, 8, 9: desk-scale runs


@pytest.fixture(scope="module")
def desk():
    cfg = Config()
    train, val = build_dataset(cfg.seed, cfg.train_scenes, cfg.samples_per_scene, cfg.height, cfg.width, val_scenes=cfg.val_scenes)
    start = time.perf_counter()
    ckpt, log = train_dehazing(train, val, cfg)
    return cfg, train, val, ckpt, log, time.perf_counter() - start


def test_criterion_6_desk_generalization(desk):
    cfg, train, val, ckpt, log, train_time = desk
    start = time.perf_counter()
    identity, oracle = baseline_report(val, "val", cfg.ssim)
    out = run_pipeline(np.concatenate([s.hazy for s in val]), ckpt)
    learned = evaluate_dataset([d[None] for d in out.dehazed], [s.clear for s in val], "dehaze", "val", cfg=cfg.ssim)
    elapsed = train_time + time.perf_counter() - start
    margin = learned.mean_ssim - identity.mean_ssim
    ok = (
        len(train) == 256 and len(val) == 64
        and margin >= 0.05
        and learned.mean_mse < identity.mean_mse
        and identity.mean_ssim <= learned.mean_ssim <= oracle.mean_ssim
        and elapsed < 1800
    )
    _finish(
        6, ok,
        f"val SSIM identity {identity.mean_ssim:.4f} / learned {learned.mean_ssim:.4f} / oracle {oracle.mean_ssim:.4f} "
        f"(margin {margin:+.4f}, need >= 0.05); MSE(0-255) identity {identity.mean_mse:.1f} vs learned {learned.mean_mse:.1f}; "
        f"{elapsed / 60:.1f} min (<30)",
    )


def test_criterion_7_residual_identity():
    rng = np.random.default_rng(7)
    net = init_weights(HazeRemovalNet(), rng, zero_output=True)
    hazy = rng.uniform(size=(2, 3, 48, 64)).astype(np.float32)
    t = rng.uniform(0.05, 1, size=(2, 1, 48, 64)).astype(np.float32)
    _, dehazed = net.forward(hazy, t)
    ok = dehazed.dtype == hazy.dtype and np.array_equal(dehazed.view(np.uint32), hazy.view(np.uint32))
    _finish(7, ok, "zero-initialized output layer: dehazed output bitwise equal to hazy input")


def test_criterion_8_refinement_contract(desk):
    cfg, _, _, ckpt, _, _ = desk
    dehazed, target = refinement_pools(cfg, dehaze_model_from_checkpoint(ckpt, cfg))
    train_pool, val_pool = split_pool(dehazed)
    phases = {}
    final, log = train_refinement(train_pool, target, cfg, val_pool=val_pool, base=ckpt, on_checkpoint=lambda k, c: phases.setdefault(k, c))
    end_p1 = [r for r in log.records if r.get("event") == "phase_end"][0]
    rf_mse = end_p1["val"]["rf_mse"]
    rng = np.random.default_rng([cfg.seed, 20])
    init_weights(GeneratorNet(cfg.generator_depth, cfg.generator_width, cfg.generator_skips), rng)
    fresh = init_weights(DiscriminatorNet(), rng)
    untouched = all(
        np.array_equal(phases["content"].tensors[f"discriminator/{k}"], v.astype(np.float32))
        for k, v in {**fresh.params(), **fresh.buffers()}.items()
    )
    adv = log.losses("refine_adversarial")
    finite = all(np.isfinite(r["total"]) and np.isfinite(r["d_loss"]) and all(np.isfinite(list(r["losses"].values()))) for r in adv)
    weight_ok = all(r["weights"]["gan"] == 1e-3 for r in adv) and all(
        r["total"] == pytest.approx(sum(r["weights"][k] * v for k, v in r["losses"].items()), rel=1e-9) for r in adv
    )
    ok = rf_mse < 1e-3 and untouched and len(adv) == 500 and finite and weight_ok
    _finish(
        8, ok,
        f"phase 1: {end_p1['step']} steps, val L_rf_MSE {rf_mse:.2e} (<1e-3); discriminator untouched: {untouched}; "
        f"phase 2: {len(adv)} steps, all finite: {finite}, adversarial weight 1e-3: {weight_ok}",
    )


def test_criterion_9_ablation_harness(desk, tmp_path):
    cfg, train, val, full_ckpt, full_log, _ = desk
    abl_ckpt, abl_log = train_ablation(train, val, cfg)
    report = AblationReport(full_log, abl_log, full_ckpt, abl_ckpt)
    path = tmp_path / "ablation_curves.csv"
    path.write_text(report.to_csv())
    curves = report.curves()
    ok = (
        len(curves) >= 2
        and abl_ckpt.tensors["haze/block1_conv1/kernel"].shape[1] == 3
        and full_log.to_jsonl() != abl_log.to_jsonl()
        and path.read_text().startswith("step,full_val_mse,ablation_val_mse")
    )
    _finish(9, ok, f"{len(curves)} paired validation points; {report.summary().strip()} (direction recorded, not asserted)")


# ---------------------------------------------------------------- 10: determinism

DET_CFG = """\
height = 32
width = 32
train_scenes = 3
val_scenes = 1
samples_per_scene = 2
dehaze_steps = 8
val_every = 4
checkpoint_every = 4
haze_width = 8
batch_size_dehaze = 2
gradcheck_entries = 2
"""


def _end_to_end(root):
    cfg = root / "run.cfg"
    cfg.write_text(DET_CFG)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--mode", "dehaze", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "runs")]) == 0
    run = next((root / "runs").iterdir())
    assert main(["eval", "--ckpt", str(run / "final.ckpt"), "--data", str(root / "data"), "--out", str(root / "report.txt")]) == 0
    files = {"manifest.json": root / "data" / "manifest.json", "report.txt": root / "report.txt", "report.csv": root / "report.csv"}
    for p in run.iterdir():
        if not p.name.endswith("_timings.tsv"):
            files[p.name] = p
    return {k: v.read_bytes() for k, v in files.items()}


def test_criterion_10_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _end_to_end(tmp_path / "a"), _end_to_end(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differing and any(k.endswith(".ckpt") for k in a) and any(k.endswith(".jsonl") for k in a)
    _finish(10, ok, f"{len(a)} artifacts compared byte-for-byte (manifest, logs, checkpoints, reports); differing: {differing or 'none'}")
