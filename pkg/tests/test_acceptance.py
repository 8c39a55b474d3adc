"""Acceptance gate: ten end-to-end criteria at their stated tolerances.

Each test records a PASS/FAIL line (printed immediately and again in the
pytest terminal summary). Criteria 7 to 9 share one set of trained models;
training all three variants takes roughly half an hour on one CPU core.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from ammdiff.cli import main
from ammdiff.config import RunConfig
from ammdiff.dataset import (all_presence_masks, generate_phantom_dataset, leave_one_out_masks, load_stack,
                             split_dataset)
from ammdiff.diffusion import make_schedule, q_sample, sample_loop
from ammdiff.evaluation import CopyBaseline, correlation_table, evaluate_split, model_predictor, mse, psnr, ssim
from ammdiff.iffn import IFFNConfig, build_iffn, cosine_loss
from ammdiff.model import ModelConfig, build_model, diffusion_loss, impute, load_pretrained_iffn
from ammdiff.spectral import SpectralConfig, build_high_pass_filter, extract_high_freq, spectral_features
from ammdiff.training import moving_average, pretrain_iffn, train_amm

from conftest import ACCEPTANCE_LINES
from test_iffn import finite_difference_check
from test_spectral import naive_extract


def record(n: int, title: str, ok: bool, detail: str):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1-6: oracle and property criteria


def test_c01_oracle_sampler():
    schedule = make_schedule()
    root = torch.as_tensor(np.sqrt(1.0 - schedule.alpha_bar))
    start = time.perf_counter()
    x = sample_loop(lambda x_t, t, c: root[t] * x_t, None, schedule, np.random.default_rng(0), (10_000,),
                    dtype=torch.float64)
    elapsed = time.perf_counter() - start
    mean, var = float(x.mean()), float(x.var())
    ok = abs(mean) <= 0.05 and 0.9 <= var <= 1.1 and elapsed < 10
    record(1, "oracle sampler", ok, f"mean {mean:+.4f}, var {var:.4f}, {elapsed:.2f}s")


def test_c02_forward_marginal():
    schedule = make_schedule()
    x0, n = 5.0, 100_000
    worst = 0.0
    for k, t in enumerate((1, schedule.T // 2, schedule.T - 1)):
        eps = torch.as_tensor(np.random.default_rng(k).standard_normal(n))
        xt = q_sample(torch.full((n,), x0, dtype=torch.float64), torch.full((n,), t), eps, schedule)
        ab = schedule.alpha_bar[t]
        worst = max(worst, abs(xt.mean().item() / (math.sqrt(ab) * x0) - 1),
                    abs(xt.std().item() / math.sqrt(1 - ab) - 1))
    record(2, "forward marginal", worst <= 0.01, f"worst relative error {worst:.5f} over t in {{1, T/2, T-1}}")


def test_c03_spectral_suite():
    rng = np.random.default_rng(0)
    cfg = SpectralConfig()
    imgs = rng.random((5, 16, 16))

    dc = max(float(np.abs(spectral_features(x[None] + c, cfg) - spectral_features(x[None], cfg)).max())
             for x, c in zip(imgs, (0.3, 1.0, 2.5, 7.0, 0.01)))

    filt = build_high_pass_filter(16, 16, cfg)
    fy = (np.arange(16) - 8) / 16.0
    r2 = fy[:, None] ** 2 + fy[None, :] ** 2
    s = cfg.cutoff_radius * 0.5 * cfg.smoothness
    gain = 1.0 - np.exp(-r2 / (2 * s * s))
    gain[8, 8] = 0.0
    filter_err = float(np.abs(filt.gain - gain).max())
    dft_err = max(float(np.abs(extract_high_freq(x, filt) - naive_extract(x, gain)).max()) for x in imgs)

    feats = spectral_features(rng.random((3, 4, 16, 16)), cfg)
    in_range = feats.min() >= 0.0 and feats.max() <= 1.0
    stack = rng.random((4, 16, 16))
    stack[1] = 0.0
    blank_zero = not spectral_features(stack, cfg)[1].any()

    ok = dc <= 1e-6 and dft_err <= 1e-5 and filter_err <= 1e-12 and in_range and blank_zero
    record(3, "spectral suite", ok, f"DC shift {dc:.1e}, naive DFT {dft_err:.1e}, range ok {in_range}, "
                                    f"blank->0 {blank_zero}")


def test_c04_metric_oracles():
    rng = np.random.default_rng(4)
    ssim_err = psnr_err = 0.0
    identity = True
    for _ in range(20):
        a = rng.random((48, 40))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        ssim_err = max(ssim_err, abs(ssim(a, b) - ref))
        psnr_err = max(psnr_err, abs(psnr(a, b) - peak_signal_noise_ratio(a, b, data_range=1.0)))
        identity &= psnr(a, b) == 10 * np.log10(1.0 / mse(a, b))
    ok = ssim_err <= 1e-4 and psnr_err <= 1e-9 and identity
    record(4, "metric oracles", ok, f"SSIM {ssim_err:.1e}, PSNR {psnr_err:.1e}, psnr/mse identity {identity}")


def test_c05_all_presence_configurations(trained):
    model, schedule, cfg = trained["pretrained"]
    masks = np.stack(all_presence_masks(4))
    images = np.repeat(trained["test"][:1], len(masks), axis=0)
    gen, comp = impute(model, images, masks, schedule, np.random.default_rng(0), cfg.spectral_config())
    shapes_ok = gen.shape == comp.shape == images.shape and gen.shape[1] == 4
    exact = all(np.array_equal(comp[i][m], images[i][m]) for i, m in enumerate(masks))
    record(5, "adaptive output", len(masks) == 14 and shapes_ok and exact,
           f"{len(masks)} configs, 4 channels each {shapes_ok}, present channels bit-exact {exact}")


def test_c06_gradient_checks():
    icfg = IFFNConfig(base_channels=8, rep_channels=8, n_res_blocks=1)
    u = torch.randn(2, 8, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
    v = torch.randn(2, 8, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    cosine_loss(u, v).backward()
    flat = u.detach().clone().view(-1)
    numeric = np.zeros(flat.numel())
    h = 1e-6
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        numeric[i] = (cosine_loss(up.view_as(u), v) - cosine_loss(down.view_as(u), v)).item() / (2 * h)
    analytic = u.grad.view(-1).numpy()
    cos_rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)

    results = []
    for param in ("eps", "v"):
        model = build_model(ModelConfig(base_channels=8, parameterization=param), icfg, seed=6, dtype=torch.float64)
        schedule = make_schedule(5)
        rng = np.random.default_rng(0)
        images = rng.random((2, 4, 8, 8)).astype(np.float32)
        masks = np.stack([all_presence_masks(4)[3], all_presence_masks(4)[9]])
        t, eps = np.array([1, 4]), rng.standard_normal(images.shape)
        rel, _, _ = finite_difference_check(lambda: diffusion_loss(model, images, masks, t, eps, schedule),
                                            model.iffn, n=12, seed=1)
        results.append(rel)
    ok = cos_rel <= 1e-3 and max(results) <= 1e-3
    record(6, "gradient checks", ok, f"cosine_loss {cos_rel:.1e}, diffusion loss wrt IFFN "
                                     f"{results[0]:.1e} (eps) / {results[1]:.1e} (v)")


# ---------------------------------------------------------------------------
# 7-9: trained models on the default phantom cohort


def _pretrained_iffn(cfg, images):
    tc = cfg.train_config()
    iffn = build_iffn(cfg.iffn_config(), seed=cfg.seed)
    _, losses = pretrain_iffn(iffn, images, tc.pretrain_steps, cfg.seed, cfg.patch_spec(), cfg.spectral_config(),
                              tc.batch_size, tc.pretrain_lr, tc.grad_clip)
    return iffn, losses


def _train_variant(cfg, images, conditioning, iffn=None):
    tc = cfg.train_config()
    schedule = cfg.make_schedule()
    model = build_model(cfg.model_config(conditioning), cfg.iffn_config(), seed=cfg.seed)
    if iffn is not None:
        load_pretrained_iffn(model, iffn)
    _, losses = train_amm(model, images, schedule, tc.train_steps, cfg.seed, cfg.spectral_config(),
                          tc.batch_size, tc.lr, tc.grad_clip)
    return model, schedule, losses


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = RunConfig(output_dir=str(tmp_path_factory.mktemp("acceptance")))
    handle = generate_phantom_dataset(cfg.phantom_spec())
    train, _, test = split_dataset(handle, tuple(cfg.data.split), cfg.seed)
    images = load_stack(train)
    out = {"cfg": cfg, "n_subjects": len(handle.subjects), "train": images, "test": load_stack(test),
           "table": correlation_table(images)}

    start = time.perf_counter()
    iffn, out["pretrain_losses"] = _pretrained_iffn(cfg, images)
    model, schedule, out["train_losses"] = _train_variant(cfg, images, "iffn", iffn)
    out["seconds"] = time.perf_counter() - start
    out["pretrained"] = (model, schedule, cfg)

    for name, conditioning in (("iffn", "iffn"), ("unet", "unet")):
        model, schedule, _ = _train_variant(cfg, images, conditioning)
        out[name] = (model, schedule, cfg)
    return out


def _test_psnr(trained, variant):
    model, schedule, cfg = trained[variant]
    report = evaluate_split(trained["test"], model_predictor(model, schedule, cfg.spectral_config()),
                            leave_one_out_masks(4), np.random.default_rng([cfg.seed, 11]), diagnostics=False)
    return report.mean("psnr")


def test_c07_training_smoke(trained):
    cfg = trained["cfg"]
    pre, amm = trained["pretrain_losses"], trained["train_losses"]
    pre_drop = 1 - moving_average(pre, 20)[-1] / pre[0]
    amm_drop = 1 - moving_average(amm, 100)[-1] / amm[0]
    ok = (trained["n_subjects"] >= 64 and cfg.data.height == cfg.data.width == 64
          and len(pre) <= 500 and len(amm) <= 2000
          and pre_drop >= 0.8 and amm_drop >= 0.5 and trained["seconds"] <= 600)
    record(7, "training smoke", ok, f"pretrain loss -{100 * pre_drop:.1f}% in {len(pre)} steps, "
                                    f"AMM loss -{100 * amm_drop:.1f}% in {len(amm)} steps, {trained['seconds']:.0f}s")


def test_c08_beats_copy_baseline(trained):
    cfg = trained["cfg"]
    model_psnr = _test_psnr(trained, "pretrained")
    baseline = evaluate_split(trained["test"], CopyBaseline(trained["table"]), leave_one_out_masks(4),
                              np.random.default_rng([cfg.seed, 11]), diagnostics=False).mean("psnr")
    trained["psnr_pretrained"] = model_psnr
    record(8, "beats copy baseline", model_psnr >= baseline + 1.0,
           f"model {model_psnr:.2f} dB vs baseline {baseline:.2f} dB (margin {model_psnr - baseline:+.2f})")


def test_c09_ablation_ordering(trained):
    pre = trained.get("psnr_pretrained") or _test_psnr(trained, "pretrained")
    iffn = _test_psnr(trained, "iffn")
    unet = _test_psnr(trained, "unet")
    ok = unet < iffn and pre >= iffn - 0.1
    record(9, "ablation ordering", ok, f"unet-only {unet:.2f} < iffn {iffn:.2f} <= pretrained {pre:.2f} dB "
                                       "(0.1 dB tie allowance)")


# ---------------------------------------------------------------------------
# 10: CLI determinism

TINY = ["--set", "data.n_subjects=12", "--set", "data.height=32", "--set", "data.width=32",
        "--set", "data.patch_size=8", "--set", "schedule.T=20", "--set", "train.pretrain_steps=4",
        "--set", "train.train_steps=6", "--set", "train.log_every=1", "--set", "train.val_every=3",
        "--set", "train.batch_size=4"]


def _run_pipeline(out: Path) -> dict:
    common = ["--output-dir", str(out), *TINY]
    for argv in (["gen-data"], ["pretrain"], ["train"], ["impute", "--presence", "1,0,1,0"], ["eval"]):
        assert main([argv[0], *common, *argv[1:]]) == 0, argv
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_c10_cli_determinism(tmp_path):
    out = tmp_path / "run"
    first = _run_pipeline(out)
    shutil.rmtree(out)
    second = _run_pipeline(out)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    kinds = {"ckpt", "jsonl", "f32", "png", "json", "log", "txt"}
    covered = sorted({k.rsplit(".", 1)[-1] for k in first} & kinds)
    record(10, "determinism", not differing and len(first) > 0,
           f"{len(first)} artifacts byte-identical across two runs ({', '.join(covered)})"
           if not differing else f"differs: {differing[:5]}")
