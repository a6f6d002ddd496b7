"""Acceptance criteria 1-10, one test each.

Criteria 6-8 share cached desk runs: 512 synthetic pairs (master seed 1) at
64x48, the desk configuration, 30 epochs, trained once with the mask channel
intact and once with it zeroed. The held-out test set is a separate synthetic
draw of 64 pairs (master seed 2). On one CPU core the whole module takes
about 25 minutes. Thresholds come from tests/fixtures/desk_pilot.json.
"""

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from flatlay.cli import main
from flatlay.codec import CodecConfig, build_codec
from flatlay.conditioning import assemble_training_canvas, clean_target, encode_pairs, extract_garment
from flatlay.config import RunConfig
from flatlay.diffusion import make_linear_schedule
from flatlay.gradcheck import grad_check
from flatlay.metrics import evaluate_images, fid, kid, seed_sweep, ssim, sweep_summary, write_report_csv
from flatlay.sampler import batch_sample, denoise, sample_batch
from flatlay.synth import synthesize
from flatlay.trainer import Trainer, train_loop
from flatlay.unet import UNetConfig, build_unet, count_params, select_trainable

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "desk_pilot.json").read_text())
THRESHOLDS = FIXTURE["thresholds"]
SWEEP_SEEDS = FIXTURE["sweep_seeds"]


# --- cached desk runs ----------------------------------------------------------------


@dataclasses.dataclass
class DeskRun:
    result: object
    train_seconds: float
    seed0: object  # MetricReport at sampling seed 0
    sample_seconds: float
    sweep: list
    sweep_seconds: float

    @property
    def val(self):
        return [r["loss"] for r in self.result.history if r["split"] == "val"]

    def mean(self, key):
        return float(np.mean([getattr(r, key) for r in self.sweep]))


def evaluate(model, codec, sched, pairs, seed, mask_channel):
    out = batch_sample(model, codec, sched, pairs, seed, mask_channel=mask_channel)
    return evaluate_images([out[p.id] for p in pairs], [p.garment for p in pairs], [p.category for p in pairs],
                           seed=seed)


def desk_run(mask_channel: bool, train_pairs, test_pairs) -> DeskRun:
    cfg = RunConfig()
    sched = cfg.schedule.build()
    train_cfg = dataclasses.replace(cfg.train, mask_channel=mask_channel)
    t0 = time.perf_counter()
    result = train_loop(train_pairs, train_cfg, cfg.unet, cfg.codec, sched)
    t1 = time.perf_counter()
    tr = result.trainer
    seed0 = evaluate(tr.model, tr.codec, sched, test_pairs, 0, mask_channel)
    t2 = time.perf_counter()
    sweep = seed_sweep(tr.model, tr.codec, sched, test_pairs, SWEEP_SEEDS, mask_channel=mask_channel)
    t3 = time.perf_counter()
    return DeskRun(result, t1 - t0, seed0, t2 - t1, sweep, t3 - t2)


@pytest.fixture(scope="session")
def train_pairs():
    return synthesize(512, 1)


@pytest.fixture(scope="session")
def test_pairs():
    return synthesize(FIXTURE["test_set"]["n"], FIXTURE["test_set"]["master_seed"])


@pytest.fixture(scope="session")
def desk(train_pairs, test_pairs):
    return desk_run(True, train_pairs, test_pairs)


@pytest.fixture(scope="session")
def desk_no_mask(train_pairs, test_pairs):
    return desk_run(False, train_pairs, test_pairs)


# --- 1-5: properties -----------------------------------------------------------------


def test_criterion_01_codec_round_trip(measure):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for cfg in (CodecConfig(4, 48, "orthonormal"), CodecConfig(8, 192, "orthonormal")):
        codec = build_codec(cfg)
        x = torch.from_numpy(rng.random((100, 3, 64, 48), dtype=np.float32))
        worst = max(worst, (codec.decode(codec.encode(x)) - x).abs().max().item())
    elapsed = time.perf_counter() - t0
    measure(max_abs_error=worst, seconds=elapsed)
    assert worst < 1e-5 and elapsed < 5


def test_criterion_02_gradient_check(measure):
    t0 = time.perf_counter()
    model = build_unet(RunConfig().unet, make_linear_schedule())
    torch.nn.init.normal_(model.out_conv.weight, std=0.05, generator=torch.Generator().manual_seed(1))
    gen = torch.Generator().manual_seed(3)
    canvas, eps = torch.randn(9, 16, 12, generator=gen), torch.randn(4, 16, 12, generator=gen)
    report = grad_check(model, canvas, 250, eps, n_params=100, tolerance=1e-3)
    elapsed = time.perf_counter() - t0
    measure(max_rel_error=report.max_rel_error, n_checked=report.n_checked, seconds=elapsed)
    assert report.n_checked == 100 and report.max_rel_error < 1e-3 and elapsed < 120


def test_criterion_03_canvas_shapes(measure):
    t0 = time.perf_counter()
    sched = make_linear_schedule()
    pair = synthesize(1, 0)[0]
    lat = encode_pairs([pair], build_codec(CodecConfig(8, 4, "random_projection")))
    canvas = assemble_training_canvas(lat, torch.zeros(1, 4, 16, 6), torch.tensor([10]), sched)
    assert tuple(canvas.assembled.shape[1:]) == (9, 16, 6)
    checked = 1
    for f in (2, 4, 8):
        for c in (1, 3, 4, 8):
            for (H, W) in ((64, 48), (32, 32)):
                x = np.random.default_rng(c).random((3, H, W))
                p = dataclasses.replace(pair, person=x, garment=x, mask=np.ones((H, W)), masked_person=None)
                lat = encode_pairs([p], build_codec(CodecConfig(f, c, "random_projection")))
                eps = torch.zeros(1, c, 2 * H // f, W // f)
                I = assemble_training_canvas(lat, eps, torch.tensor([5]), sched).assembled
                assert tuple(I.shape[1:]) == (2 * c + 1, 2 * H // f, W // f)
                checked += 1
    elapsed = time.perf_counter() - t0
    measure(configurations=checked, seconds=elapsed)
    assert elapsed < 1


def test_criterion_04_frozen_parameters_and_counts(train_pairs, measure):
    t0 = time.perf_counter()
    cfg = RunConfig()
    sched = cfg.schedule.build()
    model = build_unet(cfg.unet, sched)
    torch.nn.init.normal_(model.out_conv.weight, std=0.05, generator=torch.Generator().manual_seed(0))
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train_cfg = dataclasses.replace(cfg.train, selector="transformer")
    tr = Trainer(model, build_codec(cfg.codec), sched, train_cfg)
    lat = encode_pairs(train_pairs[:400], tr.codec)
    for step in range(50):
        idx = torch.arange(8 * step, 8 * step + 8)
        tr.train_step(lat[idx])
    selected = set(select_trainable(model, "transformer"))
    frozen_ok = all(torch.equal(p, before[n]) for n, p in model.named_parameters() if n not in selected)
    moved = sum(not torch.equal(p, before[n]) for n, p in model.named_parameters() if n in selected)

    counts = {s: count_params(model, s) for s in ("attention", "transformer", "full")}
    removed = count_params(build_unet(UNetConfig()), "full")
    present = count_params(build_unet(UNetConfig(cross_attention_dim=64)), "full")
    elapsed = time.perf_counter() - t0
    measure(**counts, selected_moved=moved, cross_removed=removed, cross_present=present, seconds=elapsed)
    assert frozen_ok and moved > 0
    assert counts["attention"] < counts["transformer"] < counts["full"]
    assert removed < present and elapsed < 120


def oracle_denoiser(z0, c, sched):
    def fn(canvas, t):
        ab = sched.alpha_bar(int(t[0]))
        return (canvas[:, :c] - math.sqrt(ab) * z0) / math.sqrt(1 - ab)

    return fn


def test_criterion_05_oracle_denoiser(measure):
    t0 = time.perf_counter()
    sched = make_linear_schedule()
    codec = build_codec(CodecConfig(4, 48, "orthonormal"))
    pairs = synthesize(4, 6)
    lat = encode_pairs(pairs, codec)
    z0 = clean_target(lat)
    z_T = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0))
    latent = denoise(oracle_denoiser(z0, 48, sched), lat, z_T, sched, steps=50)
    latent_err = (extract_garment(latent) - extract_garment(z0)).abs().max().item()
    imgs = sample_batch(oracle_denoiser(z0, 48, sched), codec, sched, pairs, seed=0, steps=50)
    image_err = max(np.abs(img.numpy() - p.garment).max() for img, p in zip(imgs, pairs))
    elapsed = time.perf_counter() - t0
    measure(latent_max_error=latent_err, image_max_error=float(image_err), seconds=elapsed)
    assert latent_err < 1e-3 and image_err < 1e-3 and elapsed < 10


# --- 6-8: desk runs ------------------------------------------------------------------


def test_criterion_06_desk_training_efficacy(desk, test_pairs, measure):
    cfg = RunConfig()
    sched = cfg.schedule.build()
    t0 = time.perf_counter()
    untrained = evaluate(build_unet(cfg.unet, sched), build_codec(cfg.codec), sched, test_pairs, 0, True)
    base_seconds = time.perf_counter() - t0
    val = desk.val
    drop = 1.0 - val[-1] / val[0]
    gain = desk.seed0.ssim - untrained.ssim
    runtime = desk.train_seconds + desk.sample_seconds + base_seconds
    measure(val_epoch1=val[0], val_final=val[-1], val_drop=drop, ssim_trained=desk.seed0.ssim,
            ssim_untrained=untrained.ssim, ssim_gain=gain, seconds=runtime)
    assert len(val) == 30
    assert drop >= THRESHOLDS["val_loss_drop_fraction"]
    assert gain >= THRESHOLDS["ssim_gain_over_untrained"]
    assert runtime < 30 * 60


def test_criterion_07_mask_guidance_direction(desk, desk_no_mask, measure):
    intact = {"ssim": desk.mean("ssim"), "fid": desk.mean("fid")}
    zeroed = {"ssim": desk_no_mask.mean("ssim"), "fid": desk_no_mask.mean("fid")}
    runtime = sum(r.train_seconds + r.sample_seconds + r.sweep_seconds for r in (desk, desk_no_mask))
    measure(ssim_intact=intact["ssim"], ssim_zeroed=zeroed["ssim"], fid_intact=intact["fid"],
            fid_zeroed=zeroed["fid"], seconds=runtime)
    assert intact["ssim"] > zeroed["ssim"]
    assert intact["fid"] < zeroed["fid"]
    assert runtime < 60 * 60


def test_criterion_08_seed_sensitivity(desk, test_pairs, tmp_path, measure):
    fids = [r.fid for r in desk.sweep]
    spread = max(fids) - min(fids)
    tr = desk.result.trainer
    t0 = time.perf_counter()
    again = seed_sweep(tr.model, tr.codec, tr.sched, test_pairs, SWEEP_SEEDS[::-1])
    rerun_seconds = time.perf_counter() - t0
    write_report_csv(desk.sweep, tmp_path / "a.csv")
    write_report_csv(again, tmp_path / "b.csv")
    summary = sweep_summary(desk.sweep)
    measure(fid_spread=spread, best=[r["seed"] for r in summary["best"]],
            worst=[r["seed"] for r in summary["worst"]], seconds=desk.sweep_seconds)
    assert spread > 0
    assert sorted(r.seed for r in desk.sweep) == SWEEP_SEEDS
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "seed,ssim,fid,kid,n_images"
    assert len(summary["best"]) == 3 and len(summary["worst"]) == 3
    assert sweep_summary(again) == summary
    assert max(desk.sweep_seconds, rerun_seconds) < 10 * 60


# --- 9-10 ----------------------------------------------------------------------------


def brute_ssim(a, b, size, sigma=1.5):
    ax = [math.exp(-((i - size // 2) ** 2) / (2 * sigma**2)) for i in range(size)]
    w = [[ax[i] * ax[j] / sum(ax) ** 2 for j in range(size)] for i in range(size)]
    C1, C2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[0]):
        for y in range(a.shape[1] - size + 1):
            for x in range(a.shape[2] - size + 1):
                pa = [[float(a[ch, y + i, x + j]) for j in range(size)] for i in range(size)]
                pb = [[float(b[ch, y + i, x + j]) for j in range(size)] for i in range(size)]
                ma = sum(w[i][j] * pa[i][j] for i in range(size) for j in range(size))
                mb = sum(w[i][j] * pb[i][j] for i in range(size) for j in range(size))
                va = sum(w[i][j] * (pa[i][j] - ma) ** 2 for i in range(size) for j in range(size))
                vb = sum(w[i][j] * (pb[i][j] - mb) ** 2 for i in range(size) for j in range(size))
                cab = sum(w[i][j] * (pa[i][j] - ma) * (pb[i][j] - mb) for i in range(size) for j in range(size))
                vals.append((2 * ma * mb + C1) * (2 * cab + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2)))
    return sum(vals) / len(vals)


def brute_kid(a, b):
    d = a.shape[1]

    def k(x, y):
        return (sum(float(p) * float(q) for p, q in zip(x, y)) / d + 1.0) ** 3

    n, m = len(a), len(b)
    xx = sum(k(a[i], a[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(b[i], b[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    if n == m:
        xy = sum(k(a[i], b[j]) for i in range(n) for j in range(m) if i != j) / (n * (n - 1))
    else:
        xy = sum(k(a[i], b[j]) for i in range(n) for j in range(m)) / (n * m)
    return xx + yy - 2 * xy


def diagonal_sample(mu, sd):
    """Eight points whose sample mean is ``mu`` and sample covariance is ``diag(sd^2)`` exactly."""
    h = np.array([[1, 1, 1, 1, -1, -1, -1, -1], [1, 1, -1, -1, 1, 1, -1, -1], [1, -1, 1, -1, 1, -1, 1, -1]], float).T
    h = h[:, : len(mu)] * math.sqrt(7 / 8)  # unit sample variance per column
    return np.asarray(mu) + h * np.asarray(sd)


def test_criterion_09_metric_oracles(measure):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ssim_err = 0.0
    for window in (3, 5, 7):
        a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        ssim_err = max(ssim_err, abs(ssim(a, b, window=window) - brute_ssim(a, b, window)))

    feats = rng.standard_normal((40, 6))
    fid_self = abs(fid(feats, feats))
    mu_a, sd_a, mu_b, sd_b = [0.0, 1.0, -2.0], [1.0, 0.5, 2.0], [0.5, 1.5, -1.0], [2.0, 0.5, 1.0]
    closed = sum((x - y) ** 2 for x, y in zip(mu_a, mu_b)) + sum((x - y) ** 2 for x, y in zip(sd_a, sd_b))
    fid_err = abs(fid(diagonal_sample(mu_a, sd_a), diagonal_sample(mu_b, sd_b)) - closed)

    kid_err = 0.0
    for n, m in ((5, 5), (6, 9)):
        a, b = rng.standard_normal((n, 4)), rng.standard_normal((m, 4)) + 0.3
        kid_err = max(kid_err, abs(kid(a, b) - brute_kid(a, b)))
    draws = np.array([kid(rng.standard_normal((12, 4)), rng.standard_normal((12, 4))) for _ in range(300)])
    kid_mean, kid_se = draws.mean(), draws.std(ddof=1) / math.sqrt(len(draws))
    elapsed = time.perf_counter() - t0
    measure(ssim_err=ssim_err, fid_self=fid_self, fid_diag_err=fid_err, kid_err=kid_err,
            kid_null_mean=kid_mean, kid_null_se=kid_se, seconds=elapsed)
    assert ssim_err < 1e-9 and fid_self < 1e-6 and fid_err < 1e-6 and kid_err < 1e-9
    assert abs(kid_mean) < 3 * kid_se
    assert elapsed < 60


def test_criterion_10_determinism(tmp_path, measure):
    assert main(["synth", "16", "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    assert main(["synth", "16", "--seed", "3", "--out", str(tmp_path / "data2")]) == 0
    cfg = RunConfig().to_dict()
    cfg["unet"].update(base_channels=16, channel_multipliers=[1, 2], attention_levels=[1])
    cfg["train"].update(epochs=2, batch_size=4, val_fraction=0.25)
    cfg["sample"]["steps"] = 5
    cfg["paths"]["dataset_dir"] = str(tmp_path / "data")
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))

    files = {}
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["train", "--config", str(tmp_path / "run.yaml"), f"--paths.checkpoint={d / 'model.ckpt'}",
                     f"--paths.report_dir={d}"]) == 0
        assert main(["infer", "--checkpoint", str(d / "model.ckpt"), "--data", str(tmp_path / "data"),
                     "--steps", "5", "--seed", "36", "--out", str(d / "gen")]) == 0
        assert main(["eval", str(d / "gen"), str(tmp_path / "data"), "--out", str(d / "eval")]) == 0
        files[run] = {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
    data = {p.relative_to(tmp_path / "data"): p.read_bytes() for p in (tmp_path / "data").rglob("*") if p.is_file()}
    data2 = {p.relative_to(tmp_path / "data2"): p.read_bytes() for p in (tmp_path / "data2").rglob("*") if p.is_file()}
    kinds = sorted({p.suffix for p in files["a"]})
    measure(files_compared=len(files["a"]) + len(data), kinds=kinds)
    assert data == data2
    assert files["a"].keys() == files["b"].keys() and files["a"] == files["b"]
    assert {".ckpt", ".csv", ".png", ".json"} <= set(kinds)


# --- training regimes ----------------------------------------------------------------


def test_full_and_transformer_regimes_comparable(desk, train_pairs, measure):
    """Fine-tuning only the transformer blocks from the full run lands within 20% of its validation loss."""
    cfg = RunConfig()
    state = {f"param/{n}": p.detach().numpy().copy() for n, p in desk.result.trainer.model.named_parameters()}
    train_cfg = dataclasses.replace(cfg.train, selector="transformer")
    result = train_loop(train_pairs, train_cfg, cfg.unet, cfg.codec, cfg.schedule.build(), init_params=state)
    full = desk.val[-1]
    transformer = [r["loss"] for r in result.history if r["split"] == "val"][-1]
    measure(val_full=full, val_transformer=transformer)
    assert abs(full - transformer) <= 0.2 * min(full, transformer)
