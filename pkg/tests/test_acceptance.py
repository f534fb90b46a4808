"""Acceptance criteria 1-9. Each test is tagged with the criterion it covers;
conftest prints one PASS/FAIL line per criterion at the end of the run."""
import itertools
import time

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from mrnet.ablation import audit, load_spec, read_table
from mrnet.cli import main
from mrnet.config import LossWeights, diff, resolve_config
from mrnet.discriminator import PatchDiscriminator
from mrnet.encoder import stub_encoder
from mrnet.evaluation import PSNR_CAP, cap_psnr, evaluate_dataset, identity_baseline, psnr, ssim
from mrnet.generator import Generator, StagePlan, soft_clamp
from mrnet.losses import (feature_discard_loss, gan_loss_discriminator, gan_loss_generator, mask_sparsity_loss,
                          pixel_loss, total_generator_loss)
from mrnet.spectrum import compare_fusion_spectra, power_spectrum, spectral_energy
from mrnet.synthdata import SliceDataset, make_volumes, split_dataset
from mrnet.training import Trainer, build_models, train

from conftest import small_config


# -- 1 ------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_soft_clamp_suite():
    t0 = time.perf_counter()
    z = torch.linspace(-5, 5, 1000, dtype=torch.float64)
    s = soft_clamp(z)
    inside = (z >= 0) & (z <= 1)
    assert torch.equal(s[inside], z[inside])
    assert abs(soft_clamp(torch.tensor(-1.0, dtype=torch.float64)).item() + 0.001) < 1e-9
    assert abs(soft_clamp(torch.tensor(2.0, dtype=torch.float64)).item() - 1.001) < 1e-9
    assert torch.all(s[1:] >= s[:-1])
    assert time.perf_counter() - t0 < 1.0


# -- 2 ------------------------------------------------------------------------

def _mean(values):
    total, n = 0.0, 0
    for v in values:
        total += v
        n += 1
    return total / n


@pytest.mark.criterion(2)
def test_loss_oracles():
    t0 = time.perf_counter()
    cases = []

    scores = [0.5, 1.5]
    oracle = _mean((s - 1.0) * (s - 1.0) for s in scores)
    cases.append((oracle, gan_loss_generator(torch.tensor(scores, dtype=torch.float64)), 0.25))

    real = fake = [0.5] * 4
    oracle = 0.5 * _mean((r - 1.0) ** 2 for r in real) + 0.5 * _mean(f * f for f in fake)
    cases.append((oracle, gan_loss_discriminator(torch.tensor(real, dtype=torch.float64),
                                                 torch.tensor(fake, dtype=torch.float64)), 0.25))

    y, yhat = [0.0, 0.0], [-1.0, 1.0]
    oracle = _mean(abs(a - b) for a, b in zip(y, yhat))
    cases.append((oracle, pixel_loss(torch.tensor(y, dtype=torch.float64), torch.tensor(yhat, dtype=torch.float64)), 1.0))

    n_pix = 16
    inter = [[1.0] * n_pix for _ in range(2)]
    masks = [[0.5] * n_pix for _ in range(2)]
    oracle = 0.0
    for yi, mi in zip(inter, masks):
        oracle += _mean(abs(a * (1.0 - m)) for a, m in zip(yi, mi))
    impl = feature_discard_loss([torch.tensor(v, dtype=torch.float64) for v in inter],
                                [torch.tensor(v, dtype=torch.float64) for v in masks])
    cases.append((oracle, impl, 1.0))

    masks = [[0.75] * n_pix for _ in range(2)]
    oracle = 0.0
    for mi in masks:
        oracle += _mean(abs(1.0 - m) for m in mi)
    cases.append((oracle, mask_sparsity_loss([torch.tensor(v, dtype=torch.float64) for v in masks]), 0.5))

    w = LossWeights()
    oracle = 1.0 + w.lambda_pixel * 1.0 + w.lambda_feature * 1.0 + w.lambda_mask * 1.0
    one = torch.tensor(1.0, dtype=torch.float64)
    cases.append((oracle, total_generator_loss(one, one, one, one, w).total, 101.15))

    for oracle, impl, expected in cases:
        assert abs(oracle - expected) < 1e-12
        assert abs(float(impl) - oracle) < 1e-6
    assert time.perf_counter() - t0 < 5.0


# -- 3 ------------------------------------------------------------------------

def _fd_check(fn, inputs, n_coords=64, h=1e-3, seed=0):
    """Compare autograd with central differences at n_coords coordinates spread over inputs."""
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    fn(*inputs).backward()
    grads = [t.grad.detach().clone() for t in inputs]
    gen = np.random.default_rng(seed)
    sizes = [t.numel() for t in inputs]
    flat = gen.choice(sum(sizes), size=n_coords, replace=False)
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(np.cumsum(sizes), f, side="right"))
            j = int(f - sum(sizes[:k]))
            t = inputs[k].view(-1)
            orig = t[j].item()
            t[j] = orig + h
            plus = fn(*inputs).item()
            t[j] = orig - h
            minus = fn(*inputs).item()
            t[j] = orig
            numeric = (plus - minus) / (2 * h)
            analytic = grads[k].view(-1)[j].item()
            denom = max(abs(numeric), abs(analytic), 1e-12)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def _away_from_zero(t, margin=0.01):
    return torch.where(t.abs() < margin, torch.sign(t + 1e-12) * margin * 2, t)


@pytest.mark.criterion(3)
def test_gradient_checks():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(3)
    shape = (1, 1, 8, 8)

    def rand(*s):
        return torch.randn(*s, generator=g, dtype=torch.float64)

    def masks():
        return torch.rand(*shape, generator=g, dtype=torch.float64) * 0.9 + 0.05

    scores = rand(*shape)
    y, yhat = rand(*shape), rand(*shape)
    yhat = y + _away_from_zero(yhat - y)
    inter = [_away_from_zero(rand(*shape)) for _ in range(2)]
    ms = [masks() for _ in range(2)]

    checks = {
        "gan": (lambda s: gan_loss_generator(s), [scores]),
        "pixel": (lambda a: pixel_loss(y, a), [yhat]),
        "feature": (lambda y1, y2, m1, m2: feature_discard_loss([y1, y2], [m1, m2]), inter + ms),
        "mask": (lambda m1, m2: mask_sparsity_loss([m1, m2]), ms),
        "total": (lambda s, a, y1, y2, m1, m2: total_generator_loss(
            gan_loss_generator(s), pixel_loss(y, a), feature_discard_loss([y1, y2], [m1, m2]),
            mask_sparsity_loss([m1, m2])).total, [scores, yhat] + inter + ms),
    }
    for name, (fn, args) in checks.items():
        err = _fd_check(fn, args)
        assert err < 1e-3, f"{name}: relative error {err:.2e}"
    assert time.perf_counter() - t0 < 30.0


# -- 4 ------------------------------------------------------------------------

def _default_generator(size):
    torch.manual_seed(0)
    enc = stub_encoder(1, image_size=size)
    return Generator(StagePlan.default(size), enc, n_masks=2).eval()


@pytest.mark.criterion(4)
def test_shapes_and_attenuation():
    t0 = time.perf_counter()
    with torch.no_grad():
        for size in (64, 256):
            g = _default_generator(size)
            x = torch.rand(1, 3, size, size) * 2 - 1
            out = g(x)
            assert out.final.shape == x.shape
            assert out.y0.shape == x.shape

        g = _default_generator(64)
        gen = torch.Generator().manual_seed(4)
        for _ in range(20):
            x = torch.rand(1, 3, 64, 64, generator=gen) * 2 - 1
            out = g(x)
            y0, (y1, y2) = out.y0, out.intermediates
            for m in out.masks:
                assert torch.all(m > 0) and torch.all(m < 1)
            assert torch.all(y2.abs() <= y1.abs())
            assert torch.all(y1.abs() <= y0.abs())

        d = PatchDiscriminator().eval()
        img = torch.zeros(1, 3, 256, 256)
        assert d(img, img).shape == (1, 1, 30, 30)
    assert time.perf_counter() - t0 < 60.0


# -- 5 ------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_frozen_encoder_and_gradient_flow(tiny_splits):
    train_set, val_set, _ = tiny_splits
    cfg = small_config(**{"train.max_steps": 50})
    trainer = Trainer(cfg, train_set, val_set)
    before = trainer.g.sam.checksum()
    params = {("g", n): p for n, p in trainer.g.named_parameters() if p.requires_grad}
    params.update({("d", n): p for n, p in trainer.d.named_parameters()})
    seen = {k: False for k in params}
    gen = torch.Generator().manual_seed(5)
    for _ in range(50):
        idx = torch.randint(len(train_set), (cfg.train.batch_size,), generator=gen)
        x = torch.stack([train_set[int(i)][0] for i in idx])
        y = torch.stack([train_set[int(i)][1] for i in idx])
        trainer.step(x, y)
        for k, p in params.items():
            if p.grad is not None and torch.count_nonzero(p.grad) > 0:
                seen[k] = True
    assert trainer.g.sam.checksum() == before
    missing = [k for k, ok in seen.items() if not ok]
    assert not missing, f"parameters never received a gradient: {missing}"


# -- 6 ------------------------------------------------------------------------

def _ssim_direct(a, b, win=11, sigma=1.5, data_range=1.0):
    """Loop over every full window; weighted statistics computed per window."""
    half = win // 2
    ax = np.arange(win) - half
    w1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(w1, w1)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, wd = a.shape
    vals = []
    for i in range(half, h - half):
        for j in range(half, wd - half):
            pa = a[i - half:i + half + 1, j - half:j + half + 1]
            pb = b[i - half:i + half + 1, j - half:j + half + 1]
            mu_a, mu_b = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - mu_a) ** 2)
            vb = np.sum(w * (pb - mu_b) ** 2)
            cov = np.sum(w * (pa - mu_a) * (pb - mu_b))
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                        ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@pytest.mark.criterion(6)
def test_metric_oracles():
    gen = np.random.default_rng(6)
    a = gen.random((32, 32))
    assert abs(ssim(a, a) - 1.0) < 1e-6
    assert cap_psnr(psnr(a, a)) == PSNR_CAP

    base = gen.random((32, 32)) * 0.9
    assert abs(psnr(base + 0.1, base) - 20.0) < 1e-6

    for _ in range(10):
        x = gen.random((24, 24))
        y = np.clip(x + gen.normal(0, 0.2, x.shape), 0, 1)
        assert abs(ssim(x, y) - _ssim_direct(x, y)) < 1e-6


# -- 7 ------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_spectrum_analytic_checks():
    const = np.full((32, 32), 0.7)
    assert abs(power_spectrum(const).low_freq_ratio - 1.0) < 1e-9

    noise = np.random.default_rng(7).normal(size=(64, 64))
    blurred = gaussian_filter(noise, 2.0, mode="wrap")
    assert power_spectrum(blurred).low_freq_ratio > power_spectrum(noise).low_freq_ratio

    for img in (noise, blurred, const):
        energy = spectral_energy(power_spectrum(img))
        direct = float(np.sum(img.astype(np.float64) ** 2))
        assert abs(energy - direct) <= 1e-4 * direct


@pytest.mark.criterion(7)
def test_fused_features_more_low_frequency():
    """Stub-encoder model: E1 at least as low-frequency as e1 on >= 8 of 10 test images."""
    cfg = resolve_config(overrides={"model.image_size": 64})
    g, _, _ = build_models(cfg)
    g.eval()
    vols = make_volumes(10, (16, 64, 64), seed=2024)
    sp = split_dataset(vols, seed=2024)
    by = {v.volume_id: v for v in vols}
    test_set = SliceDataset.from_volumes([by[i] for i in sp.test], 64)
    picks = np.random.default_rng(0).choice(len(test_set), 10, replace=False)
    ratios = [compare_fusion_spectra(g, test_set[int(i)][0].numpy()).ratios for i in picks]
    wins = sum(r["low_freq_ratio_E1"] >= r["low_freq_ratio_e1"] for r in ratios)
    print(f"E1 >= e1 on {wins}/10 images:",
          [(round(r["low_freq_ratio_e1"], 4), round(r["low_freq_ratio_E1"], 4)) for r in ratios])
    assert wins >= 8


# -- 8 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_data():
    vols = make_volumes(40, (16, 64, 64), seed=2024)
    sp = split_dataset(vols, seed=2024)
    by = {v.volume_id: v for v in vols}

    def make(ids):
        return SliceDataset.from_volumes([by[i] for i in ids], 64)

    return make(sp.train), make(sp.val), make(sp.test)


@pytest.mark.criterion(8)
@pytest.mark.slow
def test_training_smoke(smoke_data):
    train_set, val_set, test_set = smoke_data
    t0 = time.perf_counter()
    cfg = resolve_config(overrides={"model.image_size": 64, "train.max_steps": 200, "train.batch_size": 4,
                                    "train.seed": 2024, "train.val_max_batches": 8})
    result = train(cfg, train_set, val_set)
    totals = [row["total"] for row in result.history]
    assert len(totals) == 200
    k = len(totals) // 10
    first, last = float(np.median(totals[:k])), float(np.median(totals[-k:]))
    print(f"median total loss first 10% {first:.3f}, last 10% {last:.3f}")
    assert last < first

    _, agg = evaluate_dataset(result.generator, test_set, batch_size=8)
    ident = identity_baseline(test_set)
    print(f"held-out PSNR {agg['overall']['psnr']:.3f} dB vs identity {ident['psnr']:.3f} dB")
    assert agg["overall"]["psnr"] >= ident["psnr"] + 1.0

    again = train(cfg.with_updates({"train.max_steps": 1}), train_set, val_set)
    keys = ("gan", "pixel", "feature", "mask", "total", "d_loss")
    assert [again.history[0][k] for k in keys] == [result.history[0][k] for k in keys]
    elapsed = time.perf_counter() - t0
    print(f"smoke run took {elapsed:.0f} s")
    assert elapsed < 15 * 60


# -- 9 ------------------------------------------------------------------------

SPEC = """\
model.image_size = 32
model.base_width = 8
model.mask_hidden = 4
encoder.channels = 16
train.batch_size = 2
train.max_steps = 3
train.val_max_batches = 1

[variant masks-0]
model.n_masks = 0
[variant masks-1]
model.n_masks = 1
[variant masks-2]
[variant baseline-loss]
loss.lambda_feature = 0
loss.lambda_mask = 0
[variant full-loss]
"""


@pytest.mark.criterion(9)
@pytest.mark.slow
def test_ablation_audit(tmp_path):
    data = tmp_path / "data"
    assert main(["synth-data", "--volumes", "10", "--size", "16,16,16", "--image-size", "32",
                 "--axes", "z", "--no-previews", "--out", str(data)]) == 0
    spec_path = tmp_path / "spec.txt"
    spec_path.write_text(SPEC)
    out = tmp_path / "ablate"
    assert main(["ablate", "--spec", str(spec_path), "--data", str(data), "--out", str(out)]) == 0

    spec = load_spec(spec_path)
    rows = read_table(out)
    assert sorted(r["variant"] for r in rows) == sorted(v.name for v in spec.variants)
    assert audit(out) == []

    base = spec.base_config()
    configs = {}
    for v in spec.variants:
        written = resolve_config(out / v.name / "config.txt")
        configs[v.name] = (written, v.delta)
        assert set(diff(base, written)) == set(v.delta)
        for key, value in v.delta.items():
            assert written.flat()[key] == value
    for (a, (ca, da)), (b, (cb, db)) in itertools.combinations(configs.items(), 2):
        declared = {k for k in set(da) | set(db) if da.get(k, base.flat()[k]) != db.get(k, base.flat()[k])}
        assert set(diff(ca, cb)) == declared, (a, b)
