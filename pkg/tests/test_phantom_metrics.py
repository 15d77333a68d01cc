"""Phantom generation, dose simulation, and the metric stack."""

import json
import math

import numpy as np
import pytest

import langct.metrics as M
import langct.phantom as P
from langct.io import PhantomPair, load_pair, save_pair


# -- phantoms -----------------------------------------------------------------------


def test_phantom_deterministic():
    a = P.gen_phantom(3, size=64)
    b = P.gen_phantom(3, size=64)
    np.testing.assert_array_equal(a, b)
    c = P.gen_phantom(4, size=64)
    assert not np.array_equal(a, c)


def test_phantom_background_is_air():
    g = P.gen_phantom(7, size=128)
    for corner in (g[0, 0], g[0, -1], g[-1, 0], g[-1, -1]):
        assert corner == P.HU_AIR
    assert g.min() >= P.HU_MIN and g.max() <= P.HU_MAX


def test_phantom_has_distinct_tissue_modes():
    g = P.gen_phantom(11, size=128)
    assert (g == P.HU_AIR).sum() > 100            # air background
    soft = ((g >= 15) & (g <= 100)).sum()         # soft tissue + organs
    assert soft > 100
    assert (g >= 250).sum() > 20                  # rib arcs


def test_phantom_size_validation():
    with pytest.raises(ValueError, match=r"\[64, 512\]"):
        P.gen_phantom(0, size=32)
    with pytest.raises(ValueError, match=r"\[64, 512\]"):
        P.gen_phantom(0, size=1024)


# -- dose simulation -----------------------------------------------------------------


def test_simulate_deterministic_and_seed_sensitive():
    nd = P.gen_phantom(5, size=64)
    a = P.simulate_low_dose(nd, 0.25, seed=9)
    b = P.simulate_low_dose(nd, 0.25, seed=9)
    np.testing.assert_array_equal(a, b)
    c = P.simulate_low_dose(nd, 0.25, seed=10)
    assert not np.array_equal(a, c)


def test_simulate_dose_validation():
    nd = np.full((16, 16), 40.0, np.float32)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError, match="dose fraction"):
            P.simulate_low_dose(nd, bad)


def test_full_dose_near_clean_without_electronics():
    nd = np.full((128, 128), 40.0, np.float32)
    ld = P.simulate_low_dose(nd, 1.0, seed=1, electronic_sigma=0.0)
    resid = ld.astype(np.float64) - nd
    assert resid.var() < 1.0  # soft-tissue variance under 1 HU^2


def test_quarter_dose_doubles_noise_std():
    nd = np.full((128, 128), 40.0, np.float32)
    s_full = (P.simulate_low_dose(nd, 1.0, seed=2) - nd).std()
    s_quarter = (P.simulate_low_dose(nd, 0.25, seed=3) - nd).std()
    ratio = s_quarter / s_full
    assert 1.7 <= ratio <= 2.3, ratio  # sqrt(4) scaling within 15%


def test_noise_variance_monotone_in_dose():
    nd = P.gen_phantom(6, size=128)
    variances = []
    for i, dose in enumerate((0.1, 0.25, 0.5, 1.0)):
        ld = P.simulate_low_dose(nd, dose, seed=20 + i)
        variances.append(float((ld.astype(np.float64) - nd).var()))
    assert variances[0] > variances[1] > variances[2] > variances[3]


def test_ldct_stays_in_hu_range():
    nd = P.gen_phantom(8, size=64)
    ld = P.simulate_low_dose(nd, 0.1, seed=0)
    assert ld.min() >= P.HU_MIN and ld.max() <= P.HU_MAX


# -- windowing -----------------------------------------------------------------------


def test_hu_window_endpoints():
    g = np.array([[-160.0, 240.0], [40.0, -500.0]])
    w = P.hu_window(g, -160, 240)
    assert w[0, 0] == 0.0 and w[0, 1] == 1.0
    assert w[1, 0] == pytest.approx(0.5)
    assert w[1, 1] == 0.0  # clamped below the window
    with pytest.raises(ValueError, match="lo < hi"):
        P.hu_window(g, 240, -160)


def test_hu_unwindow_roundtrip():
    rng = np.random.default_rng(0)
    g = rng.uniform(-160, 240, (8, 8)).astype(np.float32)
    w = P.hu_window(g, -160, 240)
    back = P.hu_unwindow(w, -160, 240)
    np.testing.assert_allclose(back, g, atol=1e-3)


# -- pairs and datasets -----------------------------------------------------------------


def test_make_pair_and_roundtrip(tmp_path):
    pair = P.make_pair(42, size=64, dose=0.25)
    assert pair.ndct.shape == (64, 64)
    assert pair.anatomy and pair.anatomy[0][0] == "body"
    assert not np.array_equal(pair.ndct, pair.ldct)
    path = str(tmp_path / "p.lmpd")
    save_pair(path, pair)
    back = load_pair(path)
    np.testing.assert_array_equal(back.ndct, pair.ndct)
    np.testing.assert_array_equal(back.ldct, pair.ldct)
    assert back.seed == 42 and back.dose == 0.25


def test_dataset_deterministic_and_distinct():
    d1 = P.generate_dataset(3, size=64, dose=0.25, seed=1)
    d2 = P.generate_dataset(3, size=64, dose=0.25, seed=1)
    for p1, p2 in zip(d1, d2):
        np.testing.assert_array_equal(p1.ndct, p2.ndct)
        np.testing.assert_array_equal(p1.ldct, p2.ldct)
    assert not np.array_equal(d1[0].ndct, d1[1].ndct)
    assert d1[0].seed != d1[1].seed


# -- psnr ---------------------------------------------------------------------------


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).uniform(0, 1, (16, 16))
    assert M.psnr(a, a) == math.inf


def test_psnr_closed_form():
    a = np.zeros((100, 100))
    b = np.full((100, 100), math.sqrt(1e-3))
    assert M.psnr(a, b, 1.0) == pytest.approx(30.0, abs=1e-9)


def test_psnr_matches_direct_recomputation():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (64, 64))
    b = rng.uniform(0, 1, (64, 64))
    mse = np.mean((a - b) ** 2)
    assert M.psnr(a, b, 1.0) == pytest.approx(10 * math.log10(1.0 / mse), abs=1e-6)


def test_psnr_validation():
    with pytest.raises(ValueError, match="matching shapes"):
        M.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError, match="positive"):
        M.psnr(np.zeros((4, 4)), np.zeros((4, 4)), 0.0)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.2, 0.8, (64, 64))
    noise = rng.normal(0, 1, (64, 64))
    values = [M.psnr(a, a + s * noise) for s in (0.01, 0.03, 0.1)]
    assert values[0] > values[1] > values[2]


# -- ssim ---------------------------------------------------------------------------


def test_ssim_identical_is_one():
    a = np.random.default_rng(3).uniform(0, 1, (32, 32))
    assert M.ssim(a, a) == 1.0


def test_ssim_symmetric():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (32, 32))
    b = rng.uniform(0, 1, (32, 32))
    assert abs(M.ssim(a, b) - M.ssim(b, a)) < 1e-9


def test_ssim_constant_images_closed_form():
    mu_a, mu_b = 0.3, 0.5
    a = np.full((32, 32), mu_a)
    b = np.full((32, 32), mu_b)
    c1 = 0.01**2
    want = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    assert M.ssim(a, b) == pytest.approx(want, rel=1e-9)


def test_ssim_bounds_and_validation():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, (32, 32))
    b = rng.uniform(0, 1, (32, 32))
    assert -1.0 <= M.ssim(a, b) <= 1.0
    with pytest.raises(ValueError, match="11x11"):
        M.ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_windowed_psnr_equals_hu_domain_psnr():
    rng = np.random.default_rng(6)
    a = rng.uniform(-400, 500, (64, 64))
    b = a + rng.normal(0, 30, (64, 64))
    lo, hi = P.METRIC_WINDOW
    via_window = M.psnr(P.hu_window(a, lo, hi), P.hu_window(b, lo, hi), 1.0)
    direct = M.psnr(np.clip(a, lo, hi), np.clip(b, lo, hi), hi - lo)
    assert via_window == pytest.approx(direct, abs=1e-4)


# -- evaluate -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_pairs():
    return P.generate_dataset(3, size=64, dose=0.25, seed=9)


def test_evaluate_identity_scores_inputs(small_pairs):
    rep = M.evaluate(small_pairs)
    lo, hi = P.METRIC_WINDOW
    want = M.psnr(
        P.hu_window(small_pairs[0].ldct, lo, hi),
        P.hu_window(small_pairs[0].ndct, lo, hi),
        1.0,
    )
    assert rep.per_image[0]["psnr"] == pytest.approx(want, abs=1e-12)
    assert len(rep.per_image) == 3


def test_evaluate_aggregates_recompute(small_pairs):
    rep = M.evaluate(small_pairs)
    ps = [row["psnr"] for row in rep.per_image]
    ss = [row["ssim"] for row in rep.per_image]
    assert rep.mean_psnr == pytest.approx(np.mean(ps), abs=1e-9)
    assert rep.std_psnr == pytest.approx(np.std(ps), abs=1e-9)
    assert rep.mean_ssim == pytest.approx(np.mean(ss), abs=1e-9)
    assert rep.std_ssim == pytest.approx(np.std(ss), abs=1e-9)


def test_evaluate_deterministic(small_pairs):
    r1 = M.evaluate(small_pairs)
    r2 = M.evaluate(small_pairs)
    assert r1.per_image == r2.per_image
    assert (r1.mean_psnr, r1.mean_ssim) == (r2.mean_psnr, r2.mean_ssim)


def test_evaluate_jsonl_format(small_pairs):
    clean = PhantomPair(
        ndct=small_pairs[0].ndct, ldct=small_pairs[0].ndct, dose=1.0, seed=0
    )
    rep = M.evaluate([clean])
    lines = rep.to_jsonl().strip().split("\n")
    assert len(lines) == 2
    row = json.loads(lines[0])
    assert row["psnr"] == "inf" and row["fsim"] is None
    agg = json.loads(lines[1])
    assert agg["aggregate"] is True and agg["mean_psnr"] == "inf"


def test_evaluate_with_denoiser_hook(small_pairs):
    base = M.evaluate(small_pairs)
    same = M.evaluate(small_pairs, denoise=lambda ld: ld)
    assert same.mean_psnr == base.mean_psnr
    worse = M.evaluate(small_pairs, denoise=lambda ld: ld + 20.0)
    assert worse.mean_psnr < base.mean_psnr


# -- scan benchmark ------------------------------------------------------------------


def test_bench_scan_accounting():
    rows = M.bench_scan([64, 256], step=2, channels=4, state_size=4, trials=1)
    assert rows[0]["n"] == 64 and rows[0]["seq_len"] == 16
    assert rows[1]["n"] == 256 and rows[1]["seq_len"] == 64
    assert rows[0]["total_steps"] == 4 * 64
    assert all(r["wall_time_s"] > 0 for r in rows)
    rows1 = M.bench_scan([64], step=1, channels=4, state_size=4, trials=1)
    assert rows1[0]["seq_len"] == 64


def test_bench_scan_csv():
    rows = M.bench_scan([64], step=2, channels=4, state_size=4, trials=1)
    text = M.bench_to_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "n,step,seq_len,total_steps,wall_time_s"
    assert len(lines) == 2


def test_bench_scan_rejects_non_square():
    with pytest.raises(ValueError, match="squares"):
        M.bench_scan([60], step=2)
