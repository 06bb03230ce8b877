import math

import numpy as np
import pytest

from ocdc import calibration as cal
from ocdc.errors import Diverged, FitDiverged, NoMinimumFound
from ocdc.optics import DeviationProfile, ideal_chip, make_chip


def _offset_chip(seed=0, rms=0.05):
    return make_chip(profile=DeviationProfile(weight_offset_rms=rms), seed=seed)


def _linear_chip(seed=0):
    return make_chip(profile=DeviationProfile(weight_gain_rms=0.3, weight_offset_rms=0.05), seed=seed)


def _mismatch_chip(frac):
    chip = ideal_chip()
    for br in chip.branches[:chip.n_active]:
        for mod in (br.fast_mod, br.slow_mod):
            mod.lower.p_pi_mw = mod.upper.p_pi_mw * (1 + frac)
    return chip


# -- curve fitting --------------------------------------------------------------


def test_fit_ideal_modulator():
    fit = cal.fit_transmission_curve(ideal_chip(), 0, "fast")
    assert fit.r_squared > 0.999
    assert fit.a > 0
    assert fit.b == pytest.approx(1.0, abs=1e-6)
    assert fit.c == pytest.approx(0.0, abs=1e-6)


def test_fit_reads_back_bias_offset():
    chip = ideal_chip()
    chip.branches[1].slow_mod.bias_offset_rad = 0.3
    fit = cal.fit_transmission_curve(chip, 1, "slow")
    assert fit.c == pytest.approx(0.3, abs=1e-6)


def test_fit_dead_branch_diverges():
    chip = ideal_chip()
    chip.branches[0].insertion_loss_db = 2000.0
    with pytest.raises(FitDiverged):
        cal.fit_transmission_curve(chip, 0, "fast")


def test_fit_sine_recovers_coefficients():
    x = np.linspace(-4, 4, 200)
    fit = cal.fit_sine(x, 1.7 * np.sin(0.8 * x - 0.4) + 0.1)
    assert (fit.a, fit.b, fit.c, fit.d) == pytest.approx((1.7, 0.8, -0.4, 0.1), abs=1e-6)


# -- bias null -------------------------------------------------------------------


def test_bias_ideal_is_null():
    assert cal.calibrate_bias(ideal_chip(), 0, "fast") == pytest.approx(0.0, abs=0.01 * math.pi)


@pytest.mark.parametrize("delta", [-0.6, -0.2, 0.15, 0.45])
def test_bias_compensates_offset(delta):
    chip = ideal_chip()
    chip.branches[2].fast_mod.bias_offset_rad = delta
    setting = cal.calibrate_bias(chip, 2, "fast")
    assert abs(setting + delta) <= 0.01 * math.pi


def test_bias_flat_response():
    chip = ideal_chip()
    chip.branches[0].insertion_loss_db = 2000.0
    with pytest.raises(NoMinimumFound):
        cal.calibrate_bias(chip, 0, "slow")


def test_harmonic_null_has_pure_fundamental():
    chip = ideal_chip()
    h2, fund = cal.harmonic_profile(chip, 0, "fast", 0.0)
    assert h2 < 1e-9 * abs(fund)
    assert fund > 0


# -- phase alignment ------------------------------------------------------------


def test_alignment_recovers_constructive_interference():
    chip = make_chip(profile=DeviationProfile(tail_phase_spread_rad=2.5), seed=4)
    assert cal.alignment_efficiency(chip, [0, 1, 2]) < 0.99
    res = cal.align_phases(chip, [0, 1, 2])
    assert cal.alignment_efficiency(chip, [0, 1, 2]) >= 0.999
    peaks = [c.max() for _, c in res.curves]
    assert peaks[0] < peaks[1] < peaks[2]


def test_alignment_idempotent():
    chip = ideal_chip()
    res = cal.align_phases(chip, [0, 1, 2])
    assert np.allclose(res.settings, 0.0, atol=2 * math.pi / 128)


# -- BPC ----------------------------------------------------------------------------


def test_mse_gradient_hand_example():
    assert np.allclose(cal.mse_gradient([[1, 0, 0]], [1.5], [1.0]), [1.0, 0, 0])
    assert np.allclose(cal.mse_gradient(np.ones((4, 3)), np.ones(4), np.ones(4)), 0.0)


def test_batch_targets_exact():
    b = cal.BpcBatch.draw(np.random.default_rng(0), [0.2, 1, 0.8])
    assert np.array_equal(b.y_hat, b.x @ np.array([0.2, 1, 0.8]))
    assert b.n_steps == 250


@pytest.mark.parametrize("seed", range(3))
def test_bpc_gradient_matches_finite_differences(seed):
    chip = _offset_chip(seed)
    rng = np.random.default_rng(seed)
    batch = cal.BpcBatch.draw(rng, [0.9, -0.4, 0.6])
    w = np.array([0.85, -0.35, 0.5])
    g = cal.bpc_gradient(chip, batch, w)

    def mse(v):
        return np.mean((cal.chip_outputs(chip, batch.x, v) - batch.y_hat) ** 2)

    h = 1e-6
    fd = np.array([(mse(w + h * e) - mse(w - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-12)) < 1e-4


def test_gradient_independence_per_branch():
    x = np.array([[a, b, c] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)], dtype=float)
    w = np.array([0.5, 0.7, -0.6])
    batch = cal.BpcBatch(x=x, w_target=w, y_hat=x @ w)
    for j in range(3):
        chip = ideal_chip()
        chip.branches[j].gain_error = 0.2
        g = cal.bpc_gradient(chip, batch, w)
        others = np.delete(g, j)
        assert abs(g[j]) > 1e-3
        assert np.max(np.abs(others)) < 1e-12


def test_gradient_noise_scales_inverse_n():
    chip = make_chip(value_noise=0.05, seed=7)
    w = [1.0, 1.0, 1.0]
    variances = []
    for n in (50, 250, 1000):
        rng = np.random.default_rng(n)
        gs = [cal.bpc_gradient(chip, cal.BpcBatch.draw(rng, w, n), w) for _ in range(300)]
        variances.append(np.var(gs, axis=0).mean() * n)
    ratio = max(variances) / min(variances)
    assert ratio < 1.5


def test_bpc_zero_deviation_chip():
    rep = cal.bpc(ideal_chip(), [1, 1, 1])
    assert rep.residual_std_before < 1e-12
    assert np.allclose(rep.gradient_history[0], 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_bpc_linear_deviation_completeness(seed):
    rep = cal.bpc(_linear_chip(seed), [0.2, 1.0, 0.8], tol=0.0)
    assert rep.residual_std_before > 0.01
    assert min(rep.std_history) < 1e-3
    assert rep.residual_std_after <= rep.residual_std_before


def test_bpc_reduces_coarse_residual():
    chip = make_chip(profile=DeviationProfile.coarse(), seed=3, value_noise=0.02)
    for w in ([1, 1, 1], [0.2, 1, 0.8]):
        rep = cal.bpc(chip, w, batch_seed=5)
        assert rep.std_history[min(2, rep.iterations)] <= 0.6 * rep.std_history[0]


def test_bpc_divergence_detected():
    with pytest.raises(Diverged):
        cal.bpc(_linear_chip(1), [0.4, 0.4, 0.4], learning_rate=3.6, tol=0.0)


def test_bpc_report_serializes(tmp_path):
    rep = cal.bpc(_linear_chip(0), [1, 1, 1], max_iters=2)
    assert '"iterations"' in rep.to_json()
    rep.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,std,grad_0")
    assert len(lines) == len(rep.std_history) + 1


def test_predistortion_restores_exactness():
    chip = _linear_chip(2)
    cal.calibrate_predistortion(chip, tol=0.0)
    x = np.random.default_rng(0).uniform(-1, 1, (100, 3))
    w = np.random.default_rng(1).uniform(-1, 1, (100, 3))
    assert cal.normalized_residual_std(chip.run(w, x), np.sum(w * x, axis=1)) < 1e-4


# -- nonlinearity ---------------------------------------------------------------------


def test_matched_chip_is_linear():
    assert cal.linearity_deviation(ideal_chip(), 1) < 1e-9


def test_mismatch_distortion_grows_and_floors():
    fracs = [0.025, 0.05, 0.075, 0.1]
    dev = [cal.linearity_deviation(_mismatch_chip(f), 0) for f in fracs]
    assert dev[0] > 0
    assert all(b > a for a, b in zip(dev, dev[1:]))
    floors = [cal.bpc(_mismatch_chip(f), [1, 1, 1], tol=0.0).residual_std_after for f in fracs]
    assert floors[0] > 0
    assert all(b > a for a, b in zip(floors, floors[1:]))
