"""Calibration of a deviated chip.

Four procedures, meant to run in this order on a fresh chip:

* ``calibrate_bias`` nulls each modulator by minimizing the second harmonic
  of the response to a triangular drive,
* ``align_phases`` locks the tail phase shifters one branch at a time,
* ``fit_transmission_curve`` records the sine transfer curve of a modulator,
* ``bpc`` / ``calibrate_predistortion`` fine-tune the held (slow) values by
  in-situ gradient descent on measured dot products.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import curve_fit, minimize_scalar

from .errors import BranchIndexError, Diverged, FitDiverged, NoMinimumFound
from .optics import (
    ChipState,
    DetectionMode,
    TransmissionCurveFit,
    phase_for_voltages,
    voltages_for_phase,
)

DEFAULT_BPC_STEPS = 250
DEFAULT_BPC_LR = 1.5
MIN_FIT_R2 = 0.99


def _check_branch(chip: ChipState, j: int):
    if not 0 <= j < chip.n_branches:
        raise BranchIndexError(f"branch {j} outside 0..{chip.n_branches - 1}")


def _drive_arrays(chip: ChipState, j: int, which: str, drive, partner_phase=math.pi / 2,
                  open_branches=()):
    """Phase arrays with branch j's ``which`` modulator following ``drive``.

    The partner modulator of branch j sits at ``partner_phase``; branches in
    ``open_branches`` are fully transparent and every other branch is closed.
    """
    drive = np.asarray(drive, dtype=float)
    s = drive.size
    fast = np.zeros((s, chip.n_branches))
    slow = np.zeros((s, chip.n_branches))
    for k in open_branches:
        fast[:, k] = slow[:, k] = math.pi / 2
    if which == "fast":
        fast[:, j], slow[:, j] = drive, partner_phase
    elif which == "slow":
        slow[:, j], fast[:, j] = drive, partner_phase
    else:
        raise ValueError(f"unknown modulator {which!r}")
    return fast, slow


def quadrature_readout(chip: ChipState, j: int, fast_phase, slow_phase) -> np.ndarray:
    """Complex field contributed by branch ``j``, read out by dithering its tail.

    Four detections with the tail shifted by 0, pi/2, pi, 3pi/2 cancel the
    quadratic term of the detector and any static background, leaving the
    branch field rotated by the phase of the static field it beats against.
    """
    br = chip.branches[j]
    base = br.tail_phase_rad
    currents = []
    try:
        for shift in (0.0, math.pi / 2, math.pi, 3 * math.pi / 2):
            br.tail_phase_rad = base + shift
            currents.append(chip.measure(fast_phase, slow_phase))
    finally:
        br.tail_phase_rad = base
    i0, i90, i180, i270 = currents
    det = chip.detection
    if det.mode is DetectionMode.SINGLE_ENDED:
        k = 4.0 * det.gain * det.reference_amplitude
        return ((i0 - i180) + 1j * (i270 - i90)) / k
    k = 2.0 * det.gain * det.reference_amplitude
    return ((i0 - i180) + 1j * (i270 - i90)) / k


def _project_real(c: np.ndarray) -> np.ndarray:
    """Signed amplitude of collinear complex samples.

    The common axis is taken from the doubled-angle mean and oriented inside
    (-pi/2, pi/2], i.e. closest to the reference phase.
    """
    theta = 0.5 * np.angle(np.sum(c * c))
    if theta <= -math.pi / 2 or theta > math.pi / 2:
        theta = (theta + math.pi / 2) % math.pi - math.pi / 2
    return np.real(c * np.exp(-1j * theta))


# -- transmission curve -------------------------------------------------------


def default_voltage_sweep(chip: ChipState, j: int, which: str, n: int = 101):
    """Upper-arm voltages spanning drive phases -pi..pi in push-pull."""
    mod = chip.branches[j].modulator(which)
    v_upper, _ = voltages_for_phase(np.linspace(-math.pi, math.pi, n), mod.upper)
    return v_upper


def push_pull_partner(v_upper, params) -> np.ndarray:
    """Lower-arm voltage that keeps the arm powers summing to twice the bias."""
    total = 2 * params.p0_bias_mw * 1e-3 * params.r_ohm
    rem = total - np.asarray(v_upper, dtype=float) ** 2
    if np.any(rem < 0):
        raise ValueError("upper-arm voltage exceeds the push-pull budget")
    return np.sqrt(rem)


def _sine(x, a, b, c, d):
    return a * np.sin(b * x + c) + d


def fit_sine(x, y, min_r2: float = MIN_FIT_R2) -> TransmissionCurveFit:
    """Fit ``a*sin(b*x + c) + d``; raises FitDiverged on degenerate or poor data."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    span = np.ptp(y) if y.size else 0.0
    if y.size < 5 or not np.all(np.isfinite(y)) or span <= 1e-12 * max(1.0, np.abs(y).max()):
        raise FitDiverged("sweep response is flat; nothing to fit")
    # linear least squares with b = 1 gives the starting point
    design = np.column_stack([np.sin(x), np.cos(x), np.ones_like(x)])
    (p, q, d0), *_ = np.linalg.lstsq(design, y, rcond=None)
    p0 = [math.hypot(p, q), 1.0, math.atan2(q, p), d0]
    try:
        with warnings.catch_warnings():
            # an exact fit leaves the covariance undefined; harmless here
            warnings.simplefilter("ignore")
            popt, _ = curve_fit(_sine, x, y, p0=p0, maxfev=10000)
    except RuntimeError as exc:
        raise FitDiverged(str(exc)) from exc
    a, b, c, d = popt
    if a < 0:
        a, c = -a, c + math.pi
    c = (c + math.pi) % (2 * math.pi) - math.pi
    resid = y - _sine(x, a, b, c, d)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot
    if not r2 >= min_r2:
        raise FitDiverged(f"fit R^2 {r2:.4f} below {min_r2}")
    return TransmissionCurveFit(float(a), float(b), float(c), float(d), float(r2))


def fit_transmission_curve(chip: ChipState, branch_index: int, which_mod: str,
                           voltage_sweep=None, min_r2: float = MIN_FIT_R2) -> TransmissionCurveFit:
    """Sweep one modulator in push-pull and fit its amplitude response.

    ``voltage_sweep`` holds upper-arm voltages; the lower arm follows the
    push-pull complement.  The fit abscissa is the drive phase implied by
    the encoding P_pi, so an ideal modulator fits ``b = 1, c = 0``.
    """
    _check_branch(chip, branch_index)
    mod = chip.branches[branch_index].modulator(which_mod)
    if voltage_sweep is None:
        voltage_sweep = default_voltage_sweep(chip, branch_index, which_mod)
    v_upper = np.asarray(voltage_sweep, dtype=float)
    v_lower = push_pull_partner(v_upper, mod.upper)
    enc = type(mod.upper)(p_pi_mw=mod.encoding_p_pi_mw, r_ohm=mod.upper.r_ohm,
                          p0_bias_mw=mod.upper.p0_bias_mw)
    drive = np.asarray(phase_for_voltages(v_upper, v_lower, enc), dtype=float)
    if np.ptp(drive) < 2 * math.pi * (1 - 1e-9):
        raise ValueError("sweep must cover at least one full transmission period")
    fast, slow = _drive_arrays(chip, branch_index, which_mod, drive)
    c = quadrature_readout(chip, branch_index, fast, slow)
    y = _project_real(c) * chip.output_scale
    fit = fit_sine(drive, y, min_r2=min_r2)
    mod.transmission_fit = fit
    return fit


# -- bias null ----------------------------------------------------------------


def triangle_drive(n: int = 256, amplitude: float = math.pi / 2) -> np.ndarray:
    """One period of a symmetric triangle wave (half-wave antisymmetric)."""
    t = np.arange(n) / n
    tri = np.where(t < 0.25, 4 * t, np.where(t < 0.75, 2 - 4 * t, 4 * t - 4))
    return amplitude * tri


def harmonic_profile(chip: ChipState, j: int, which: str, setting: float, drive=None):
    """(2nd-harmonic magnitude, signed fundamental) of the response at a bias setting."""
    drive = triangle_drive() if drive is None else drive
    mod = chip.branches[j].modulator(which)
    old = mod.bias_setting_rad
    mod.bias_setting_rad = setting
    try:
        fast, slow = _drive_arrays(chip, j, which, drive)
        y = _project_real(quadrature_readout(chip, j, fast, slow))
    finally:
        mod.bias_setting_rad = old
    spec_y = np.fft.rfft(y)
    spec_d = np.fft.rfft(drive)
    fundamental = float(np.real(spec_y[1] * np.conj(spec_d[1])) / abs(spec_d[1]))
    return float(abs(spec_y[2])), fundamental


def calibrate_bias(chip: ChipState, branch_index: int, which_mod: str, n_grid: int = 64,
                   install: bool = True) -> float:
    """Bias setting that nulls the modulator, found by 2nd-harmonic minimization.

    At the null the triangle drive maps onto a half-wave antisymmetric sine
    with no even harmonics; an offset adds an even cosine component.  The
    grid picks the basin with a positive fundamental (the other zero of the
    2nd harmonic is the inverted null), golden-section search refines it.
    """
    _check_branch(chip, branch_index)
    grid = -math.pi + 2 * math.pi * np.arange(n_grid) / n_grid
    prof = [harmonic_profile(chip, branch_index, which_mod, s) for s in grid]
    h2 = np.array([p[0] for p in prof])
    fund = np.array([p[1] for p in prof])
    scale = max(np.abs(fund).max(), h2.max())
    if scale <= 1e-15 or np.ptp(h2) <= 1e-9 * scale:
        raise NoMinimumFound("second-harmonic response is flat")
    candidates = np.where(fund > 0)[0]
    if candidates.size == 0:
        raise NoMinimumFound("no bias setting gives a positive fundamental")
    k = candidates[np.argmin(h2[candidates])]
    step = 2 * math.pi / n_grid
    res = minimize_scalar(lambda s: harmonic_profile(chip, branch_index, which_mod, s)[0],
                          bracket=None, bounds=(grid[k] - step, grid[k] + step), method="bounded",
                          options={"xatol": 1e-6})
    best = float(res.x)
    if harmonic_profile(chip, branch_index, which_mod, best)[0] > h2[k]:
        best = float(grid[k])
    best = (best + math.pi) % (2 * math.pi) - math.pi
    if install:
        chip.branches[branch_index].modulator(which_mod).bias_setting_rad = best
    return best


# -- tail phase alignment -----------------------------------------------------


@dataclass
class AlignmentResult:
    settings: list[float]
    curves: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _parabolic_peak(x, y, k):
    n = len(y)
    ym, y0, yp = y[(k - 1) % n], y[k], y[(k + 1) % n]
    denom = ym - 2 * y0 + yp
    if denom >= 0:
        return x[k]
    return x[k] + 0.5 * (ym - yp) / denom * (x[1] - x[0])


def align_phases(chip: ChipState, branches=None, n_points: int = 128) -> AlignmentResult:
    """Sequentially lock each tail phase at the constructive-interference peak."""
    branches = list(range(chip.n_branches)) if branches is None else list(branches)
    sweep = -math.pi + 2 * math.pi * np.arange(n_points) / n_points
    result = AlignmentResult(settings=[])
    locked = []
    for j in branches:
        _check_branch(chip, j)
        fast, slow = _drive_arrays(chip, j, "fast", [math.pi / 2], open_branches=locked)
        br = chip.branches[j]
        current = np.empty(n_points)
        for i, ps in enumerate(sweep):
            br.tail_phase_rad = ps
            current[i] = chip.measure(fast, slow)[0]
        k = int(np.argmax(current))
        best = float(_parabolic_peak(sweep, current, k))
        br.tail_phase_rad = (best + math.pi) % (2 * math.pi) - math.pi
        result.settings.append(br.tail_phase_rad)
        result.curves.append((sweep.copy(), current))
        locked.append(j)
    return result


def alignment_efficiency(chip: ChipState, branches=None) -> float:
    """Coherent sum of transparent branches relative to the in-phase maximum."""
    branches = list(range(chip.n_branches)) if branches is None else list(branches)
    fast = np.zeros((1, chip.n_branches))
    slow = np.zeros((1, chip.n_branches))
    fast[:, branches] = slow[:, branches] = math.pi / 2
    fields = chip.branch_fields(fast, slow, jitter=False)[0, branches]
    return float(abs(fields.sum()) / np.abs(fields).sum())


def calibrate_chip(chip: ChipState, branches=None) -> dict:
    """Bias-null every modulator, then align tail phases."""
    branches = list(range(chip.n_branches)) if branches is None else list(branches)
    bias = {}
    for j in branches:
        for which in ("fast", "slow"):
            bias[f"{j}:{which}"] = calibrate_bias(chip, j, which)
    align = align_phases(chip, branches)
    return {"bias_settings": bias, "tail_phases": align.settings}


# -- backpropagation control --------------------------------------------------


@dataclass
class BpcBatch:
    x: np.ndarray
    w_target: np.ndarray
    y_hat: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, w_target, n_steps: int = DEFAULT_BPC_STEPS) -> BpcBatch:
        w = np.asarray(w_target, dtype=float)
        x = rng.uniform(-1.0, 1.0, size=(n_steps, w.size))
        return cls(x=x, w_target=w, y_hat=x @ w)

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]


@dataclass
class BpcReport:
    residual_std_before: float
    residual_std_after: float
    std_history: list[float]
    gradient_history: list[list[float]]
    weight_history: list[list[float]]
    iterations: int
    converged: bool

    @property
    def final_weights(self) -> np.ndarray:
        return np.array(self.weight_history[-1])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            m = len(self.weight_history[0])
            w.writerow(["iteration", "std"] + [f"grad_{j}" for j in range(m)] + [f"w_{j}" for j in range(m)])
            for k, std in enumerate(self.std_history):
                grad = self.gradient_history[k] if k < len(self.gradient_history) else [0.0] * m
                w.writerow([k, repr(std)] + [repr(g) for g in grad] + [repr(v) for v in self.weight_history[k]])


def normalized_residual_std(y, y_hat) -> float:
    """std(y - y_hat) divided by the dynamic range of y_hat."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    span = np.ptp(y_hat)
    if span == 0:
        raise ValueError("expected outputs have zero dynamic range")
    return float(np.std(y - y_hat) / span)


def mse_gradient(x, y, y_hat) -> np.ndarray:
    """(2/N) sum_i (y_i - y_hat_i) x_ij for each weight j."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    return 2.0 / x.shape[0] * (r @ x)


def chip_outputs(chip: ChipState, x, w_hw) -> np.ndarray:
    """Measured dot products: hardware weights held on slow modulators, x streamed."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.broadcast_to(np.asarray(w_hw, dtype=float), x.shape)
    return chip.run(w, x)


def bpc_gradient(chip: ChipState, batch: BpcBatch, current_w) -> np.ndarray:
    y = chip_outputs(chip, batch.x, current_w)
    return mse_gradient(batch.x, y, batch.y_hat)


def bpc(chip: ChipState, w_target, max_iters: int = 10, learning_rate: float = DEFAULT_BPC_LR,
        batch_seed: int = 0, n_steps: int = DEFAULT_BPC_STEPS, tol: float = 1e-4,
        divergence_ratio: float = 1.10, divergence_patience: int = 3) -> BpcReport:
    """In-situ gradient descent on the hardware-held weights.

    ``std_history[k]`` is the normalized residual std measured on a fresh
    batch after ``k`` updates.  Stops once an update improves the std by
    less than ``tol``; raises Diverged if the std grows by more than
    ``divergence_ratio`` for ``divergence_patience`` updates in a row.
    """
    w_target = np.asarray(w_target, dtype=float)
    if w_target.size > chip.n_active:
        raise ValueError(f"{w_target.size} weights exceed the {chip.n_active} active branches")
    rng = np.random.default_rng(np.random.SeedSequence([int(batch_seed), 2]))
    w = w_target.copy()

    batch = BpcBatch.draw(rng, w_target, n_steps)
    y = chip_outputs(chip, batch.x, w)
    stds = [normalized_residual_std(y, batch.y_hat)]
    grads, weights = [], [w.tolist()]
    converged, growth = False, 0
    for _ in range(max_iters):
        g = mse_gradient(batch.x, y, batch.y_hat)
        w = w - learning_rate * g
        grads.append(g.tolist())
        weights.append(w.tolist())
        batch = BpcBatch.draw(rng, w_target, n_steps)
        y = chip_outputs(chip, batch.x, w)
        stds.append(normalized_residual_std(y, batch.y_hat))
        improvement = stds[-2] - stds[-1]
        growth = growth + 1 if stds[-1] > divergence_ratio * stds[-2] else 0
        if growth >= divergence_patience:
            raise Diverged(f"residual std grew {growth} updates in a row: {stds}")
        if 0 <= improvement < tol:
            converged = True
            break
    return BpcReport(residual_std_before=stds[0], residual_std_after=stds[-1], std_history=stds,
                     gradient_history=grads, weight_history=weights, iterations=len(grads),
                     converged=converged)


def calibrate_predistortion(chip: ChipState, targets=(-0.8, 0.8), batch_seed: int = 0,
                            **bpc_kwargs) -> np.ndarray:
    """Fit a per-branch affine map value -> held drive value and install it.

    BPC runs at two uniform weight targets; with only linear deviations the
    two converged hardware weights determine the map exactly.  Returns the
    (n_active, 2) table of (gain, offset).
    """
    m = chip.n_active
    for br in chip.branches[:m]:
        br.predistortion_gain, br.predistortion_offset = 1.0, 0.0
    t1, t2 = targets
    r1 = bpc(chip, np.full(m, t1), batch_seed=batch_seed, **bpc_kwargs)
    r2 = bpc(chip, np.full(m, t2), batch_seed=batch_seed + 1, **bpc_kwargs)
    h1, h2 = r1.final_weights, r2.final_weights
    gain = (h2 - h1) / (t2 - t1)
    offset = h1 - gain * t1
    for j, br in enumerate(chip.branches[:m]):
        br.predistortion_gain, br.predistortion_offset = float(gain[j]), float(offset[j])
    return np.column_stack([gain, offset])


def linearity_deviation(chip: ChipState, branch_index: int = 0, n_points: int = 201,
                        partner_value: float = 1.0) -> float:
    """Max deviation of a branch's value->output curve from its best-fit line.

    The branch's fast modulator sweeps [-1, 1] with its slow modulator held
    at ``partner_value``; every other branch is idle.  Reported in value units.
    """
    _check_branch(chip, branch_index)
    v = np.linspace(-1.0, 1.0, n_points)
    width = branch_index + 1
    fast = np.zeros((n_points, width))
    slow = np.zeros((n_points, width))
    fast[:, branch_index] = v
    slow[:, branch_index] = partner_value
    saved = chip.detection.additive_noise_std, chip.phase_drift_std_rad
    chip.detection.additive_noise_std, chip.phase_drift_std_rad = 0.0, 0.0
    try:
        y = chip.run(slow, fast)
    finally:
        chip.detection.additive_noise_std, chip.phase_drift_std_rad = saved
    coef = np.polyfit(v, y, 1)
    return float(np.max(np.abs(y - np.polyval(coef, v))))
