"""Physical forward model of the optical coherent dot-product chip.

Light is split into a reference arm and ``M`` modulating branches.  Each
branch carries a fast and a slow push-pull modulator, a tail phase shifter
and two monitor taps; the branches are recombined by a cascade of
directional couplers and detected against the reference field.

Complex field amplitudes are plain Python/numpy ``complex`` values.  All
public functions accept numpy arrays and broadcast over leading axes so a
whole temporally-multiplexed schedule can be pushed through the chip in one
call.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    BranchIndexError,
    EmptyInput,
    EncodingOutOfRange,
    NegativeIntensity,
    PhaseOutOfRange,
)

NOMINAL_P_PI_MW = 1.81
DEFAULT_R_OHM = 1600.0
DEFAULT_P0_BIAS_MW = 2.28
DB_FLOOR = -120.0

# seed-sequence stream ids
_DEVIATION_STREAM = 0
_SHOT_STREAM = 1


@dataclass
class PhaseShifterParams:
    """Thermal phase shifter of one modulator arm."""

    p_pi_mw: float = NOMINAL_P_PI_MW
    r_ohm: float = DEFAULT_R_OHM
    p0_bias_mw: float = DEFAULT_P0_BIAS_MW

    def __post_init__(self):
        if self.p_pi_mw <= 0 or self.r_ohm <= 0 or self.p0_bias_mw < 0:
            raise ValueError(f"invalid phase shifter parameters: {self}")


@dataclass
class TransmissionCurveFit:
    """Least-squares fit ``a*sin(b*x + c) + d`` of a modulator sweep."""

    a: float
    b: float
    c: float
    d: float
    r_squared: float = float("nan")

    def __call__(self, x):
        return self.a * np.sin(self.b * np.asarray(x) + self.c) + self.d


@dataclass
class ModulatorState:
    """Push-pull modulator: two arms plus bias bookkeeping.

    ``bias_offset_rad`` is the fabrication error of the interferometer bias,
    ``bias_setting_rad`` the correction applied by calibration.  The drive
    powers are always computed with ``encoding_p_pi_mw`` (the approximate
    P_pi shared by all shifters); the arms' true ``p_pi_mw`` may differ.
    """

    upper: PhaseShifterParams = field(default_factory=PhaseShifterParams)
    lower: PhaseShifterParams = field(default_factory=PhaseShifterParams)
    bias_offset_rad: float = 0.0
    bias_setting_rad: float = 0.0
    encoding_p_pi_mw: float = NOMINAL_P_PI_MW
    transmission_fit: TransmissionCurveFit | None = None

    @property
    def max_drive_phase(self) -> float:
        p0 = min(self.upper.p0_bias_mw, self.lower.p0_bias_mw)
        return 2 * math.pi * p0 / self.encoding_p_pi_mw


@dataclass
class BranchState:
    fast_mod: ModulatorState = field(default_factory=ModulatorState)
    slow_mod: ModulatorState = field(default_factory=ModulatorState)
    tail_phase_rad: float = 0.0
    tail_offset_rad: float = 0.0
    insertion_loss_db: float = 0.0
    monitor_tap_fraction: float = 0.1
    # residual errors left by coarse calibration, acting on the held (slow) value
    gain_error: float = 0.0
    offset_error: float = 0.0
    # digital pre-distortion of the held value, maintained by BPC
    predistortion_gain: float = 1.0
    predistortion_offset: float = 0.0

    def __post_init__(self):
        if self.insertion_loss_db < 0:
            raise ValueError("insertion_loss_db must be >= 0")
        if not 0 <= self.monitor_tap_fraction < 1:
            raise ValueError("monitor_tap_fraction must lie in [0, 1)")

    def modulator(self, which: str) -> ModulatorState:
        if which == "fast":
            return self.fast_mod
        if which == "slow":
            return self.slow_mod
        raise ValueError(f"unknown modulator {which!r}; expected 'fast' or 'slow'")


@dataclass
class SplitterModel:
    """MMI reference tap followed by a cascaded-DC 1xM splitter."""

    n_branches: int = 9
    reference_fraction: float = 0.5
    residual_monitor_fraction: float = 0.30
    deviation_db: np.ndarray | None = None

    def __post_init__(self):
        if self.n_branches < 1:
            raise ValueError("splitter needs at least one branch")
        if self.deviation_db is None:
            self.deviation_db = np.zeros(self.n_branches)
        self.deviation_db = np.asarray(self.deviation_db, dtype=float)
        if self.deviation_db.shape != (self.n_branches,):
            raise ValueError("deviation_db must have one entry per branch")

    def branch_powers(self, input_power: float = 1.0) -> np.ndarray:
        bus = input_power * (1.0 - self.reference_fraction)
        nominal = bus * (1.0 - self.residual_monitor_fraction) / self.n_branches
        return nominal * 10.0 ** (self.deviation_db / 10.0)

    def residual_power(self, input_power: float = 1.0) -> float:
        bus = input_power * (1.0 - self.reference_fraction)
        return bus - float(self.branch_powers(input_power).sum())

    @property
    def branch_ratios(self) -> np.ndarray:
        """Fraction of the remaining bus power coupled out at each DC."""
        powers = self.branch_powers(1.0)
        remaining = (1.0 - self.reference_fraction) - np.concatenate(([0.0], np.cumsum(powers)[:-1]))
        return powers / remaining


class DetectionMode(str, Enum):
    SINGLE_ENDED = "single_ended"
    HOMODYNE = "homodyne"


@dataclass
class DetectionModel:
    mode: DetectionMode = DetectionMode.SINGLE_ENDED
    reference_amplitude: float = 1.0
    additive_noise_std: float = 0.0
    gain: float = 1.0
    clamp_tolerance: float = 1e-12

    def __post_init__(self):
        self.mode = DetectionMode(self.mode)


@dataclass
class DeviationProfile:
    """Seeded imperfections applied on top of the ideal chip.

    ``weight_gain_rms``/``weight_offset_rms`` describe what coarse
    calibration leaves behind; they are drawn with a random direction and a
    fixed root-mean-square over the active branches so that every seed sees
    the same error budget.
    """

    splitter_unevenness_db: float = 0.0
    p_pi_mismatch_frac: float = 0.0
    bias_offset_std_rad: float = 0.0
    insertion_loss_spread_db: float = 0.0
    tail_phase_spread_rad: float = 0.0
    weight_gain_rms: float = 0.0
    weight_offset_rms: float = 0.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def coarse(cls) -> DeviationProfile:
        """Coarsely calibrated chip used for the BPC experiments."""
        return cls(weight_gain_rms=COARSE_GAIN_RMS, weight_offset_rms=COARSE_OFFSET_RMS)


COARSE_GAIN_RMS = 0.30
COARSE_OFFSET_RMS = 0.02
COARSE_VALUE_NOISE = 0.02


@dataclass
class ChipState:
    branches: list[BranchState]
    splitter: SplitterModel
    detection: DetectionModel
    n_active: int = 3
    phase_drift_std_rad: float = 0.0
    rng_seed: int = 0
    input_power: float = 1.0
    slow_headroom: float = 0.5
    design_tap_fraction: float = 0.1

    def __post_init__(self):
        if len(self.branches) != self.splitter.n_branches:
            raise ValueError("branch list and splitter disagree on M")
        if not 1 <= self.n_active <= len(self.branches):
            raise ValueError("n_active must lie in [1, M]")
        if not 0 < self.slow_headroom <= 1:
            raise ValueError("slow_headroom must lie in (0, 1]")
        self._rng = None

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            self.reset_rng()
        return self._rng

    def reset_rng(self, seed: int | None = None):
        if seed is not None:
            self.rng_seed = int(seed)
        self._rng = np.random.default_rng(np.random.SeedSequence([self.rng_seed, _SHOT_STREAM]))

    def clone(self, seed: int | None = None) -> ChipState:
        twin = copy.deepcopy(self)
        if seed is not None:
            twin.reset_rng(seed)
        return twin

    # -- design constants ------------------------------------------------

    def design_branch_amplitude(self) -> float:
        """Field amplitude per branch at the combiner for a transparent ideal branch."""
        bus = self.input_power * (1.0 - self.splitter.reference_fraction)
        power = bus * (1.0 - self.splitter.residual_monitor_fraction) / self.n_branches
        return math.sqrt(power) * (1.0 - self.design_tap_fraction)

    @property
    def field_unit(self) -> float:
        """Detector-side field produced by a unit product x*w on one branch."""
        return self.design_branch_amplitude() * self.slow_headroom / math.sqrt(self.n_branches + 1)

    @property
    def output_scale(self) -> float:
        return 1.0 / self.field_unit

    def default_reference_amplitude(self) -> float:
        return 1.5 * self.n_active * self.field_unit

    def photocurrent_noise_for(self, value_noise: float) -> float:
        """Photocurrent noise std that produces ``value_noise`` in dot-product units."""
        det = self.detection
        if det.mode is DetectionMode.SINGLE_ENDED:
            slope = 2.0 * det.gain * det.reference_amplitude
        else:
            slope = det.gain * det.reference_amplitude
        return value_noise * slope * self.field_unit

    # -- propagation -----------------------------------------------------

    def branch_fields(self, fast_phase, slow_phase, jitter: bool = True) -> np.ndarray:
        """Complex field of every branch at the combiner input, shape (S, M)."""
        fast_phase = np.atleast_2d(np.asarray(fast_phase, dtype=float))
        slow_phase = np.atleast_2d(np.asarray(slow_phase, dtype=float))
        steps, m = fast_phase.shape
        if m != self.n_branches or slow_phase.shape != fast_phase.shape:
            raise ValueError(f"phase arrays must have shape (S, {self.n_branches})")
        amplitude = np.sqrt(self.splitter.branch_powers(self.input_power))
        tails = np.array([b.tail_phase_rad + b.tail_offset_rad for b in self.branches])
        phase = np.broadcast_to(tails, (steps, m))
        if jitter and self.phase_drift_std_rad > 0:
            phase = phase + self.rng.normal(0.0, self.phase_drift_std_rad, size=(steps, m))
        out = np.empty((steps, m), dtype=complex)
        for j, br in enumerate(self.branches):
            tap = 1.0 - br.monitor_tap_fraction
            loss = 10.0 ** (-br.insertion_loss_db / 20.0)
            field_j = amplitude[j] * loss * modulator_transfer(fast_phase[:, j], br.fast_mod)
            field_j = field_j * math.sqrt(tap) * modulator_transfer(slow_phase[:, j], br.slow_mod)
            out[:, j] = field_j * math.sqrt(tap)
        return out * np.exp(1j * phase)

    def combined_field(self, fast_phase, slow_phase, jitter: bool = True) -> np.ndarray:
        fields = self.branch_fields(fast_phase, slow_phase, jitter=jitter)
        # Port 0 of the cascade belongs to the reference.  The combiner is
        # linear, so its contribution at the output is exactly the detector's
        # reference amplitude, which photodetect() adds back in.
        ports = np.concatenate([np.zeros((fields.shape[0], 1), dtype=complex), fields], axis=1)
        return combine(ports)

    def measure(self, fast_phase, slow_phase) -> np.ndarray:
        """Photocurrent for a batch of drive-phase settings."""
        combined = self.combined_field(fast_phase, slow_phase)
        return photodetect(combined, self.detection, self.rng)

    def measure_decoded(self, fast_phase, slow_phase) -> np.ndarray:
        return decode(self.measure(fast_phase, slow_phase), self.detection)

    def encode(self, slow_values, fast_values):
        """Map held (slow) and streamed (fast) values to drive phases of all branches."""
        slow_values = np.atleast_2d(np.asarray(slow_values, dtype=float))
        fast_values = np.atleast_2d(np.asarray(fast_values, dtype=float))
        slow_values, fast_values = np.broadcast_arrays(slow_values, fast_values)
        steps, width = slow_values.shape
        if width > self.n_active:
            raise EncodingOutOfRange(f"{width} values exceed the {self.n_active} active branches")
        gain = np.array([b.predistortion_gain for b in self.branches[:width]])
        offset = np.array([b.predistortion_offset for b in self.branches[:width]])
        g_err = np.array([b.gain_error for b in self.branches[:width]])
        o_err = np.array([b.offset_error for b in self.branches[:width]])
        held = gain * slow_values + offset
        slow_t = self.slow_headroom * ((1.0 + g_err) * held + o_err)
        fast_t = fast_values
        bad = (np.abs(slow_t) > 1.0) | (np.abs(fast_t) > 1.0)
        if np.any(bad):
            raise EncodingOutOfRange("requested transmission outside [-1, 1]")
        slow_phase = np.zeros((steps, self.n_branches))
        fast_phase = np.zeros((steps, self.n_branches))
        slow_phase[:, :width] = np.arcsin(slow_t)
        fast_phase[:, :width] = np.arcsin(fast_t)
        return fast_phase, slow_phase

    def run(self, slow_values, fast_values) -> np.ndarray:
        """Analog dot products of each row pair, in value units."""
        fast_phase, slow_phase = self.encode(slow_values, fast_values)
        return self.measure_decoded(fast_phase, slow_phase) * self.output_scale


# -- drive encoding ---------------------------------------------------------


def _maybe_scalar(x):
    return x.item() if isinstance(x, (np.ndarray, np.generic)) and np.ndim(x) == 0 else x


def voltages_for_phase(delta_phi, params: PhaseShifterParams | None = None):
    """Push-pull arm voltages (volts) realizing a phase difference ``delta_phi``."""
    params = params or PhaseShifterParams()
    dphi = np.asarray(delta_phi, dtype=float)
    shift = dphi / (2 * math.pi) * params.p_pi_mw
    p_upper = params.p0_bias_mw + shift
    p_lower = params.p0_bias_mw - shift
    if np.any(p_upper < 0) or np.any(p_lower < 0):
        limit = 2 * math.pi * params.p0_bias_mw / params.p_pi_mw
        raise PhaseOutOfRange(f"|delta_phi| must not exceed {limit:.4f} rad")
    # P = V^2 / R with P in watts
    v_upper = np.sqrt(p_upper * 1e-3 * params.r_ohm)
    v_lower = np.sqrt(p_lower * 1e-3 * params.r_ohm)
    return _maybe_scalar(v_upper), _maybe_scalar(v_lower)


def phase_for_voltages(v_upper, v_lower, params: PhaseShifterParams | None = None):
    params = params or PhaseShifterParams()
    p_upper = np.asarray(v_upper, dtype=float) ** 2 / params.r_ohm * 1e3
    p_lower = np.asarray(v_lower, dtype=float) ** 2 / params.r_ohm * 1e3
    return _maybe_scalar(math.pi * (p_upper - p_lower) / params.p_pi_mw)


def encode_value(value):
    """Drive phase whose sine transmission equals ``value``."""
    v = np.asarray(value, dtype=float)
    if np.any(np.abs(v) > 1.0):
        raise EncodingOutOfRange("values must lie in [-1, 1]")
    return _maybe_scalar(np.arcsin(v))


def modulator_transfer(drive_phase, mod: ModulatorState):
    """Complex field transmission of a push-pull modulator at its null bias.

    With unequal arm P_pi the common-mode term no longer cancels and the
    output picks up a drive-dependent phase rotation.
    """
    dphi = np.asarray(drive_phase, dtype=float)
    if np.any(np.abs(dphi) > mod.max_drive_phase * (1 + 1e-12)):
        raise PhaseOutOfRange(f"|drive phase| must not exceed {mod.max_drive_phase:.4f} rad")
    p_sig = dphi / (2 * math.pi) * mod.encoding_p_pi_mw
    inv_sum = 1.0 / mod.upper.p_pi_mw + 1.0 / mod.lower.p_pi_mw
    inv_diff = 1.0 / mod.upper.p_pi_mw - 1.0 / mod.lower.p_pi_mw
    # null bias turns the interferometer cosine into a sine
    amplitude = np.sin(math.pi * p_sig * inv_sum + mod.bias_offset_rad + mod.bias_setting_rad)
    rotation = math.pi * p_sig * inv_diff
    return _maybe_scalar(amplitude * np.exp(1j * rotation))


def modulator_field(input_field, drive_phase, mod: ModulatorState):
    return _maybe_scalar(np.asarray(input_field) * modulator_transfer(drive_phase, mod))


# -- passive optics ---------------------------------------------------------


def split(input_field, chip: ChipState):
    """Reference field and per-branch fields leaving the splitter."""
    input_field = complex(input_field)
    reference = input_field * math.sqrt(chip.splitter.reference_fraction)
    powers = chip.splitter.branch_powers(1.0)
    return reference, [input_field * math.sqrt(p) for p in powers]


def combine(fields, n_ports: int | None = None):
    """Cascaded 2x2 directional-coupler combiner.

    ``fields`` holds the port amplitudes on its last axis (port 0 first).
    Each stage mixes the running output with the next port using the
    n:1 coupler matrix, which telescopes to ``sum(A) / sqrt(n_ports)``.
    """
    arr = np.asarray(fields, dtype=complex)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise EmptyInput("combiner needs at least one port")
    if n_ports is not None and arr.shape[-1] != n_ports:
        raise ValueError(f"expected {n_ports} ports, got {arr.shape[-1]}")
    out = arr[..., 0]
    for n in range(1, arr.shape[-1]):
        out = math.sqrt(n / (n + 1)) * out + math.sqrt(1 / (n + 1)) * arr[..., n]
    return _maybe_scalar(out)


def photodetect(combined, detection: DetectionModel, rng: np.random.Generator | None = None):
    combined = np.asarray(combined, dtype=complex)
    e_ref = detection.reference_amplitude
    if detection.mode is DetectionMode.SINGLE_ENDED:
        current = detection.gain * np.abs(e_ref + combined) ** 2
    else:
        current = detection.gain * e_ref * combined.real
    if detection.additive_noise_std > 0:
        if rng is None:
            raise ValueError("a random generator is required for noisy detection")
        current = current + rng.normal(0.0, detection.additive_noise_std, size=current.shape)
    return _maybe_scalar(current)


def decode(photocurrent, detection: DetectionModel):
    current = np.asarray(photocurrent, dtype=float)
    e_ref = detection.reference_amplitude
    if detection.mode is DetectionMode.HOMODYNE:
        return _maybe_scalar(current / (detection.gain * e_ref))
    if np.any(current < -detection.clamp_tolerance):
        raise NegativeIntensity("photocurrent fell below zero beyond the clamp tolerance")
    current = np.maximum(current, 0.0)
    return _maybe_scalar(np.sqrt(current / detection.gain) - e_ref)


# -- high level -------------------------------------------------------------


def dot_product(x, w, chip: ChipState) -> float:
    """Analog estimate of ``sum(w * x)``: x on slow modulators, w on fast ones."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.ndim != 1 or x.shape != w.shape:
        raise ValueError("x and w must be vectors of equal length")
    if np.any(np.abs(x) > 1) or np.any(np.abs(w) > 1):
        raise EncodingOutOfRange("dot_product operands must lie in [-1, 1]")
    return float(chip.run(x[None, :], w[None, :])[0])


def monitor_power(chip: ChipState, branch_index: int, which: str = "slow",
                  fast_phase: float = math.pi / 2, slow_phase: float = math.pi / 2) -> float:
    """Power (dB, relative to the chip input) seen by the monitor after a modulator."""
    if not 0 <= branch_index < chip.n_branches:
        raise BranchIndexError(f"branch {branch_index} outside 0..{chip.n_branches - 1}")
    br = chip.branches[branch_index]
    power = chip.splitter.branch_powers(chip.input_power)[branch_index]
    loss = 10.0 ** (-br.insertion_loss_db / 20.0)
    field_ = math.sqrt(power) * loss * modulator_transfer(fast_phase, br.fast_mod)
    if which == "slow":
        field_ = field_ * math.sqrt(1 - br.monitor_tap_fraction) * modulator_transfer(slow_phase, br.slow_mod)
    elif which != "fast":
        raise ValueError(f"unknown modulator {which!r}")
    tapped = abs(field_) ** 2 * br.monitor_tap_fraction
    if tapped <= 0:
        return DB_FLOOR
    return max(10.0 * math.log10(tapped), DB_FLOOR)


# -- construction -----------------------------------------------------------


def _spread(rng, n, lo, hi):
    """n uniform draws stretched so their extremes sit exactly at lo and hi."""
    raw = rng.uniform(-1.0, 1.0, size=n)
    if n < 2:
        return np.full(n, (lo + hi) / 2.0)
    return lo + (raw - raw.min()) / np.ptp(raw) * (hi - lo)


def _fixed_rms(rng, n, rms):
    raw = rng.standard_normal(n)
    return raw * (rms * math.sqrt(n) / np.linalg.norm(raw))


def make_chip(n_branches: int = 9, n_active: int = 3, profile: DeviationProfile | None = None,
              seed: int = 0, detection_mode: DetectionMode | str = DetectionMode.SINGLE_ENDED,
              value_noise: float = 0.0, phase_drift_std_rad: float = 0.0,
              slow_headroom: float = 0.5, reference_amplitude: float | None = None,
              phase_shifter: PhaseShifterParams | None = None) -> ChipState:
    """Build a chip and draw its imperfections from ``profile``.

    Every stream is drawn in a fixed order whatever the profile values, so
    two profiles differing only in magnitude see proportional deviations.
    """
    profile = profile or DeviationProfile()
    ps = phase_shifter or PhaseShifterParams()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _DEVIATION_STREAM]))
    m = n_branches

    split_dev = _spread(rng, m, -profile.splitter_unevenness_db / 2, profile.splitter_unevenness_db / 2)
    p_pi_noise = rng.standard_normal((m, 2, 2))
    bias_noise = rng.standard_normal((m, 2))
    loss = _spread(rng, m, 0.0, profile.insertion_loss_spread_db)
    tails = rng.uniform(-1.0, 1.0, size=m) * profile.tail_phase_spread_rad
    gains = np.zeros(m)
    offsets = np.zeros(m)
    gains[:n_active] = _fixed_rms(rng, n_active, profile.weight_gain_rms)
    offsets[:n_active] = _fixed_rms(rng, n_active, profile.weight_offset_rms)

    branches = []
    for j in range(m):
        mods = []
        for k in range(2):
            arms = [
                PhaseShifterParams(
                    p_pi_mw=max(ps.p_pi_mw * (1 + profile.p_pi_mismatch_frac * p_pi_noise[j, k, a]), 1e-6),
                    r_ohm=ps.r_ohm,
                    p0_bias_mw=ps.p0_bias_mw,
                )
                for a in range(2)
            ]
            mods.append(ModulatorState(upper=arms[0], lower=arms[1],
                                       bias_offset_rad=profile.bias_offset_std_rad * bias_noise[j, k],
                                       encoding_p_pi_mw=ps.p_pi_mw))
        branches.append(BranchState(fast_mod=mods[0], slow_mod=mods[1],
                                    tail_offset_rad=float(tails[j]),
                                    insertion_loss_db=float(loss[j]),
                                    gain_error=float(gains[j]), offset_error=float(offsets[j])))

    chip = ChipState(branches=branches, splitter=SplitterModel(n_branches=m, deviation_db=split_dev),
                     detection=DetectionModel(mode=detection_mode), n_active=n_active,
                     phase_drift_std_rad=phase_drift_std_rad, rng_seed=int(seed),
                     slow_headroom=slow_headroom)
    chip.detection.reference_amplitude = (reference_amplitude if reference_amplitude is not None
                                          else chip.default_reference_amplitude())
    if value_noise > 0:
        chip.detection.additive_noise_std = chip.photocurrent_noise_for(value_noise)
        chip.detection.clamp_tolerance = 10 * chip.detection.additive_noise_std
    return chip


def ideal_chip(n_branches: int = 9, n_active: int = 3, **kwargs) -> ChipState:
    return make_chip(n_branches=n_branches, n_active=n_active, profile=DeviationProfile(), **kwargs)


def coarse_chip(seed: int = 0, value_noise: float = COARSE_VALUE_NOISE, **kwargs) -> ChipState:
    """Coarsely calibrated chip: linear residual errors plus detection noise."""
    return make_chip(profile=DeviationProfile.coarse(), seed=seed, value_noise=value_noise, **kwargs)


# -- JSON configuration -----------------------------------------------------


def chip_to_config(chip: ChipState) -> dict:
    """Explicit-unit JSON description that rebuilds ``chip`` exactly."""
    def mod_cfg(m: ModulatorState):
        return {
            "upper_p_pi_mw": m.upper.p_pi_mw, "lower_p_pi_mw": m.lower.p_pi_mw,
            "r_ohm": m.upper.r_ohm, "p0_bias_mw": m.upper.p0_bias_mw,
            "bias_offset_rad": m.bias_offset_rad, "bias_setting_rad": m.bias_setting_rad,
            "encoding_p_pi_mw": m.encoding_p_pi_mw,
        }

    return {
        "n_branches": chip.n_branches,
        "n_active": chip.n_active,
        "rng_seed": chip.rng_seed,
        "phase_drift_std_rad": chip.phase_drift_std_rad,
        "input_power": chip.input_power,
        "slow_headroom": chip.slow_headroom,
        "splitter": {
            "reference_fraction": chip.splitter.reference_fraction,
            "residual_monitor_fraction": chip.splitter.residual_monitor_fraction,
            "deviation_db": chip.splitter.deviation_db.tolist(),
        },
        "detection": {
            "mode": chip.detection.mode.value,
            "reference_amplitude": chip.detection.reference_amplitude,
            "additive_noise_std": chip.detection.additive_noise_std,
            "gain": chip.detection.gain,
            "clamp_tolerance": chip.detection.clamp_tolerance,
        },
        "branches": [
            {
                "fast_mod": mod_cfg(b.fast_mod), "slow_mod": mod_cfg(b.slow_mod),
                "tail_phase_rad": b.tail_phase_rad, "tail_offset_rad": b.tail_offset_rad,
                "insertion_loss_db": b.insertion_loss_db, "monitor_tap_fraction": b.monitor_tap_fraction,
                "gain_error": b.gain_error, "offset_error": b.offset_error,
                "predistortion_gain": b.predistortion_gain, "predistortion_offset": b.predistortion_offset,
            }
            for b in chip.branches
        ],
    }


def chip_from_config(cfg: dict) -> ChipState:
    """Build a chip from a JSON dict.

    Two layouts are accepted: a full dump from :func:`chip_to_config`
    (has ``branches``), or a generator spec with ``deviations`` and
    ``value_noise`` that is expanded through :func:`make_chip`.
    """
    if "branches" not in cfg:
        dev = DeviationProfile(**cfg.get("deviations", {}))
        ps = PhaseShifterParams(**cfg.get("phase_shifter", {}))
        det = cfg.get("detection", {})
        return make_chip(
            n_branches=int(cfg.get("n_branches", 9)), n_active=int(cfg.get("n_active", 3)),
            profile=dev, seed=int(cfg.get("rng_seed", 0)),
            detection_mode=det.get("mode", "single_ended"),
            value_noise=float(cfg.get("value_noise", 0.0)),
            phase_drift_std_rad=float(cfg.get("phase_drift_std_rad", 0.0)),
            slow_headroom=float(cfg.get("slow_headroom", 0.5)),
            reference_amplitude=det.get("reference_amplitude"),
            phase_shifter=ps,
        )

    def mod_from(m):
        return ModulatorState(
            upper=PhaseShifterParams(m["upper_p_pi_mw"], m["r_ohm"], m["p0_bias_mw"]),
            lower=PhaseShifterParams(m["lower_p_pi_mw"], m["r_ohm"], m["p0_bias_mw"]),
            bias_offset_rad=m["bias_offset_rad"], bias_setting_rad=m["bias_setting_rad"],
            encoding_p_pi_mw=m["encoding_p_pi_mw"],
        )

    branches = [
        BranchState(fast_mod=mod_from(b["fast_mod"]), slow_mod=mod_from(b["slow_mod"]),
                    tail_phase_rad=b["tail_phase_rad"], tail_offset_rad=b["tail_offset_rad"],
                    insertion_loss_db=b["insertion_loss_db"], monitor_tap_fraction=b["monitor_tap_fraction"],
                    gain_error=b["gain_error"], offset_error=b["offset_error"],
                    predistortion_gain=b["predistortion_gain"], predistortion_offset=b["predistortion_offset"])
        for b in cfg["branches"]
    ]
    sp = cfg["splitter"]
    return ChipState(
        branches=branches,
        splitter=SplitterModel(n_branches=len(branches), reference_fraction=sp["reference_fraction"],
                               residual_monitor_fraction=sp["residual_monitor_fraction"],
                               deviation_db=np.array(sp["deviation_db"])),
        detection=DetectionModel(**cfg["detection"]),
        n_active=cfg["n_active"], phase_drift_std_rad=cfg["phase_drift_std_rad"],
        rng_seed=cfg["rng_seed"], input_power=cfg["input_power"], slow_headroom=cfg["slow_headroom"],
    )
