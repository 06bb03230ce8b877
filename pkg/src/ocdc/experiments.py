"""Reproducible experiments wiring the chip, calibration, lowering and network.

Every ``run_*`` function takes a resolved config dict and an output
directory, writes CSV/JSON/SVG/PGM artifacts plus ``manifest.json`` and
returns a summary dict whose ``checks`` entry maps threshold names to
booleans.  All randomness derives from the master seed through
:func:`derive_seed`, so rerunning a manifest reproduces every CSV.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import zlib
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import formats
from .datagen import Dataset, Process, build_dataset
from .errors import ConfigError
from .lowering import decompose_mvm, execute_schedule, lower_conv, resolve_padding
from .network import (
    Backend,
    DomainMode,
    ErrorInjection,
    Network,
    TrainConfig,
    conv_forward,
    forward,
    image_error_std,
    mini_automap,
    train,
)
from .optics import COARSE_VALUE_NOISE, chip_from_config, chip_to_config, make_chip, monitor_power

EXPERIMENTS = ("characterize", "calibrate", "bpc", "lower", "train", "reconstruct", "sweep", "ablate")

DEFAULTS = {
    "experiment": None,
    "seed": 0,
    "chip": {
        "n_branches": 9, "n_active": 3, "value_noise": 0.0, "phase_drift_std_rad": 0.0,
        "slow_headroom": 0.5, "deviations": {},
    },
    "characterize": {"unevenness_db": 1.2, "sweep_points": 101, "align_branches": 3},
    "calibrate": {"bias_offset_std_rad": 0.3, "tail_phase_spread_rad": 1.2, "trials": 3},
    "bpc": {"weights": [[1.0, 1.0, 1.0], [0.2, 1.0, 0.8]], "seeds": 50, "max_iters": 10,
            "learning_rate": cal.DEFAULT_BPC_LR, "n_steps": cal.DEFAULT_BPC_STEPS,
            "value_noise": COARSE_VALUE_NOISE, "pre_window": [0.05, 0.07], "post_max": 0.035, "post_iteration": 2,
            "pass_fraction": 0.9},
    "lower": {"profile": "coarse", "value_noise": COARSE_VALUE_NOISE, "chip_seed": 0, "example": 0, "threshold": 0.02,
              "dump_schedule": None, "dump_csv": False},
    "dataset": {"process": "mf", "count": 690, "size": 32},
    "network": {"hidden": 512, "channels": 8, "checkpoint": None},
    "train": {"learning_rate": 1e-3, "decay_epoch": 170, "decayed_rate": 1e-4, "lambda_penalty": 1e-4,
              "epochs": 200, "batch_size": 32},
    "mode": "cbd",
    "backend": "exact",
    "reconstruct": {"processes": ["mf", "vpds", "radon"], "fc_sigma": 0.0076, "conv_sigma": 0.0104,
                    "relative": True, "max_ratio": 2.5, "n_images": 90, "checkpoints": {},
                    "chip_images": 2},
    "sweep": {"process": "mf", "sigmas": [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1],
              "trials": 50, "relative": True, "min_r2": 0.9},
    "ablate": {"processes": ["mf", "vpds", "radon"], "seeds": [0, 1, 2, 3, 4],
               "modes": ["cbd", "cid", "ncbd", "inon"], "epochs": 8, "train_count": 300,
               "min_seeds": 4, "inon_factor": 2.0},
}


# -- configuration ------------------------------------------------------------


def _line_of_key(text: str, key: str):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _merge(base: dict, override: dict, path: str, text: str, src, strict_keys=True):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            if strict_keys:
                raise ConfigError(f"unknown key {path}{k}", src, _line_of_key(text, k))
            out[k] = v
        elif isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            # open-ended sub-dicts (deviations, checkpoints) accept any key
            out[k] = _merge(base[k], v, f"{path}{k}.", text, src, strict_keys=k not in ("chip",))
        else:
            out[k] = v
    return out


def resolve_config(user: dict | None = None, text: str = "", src=None, **overrides) -> dict:
    cfg = _merge(DEFAULTS, user or {}, "", text, src)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    if cfg["mode"] not in [m.value for m in DomainMode]:
        raise ConfigError(f"unknown mode {cfg['mode']!r}", src, _line_of_key(text, "mode"))
    if cfg["backend"] not in [b.value for b in Backend]:
        raise ConfigError(f"unknown backend {cfg['backend']!r}", src, _line_of_key(text, "backend"))
    if cfg["dataset"]["process"] not in [p.value for p in Process]:
        raise ConfigError(f"unknown process {cfg['dataset']['process']!r}", src, _line_of_key(text, "process"))
    seed = cfg["seed"]
    if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer", src, _line_of_key(text, "seed"))
    return cfg


def load_config(path, **overrides) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(p)) from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, str(p), exc.lineno) from exc
    if not isinstance(user, dict):
        raise ConfigError("top level must be a JSON object", str(p), 1)
    if "config" in user and "experiment" in user and isinstance(user["config"], dict):
        user = user["config"]  # a manifest from a previous run
    return resolve_config(user, text, str(p), **overrides)


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """Counter-based child seed: independent stream per (tag, index)."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(tag.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out: Path, cfg: dict, extra: dict | None = None):
    manifest = {"experiment": cfg["experiment"], "seed": cfg["seed"], "config": cfg}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _svg(path: Path, csv_path: Path, x, ys, **kw):
    path.write_text(formats.svg_from_csv(csv_path, x, ys, **kw))


def _chip(cfg: dict, seed: int, **changes):
    spec = copy.deepcopy(cfg["chip"])
    spec.update(changes)
    spec["rng_seed"] = seed
    return chip_from_config(spec)


def csv_digest(directory) -> str:
    """SHA-256 over every CSV below ``directory`` (sorted by relative path)."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*.csv")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# -- characterize ---------------------------------------------------------------


def run_characterize(cfg: dict, out: Path) -> dict:
    c = cfg["characterize"]
    seed = derive_seed(cfg["seed"], "characterize")
    devs = dict(cfg["chip"].get("deviations", {}))
    devs.setdefault("splitter_unevenness_db", c["unevenness_db"])
    chip = _chip(cfg, seed, deviations=devs)

    mon = [monitor_power(chip, j, "slow") for j in range(chip.n_branches)]
    formats.write_csv(out / "splitter_evenness.csv", ["branch", "monitor_db"], enumerate(mon))
    _svg(out / "splitter_evenness.svg", out / "splitter_evenness.csv", "branch", ["monitor_db"],
         kind="bar", title="Monitor power per branch", xlabel="branch", ylabel="dB")
    spread = max(mon) - min(mon)

    fits = []
    sweep_rows = []
    phases = np.linspace(-math.pi, math.pi, c["sweep_points"])
    for j in range(chip.n_active):
        for which in ("fast", "slow"):
            v = cal.default_voltage_sweep(chip, j, which, c["sweep_points"])
            fit = cal.fit_transmission_curve(chip, j, which, v)
            fits.append([j, which, fit.a, fit.b, fit.c, fit.d, fit.r_squared])
            sweep_rows.extend([j, which, vu, ph, fit(ph)] for vu, ph in zip(v, phases))
    formats.write_csv(out / "transmission_fits.csv", ["branch", "modulator", "a", "b", "c", "d", "r_squared"], fits)
    formats.write_csv(out / "transmission_sweeps.csv", ["branch", "modulator", "v_upper", "drive_phase_rad", "fitted_amplitude"],
                      sweep_rows)
    first = [r for r in sweep_rows if r[0] == 0 and r[1] == "fast"]
    formats.write_csv(out / "transmission_branch0.csv", ["drive_phase_rad", "fitted_amplitude"],
                      [r[3:] for r in first])
    _svg(out / "transmission_branch0.svg", out / "transmission_branch0.csv", "drive_phase_rad",
         ["fitted_amplitude"], title="Push-pull transmission, branch 0", xlabel="drive phase (rad)",
         ylabel="amplitude")

    branches = list(range(c["align_branches"]))
    res = cal.align_phases(chip, branches)
    rows = []
    for j, (ph, cur) in zip(branches, res.curves):
        rows.extend([j, p, i] for p, i in zip(ph, cur))
    formats.write_csv(out / "alignment_curves.csv", ["branch", "tail_phase_rad", "photocurrent"], rows)
    series = [(f"branch {j}", ph, cur) for j, (ph, cur) in zip(branches, res.curves)]
    (out / "alignment_curves.svg").write_text(formats.svg_plot(
        series, title="Sequential constructive interference", xlabel="tail phase (rad)", ylabel="photocurrent"))
    peaks = [float(np.max(cur)) for _, cur in res.curves]

    summary = {
        "monitor_spread_db": spread,
        "min_fit_r2": min(f[6] for f in fits),
        "alignment_peaks": peaks,
        "alignment_efficiency": cal.alignment_efficiency(chip, branches),
        "checks": {
            "fit_r2": min(f[6] for f in fits) > 0.999,
            "evenness_within_bound": spread <= c["unevenness_db"] + 1e-9,
            "peaks_increasing": all(b > a for a, b in zip(peaks, peaks[1:])),
        },
    }
    _write_json(out / "report.json", summary)
    return summary


# -- calibrate -----------------------------------------------------------------


def run_calibrate(cfg: dict, out: Path) -> dict:
    c = cfg["calibrate"]
    rows, eff_rows = [], []
    worst_bias, worst_align = 0.0, 1.0
    for t in range(c["trials"]):
        seed = derive_seed(cfg["seed"], "calibrate", t)
        devs = dict(cfg["chip"].get("deviations", {}))
        devs.update(bias_offset_std_rad=c["bias_offset_std_rad"], tail_phase_spread_rad=c["tail_phase_spread_rad"])
        chip = _chip(cfg, seed, deviations=devs)
        active = list(range(chip.n_active))
        report = cal.calibrate_chip(chip, active)
        for j in active:
            for which in ("fast", "slow"):
                setting = report["bias_settings"][f"{j}:{which}"]
                offset = chip.branches[j].modulator(which).bias_offset_rad
                err = abs((setting + offset + math.pi) % (2 * math.pi) - math.pi)
                worst_bias = max(worst_bias, err)
                rows.append([t, j, which, offset, setting, err / math.pi])
        eff = cal.alignment_efficiency(chip, active)
        worst_align = min(worst_align, eff)
        eff_rows.append([t, eff])
        _write_json(out / f"calibration_trial{t}.json", {"seed": seed, **report,
                                                          "chip": chip_to_config(chip)})
    formats.write_csv(out / "bias_recovery.csv",
                      ["trial", "branch", "modulator", "offset_rad", "setting_rad", "error_frac_pi"], rows)
    formats.write_csv(out / "alignment.csv", ["trial", "efficiency"], eff_rows)
    summary = {"worst_bias_error_frac_pi": worst_bias / math.pi, "worst_alignment": worst_align,
               "checks": {"bias_within_1pct": worst_bias <= 0.01 * math.pi,
                          "alignment_999": worst_align >= 0.999}}
    _write_json(out / "report.json", summary)
    return summary


# -- bpc --------------------------------------------------------------------------


def run_bpc_demo(cfg: dict, out: Path) -> dict:
    c = cfg["bpc"]
    lo, hi = c["pre_window"]
    k = c["post_iteration"]
    summary = {"weights": {}, "checks": {}}
    for wi, w in enumerate(c["weights"]):
        tag = "w" + "_".join(f"{v:g}" for v in w)
        traj_rows, per_seed = [], []
        for s in range(c["seeds"]):
            seed = derive_seed(cfg["seed"], f"bpc-{tag}", s)
            chip = make_chip(profile=cal_coarse_profile(cfg), seed=seed, value_noise=c["value_noise"])
            rep = cal.bpc(chip, w, max_iters=c["max_iters"], learning_rate=c["learning_rate"],
                          batch_seed=seed, n_steps=c["n_steps"])
            hist = rep.std_history
            post = hist[min(k, len(hist) - 1)]
            # the pre-BPC window is only asserted for the first (reference) weights
            ok = post <= c["post_max"] and (wi > 0 or lo <= hist[0] <= hi)
            per_seed.append([s, hist[0], post, rep.residual_std_after, rep.iterations, int(ok)])
            for it, std in enumerate(hist):
                traj_rows.append([s, it, std])
            if s == 0:
                rep.write_csv(out / f"bpc_{tag}_trajectory_seed0.csv")
                _write_samples(chip, w, rep, seed, c, out / f"bpc_{tag}_samples_seed0.csv")
        formats.write_csv(out / f"bpc_{tag}_seeds.csv",
                          ["seed_index", "std_before", f"std_after_{k}", "std_final", "iterations", "pass"], per_seed)
        formats.write_csv(out / f"bpc_{tag}_trajectories.csv", ["seed_index", "iteration", "std"], traj_rows)
        mean_traj = {}
        for s, it, std in traj_rows:
            mean_traj.setdefault(it, []).append(std)
        formats.write_csv(out / f"bpc_{tag}_mean_trajectory.csv", ["iteration", "mean_std"],
                          [[it, float(np.mean(v))] for it, v in sorted(mean_traj.items())])
        _svg(out / f"bpc_{tag}_mean_trajectory.svg", out / f"bpc_{tag}_mean_trajectory.csv", "iteration",
             ["mean_std"], title=f"BPC residual std, weights {w}", xlabel="iteration", ylabel="normalized std")
        frac = float(np.mean([r[5] for r in per_seed]))
        summary["weights"][tag] = {
            "pass_fraction": frac,
            "median_before": float(np.median([r[1] for r in per_seed])),
            "median_after": float(np.median([r[2] for r in per_seed])),
            "min_reduction": float(min(1 - r[2] / r[1] for r in per_seed)),
        }
        summary["checks"][f"{tag}_pass_fraction"] = frac >= c["pass_fraction"]
    _write_json(out / "report.json", summary)
    return summary


def cal_coarse_profile(cfg):
    from .optics import DeviationProfile

    prof = DeviationProfile.coarse()
    for k, v in cfg["chip"].get("deviations", {}).items():
        setattr(prof, k, v)
    return prof


def _write_samples(chip, w, rep, seed, c, path):
    """Before/after outputs on one shared batch for the scatter plot."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    batch = cal.BpcBatch.draw(rng, w, c["n_steps"])
    before = cal.chip_outputs(chip, batch.x, w)
    after = cal.chip_outputs(chip, batch.x, rep.final_weights)
    formats.write_csv(path, ["expected", "before", "after", "residual_before", "residual_after"],
                      zip(batch.y_hat, before, after, before - batch.y_hat, after - batch.y_hat))


# -- networks and datasets ------------------------------------------------------


def dataset_for(cfg: dict, process=None, seed=None) -> Dataset:
    d = cfg["dataset"]
    return build_dataset(process or d["process"], d["count"], d["size"],
                         derive_seed(cfg["seed"], "dataset") if seed is None else seed)


def train_config(cfg: dict, seed: int, **changes) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(changes)
    return TrainConfig(seed=seed, **t)


def train_network(cfg: dict, data: Dataset, mode: str, seed: int, train_count=None, **train_changes):
    n = cfg["network"]
    net = mini_automap(data.input_dim, data.size, n["hidden"], n["channels"], seed=seed)
    init_sum = net.checksum()
    (xtr, ytr), val = data.split()
    if train_count:
        xtr, ytr = xtr[:train_count], ytr[:train_count]
    log = train(net, (xtr, ytr), val, train_config(cfg, seed, **train_changes), mode)
    return net, log, init_sum


def ensure_checkpoint(cfg: dict, process: str, cache: Path, mode: str = "cbd"):
    """Trained network for ``process``, reusing a cached checkpoint keyed by config."""
    explicit = cfg["reconstruct"]["checkpoints"].get(process) or (
        cfg["network"]["checkpoint"] if process == cfg["dataset"]["process"] else None)
    if explicit:
        return Network.load(explicit)
    key = config_hash({"p": process, "m": mode, "d": cfg["dataset"], "n": cfg["network"],
                       "t": cfg["train"], "s": cfg["seed"]})
    path = Path(cache) / f"{process}_{mode}_{key}.ocdw"
    if path.exists():
        return Network.load(path)
    data = dataset_for(cfg, process)
    net, log, _ = train_network(cfg, data, mode, derive_seed(cfg["seed"], f"net-{process}"))
    path.parent.mkdir(parents=True, exist_ok=True)
    net.save(path)
    log.write_csv(path.with_suffix(".log.csv"))
    return net


def run_train(cfg: dict, out: Path) -> dict:
    data = dataset_for(cfg)
    seed = derive_seed(cfg["seed"], f"net-{cfg['dataset']['process']}")
    net, log, init_sum = train_network(cfg, data, cfg["mode"], seed)
    net.save(out / "network.ocdw")
    log.write_csv(out / "train_log.csv")
    _svg(out / "train_log.svg", out / "train_log.csv", "epoch", ["train_loss", "val_loss"],
         title=f"Training loss ({cfg['mode']})", xlabel="epoch", ylabel="loss")
    summary = {"final_train_loss": log.train_loss[-1], "final_val_loss": log.val_loss[-1],
               "init_checksum": init_sum, "checks": {"finite": math.isfinite(log.val_loss[-1])}}
    _write_json(out / "report.json", summary)
    return summary


# -- layer accuracy ---------------------------------------------------------------


def calibrated_chip(cfg: dict, seed: int, value_noise: float):
    chip = make_chip(profile=cal_coarse_profile(cfg), seed=seed, value_noise=value_noise)
    cal.calibrate_predistortion(chip, batch_seed=seed)
    return chip


def run_layer_accuracy(cfg: dict, out: Path) -> dict:
    c = cfg["lower"]
    data = dataset_for(cfg)
    ckpt = cfg["network"]["checkpoint"]
    if ckpt:
        net = Network.load(ckpt)
    else:
        net = mini_automap(data.input_dim, data.size, cfg["network"]["hidden"], cfg["network"]["channels"],
                           seed=derive_seed(cfg["seed"], f"net-{cfg['dataset']['process']}"))
    seed = derive_seed(cfg["seed"], "lower-chip", c["chip_seed"])
    if c["profile"] == "coarse":
        chip = calibrated_chip(cfg, seed, c["value_noise"])
    elif c["profile"] == "ideal":
        chip = make_chip(seed=seed, value_noise=c["value_noise"])
    else:
        raise ConfigError(f"unknown lower.profile {c['profile']!r}")
    x = data.inputs[data.val_idx[c["example"]]]
    fc = net.layers[0]
    sched_fc = decompose_mvm(x, fc.W, chip.n_active)
    got_fc = execute_schedule(sched_fc, chip)
    exp_fc = x @ fc.W
    a1 = np.tanh(np.tanh(x @ fc.W + fc.b) @ net.layers[1].W + net.layers[1].b)
    fm = a1.reshape(net.image_size, net.image_size, 1)
    conv = net.layers[2]
    sched_cv = lower_conv(fm, conv.W, chip.n_active)
    got_cv = execute_schedule(sched_cv, chip)
    exp_cv = conv_forward(fm[None], conv.W, resolve_padding("same", conv.spec.kernel_size))[0].ravel()
    std_fc = cal.normalized_residual_std(got_fc, exp_fc)
    std_cv = cal.normalized_residual_std(got_cv, exp_cv)
    formats.write_csv(out / "fc_scatter.csv", ["expected", "measured"], zip(exp_fc, got_fc))
    formats.write_csv(out / "conv_scatter.csv", ["expected", "measured"], zip(exp_cv, got_cv))
    for name in ("fc", "conv"):
        _svg(out / f"{name}_scatter.svg", out / f"{name}_scatter.csv", "expected", ["measured"], kind="scatter",
             title=f"{name} layer on chip", xlabel="expected", ylabel="measured")
    formats.write_csv(out / "layer_accuracy.csv", ["layer", "normalized_std", "steps"],
                      [["fc", std_fc, sched_fc.n_steps], ["conv", std_cv, sched_cv.n_steps]])
    if c["dump_schedule"]:
        dump = Path(c["dump_schedule"])
        formats.write_schedule(dump, sched_fc)
        if c["dump_csv"]:
            formats.schedule_to_csv(sched_fc, dump.with_suffix(".csv"))
    summary = {"fc_normalized_std": std_fc, "conv_normalized_std": std_cv,
               "equivalent_steps": sched_fc.n_steps + sched_cv.n_steps,
               "checks": {"fc": std_fc <= c["threshold"], "conv": std_cv <= c["threshold"]}}
    _write_json(out / "report.json", summary)
    return summary


# -- reconstruction / sweep -------------------------------------------------------


def _injection(c: dict, seed: int) -> ErrorInjection:
    return ErrorInjection({"fc": c["fc_sigma"], "conv": c["conv_sigma"], "deconv": c["conv_sigma"]},
                          seed=seed, relative=c["relative"])


def run_reconstruction(cfg: dict, out: Path, cache: Path | None = None) -> dict:
    c = cfg["reconstruct"]
    cache = Path(cache) if cache else out / "checkpoints"
    summary = {"processes": {}, "checks": {}}
    gaps = {}
    for proc in c["processes"]:
        net = ensure_checkpoint(cfg, proc, cache)
        data = dataset_for(cfg, proc)
        idx = data.val_idx[: c["n_images"]]
        x, truth = data.inputs[idx], data.truths[idx]
        exact = forward(net, x).output
        rows = []
        noisy = np.empty_like(exact)
        for i in range(len(idx)):
            inj = _injection(c, derive_seed(cfg["seed"], f"inject-{proc}", i))
            noisy[i] = forward(net, x[i:i + 1], injection=inj).output[0]
        e_exact = image_error_std(exact, truth)
        e_noisy = image_error_std(noisy, truth)
        rows = [[int(i), a, b] for i, a, b in zip(idx, e_exact, e_noisy)]
        formats.write_csv(out / f"recon_{proc}_errors.csv", ["example", "exact_error_std", "injected_error_std"], rows)
        if cfg["backend"] == "chip" and c["chip_images"] > 0:
            chip = calibrated_chip(cfg, derive_seed(cfg["seed"], "recon-chip"), cfg["lower"]["value_noise"])
            n = c["chip_images"]
            on_chip = forward(net, x[:n], backend="chip", chip=chip).output
            formats.write_csv(out / f"recon_{proc}_chip_errors.csv", ["example", "chip_error_std"],
                              zip(idx[:n], image_error_std(on_chip, truth[:n])))
        for name, img in (("truth", truth[0]), ("exact", exact[0]), ("injected", noisy[0])):
            formats.write_pgm(out / f"recon_{proc}_{name}.pgm", img, float(truth[0].min()), float(truth[0].max()))
        formats.write_pgm(out / f"recon_{proc}_error_x10.pgm", 10 * (noisy[0] - truth[0]), -1.0, 1.0)
        m_exact, m_noisy = float(np.mean(e_exact)), float(np.mean(e_noisy))
        ratio = m_noisy / m_exact
        gaps[proc] = ratio - 1.0
        summary["processes"][proc] = {"exact_error_std": m_exact, "injected_error_std": m_noisy, "ratio": ratio}
        summary["checks"][f"{proc}_ratio"] = ratio <= c["max_ratio"]
    formats.write_csv(out / "recon_summary.csv", ["process", "exact_error_std", "injected_error_std", "ratio"],
                      [[p, v["exact_error_std"], v["injected_error_std"], v["ratio"]]
                       for p, v in summary["processes"].items()])
    if "radon" in gaps and len(gaps) > 1:
        summary["radon_smallest_gap"] = gaps["radon"] == min(gaps.values())
    _write_json(out / "report.json", summary)
    return summary


def linear_fit(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    r2 = 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
    return float(slope), float(intercept), float(r2)


def run_error_sweep(cfg: dict, out: Path, cache: Path | None = None) -> dict:
    c = cfg["sweep"]
    cache = Path(cache) if cache else out / "checkpoints"
    proc = c["process"]
    net = ensure_checkpoint(cfg, proc, cache)
    data = dataset_for(cfg, proc)
    idx = data.val_idx
    trials = c["trials"]
    rows, means = [], []
    base = float(np.mean(image_error_std(forward(net, data.inputs[idx]).output, data.truths[idx])))
    for si, sigma in enumerate(c["sigmas"]):
        errs = []
        for t in range(trials):
            i = idx[t % len(idx)]
            inj = ErrorInjection(sigma, seed=derive_seed(cfg["seed"], f"sweep-{si}", t), relative=c["relative"])
            rec = forward(net, data.inputs[i:i + 1], injection=inj).output[0]
            errs.append(float(np.std(rec - data.truths[i])))
        means.append(float(np.mean(errs)))
        rows.append([sigma, means[-1], float(np.std(errs)), trials])
    formats.write_csv(out / "error_sweep.csv", ["sigma", "mean_error_std", "std_error_std", "trials"],
                      [[0.0, base, 0.0, len(idx)]] + rows)
    _svg(out / "error_sweep.svg", out / "error_sweep.csv", "sigma", ["mean_error_std"],
         title=f"Reconstruction error vs injected error ({proc})", xlabel="sigma", ylabel="error std")
    slope, intercept, r2 = linear_fit(c["sigmas"], means)
    summary = {"slope": slope, "intercept": intercept, "r2": r2, "baseline": base,
               "monotone": all(b >= a for a, b in zip(means, means[1:])),
               "checks": {"linear": r2 >= c["min_r2"] and slope > 0}}
    _write_json(out / "report.json", summary)
    return summary


# -- ablation ------------------------------------------------------------------------


def ablation_ordering(losses: dict, factor: float = 2.0) -> bool:
    """CBD below CID and NCBD; InOn the worst and above ``factor`` x CBD."""
    cbd, cid, ncbd, inon = (losses[m] for m in ("cbd", "cid", "ncbd", "inon"))
    return cbd < cid and cbd < ncbd and inon > max(cbd, cid, ncbd) and inon > factor * cbd


def run_domain_ablation(cfg: dict, out: Path) -> dict:
    c = cfg["ablate"]
    summary = {"processes": {}, "checks": {}}
    rows, curve_rows = [], []
    for proc in c["processes"]:
        data = dataset_for(cfg, proc)
        passes = 0
        per_seed = []
        for s in c["seeds"]:
            seed = derive_seed(cfg["seed"], f"ablate-{proc}", s)
            losses, sums = {}, {}
            for mode in c["modes"]:
                net, log, init_sum = train_network(cfg, data, mode, seed, train_count=c["train_count"],
                                                   epochs=c["epochs"],
                                                   decay_epoch=int(round(c["epochs"] * 0.85)))
                losses[mode] = log.val_loss[-1]
                sums[mode] = init_sum
                rows.append([proc, s, mode, log.train_loss[-1], log.val_loss[-1], init_sum])
                curve_rows.extend([proc, s, mode, e, tl, vl] for e, tl, vl, _ in log.rows())
            ok = ablation_ordering(losses, c["inon_factor"]) if set(c["modes"]) >= {"cbd", "cid", "ncbd", "inon"} else False
            passes += int(ok)
            per_seed.append({"seed": s, "losses": losses, "ordered": ok,
                             "same_init": len(set(sums.values())) == 1})
        summary["processes"][proc] = {"passes": passes, "seeds": per_seed}
        summary["checks"][f"{proc}_ordering"] = passes >= c["min_seeds"]
    formats.write_csv(out / "ablation_final.csv",
                      ["process", "seed", "mode", "final_train_loss", "final_val_loss", "init_checksum"], rows)
    formats.write_csv(out / "ablation_curves.csv", ["process", "seed", "mode", "epoch", "train_loss", "val_loss"],
                      curve_rows)
    _write_json(out / "report.json", summary)
    return summary


# -- dispatch ------------------------------------------------------------------------


RUNNERS = {
    "characterize": run_characterize,
    "calibrate": run_calibrate,
    "bpc": run_bpc_demo,
    "lower": run_layer_accuracy,
    "train": run_train,
    "reconstruct": run_reconstruction,
    "sweep": run_error_sweep,
    "ablate": run_domain_ablation,
}


def run_experiment(name: str, cfg: dict, out) -> dict:
    if name not in RUNNERS:
        raise ConfigError(f"unknown experiment {name!r}")
    cfg = copy.deepcopy(cfg)
    cfg["experiment"] = name
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg)
    summary = RUNNERS[name](cfg, out)
    summary["csv_sha256"] = csv_digest(out)
    _write_json(out / "summary.json", summary)
    return summary
