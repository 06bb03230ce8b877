"""Synthetic phantoms and the three encoding processes used as network tasks.

* MF: centered unitary 2-D DFT with an extra phase on even k-space rows,
* vPDS: DFT sampled by a variable-density Poisson-disk mask,
* Radon: pixel-driven parallel-beam sinogram.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidGeometry, ShapeMismatch, SparsityUnreachable


class Process(str, Enum):
    MF = "mf"
    VPDS = "vpds"
    RADON = "radon"


TRAIN_FRACTION = (2700, 3100)
DEFAULT_THETA_RANGE = (math.pi / 4, 3 * math.pi / 4)


@dataclass
class Phantom:
    pixels: np.ndarray
    seed: int


@dataclass
class EncodedExample:
    input: np.ndarray
    truth: Phantom
    process: Process
    params: dict = field(default_factory=dict)


def phantom(seed: int, size: int = 32) -> Phantom:
    """Random composite of 5-12 ellipses, max-normalized then mean-subtracted."""
    if size < 8:
        raise InvalidGeometry("phantom size must be >= 8")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size * 2 - 1
    v = (yy + 0.5) / size * 2 - 1
    img = np.zeros((size, size))
    # a large body ellipse keeps the image from being empty
    n = int(rng.integers(5, 13))
    for i in range(n):
        if i == 0:
            cx, cy = rng.uniform(-0.1, 0.1, 2)
            ax, ay = rng.uniform(0.55, 0.85, 2)
            level = rng.uniform(0.5, 1.0)
        else:
            cx, cy = rng.uniform(-0.6, 0.6, 2)
            ax, ay = rng.uniform(0.08, 0.4, 2)
            level = rng.uniform(-0.4, 0.8)
        ang = rng.uniform(0, math.pi)
        ca, sa = math.cos(ang), math.sin(ang)
        du, dv = u - cx, v - cy
        inside = ((du * ca + dv * sa) / ax) ** 2 + ((-du * sa + dv * ca) / ay) ** 2 <= 1.0
        img[inside] += level
    img = np.clip(img, 0.0, None)
    img /= img.max()
    img -= img.mean()
    return Phantom(pixels=img, seed=int(seed))


# -- Fourier processes --------------------------------------------------------


def centered_dft(image) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image), norm="ortho"))


def centered_idft(kspace) -> np.ndarray:
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kspace), norm="ortho"))


def _as_image(image) -> np.ndarray:
    if isinstance(image, Phantom):
        image = image.pixels
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeMismatch(f"expected a square image, got {img.shape}")
    return img


def _two_channel(k: np.ndarray) -> np.ndarray:
    return np.stack([k.real, k.imag], axis=-1)


def mf_kspace(image, even_row_phase: float) -> np.ndarray:
    k = centered_dft(_as_image(image))
    k[0::2, :] *= np.exp(1j * even_row_phase)
    return k


def mf_encode(image, even_row_phase: float = math.pi / 2) -> EncodedExample:
    """Misaligned Fourier encoding: even k-space rows pick up an extra phase."""
    truth = image if isinstance(image, Phantom) else Phantom(_as_image(image), -1)
    k = mf_kspace(truth.pixels, even_row_phase)
    return EncodedExample(_two_channel(k), truth, Process.MF, {"even_row_phase": float(even_row_phase)})


def vpds_mask(size: int, target_sparsity: float = 0.6, seed: int = 0, sparsity_means: str = "zeroed",
              r_min: float = 1.0, r_max: float = 4.0, tolerance: float = 0.03,
              return_radius: bool = False):
    """Variable-density Poisson-disk k-space mask (True = sample kept).

    Dart throwing over a seeded random visiting order: a candidate is kept
    when no kept sample lies closer than its own exclusion radius
    ``s * (r_min + (r_max - r_min) * d / d_max)``, d being the distance to
    the k-space center.  The radius scale ``s`` is bisected until the
    zeroed (or retained) fraction matches ``target_sparsity``.  The 4x4
    block around DC is always kept.
    """
    if size < 8:
        raise InvalidGeometry("mask size must be >= 8")
    if sparsity_means not in ("zeroed", "retained"):
        raise ValueError("sparsity_means must be 'zeroed' or 'retained'")
    keep_target = 1 - target_sparsity if sparsity_means == "zeroed" else target_sparsity
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD15C]))
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(yy - c, xx - c)
    base = r_min + (r_max - r_min) * dist / dist.max()
    dc = np.zeros((size, size), dtype=bool)
    dc[c - 2:c + 2, c - 2:c + 2] = True
    order = rng.permutation(size * size)

    def throw(scale):
        kept = dc.copy()
        radius = scale * base
        for idx in order:
            i, j = divmod(int(idx), size)
            if kept[i, j]:
                continue
            r = radius[i, j]
            w = int(math.ceil(r))
            i0, i1, j0, j1 = max(i - w, 0), min(i + w + 1, size), max(j - w, 0), min(j + w + 1, size)
            win = kept[i0:i1, j0:j1]
            if win.any():
                di, dj = np.nonzero(win)
                if np.min(np.hypot(di + i0 - i, dj + j0 - j)) < r:
                    continue
            kept[i, j] = True
        return kept, radius

    def frac(scale):
        return throw(scale)[0].mean()

    lo, hi = 0.0, 1.0
    while frac(hi) > keep_target and hi < 1e3:
        hi *= 2
    best = None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if best is None or abs(f - keep_target) < abs(best[1] - keep_target):
            best = (mid, f)
        if abs(f - keep_target) <= tolerance / 4:
            break
        if f > keep_target:
            lo = mid
        else:
            hi = mid
    scale, f = best
    if abs(f - keep_target) > tolerance:
        raise SparsityUnreachable(f"closest kept fraction {f:.3f}, wanted {keep_target:.3f}")
    mask, radius = throw(scale)
    return (mask, radius) if return_radius else mask


def vpds_encode(image, mask) -> EncodedExample:
    truth = image if isinstance(image, Phantom) else Phantom(_as_image(image), -1)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != truth.pixels.shape:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {truth.pixels.shape}")
    k = centered_dft(truth.pixels) * mask
    return EncodedExample(_two_channel(k), truth, Process.VPDS)


# -- Radon --------------------------------------------------------------------


def radon_default_geometry(size: int) -> tuple[int, int]:
    """Toy angle/ray counts (60 x 47 for 32 x 32 images)."""
    n_rays = int(math.ceil(size * math.sqrt(2))) + 1
    if n_rays % 2 == 0:
        n_rays += 1
    return max(1, int(round(size * 60 / 32))), n_rays


def radon(image, n_angles: int | None = None, n_rays: int | None = None) -> np.ndarray:
    """Pixel-driven parallel-beam projection with linear splatting.

    Pixel (i, j) sits at x = j - N//2, y = i - N//2; at angle k*pi/n_angles
    it projects to t = x cos + y sin, i.e. fractional ray bin
    t + (n_rays - 1) / 2.  Its value is split between the two nearest bins.
    """
    img = _as_image(image)
    n = img.shape[0]
    da, dr = radon_default_geometry(n)
    n_angles = da if n_angles is None else int(n_angles)
    n_rays = dr if n_rays is None else int(n_rays)
    if n_angles < 1:
        raise InvalidGeometry("need at least one projection angle")
    c = n // 2
    yy, xx = np.mgrid[0:n, 0:n]
    x = (xx - c).ravel().astype(float)
    y = (yy - c).ravel().astype(float)
    vals = img.ravel()
    theta = np.arange(n_angles) * math.pi / n_angles
    bins = np.outer(np.cos(theta), x) + np.outer(np.sin(theta), y) + (n_rays - 1) / 2.0
    if bins.min() < 0 or bins.max() > n_rays - 1:
        raise InvalidGeometry(f"{n_rays} rays do not cover the {n}x{n} image diagonal")
    b0 = np.floor(bins).astype(np.int64)
    f = bins - b0
    flat = (b0 + (n_rays + 1) * np.arange(n_angles)[:, None]).ravel()
    length = n_angles * (n_rays + 1)
    sino = np.bincount(flat, weights=(vals[None, :] * (1 - f)).ravel(), minlength=length)
    sino += np.bincount(flat + 1, weights=(vals[None, :] * f).ravel(), minlength=length)
    return sino.reshape(n_angles, n_rays + 1)[:, :n_rays]


def radon_encode(image, n_angles: int | None = None, n_rays: int | None = None) -> EncodedExample:
    truth = image if isinstance(image, Phantom) else Phantom(_as_image(image), -1)
    sino = radon(truth.pixels, n_angles, n_rays)
    return EncodedExample(sino, truth, Process.RADON,
                          {"n_angles": sino.shape[0], "n_rays": sino.shape[1]})


# -- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    process: Process
    size: int
    seed: int
    inputs: np.ndarray  # (count, D) flattened network inputs
    truths: np.ndarray  # (count, size, size)
    train_idx: np.ndarray
    val_idx: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def split(self):
        return ((self.inputs[self.train_idx], self.truths[self.train_idx]),
                (self.inputs[self.val_idx], self.truths[self.val_idx]))

    def save(self, directory):
        from .formats import write_tensor

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "inputs.ocdt", self.inputs)
        write_tensor(d / "truths.ocdt", self.truths)
        manifest = {
            "process": self.process.value, "size": self.size, "seed": self.seed,
            "count": int(self.inputs.shape[0]),
            "train": self.train_idx.tolist(), "val": self.val_idx.tolist(),
            "params": self.params,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> Dataset:
        from .formats import read_tensor

        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        return cls(Process(m["process"]), m["size"], m["seed"], read_tensor(d / "inputs.ocdt"),
                   read_tensor(d / "truths.ocdt"), np.array(m["train"], dtype=np.int64),
                   np.array(m["val"], dtype=np.int64), m["params"])


def split_sizes(count: int) -> tuple[int, int]:
    n_train = count * TRAIN_FRACTION[0] // TRAIN_FRACTION[1]
    return n_train, count - n_train


def example_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def encode_example(process: Process, ph: Phantom, rng: np.random.Generator, mask=None,
                   theta_range=DEFAULT_THETA_RANGE, n_angles=None, n_rays=None) -> EncodedExample:
    process = Process(process)
    if process is Process.MF:
        return mf_encode(ph, float(rng.uniform(*theta_range)))
    if process is Process.VPDS:
        return vpds_encode(ph, mask)
    return radon_encode(ph, n_angles, n_rays)


def build_dataset(process, count: int = 690, size: int = 32, seed: int = 0,
                  theta_range=DEFAULT_THETA_RANGE, target_sparsity: float = 0.6,
                  n_angles: int | None = None, n_rays: int | None = None) -> Dataset:
    """Deterministic dataset with a 2700:400-proportioned train/validation split.

    vPDS uses one mask for the whole dataset, drawn from ``seed``.
    """
    if count < 10:
        raise ValueError("count must be >= 10")
    process = Process(process)
    params: dict = {}
    mask = None
    if process is Process.VPDS:
        mask = vpds_mask(size, target_sparsity, seed)
        params["target_sparsity"] = target_sparsity
        params["kept_fraction"] = float(mask.mean())
    if process is Process.MF:
        params["theta_range"] = list(theta_range)
    inputs, truths = [], []
    for i in range(count):
        s = example_seed(seed, i)
        ph = phantom(s, size)
        rng = np.random.default_rng(np.random.SeedSequence([s, 1]))
        ex = encode_example(process, ph, rng, mask, theta_range, n_angles, n_rays)
        if process is Process.RADON:
            params.update(ex.params)
        inputs.append(ex.input.ravel())
        truths.append(ph.pixels)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B17])).permutation(count)
    n_train, _ = split_sizes(count)
    return Dataset(process, size, int(seed), np.array(inputs), np.array(truths),
                   np.sort(perm[:n_train]), np.sort(perm[n_train:]), params)
