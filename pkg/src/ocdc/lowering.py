"""Lowering of matrix products and convolutions onto a width-M dot-product core.

A :class:`Schedule` is a flat list of steps.  Each step pairs a held
(slow) vector with a streamed (fast) vector, both scaled into [-1, 1];
its dot product times ``scale`` is added to one accumulator.  Steps are
stored as parallel numpy arrays so a schedule of a few hundred thousand
steps replays in one vectorized pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ChunkWidthExceedsChip, DimensionMismatch, InvalidGeometry
from .optics import ChipState


@dataclass
class Schedule:
    chunk_width: int
    slow: np.ndarray  # (S, M)
    fast: np.ndarray  # (S, M)
    accumulator: np.ndarray  # (S,) int64
    scale: np.ndarray  # (S,)
    accumulator_count: int
    output_shape: tuple = field(default=())

    def __post_init__(self):
        self.slow = np.asarray(self.slow, dtype=float)
        self.fast = np.asarray(self.fast, dtype=float)
        self.accumulator = np.asarray(self.accumulator, dtype=np.int64)
        self.scale = np.asarray(self.scale, dtype=float)
        s = self.accumulator.shape[0]
        if self.slow.shape != (s, self.chunk_width) or self.fast.shape != (s, self.chunk_width):
            raise DimensionMismatch("step arrays disagree with chunk width / step count")
        if self.scale.shape != (s,):
            raise DimensionMismatch("one scale factor per step required")
        if not self.output_shape:
            self.output_shape = (self.accumulator_count,)

    @property
    def n_steps(self) -> int:
        return self.accumulator.shape[0]

    def __len__(self):
        return self.n_steps

    def reshape_output(self, flat: np.ndarray) -> np.ndarray:
        return np.asarray(flat).reshape(self.output_shape)

    @staticmethod
    def concatenate(parts, accumulator_count, output_shape=()) -> Schedule:
        parts = list(parts)
        return Schedule(
            chunk_width=parts[0].chunk_width,
            slow=np.concatenate([p.slow for p in parts]),
            fast=np.concatenate([p.fast for p in parts]),
            accumulator=np.concatenate([p.accumulator for p in parts]),
            scale=np.concatenate([p.scale for p in parts]),
            accumulator_count=accumulator_count,
            output_shape=output_shape,
        )


def schedule_size(k: int, n: int, m: int) -> int:
    """Number of steps of an MVM with a length-k vector, k x n matrix, width m."""
    if min(k, n, m) < 1:
        raise DimensionMismatch("k, n and m must be positive")
    return -(-k // m) * n


def _safe_max(a, axis):
    s = np.abs(a).max(axis=axis)
    return np.where(s > 0, s, 1.0)


def decompose_mvm(x, A, m: int) -> Schedule:
    """Schedule for ``x @ A``: x chunks held slow, matrix rows streamed fast.

    Steps are slab-major: for each length-m chunk of x, every output
    column is visited in turn.  Each slab carries its own scale so both
    operands fill [-1, 1].
    """
    x = np.asarray(x, dtype=float)
    A = np.asarray(A, dtype=float)
    if x.ndim != 1 or A.ndim != 2 or A.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"x {x.shape} and A {A.shape} do not chain")
    k, n = A.shape
    if k < 1 or n < 1 or m < 1:
        raise DimensionMismatch("K, N and M must be positive")
    chunks = -(-k // m)
    pad = chunks * m - k
    xp = np.concatenate([x, np.zeros(pad)]).reshape(chunks, m)
    Ap = np.concatenate([A, np.zeros((pad, n))]).reshape(chunks, m, n)
    sx = _safe_max(xp, axis=1)
    sa = _safe_max(Ap, axis=(1, 2))
    slow = np.repeat(xp / sx[:, None], n, axis=0)
    fast = (Ap / sa[:, None, None]).transpose(0, 2, 1).reshape(chunks * n, m)
    return Schedule(
        chunk_width=m,
        slow=slow,
        fast=fast,
        accumulator=np.tile(np.arange(n), chunks),
        scale=np.repeat(sx * sa, n),
        accumulator_count=n,
    )


def replay(schedule: Schedule) -> np.ndarray:
    """Exact digital evaluation of a schedule."""
    vals = np.einsum("ij,ij->i", schedule.slow, schedule.fast) * schedule.scale
    return np.bincount(schedule.accumulator, weights=vals, minlength=schedule.accumulator_count)


def execute_schedule(schedule: Schedule, chip: ChipState, block: int = 1 << 16) -> np.ndarray:
    """Run every step on the chip and accumulate the rescaled outputs digitally."""
    if schedule.chunk_width > chip.n_active:
        raise ChunkWidthExceedsChip(
            f"chunk width {schedule.chunk_width} exceeds {chip.n_active} active branches")
    vals = np.empty(schedule.n_steps)
    for start in range(0, schedule.n_steps, block):
        sl = slice(start, start + block)
        vals[sl] = chip.run(schedule.slow[sl], schedule.fast[sl])
    vals *= schedule.scale
    return np.bincount(schedule.accumulator, weights=vals, minlength=schedule.accumulator_count)


# -- convolution --------------------------------------------------------------


@dataclass
class PatchMatrix:
    data: np.ndarray  # (k*k*C, P)
    height: int
    width: int
    kernel_size: int
    stride: int
    pad: tuple  # (top, bottom, left, right)
    out_height: int
    out_width: int

    @property
    def shape(self):
        return self.data.shape


def resolve_padding(padding, k: int) -> tuple:
    """Zero padding (top, bottom, left, right) for a named or integer padding."""
    if isinstance(padding, (int, np.integer)):
        if padding < 0:
            raise InvalidGeometry("padding must be >= 0")
        p = int(padding)
        return (p, p, p, p)
    if padding == "valid":
        return (0, 0, 0, 0)
    if padding == "same":
        lo = (k - 1) // 2
        hi = k - 1 - lo
        return (lo, hi, lo, hi)
    if padding == "full":
        return (k - 1,) * 4
    raise InvalidGeometry(f"unknown padding {padding!r}")


def _pad_map(fm, pads):
    t, b, l, r = pads
    return np.pad(fm, [(0, 0)] * (fm.ndim - 3) + [(t, b), (l, r), (0, 0)])


def im2col_patch(feature_map, kernel_size: int, stride: int = 1, padding="same") -> PatchMatrix:
    """Patch matrix whose column p is the flattened receptive field of output p.

    Rows follow (ki, kj, c) order so a (k, k, C) kernel flattened in C order
    dotted with a column gives the correlation output at that position.
    """
    fm = np.asarray(feature_map, dtype=float)
    if fm.ndim == 2:
        fm = fm[:, :, None]
    if fm.ndim != 3:
        raise InvalidGeometry("feature map must be H x W x C")
    k = int(kernel_size)
    if k < 1 or stride < 1:
        raise InvalidGeometry("kernel size and stride must be positive")
    h, w, c = fm.shape
    pads = resolve_padding(padding, k)
    padded = _pad_map(fm, pads)
    hp, wp = padded.shape[:2]
    if hp < k or wp < k:
        raise InvalidGeometry(f"{k}x{k} kernel does not fit a {h}x{w} map with padding {padding!r}")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    oh, ow = win.shape[:2]
    data = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, k * k * c).T
    return PatchMatrix(np.ascontiguousarray(data), h, w, k, stride, pads, oh, ow)


def lower_conv(feature_map, kernels, m: int, stride: int = 1, padding="same") -> Schedule:
    """Schedule for a multi-channel convolution (cross-correlation).

    ``kernels`` is (k, k, C_in, C_out).  Each flattened kernel is the held
    vector and the patch matrix is streamed; output (p, o) lands in
    accumulator ``p * C_out + o`` so the result reshapes to (H_out, W_out, C_out).
    """
    kernels = np.asarray(kernels, dtype=float)
    if kernels.ndim == 2:
        kernels = kernels[:, :, None, None]
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise InvalidGeometry("kernels must be k x k x C_in x C_out")
    k, _, cin, cout = kernels.shape
    fm = np.asarray(feature_map, dtype=float)
    if fm.ndim == 2:
        fm = fm[:, :, None]
    if fm.shape[-1] != cin:
        raise DimensionMismatch(f"map has {fm.shape[-1]} channels, kernels expect {cin}")
    patches = im2col_patch(fm, k, stride, padding)
    p = patches.data.shape[1]
    flat = kernels.reshape(k * k * cin, cout)
    parts = []
    for o in range(cout):
        s = decompose_mvm(flat[:, o], patches.data, m)
        s.accumulator = s.accumulator * cout + o
        parts.append(s)
    return Schedule.concatenate(parts, accumulator_count=p * cout,
                                output_shape=(patches.out_height, patches.out_width, cout))


def flip_kernel(kernels) -> np.ndarray:
    """Spatially flipped kernel with input/output channels swapped."""
    kernels = np.asarray(kernels, dtype=float)
    return kernels[::-1, ::-1].transpose(0, 1, 3, 2)


def adjoint_padding(padding, k: int):
    """Padding of the flipped-kernel convolution that realizes the adjoint."""
    t, b, l, r = resolve_padding(padding, k)
    return (k - 1 - t, k - 1 - b, k - 1 - l, k - 1 - r)


def lower_deconv(feature_map, kernels, m: int, padding="same") -> Schedule:
    """Stride-1 transposed convolution as a flipped-kernel convolution.

    ``kernels`` is (k, k, C_in, C_out) for the transposed layer itself.
    With ``padding="same"`` the result is the adjoint of a same-padded
    convolution and keeps the spatial size; ``"full"`` is the adjoint of a
    valid convolution and grows the map by k - 1.
    """
    kernels = np.asarray(kernels, dtype=float)
    if kernels.ndim == 2:
        kernels = kernels[:, :, None, None]
    k = kernels.shape[0]
    forward_padding = {"same": "same", "full": "valid"}.get(padding, padding)
    pads = adjoint_padding(forward_padding, k)
    fm = np.asarray(feature_map, dtype=float)
    if fm.ndim == 2:
        fm = fm[:, :, None]
    padded = _pad_map(fm, pads)
    return lower_conv(padded, kernels[::-1, ::-1], m, padding="valid")
