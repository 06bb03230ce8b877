"""Binary, CSV, PGM and SVG file formats.

Binary files share one layout: 4 magic bytes, a u32 format version, then a
format-specific header and little-endian float64 payloads.

* ``OCDS`` schedules: u32 chunk width, u64 step count, u64 accumulator
  count, u32 ndim + u64 dims of the output shape, then one row per step of
  (slow[M], fast[M], accumulator, scale).
* ``OCDW`` checkpoints: u32 layer count, per layer u32 kind, u32
  activation, u32 array count and each array as a tensor body.
* ``OCDT`` tensors: u32 ndim, u64 dims, data in C order.
"""

from __future__ import annotations

import csv
import io
import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<I", VERSION)


def _check_header(buf: io.BufferedIOBase, magic: bytes):
    got = buf.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _unpack(buf, "<I")
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


def _unpack(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise FormatError("truncated file")
    return struct.unpack(fmt, raw)


def _write_array(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = _unpack(buf, "<I")
    shape = _unpack(buf, f"<{ndim}Q")
    count = int(np.prod(shape, dtype=np.int64))
    raw = buf.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError("truncated array payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


# -- tensors ------------------------------------------------------------------


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(_header(b"OCDT"))
        _write_array(fh, arr)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh, b"OCDT")
        return _read_array(fh)


# -- schedules ----------------------------------------------------------------


def schedule_bytes(schedule) -> bytes:
    buf = io.BytesIO()
    m = schedule.chunk_width
    buf.write(_header(b"OCDS"))
    buf.write(struct.pack("<IQQ", m, schedule.n_steps, schedule.accumulator_count))
    shape = tuple(schedule.output_shape)
    buf.write(struct.pack("<I", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}Q", *shape))
    rows = np.column_stack([schedule.slow, schedule.fast,
                            schedule.accumulator.astype(float), schedule.scale])
    buf.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    return buf.getvalue()


def write_schedule(path, schedule):
    Path(path).write_bytes(schedule_bytes(schedule))


def read_schedule(path):
    from .lowering import Schedule

    with open(path, "rb") as fh:
        _check_header(fh, b"OCDS")
        m, steps, acc_count = _unpack(fh, "<IQQ")
        (ndim,) = _unpack(fh, "<I")
        shape = _unpack(fh, f"<{ndim}Q")
        width = 2 * m + 2
        raw = fh.read(8 * width * steps)
        if len(raw) != 8 * width * steps:
            raise FormatError("truncated schedule payload")
    rows = np.frombuffer(raw, dtype="<f8").reshape(steps, width)
    return Schedule(chunk_width=m, slow=rows[:, :m].copy(), fast=rows[:, m:2 * m].copy(),
                    accumulator=rows[:, 2 * m].astype(np.int64), scale=rows[:, 2 * m + 1].copy(),
                    accumulator_count=acc_count, output_shape=tuple(int(s) for s in shape))


def schedule_to_csv(schedule, path):
    m = schedule.chunk_width
    header = ["step"] + [f"slow_{j}" for j in range(m)] + [f"fast_{j}" for j in range(m)] + ["accumulator", "scale"]
    rows = ([i, *schedule.slow[i], *schedule.fast[i], int(schedule.accumulator[i]), schedule.scale[i]]
            for i in range(schedule.n_steps))
    write_csv(path, header, rows)


# -- checkpoints --------------------------------------------------------------


def write_checkpoint(path, layers):
    """``layers``: iterable of (kind_tag, activation_tag, [arrays])."""
    layers = list(layers)
    with open(path, "wb") as fh:
        fh.write(_header(b"OCDW"))
        fh.write(struct.pack("<I", len(layers)))
        for kind, act, arrays in layers:
            fh.write(struct.pack("<III", kind, act, len(arrays)))
            for a in arrays:
                _write_array(fh, a)


def read_checkpoint(path):
    out = []
    with open(path, "rb") as fh:
        _check_header(fh, b"OCDW")
        (n,) = _unpack(fh, "<I")
        for _ in range(n):
            kind, act, n_arr = _unpack(fh, "<III")
            out.append((kind, act, [_read_array(fh) for _ in range(n_arr)]))
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint")
    return out


# -- text formats -------------------------------------------------------------


def fmt_float(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def write_pgm(path, image, lo=None, hi=None):
    """8-bit binary PGM with a linear min..max (or lo..hi) grey mapping."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    grey = np.clip(np.round((img - lo) / span * 255), 0, 255).astype(np.uint8)
    h, w = grey.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(grey.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError("not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)


# -- SVG ----------------------------------------------------------------------

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"]


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def svg_plot(series, title="", xlabel="", ylabel="", kind="line", width=480, height=320) -> str:
    """Small dependency-free SVG chart.

    ``series`` is a list of (label, xs, ys).  ``kind`` is "line",
    "scatter" or "bar".  Output depends only on the data, so replotting a
    stored CSV reproduces the file byte for byte.
    """
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = np.concatenate([np.asarray(s[1], dtype=float) for s in series]) if series else np.zeros(1)
    ys_all = np.concatenate([np.asarray(s[2], dtype=float) for s in series]) if series else np.zeros(1)
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(min(ys_all.min(), 0.0 if kind == "bar" else ys_all.min())), float(ys_all.max())
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.2f}" y="{mt + ph + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{ml - 5}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if kind == "line":
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        elif kind == "scatter":
            out.extend(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="1.8" fill="{color}"/>'
                       for a, b in zip(xs, ys))
        elif kind == "bar":
            n = len(series)
            step = pw / max(len(xs), 1)
            bw = step * 0.8 / n
            for k, (a, b) in enumerate(zip(xs, ys)):
                left = ml + k * step + step * 0.1 + i * bw
                top, bottom = sorted((sy(b), sy(max(y0, 0.0))))
                out.append(f'<rect x="{left:.2f}" y="{top:.2f}" width="{bw:.2f}" '
                           f'height="{bottom - top:.2f}" fill="{color}"/>')
        else:
            raise ValueError(f"unknown plot kind {kind!r}")
        out.append(f'<text x="{ml + pw - 5}" y="{mt + 14 + 13 * i}" text-anchor="end" fill="{color}">'
                   f'{_esc(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def svg_from_csv(csv_path, x_col, y_cols, **kwargs) -> str:
    header, rows = read_csv(csv_path)
    xi = header.index(x_col)
    xs = [float(r[xi]) for r in rows]
    series = [(c, xs, [float(r[header.index(c)]) for r in rows]) for c in y_cols]
    return svg_plot(series, **kwargs)
