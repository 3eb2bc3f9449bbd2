"""RF frame data model, the ``.rf`` binary format and frame-level utilities."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

MAGIC = b"RFF1"
_HEADER = struct.Struct("<4sIIffI")
HEADER_SIZE = _HEADER.size

MIN_AXIAL = 64
MIN_LATERAL = 16
MIN_WINDOW = (16, 4)

LABEL_COLUMNS = ("pair_id", "frame_a", "frame_b", "min_ncc", "mean_abs_disp", "label")


@dataclass(frozen=True, eq=False)
class RfFrame:
    """One RF acquisition, ``samples[axial, lateral]``.

    Samples are kept in the dtype they were built with (``float32`` after a
    file load, ``float64`` from the simulator). The array is made read-only.
    """

    samples: np.ndarray
    fs_hz: float = 40e6
    f0_hz: float = 8.5e6
    frame_id: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.dtype not in (np.float32, np.float64):
            s = s.astype(np.float64)
        if s.ndim != 2:
            raise ValueError(f"samples must be 2D, got shape {s.shape}")
        if s.shape[0] < MIN_AXIAL or s.shape[1] < MIN_LATERAL:
            raise ValueError(
                f"frame {s.shape} smaller than minimum {MIN_AXIAL}x{MIN_LATERAL}")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite samples in frame")
        if not self.fs_hz > 2 * self.f0_hz:
            raise ValueError(f"fs_hz={self.fs_hz} must exceed 2*f0_hz={2 * self.f0_hz}")
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        if s is self.samples and s.flags.writeable:
            s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    def replace(self, **changes) -> "RfFrame":
        kw = dict(samples=self.samples, fs_hz=self.fs_hz, f0_hz=self.f0_hz,
                  frame_id=self.frame_id)
        kw.update(changes)
        return RfFrame(**kw)


@dataclass(frozen=True)
class PairRecord:
    """A labeled frame pair, one row of the labels table."""

    pair_id: str
    frame_a_ref: str
    frame_b_ref: str
    label: int
    min_ncc: float
    mean_abs_disp_samples: float
    source: str = "synthetic"

    def __post_init__(self):
        if self.frame_a_ref == self.frame_b_ref:
            raise ValueError("a pair needs two distinct frames")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.source not in ("synthetic", "external"):
            raise ValueError(f"unknown source {self.source!r}")


@dataclass(frozen=True)
class WindowGrid:
    """3x3 tiling of a rectangular interior; windows are (row0, col0, rows, cols)."""

    windows: tuple[tuple[int, int, int, int], ...] = field(default_factory=tuple)

    def slices(self):
        for r0, c0, nr, nc in self.windows:
            yield slice(r0, r0 + nr), slice(c0, c0 + nc)


# -- .rf file format ---------------------------------------------------------

def frame_to_bytes(frame: RfFrame) -> bytes:
    n_ax, n_lat = frame.shape
    header = _HEADER.pack(MAGIC, n_ax, n_lat, frame.fs_hz, frame.f0_hz, frame.frame_id)
    return header + np.ascontiguousarray(frame.samples, dtype="<f4").tobytes()


def frame_from_bytes(buf: bytes) -> RfFrame:
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header")
    magic, n_ax, n_lat, fs, f0, fid = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("bad magic")
    payload = buf[HEADER_SIZE:]
    if len(payload) != 4 * n_ax * n_lat:
        raise FormatError(
            f"payload size mismatch: header declares {n_ax}x{n_lat} "
            f"({n_ax * n_lat} values), payload holds {len(payload) / 4:g}")
    samples = np.frombuffer(payload, dtype="<f4").reshape(n_ax, n_lat).astype(np.float32)
    if not np.all(np.isfinite(samples)):
        raise FormatError("non-finite samples in payload")
    try:
        return RfFrame(samples, fs_hz=float(fs), f0_hz=float(f0), frame_id=int(fid))
    except ValueError as exc:
        raise FormatError(f"metadata invalid: {exc}") from exc


def store_frame(frame: RfFrame, path) -> None:
    """Write ``frame`` as a ``.rf`` file (samples narrowed to float32)."""
    if not np.all(np.isfinite(frame.samples)):
        raise ValueError("refusing to store non-finite samples")
    data = frame_to_bytes(frame)
    Path(path).write_bytes(data)


def load_frame(path) -> RfFrame:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing file: {p}")
    return frame_from_bytes(p.read_bytes())


# -- frame utilities ---------------------------------------------------------

def block_mean(x: np.ndarray, factor: int, axis: int = 0) -> np.ndarray:
    """Average ``factor`` consecutive samples along ``axis``, dropping the tail."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    x = np.moveaxis(np.asarray(x), axis, 0)
    n = x.shape[0] // factor
    out = x[: n * factor].reshape((n, factor) + x.shape[1:]).mean(axis=1)
    return np.moveaxis(out, 0, axis)


def downsample_axial(frame: RfFrame, factor: int) -> RfFrame:
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if frame.shape[0] < factor:
        raise ValueError("axial length shorter than the downsampling factor")
    if factor == 1:
        return frame
    out = block_mean(frame.samples, factor, axis=0).astype(frame.samples.dtype)
    # A downsampled frame may fall under the sampling/size minimums; those
    # checks are for acquisitions, so build the result without them.
    return _unchecked(frame, out, fs_hz=frame.fs_hz / factor)


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if not std > 0:
        raise ValueError("zero variance: cannot standardize a constant frame")
    return (x - x.mean()) / std


def normalize_frame(frame: RfFrame) -> RfFrame:
    """Zero-mean, unit-std copy of ``frame`` (computed in float64)."""
    return _unchecked(frame, standardize(frame.samples))


def _unchecked(frame: RfFrame, samples: np.ndarray, **changes) -> RfFrame:
    out = object.__new__(RfFrame)
    samples = np.array(samples, copy=True)
    samples.setflags(write=False)
    vals = dict(samples=samples, fs_hz=frame.fs_hz, f0_hz=frame.f0_hz,
                frame_id=frame.frame_id)
    vals.update(changes)
    for k, v in vals.items():
        object.__setattr__(out, k, v)
    return out


def partition_windows(axial_len: int, lateral_len: int,
                      margin_axial: int = 0, margin_lateral: int = 0) -> WindowGrid:
    """Split the interior left after the margins into a 3x3 grid.

    Each window gets ``interior // 3`` samples per direction; the remainder
    goes to the last row/column of windows.
    """
    rows = axial_len - 2 * margin_axial
    cols = lateral_len - 2 * margin_lateral
    if margin_axial < 0 or margin_lateral < 0:
        raise ValueError("margins must be non-negative")
    if rows // 3 < MIN_WINDOW[0] or cols // 3 < MIN_WINDOW[1]:
        raise ValueError(
            f"interior too small: {rows}x{cols} cannot hold 3x3 windows of "
            f"at least {MIN_WINDOW[0]}x{MIN_WINDOW[1]}")
    r_sizes = _thirds(rows)
    c_sizes = _thirds(cols)
    r_starts = margin_axial + np.concatenate([[0], np.cumsum(r_sizes)[:-1]])
    c_starts = margin_lateral + np.concatenate([[0], np.cumsum(c_sizes)[:-1]])
    windows = tuple(
        (int(r0), int(c0), int(nr), int(nc))
        for r0, nr in zip(r_starts, r_sizes)
        for c0, nc in zip(c_starts, c_sizes)
    )
    return WindowGrid(windows)


def _thirds(n: int) -> list[int]:
    base = n // 3
    return [base, base, n - 2 * base]


# -- labels table ------------------------------------------------------------

def write_labels(records: Iterable[PairRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for r in records:
            w.writerow([r.pair_id, r.frame_a_ref, r.frame_b_ref,
                        f"{r.min_ncc:.6f}", f"{r.mean_abs_disp_samples:.6f}", r.label])


def read_labels(path) -> list[PairRecord]:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing labels file: {p}")
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LABEL_COLUMNS:
            raise FormatError(f"labels header must be {','.join(LABEL_COLUMNS)}")
        out = []
        for row in reader:
            try:
                out.append(PairRecord(
                    pair_id=row["pair_id"], frame_a_ref=row["frame_a"],
                    frame_b_ref=row["frame_b"], label=int(row["label"]),
                    min_ncc=float(row["min_ncc"]),
                    mean_abs_disp_samples=float(row["mean_abs_disp"])))
            except ValueError as exc:
                raise FormatError(f"bad labels row {row}: {exc}") from exc
    return out


def resolve(base: Path, refs: Sequence[str]) -> list[Path]:
    """Resolve frame references relative to ``base`` unless absolute."""
    return [Path(r) if Path(r).is_absolute() else Path(base) / r for r in refs]
