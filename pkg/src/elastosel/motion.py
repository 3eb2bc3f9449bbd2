"""Block-matching displacement estimation, frame warping, NCC and strain.

Sign convention for every :class:`DisplacementField` in this package:
``a(z, x) ~= b(z - axial, x - lateral)``. Positive axial values mean the
content moved toward sample 0 (toward the probe) between ``a`` and ``b``, so
a fixed-top compression by strain ``s`` has ``axial(z) = s * z``.
"""

from __future__ import annotations

from dataclasses import dataclass
import re
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .rf_core import RfFrame


@dataclass(frozen=True)
class BlockMatchConfig:
    block_axial: int = 32
    block_lateral: int = 8
    search_axial: int = 24
    search_lateral: int = 3
    step_axial: int = 16
    step_lateral: int = 4

    def __post_init__(self):
        if self.block_axial < 8 or self.block_lateral < 2:
            raise ValueError("block must be at least 8x2")
        if self.search_axial < 1 or self.search_lateral < 1:
            raise ValueError("search ranges must be >= 1")
        if self.step_axial < 1 or self.step_lateral < 1:
            raise ValueError("grid steps must be >= 1")


@dataclass(frozen=True, eq=False)
class DisplacementField:
    axial: np.ndarray
    lateral: np.ndarray
    valid_mask: np.ndarray

    @property
    def shape(self):
        return self.axial.shape


@dataclass(frozen=True, eq=False)
class StrainImage:
    """Axial strain; row ``i`` sits at displacement row ``i + window_len // 2``."""

    values: np.ndarray
    window_len: int
    valid: np.ndarray | None = None


def ncc(w1, w2) -> float:
    """Zero-normalized cross correlation of two equally shaped windows."""
    a = np.asarray(w1, dtype=np.float64)
    b = np.asarray(w2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("ncc needs at least 2 samples")
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0:
        raise ValueError("zero variance window")
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0))


def _box_sums(x: np.ndarray, bz: int, bx: int) -> np.ndarray:
    """Sums over every full ``bz x bx`` window, indexed by its top-left corner."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=c[1:, 1:])
    return c[bz:, bx:] - c[:-bz, bx:] - c[bz:, :-bx] + c[:-bz, :-bx]


def _node_starts(n: int, block: int, search: int, step: int) -> np.ndarray:
    # Top-left corners where every centered lag in [-search, search] stays in
    # bounds for both the a-block and the b-block.
    lo = search // 2
    hi = n - block - (search - search // 2)
    if hi < lo:
        raise ValueError(
            f"frame length {n} too small for block {block} with search +-{search}")
    starts = list(range(lo, hi + 1, step))
    if starts[-1] != hi:
        starts.append(hi)
    return np.asarray(starts)


def _lag_order(search_axial: int, search_lateral: int):
    lags = [(m, l) for m in range(-search_axial, search_axial + 1)
            for l in range(-search_lateral, search_lateral + 1)]
    # smallest offsets first so that strict '>' keeps them on ties
    lags.sort(key=lambda ml: (ml[0] ** 2 + ml[1] ** 2, abs(ml[0]), ml))
    return lags


def _interp_matrix(centers: np.ndarray, n: int) -> np.ndarray:
    """Linear interpolation weights from node centers to 0..n-1, clamped outside."""
    w = np.zeros((n, len(centers)))
    z = np.arange(n, dtype=np.float64)
    if len(centers) == 1:
        w[:, 0] = 1.0
        return w
    idx = np.clip(np.searchsorted(centers, z, side="right") - 1, 0, len(centers) - 2)
    t = np.clip((z - centers[idx]) / (centers[idx + 1] - centers[idx]), 0.0, 1.0)
    w[np.arange(n), idx] = 1.0 - t
    w[np.arange(n), idx + 1] += t
    return w


def estimate_displacement(a: RfFrame, b: RfFrame,
                          cfg: BlockMatchConfig | None = None) -> DisplacementField:
    """NCC block matching on a regular grid, parabolic axial refinement.

    Node estimates are median filtered (3x3) and then bilinearly
    interpolated to every sample. ``valid_mask`` is False outside the span of
    node centers, where values are clamped extrapolations.

    Each candidate lag ``m`` compares the a-block shifted by ``-floor(m/2)``
    with the b-block shifted by ``ceil(m/2)``, i.e. both blocks sit
    symmetrically about the grid node. That keeps the correlation curve of
    identical frames exactly symmetric, so the subsample correction is zero
    when there is no motion.
    """
    cfg = cfg or BlockMatchConfig()
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    A = np.asarray(a.samples, dtype=np.float64)
    B = np.asarray(b.samples, dtype=np.float64)
    n, nx = A.shape
    bz, bx = cfg.block_axial, cfg.block_lateral
    sz, sx = cfg.search_axial, cfg.search_lateral
    if n < bz + sz or nx < bx + sx:
        raise ValueError(f"frames {A.shape} too small for one block with search range")
    rows = _node_starts(n, bz, sz, cfg.step_axial)
    cols = _node_starts(nx, bx, sx, cfg.step_lateral)
    N = float(bz * bx)

    sa = _box_sums(A, bz, bx)
    va = _box_sums(A * A, bz, bx) - sa * sa / N
    sb = _box_sums(B, bz, bx)
    vb = _box_sums(B * B, bz, bx) - sb * sb / N

    lags = _lag_order(sz, sx)
    lag_index = {ml: i for i, ml in enumerate(lags)}
    scores = np.empty((len(lags), len(rows), len(cols)))
    for i, (m, l) in enumerate(lags):
        # a-block top-left q, b-block top-left q + (m, l)
        qr = rows - (m // 2)
        qc = cols - (l // 2)
        z0, z1 = max(0, -m), min(n, n - m)
        x0, x1 = max(0, -l), min(nx, nx - l)
        prod = A[z0:z1, x0:x1] * B[z0 + m:z1 + m, x0 + l:x1 + l]
        sab = _box_sums(prod, bz, bx)[np.ix_(qr - z0, qc - x0)]
        sa_q = sa[np.ix_(qr, qc)]
        va_q = va[np.ix_(qr, qc)]
        sb_q = sb[np.ix_(qr + m, qc + l)]
        vb_q = vb[np.ix_(qr + m, qc + l)]
        den = np.sqrt(np.clip(va_q * vb_q, 0.0, None))
        num = sab - sa_q * sb_q / N
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(den > 0, num / den, 0.0)
        scores[i] = np.clip(c, -1.0, 1.0)

    # first maximum in lag order wins, i.e. ties go to the smaller offset
    best = np.argmax(scores, axis=0)
    lag_arr = np.asarray(lags)
    best_m = lag_arr[best, 0].astype(np.float64)
    best_l = lag_arr[best, 1].astype(np.float64)

    c0 = np.take_along_axis(scores, best[None], axis=0)[0]
    delta = np.zeros_like(c0)
    for (m, l), sel in _group_by_lag(best, lags):
        if abs(m) == sz:
            continue
        cm = scores[lag_index[(m - 1, l)]][sel]
        cp = scores[lag_index[(m + 1, l)]][sel]
        curv = cm - 2.0 * c0[sel] + cp
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(curv < 0, (cm - cp) / (2.0 * curv), 0.0)
        delta[sel] = np.clip(d, -0.5, 0.5)

    # 3x3 median on the node grid rejects isolated peak-hopping outliers
    node_ax = median_filter(-(best_m + delta), size=3, mode="nearest")
    node_lat = median_filter(-best_l, size=3, mode="nearest")

    zc = rows + (bz - 1) / 2.0
    xc = cols + (bx - 1) / 2.0
    wz = _interp_matrix(zc, n)
    wx = _interp_matrix(xc, nx)
    axial = wz @ node_ax @ wx.T
    lateral = wz @ node_lat @ wx.T

    zz = np.arange(n)
    xx = np.arange(nx)
    valid = ((zz >= zc[0]) & (zz <= zc[-1]))[:, None] & ((xx >= xc[0]) & (xx <= xc[-1]))[None, :]
    return DisplacementField(axial=axial, lateral=lateral, valid_mask=valid)


def _group_by_lag(best: np.ndarray, lags):
    for i in np.unique(best):
        yield lags[i], best == i


def warp_frame(b: RfFrame, disp: DisplacementField):
    """Resample ``b`` onto the grid of ``a`` using ``disp``.

    ``out(z, x) = b(z - axial, x - lateral)`` with bilinear interpolation.
    Returns ``(warped_frame, mask)``; samples whose source falls outside
    ``b`` are 0 and have ``mask`` False.
    """
    src = np.asarray(b.samples, dtype=np.float64)
    if disp.shape != src.shape:
        raise ValueError(f"dimension mismatch: frame {src.shape}, field {disp.shape}")
    n, nx = src.shape
    zz, xx = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(nx, dtype=np.float64), indexing="ij")
    sz = zz - disp.axial
    sx = xx - disp.lateral
    inside = (sz >= 0) & (sz <= n - 1) & (sx >= 0) & (sx <= nx - 1)
    sz = np.where(inside, sz, 0.0)
    sx = np.where(inside, sx, 0.0)
    z0 = np.minimum(np.floor(sz).astype(np.intp), n - 2 if n > 1 else 0)
    x0 = np.minimum(np.floor(sx).astype(np.intp), nx - 2 if nx > 1 else 0)
    tz = sz - z0
    tx = sx - x0
    z1 = np.minimum(z0 + 1, n - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    out = (src[z0, x0] * (1 - tz) * (1 - tx) + src[z1, x0] * tz * (1 - tx)
           + src[z0, x1] * (1 - tz) * tx + src[z1, x1] * tz * tx)
    out = np.where(inside, out, 0.0)
    return b.replace(samples=out), inside


def compute_strain(disp: DisplacementField, window_len: int = 63) -> StrainImage:
    """Least-squares slope of axial displacement over a sliding window."""
    n = disp.shape[0]
    if window_len < 3 or window_len % 2 == 0 or window_len > n / 4:
        raise ValueError(
            f"window_len must be odd, >= 3 and <= axial_len/4 ({n / 4:g}); got {window_len}")
    h = window_len // 2
    k = np.arange(-h, h + 1, dtype=np.float64)
    weights = k / np.sum(k * k)
    win = np.lib.stride_tricks.sliding_window_view(
        np.asarray(disp.axial, dtype=np.float64), window_len, axis=0)
    values = win @ weights
    valid = np.lib.stride_tricks.sliding_window_view(disp.valid_mask, window_len, axis=0).all(axis=-1)
    return StrainImage(values=values, window_len=window_len, valid=valid)


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM, min-max scaled (constant images map to 0)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape) if hi <= lo else (v - lo) / (hi - lo) * 255.0
    img = np.round(scaled).astype(np.uint8)
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise ValueError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    raster = data[pos + 1:pos + 1 + w * h]
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def write_strain_csv(values: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.9g")
