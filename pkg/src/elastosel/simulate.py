"""Synthetic RF frames from a point-scatterer convolution model.

Frame B of a pair is rendered from the same scatterers as frame A after a
known deformation, so the ground-truth displacement is analytic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .motion import DisplacementField
from .rf_core import RfFrame, store_frame

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
MANIFEST_COLUMNS = ("pair_id", "frame_a", "frame_b", "strain", "rho", "expected_label")

GOOD_STRAIN = (0.002, 0.02)
GOOD_RHO = (0.97, 1.0)
STATIC_STRAIN = (0.0, 0.0002)
DECORRELATED_RHO = (0.3, 0.75)


@dataclass(frozen=True)
class PulseSpec:
    f0_hz: float = 8.5e6
    fs_hz: float = 40e6
    fractional_bandwidth: float = 0.6
    lateral_sigma_lines: float = 1.0

    def __post_init__(self):
        if not self.fs_hz > 2 * self.f0_hz:
            raise ValueError("fs_hz must exceed twice f0_hz")
        if not 0 < self.fractional_bandwidth <= 1:
            raise ValueError("fractional_bandwidth must lie in (0, 1]")
        if self.lateral_sigma_lines <= 0:
            raise ValueError("lateral_sigma_lines must be positive")

    @property
    def sigma_samples(self) -> float:
        """Gaussian envelope width giving the -6 dB bandwidth ``fractional_bandwidth * f0``."""
        bw_hz = self.fractional_bandwidth * self.f0_hz
        return math.sqrt(2.0 * math.log(2.0)) / (math.pi * bw_hz) * self.fs_hz

    @property
    def cell_area(self) -> float:
        """Resolution cell, axial FWHM x lateral FWHM, in samples x lines."""
        return (FWHM_PER_SIGMA * self.sigma_samples) * (FWHM_PER_SIGMA * self.lateral_sigma_lines)


@dataclass(frozen=True)
class Inclusion:
    center_axial: float
    center_lateral: float
    radius: float
    strain_ratio: float = 0.5

    def __post_init__(self):
        if not 0 < self.strain_ratio <= 1:
            raise ValueError("strain_ratio must lie in (0, 1]")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class MotionSpec:
    axial_strain: float = 0.0
    lateral_shift_lines: float = 0.0
    decorrelation_rho: float = 1.0
    inclusion: Optional[Inclusion] = None

    def __post_init__(self):
        if not 0 <= self.decorrelation_rho <= 1:
            raise ValueError("decorrelation_rho must lie in [0, 1]")
        if not abs(self.axial_strain) < 0.1:
            raise ValueError("|axial_strain| must be below 0.1")


@dataclass(frozen=True, eq=False)
class ScattererField:
    """Point scatterers; ``positions[:, 0]`` axial samples, ``[:, 1]`` lateral lines.

    ``bounds`` is ``(z_lo, z_hi, x_lo, x_hi)``. It extends past the frame so
    that deformed frames stay filled with speckle at their edges.
    """

    positions: np.ndarray
    amplitudes: np.ndarray
    density_per_cell: float
    bounds: tuple[float, float, float, float]


def default_margins(axial_len: int, lateral_len: int, pulse: PulseSpec | None = None):
    pulse = pulse or PulseSpec()
    ax = math.ceil(4 * pulse.sigma_samples) + math.ceil(0.1 * axial_len)
    lat = math.ceil(4 * pulse.lateral_sigma_lines) + 4
    return ax, lat


def make_scatterers(axial_len: int, lateral_len: int, density: float = 10.0,
                    seed: int = 0, pulse: PulseSpec | None = None,
                    margins: tuple[int, int] | None = None) -> ScattererField:
    """Poisson number of uniformly placed scatterers with N(0, 1) amplitudes."""
    if axial_len <= 0 or lateral_len <= 0:
        raise ValueError("frame dimensions must be positive")
    if density <= 0:
        raise ValueError("density must be positive")
    pulse = pulse or PulseSpec()
    ma, ml = margins if margins is not None else default_margins(axial_len, lateral_len, pulse)
    bounds = (-float(ma), float(axial_len + ma), -float(ml), float(lateral_len + ml))
    area = (bounds[1] - bounds[0]) * (bounds[3] - bounds[2])
    rng = np.random.default_rng(seed)
    count = rng.poisson(density * area / pulse.cell_area)
    z = rng.uniform(bounds[0], bounds[1], count)
    x = rng.uniform(bounds[2], bounds[3], count)
    amps = rng.standard_normal(count)
    return ScattererField(np.column_stack([z, x]), amps, density, bounds)


def pulse_shape(t: np.ndarray, pulse: PulseSpec) -> np.ndarray:
    s = pulse.sigma_samples
    return np.exp(-t * t / (2 * s * s)) * np.cos(2 * np.pi * pulse.f0_hz * t / pulse.fs_hz)


def render_rf(field: ScattererField, pulse: PulseSpec, axial_len: int, lateral_len: int,
              frame_id: int = 0, band: int = 64) -> RfFrame:
    """Superpose one separable PSF per scatterer onto the sample grid.

    The PSF is ``amplitude * pulse(z - z_s) * exp(-(x - x_s)^2 / 2 sigma_lat^2)``,
    truncated at 4 sigma in both directions. Rows are filled in bands of
    ``band`` samples, each one a dense product of axial and lateral weights.
    """
    ka = int(math.ceil(4 * pulse.sigma_samples))
    kl = int(math.ceil(4 * pulse.lateral_sigma_lines))
    ta = np.arange(-ka, ka + 2)
    tl = np.arange(-kl, kl + 2)
    sl2 = 2 * pulse.lateral_sigma_lines ** 2
    out = np.zeros((axial_len, lateral_len))

    z_all = field.positions[:, 0]
    x_all = field.positions[:, 1]
    keep = ((z_all > -ka - 2) & (z_all < axial_len + ka + 2)
            & (x_all > -kl - 2) & (x_all < lateral_len + kl + 2))
    order = np.argsort(z_all[keep], kind="stable")
    z_all = z_all[keep][order]
    x_all = x_all[keep][order]
    a_all = field.amplitudes[keep][order]

    for r0 in range(0, axial_len, band):
        r1 = min(r0 + band, axial_len)
        lo, hi = np.searchsorted(z_all, [r0 - ka - 2, r1 + ka + 2])
        if hi <= lo:
            continue
        z, x, a = z_all[lo:hi], x_all[lo:hi], a_all[lo:hi]
        cols = np.arange(hi - lo)[:, None]

        zi = np.floor(z).astype(np.int64)[:, None] + ta[None, :]
        ok = (zi >= r0) & (zi < r1)
        P = np.zeros((hi - lo, r1 - r0))
        P[np.broadcast_to(cols, zi.shape)[ok], zi[ok] - r0] = pulse_shape(zi - z[:, None], pulse)[ok]

        xi = np.floor(x).astype(np.int64)[:, None] + tl[None, :]
        ok = (xi >= 0) & (xi < lateral_len)
        G = np.zeros((hi - lo, lateral_len))
        G[np.broadcast_to(cols, xi.shape)[ok], xi[ok]] = np.exp(-(xi - x[:, None]) ** 2 / sl2)[ok]

        out[r0:r1] = P.T @ (a[:, None] * G)
    return RfFrame(out, fs_hz=pulse.fs_hz, f0_hz=pulse.f0_hz, frame_id=frame_id)


def _inclusion_overlap(z: np.ndarray, x: np.ndarray, inc: Inclusion) -> np.ndarray:
    """Length of [0, z] inside the inclusion along the column through ``x``."""
    half = np.sqrt(np.clip(inc.radius ** 2 - (x - inc.center_lateral) ** 2, 0.0, None))
    top = inc.center_axial - half
    bottom = inc.center_axial + half
    return np.clip(np.minimum(z, bottom) - np.maximum(top, 0.0), 0.0, None)


def axial_displacement(z, x, motion: MotionSpec) -> np.ndarray:
    """Analytic fixed-top displacement toward the probe at depth ``z``.

    Inside an inclusion the local strain is ``axial_strain * strain_ratio``;
    the displacement integrates the local strain from the top so it stays
    continuous across the inclusion boundary.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    s = motion.axial_strain
    if motion.inclusion is None:
        return s * z
    inc = motion.inclusion
    return s * (z - (1.0 - inc.strain_ratio) * _inclusion_overlap(z, x, inc))


def apply_motion(field: ScattererField, motion: MotionSpec, seed: int = 0) -> ScattererField:
    z = field.positions[:, 0]
    x = field.positions[:, 1]
    z_new = z - axial_displacement(z, x, motion)
    x_new = x + motion.lateral_shift_lines
    rho = motion.decorrelation_rho
    amps = field.amplitudes
    if rho < 1.0:
        fresh = np.random.default_rng(seed).standard_normal(len(amps))
        amps = rho * amps + math.sqrt(1.0 - rho * rho) * fresh
    return ScattererField(np.column_stack([z_new, x_new]), amps.copy(),
                          field.density_per_cell, field.bounds)


def ground_truth(motion: MotionSpec, dims: tuple[int, int]) -> DisplacementField:
    n, nx = dims
    zz, xx = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(nx, dtype=np.float64),
                         indexing="ij")
    axial = axial_displacement(zz, xx, motion)
    lateral = np.full(dims, -float(motion.lateral_shift_lines))
    return DisplacementField(axial=axial, lateral=lateral, valid_mask=np.ones(dims, bool))


def expected_label(motion: MotionSpec, gt: DisplacementField) -> int:
    return int(motion.decorrelation_rho >= 0.95 and float(np.mean(np.abs(gt.axial))) > 0.5)


def synth_pair(pulse: PulseSpec, motion: MotionSpec, dims: tuple[int, int], seed: int,
               density: float = 10.0):
    """Return ``(frame_a, frame_b, ground_truth, expected_label)``."""
    n, nx = dims
    base = make_scatterers(n, nx, density, seed, pulse)
    moved = apply_motion(base, motion, seed + 1_000_003)
    a = render_rf(base, pulse, n, nx, frame_id=0)
    b = render_rf(moved, pulse, n, nx, frame_id=1)
    gt = ground_truth(motion, dims)
    return a, b, gt, expected_label(motion, gt)


def draw_motion(rng: np.random.Generator, good: bool) -> MotionSpec:
    """Motion parameters for one pair from the good or the bad regime.

    Bad pairs are split evenly between near-static pairs (too little
    displacement) and decorrelated pairs (out-of-plane motion). Decorrelated
    pairs get good-regime strain so rho alone separates them.
    """
    if good:
        return MotionSpec(axial_strain=rng.uniform(*GOOD_STRAIN),
                          decorrelation_rho=rng.uniform(*GOOD_RHO))
    if rng.uniform() < 0.5:
        return MotionSpec(axial_strain=rng.uniform(*STATIC_STRAIN),
                          decorrelation_rho=rng.uniform(*GOOD_RHO))
    return MotionSpec(axial_strain=rng.uniform(*GOOD_STRAIN),
                      decorrelation_rho=rng.uniform(*DECORRELATED_RHO))


def synth_dataset(count: int, good_fraction: float, dims: tuple[int, int],
                  pulse: PulseSpec | None, seed: int, out_dir, density: float = 10.0,
                  progress=None) -> list[dict]:
    """Write ``count`` frame pairs plus ``manifest.csv`` into ``out_dir``.

    Exactly ``round(count * good_fraction)`` pairs come from the good regime;
    which ones is a seeded permutation. Pair ``i`` uses seed ``seed + i``.
    """
    if count < 10:
        raise ValueError("count must be at least 10")
    if not 0 < good_fraction < 1:
        raise ValueError("good_fraction must lie in (0, 1)")
    pulse = pulse or PulseSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_good = int(round(count * good_fraction))
    is_good = np.zeros(count, bool)
    is_good[np.random.default_rng(seed).permutation(count)[:n_good]] = True

    rows = []
    for i in range(count):
        pair_seed = seed + i
        motion = draw_motion(np.random.default_rng([pair_seed, 1]), bool(is_good[i]))
        a, b, _, label = synth_pair(pulse, motion, dims, pair_seed, density)
        name_a, name_b = f"pair{i:05}_a.rf", f"pair{i:05}_b.rf"
        store_frame(a, out / name_a)
        store_frame(b, out / name_b)
        rows.append(dict(pair_id=f"pair{i:05}", frame_a=name_a, frame_b=name_b,
                         strain=f"{motion.axial_strain:.6f}",
                         rho=f"{motion.decorrelation_rho:.6f}", expected_label=label,
                         regime="good" if is_good[i] else "bad"))
        if progress is not None:
            progress(i, count)
    write_manifest(rows, out / "manifest.csv")
    return rows


def write_manifest(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in MANIFEST_COLUMNS])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(("pair_id", "frame_a", "frame_b")) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest lacks columns {sorted(missing)}")
        return list(reader)


def synth_sequence(pulse: PulseSpec, motions: Sequence[Optional[MotionSpec]],
                   dims: tuple[int, int], seed: int, density: float = 10.0) -> list[RfFrame]:
    """Frames sharing one scatterer field; ``motions[i] is None`` marks the reference.

    Every other frame is the reference field deformed by its own motion, so
    each (reference, i) pair has exactly the requested quality.
    """
    n, nx = dims
    base = make_scatterers(n, nx, density, seed, pulse)
    frames = []
    for i, m in enumerate(motions):
        f = base if m is None else apply_motion(base, m, seed + 7919 * (i + 1))
        frames.append(render_rf(f, pulse, n, nx, frame_id=i))
    return frames


def write_sequence(frames: Sequence[RfFrame], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out / f"frame{i:05}.rf"
        store_frame(f, p)
        paths.append(p)
    return paths
