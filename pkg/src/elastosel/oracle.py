"""Reference labeling of frame pairs from motion-compensated windowed NCC.

A pair is suitable (label 1) when, after estimating displacement and warping
frame B back onto frame A, every one of nine windows still correlates above
the NCC threshold and the pair actually moved by more than the displacement
threshold.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .motion import BlockMatchConfig, estimate_displacement, ncc, warp_frame
from .rf_core import PairRecord, RfFrame, load_frame, partition_windows, write_labels
from .simulate import read_manifest

logger = logging.getLogger(__name__)

NCC_THRESHOLD = 0.9
DISP_THRESHOLD = 0.5


@dataclass(frozen=True)
class NccReport:
    window_nccs: tuple[float, ...]
    min_ncc: float
    mean_abs_disp_samples: float
    decision: int
    degenerate_windows: tuple[int, ...] = field(default_factory=tuple)
    margins: tuple[int, int] = (0, 0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def decide(min_ncc: float, mean_abs_disp_samples: float,
           ncc_threshold: float = NCC_THRESHOLD, disp_threshold: float = DISP_THRESHOLD) -> int:
    """1 iff both thresholds are strictly exceeded."""
    return int(min_ncc > ncc_threshold and mean_abs_disp_samples > disp_threshold)


def _valid_margins(mask: np.ndarray, start: tuple[int, int]) -> tuple[int, int]:
    """Grow symmetric margins from ``start`` until the interior is all True.

    Each step widens whichever direction has the larger invalid fraction on
    its outermost interior lines.
    """
    n, nx = mask.shape
    ma, ml = start
    while 2 * ma < n and 2 * ml < nx:
        inner = ~mask[ma:n - ma, ml:nx - ml]
        if not inner.any():
            return ma, ml
        row_bad = max(inner[0].mean(), inner[-1].mean())
        col_bad = max(inner[:, 0].mean(), inner[:, -1].mean())
        if row_bad == 0 and col_bad == 0:
            break
        ma += int(row_bad >= col_bad)
        ml += int(col_bad >= row_bad)
    raise ValueError("no fully valid interior region for windowing")


def evaluate_pair(a: RfFrame, b: RfFrame, match_cfg: BlockMatchConfig | None = None,
                  ncc_threshold: float = NCC_THRESHOLD,
                  disp_threshold: float = DISP_THRESHOLD) -> NccReport:
    cfg = match_cfg or BlockMatchConfig()
    disp = estimate_displacement(a, b, cfg)
    warped, warp_mask = warp_frame(b, disp)
    valid = disp.valid_mask & warp_mask
    ma, ml = _valid_margins(valid, (cfg.block_axial // 2, cfg.block_lateral // 2))
    grid = partition_windows(a.shape[0], a.shape[1], ma, ml)

    A = np.asarray(a.samples, dtype=np.float64)
    W = warped.samples
    nccs = []
    degenerate = []
    for i, (rs, cs) in enumerate(grid.slices()):
        try:
            nccs.append(ncc(A[rs, cs], W[rs, cs]))
        except ValueError:
            # a constant window scores 0 so the pair is rejected, not the run
            nccs.append(0.0)
            degenerate.append(i)
    mean_abs = float(np.mean(np.abs(disp.axial[disp.valid_mask])))
    min_ncc = min(nccs)
    return NccReport(
        window_nccs=tuple(nccs), min_ncc=min_ncc, mean_abs_disp_samples=mean_abs,
        decision=decide(min_ncc, mean_abs, ncc_threshold, disp_threshold),
        degenerate_windows=tuple(degenerate), margins=(ma, ml))


def label_dataset(manifest, match_cfg: BlockMatchConfig | None = None, out=None,
                  ncc_threshold: float = NCC_THRESHOLD, disp_threshold: float = DISP_THRESHOLD,
                  report_dir=None, progress=None):
    """Label every manifest row; returns ``(records, skipped)``.

    ``skipped`` lists ``(pair_id, reason)`` for rows whose frames could not
    be loaded. Records keep manifest order. ``progress`` is called as
    ``progress(index, total, pair_id, report_or_None, seconds)``.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FormatError(f"missing manifest: {manifest}")
    try:
        rows = read_manifest(manifest)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    base = manifest.parent
    if report_dir is not None:
        Path(report_dir).mkdir(parents=True, exist_ok=True)

    records, skipped = [], []
    for i, row in enumerate(rows):
        t0 = time.perf_counter()
        pid = row["pair_id"]
        try:
            a = load_frame(base / row["frame_a"])
            b = load_frame(base / row["frame_b"])
        except FormatError as exc:
            skipped.append((pid, str(exc)))
            logger.warning("skipping %s: %s", pid, exc)
            if progress is not None:
                progress(i, len(rows), pid, None, time.perf_counter() - t0)
            continue
        rep = evaluate_pair(a, b, match_cfg, ncc_threshold, disp_threshold)
        records.append(PairRecord(
            pair_id=pid, frame_a_ref=row["frame_a"], frame_b_ref=row["frame_b"],
            label=rep.decision, min_ncc=rep.min_ncc,
            mean_abs_disp_samples=rep.mean_abs_disp_samples))
        if report_dir is not None:
            (Path(report_dir) / f"{pid}.json").write_text(rep.to_json() + "\n")
        if progress is not None:
            progress(i, len(rows), pid, rep, time.perf_counter() - t0)
    if out is not None:
        write_labels(records, out)
    return records, skipped
