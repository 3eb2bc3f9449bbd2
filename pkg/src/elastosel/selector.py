"""Pick the best partner for a reference frame from its temporal neighbours."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import classifier
from .rf_core import RfFrame, load_frame

DEFAULT_WINDOW = 8


@dataclass(frozen=True)
class CandidateScore:
    candidate_index: int
    p_good: float
    distance: int

    def to_dict(self):
        return dict(index=self.candidate_index, p_good=self.p_good, distance=self.distance)


@dataclass(frozen=True)
class SelectionResult:
    best_index: int | None
    scores: list = field(default_factory=list)
    abstained: bool = True

    def to_json(self, reference: int, window: int) -> str:
        return json.dumps(dict(
            reference=reference,
            window=window,
            scores=[s.to_dict() for s in self.scores],
            best=self.best_index,
            abstained=self.abstained,
        ))


class FrameDirectory(Sequence):
    """Lazy sequence over ``frame{idx:05}.rf`` files, indexed from 0.

    The sequence length is one past the highest contiguous index found, so
    a directory holding frames 0..16 has length 17.
    """

    def __init__(self, path):
        self.path = Path(path)
        n = 0
        while (self.path / f"frame{n:05d}.rf").is_file():
            n += 1
        self._n = n

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if not 0 <= i < self._n:
            raise IndexError(i)
        return load_frame(self.path / f"frame{i:05d}.rf")


def score_candidates(model, frames: Sequence[RfFrame], reference_index: int,
                     window: int = DEFAULT_WINDOW) -> list[CandidateScore]:
    """Classify every neighbour of the reference within ``window`` frames.

    Indices that fall off either end of the sequence are skipped. Scores
    come back in ascending index order.
    """
    n = len(frames)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if not 0 <= reference_index < n:
        raise IndexError(f"reference index {reference_index} outside sequence of {n} frames")
    ref = frames[reference_index]
    lo = max(0, reference_index - window)
    hi = min(n - 1, reference_index + window)
    out = []
    for i in range(lo, hi + 1):
        if i == reference_index:
            continue
        pred = classifier.predict(model, ref, frames[i])
        out.append(CandidateScore(i, pred.p_good, abs(i - reference_index)))
    return out


def select_best(scores: Sequence[CandidateScore]) -> SelectionResult:
    """Highest ``p_good`` wins; ties go to the closer, then the lower, index.

    Abstains when the list is empty or nothing exceeds 0.5.
    """
    ordered = sorted(scores, key=lambda s: s.candidate_index)
    if not ordered:
        return SelectionResult(None, ordered, True)
    best = min(ordered, key=lambda s: (-s.p_good, s.distance, s.candidate_index))
    if best.p_good <= 0.5:
        return SelectionResult(None, ordered, True)
    return SelectionResult(best.candidate_index, ordered, False)
