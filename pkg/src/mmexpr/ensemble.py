"""Vote-based fusion of per-frame predictions from independently trained models.

Members are prediction files, not live models. Per frame, the plurality label
wins; ties go to the tied label with the highest mean probability across
members, and an exact tie after that resolves to the lowest class index.
Fused probabilities are the member mean.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .data import NUM_CLASSES
from .errors import DataFormatError, ShapeError
from .fileio import atomic_write_bytes

PREDICTION_HEADER = ["frame", "pred"] + [f"prob_{c}" for c in range(NUM_CLASSES)]


@dataclass
class PredictionTrack:
    """Per-frame argmax labels and class probabilities for one video."""

    video_id: str
    labels: np.ndarray  # (n,) int64 in 0..7
    probs: np.ndarray   # (n, 8) float64, rows on the simplex

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        n = len(self.labels)
        if self.probs.shape != (n, NUM_CLASSES):
            raise ShapeError(f"probs shape {self.probs.shape} != ({n}, {NUM_CLASSES})")
        if n:
            if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
                raise ValueError("prediction label outside 0..7")
            if self.probs.min() < 0:
                raise ValueError("negative probability")
            sums = self.probs.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise ValueError("probability rows must sum to 1 within 1e-5")

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    @classmethod
    def from_probs(cls, video_id, probs) -> "PredictionTrack":
        """Model-produced track: the label is the probability argmax (lowest index wins ties)."""
        probs = np.asarray(probs, dtype=np.float64)
        return cls(video_id, probs.argmax(axis=1), probs)


def vote(tracks: list) -> PredictionTrack:
    """Fuse aligned member tracks by plurality with documented tie-breaking."""
    if len(tracks) < 2:
        raise ValueError(f"vote needs at least 2 member tracks, got {len(tracks)}")
    first = tracks[0]
    for t in tracks[1:]:
        if t.video_id != first.video_id:
            raise ValueError(f"video ids differ: {first.video_id!r} vs {t.video_id!r}")
        if t.n_frames != first.n_frames:
            raise ShapeError(f"video {first.video_id!r}: member frame counts differ: "
                             f"{first.n_frames} vs {t.n_frames}")
    all_labels = np.stack([t.labels for t in tracks])  # (members, n)
    stacked = np.stack([t.probs for t in tracks])      # (members, n, 8)
    # summing each member column in sorted order makes the mean (and therefore
    # every tie-break) bitwise invariant to member ordering
    mean_probs = np.sort(stacked, axis=0).sum(axis=0) / len(tracks)  # (n, 8)
    n = first.n_frames
    fused = np.empty(n, dtype=np.int64)
    for i in range(n):
        tally = np.bincount(all_labels[:, i], minlength=NUM_CLASSES)
        top = tally.max()
        tied = np.flatnonzero(tally == top)
        if len(tied) == 1:
            fused[i] = tied[0]
        else:
            # highest mean probability among tied labels; argmax takes the
            # lowest index on an exact tie
            fused[i] = tied[np.argmax(mean_probs[i, tied])]
    return PredictionTrack(first.video_id, fused, mean_probs)


# -- prediction CSV files -----------------------------------------------------------

def write_predictions(track: PredictionTrack, path: str) -> None:
    """CSV with 1-based frame index; probabilities keep 9 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PREDICTION_HEADER)
    for i in range(track.n_frames):
        row = [i + 1, int(track.labels[i])]
        row += [format(p, ".9g") for p in track.probs[i]]
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_predictions(path: str, video_id: str | None = None) -> PredictionTrack:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty prediction file") from None
        if [h.strip() for h in header] != PREDICTION_HEADER:
            raise DataFormatError(
                f"{path}: bad header {','.join(header)!r}, expected "
                f"{','.join(PREDICTION_HEADER)!r}")
        labels = []
        probs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTION_HEADER):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(PREDICTION_HEADER)} fields, "
                    f"got {len(row)}")
            try:
                frame = int(row[0])
                label = int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: malformed row") from None
            if frame != lineno - 1:
                raise DataFormatError(
                    f"{path}: line {lineno}: frame index {frame}, expected {lineno - 1}")
            labels.append(label)
            probs.append(values)
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    probs_arr = np.asarray(probs, dtype=np.float64) if probs else np.zeros((0, NUM_CLASSES))
    try:
        return PredictionTrack(video_id, np.asarray(labels, dtype=np.int64), probs_arr)
    except (ValueError, ShapeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
