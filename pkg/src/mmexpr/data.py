"""Frame-aligned dataset handling: labels, feature files, repair, segmentation.

Frames are 1-based everywhere (frame 1 is the first frame of a video). Label
values are 0..7 for the eight expression classes, -1 for frames without a
usable annotation. Feature files carry a presence bitmap instead of sentinel
rows; absent frames are repaired by copying the temporally nearest present
frame, ties resolving to the earlier one.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ShapeError
from .fileio import atomic_write_bytes, read_json

NUM_CLASSES = 8
INVALID_LABEL = -1

VISUAL = "visual"
AUDIO = "audio"

# name -> (dimension, modality) for the stock per-frame embedding families
DEFAULT_FEATURE_SETS = {
    "densenet": (342, VISUAL),
    "mae": (768, VISUAL),
    "ires100": (512, VISUAL),
    "fau": (512, VISUAL),
    "mobilenet": (512, VISUAL),
    "egemaps": (23, AUDIO),
    "compare": (130, AUDIO),
    "fbank": (80, AUDIO),
    "wav2vec": (1024, AUDIO),
    "ecapatdnn": (512, AUDIO),
    "vggish": (128, AUDIO),
    "hubert": (512, AUDIO),
}


@dataclass(frozen=True)
class FeatureSpec:
    dim: int
    modality: str


class FeatureRegistry:
    """Immutable map from feature-set name to its expected dimension and modality."""

    def __init__(self, extra: dict | None = None):
        entries = {name: FeatureSpec(dim, mod) for name, (dim, mod) in DEFAULT_FEATURE_SETS.items()}
        for name, spec in (extra or {}).items():
            if isinstance(spec, FeatureSpec):
                entries[name] = spec
            else:
                if spec["modality"] not in (VISUAL, AUDIO):
                    raise DataFormatError(f"feature set {name!r}: modality must be visual or audio")
                entries[name] = FeatureSpec(int(spec["dim"]), spec["modality"])
        self._entries = entries

    def __contains__(self, name):
        return name in self._entries

    def spec(self, name) -> FeatureSpec:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"unknown feature set {name!r}") from None

    def dim(self, name) -> int:
        return self.spec(name).dim

    def modality(self, name) -> str:
        return self.spec(name).modality

    def names(self):
        return tuple(self._entries)


@dataclass
class LabelTrack:
    """Per-frame class labels for one video; index 0 holds frame 1."""

    video_id: str
    labels: np.ndarray  # (n,) int64, values in {-1, 0..7}

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    def valid_mask(self) -> np.ndarray:
        return self.labels != INVALID_LABEL


@dataclass
class FeatureTrack:
    """One feature set's frame-aligned matrix, with pre-repair presence flags."""

    video_id: str
    feature_set: str
    matrix: np.ndarray   # (n, dim) float32
    present: np.ndarray  # (n,) bool, as stored in the file

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


# -- label CSV ------------------------------------------------------------------

def load_labels(path: str, video_id: str | None = None) -> LabelTrack:
    """Read a ``frame,label`` CSV into a dense track over frames 1..max(frame).

    Frames missing from the file come back as -1. Bad labels, non-integer
    fields and duplicate frames are rejected with their line number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty label file") from None
        if [h.strip() for h in header] != ["frame", "label"]:
            raise DataFormatError(f"{path}: expected header 'frame,label', got {','.join(header)!r}")
        rows: dict[int, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            try:
                frame = int(row[0])
                label = int(row[1])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-integer frame or label") from None
            if frame < 1:
                raise DataFormatError(f"{path}: line {lineno}: frame index {frame} < 1")
            if label != INVALID_LABEL and not 0 <= label < NUM_CLASSES:
                raise DataFormatError(
                    f"{path}: line {lineno}: label {label} outside {{-1, 0..{NUM_CLASSES - 1}}}")
            if frame in rows:
                raise DataFormatError(f"{path}: line {lineno}: duplicate frame index {frame}")
            rows[frame] = label
    if not rows:
        raise DataFormatError(f"{path}: no label rows")
    n = max(rows)
    labels = np.full(n, INVALID_LABEL, dtype=np.int64)
    for frame, label in rows.items():
        labels[frame - 1] = label
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    return LabelTrack(video_id=video_id, labels=labels)


def save_labels(track: LabelTrack, path: str) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "label"])
    for i, label in enumerate(track.labels, start=1):
        writer.writerow([i, int(label)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# -- binary feature files ----------------------------------------------------------

FEATURE_MAGIC = b"MMFT"
FEATURE_VERSION = 1


def feature_file_bytes(track: FeatureTrack) -> bytes:
    """Serialize a track: magic, version, set name, n, dim, presence bitmap, floats.

    Absent rows are written as zeros and ignored on read; presence lives in
    the bitmap (LSB-first, frame 1 = bit 0 of byte 0).
    """
    n, dim = track.matrix.shape
    if track.present.shape != (n,):
        raise ShapeError(f"presence shape {track.present.shape} != ({n},)")
    name = track.feature_set.encode("utf-8")
    bitmap = np.packbits(track.present.astype(np.uint8), bitorder="little").tobytes()
    matrix = np.where(track.present[:, None], track.matrix, 0.0).astype("<f4")
    parts = [
        FEATURE_MAGIC,
        struct.pack("<II", FEATURE_VERSION, len(name)),
        name,
        struct.pack("<II", n, dim),
        bitmap,
        matrix.tobytes(),
    ]
    return b"".join(parts)


def write_feature_file(track: FeatureTrack, path: str) -> None:
    atomic_write_bytes(path, feature_file_bytes(track))


def read_feature_file(path: str, video_id: str | None = None) -> FeatureTrack:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    try:
        version, name_len = struct.unpack_from("<II", raw, 4)
        if version != FEATURE_VERSION:
            raise DataFormatError(f"{path}: unsupported feature file version {version}")
        offset = 12
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        n, dim = struct.unpack_from("<II", raw, offset)
        offset += 8
        bitmap_len = (n + 7) // 8
        bitmap = np.frombuffer(raw, dtype=np.uint8, count=bitmap_len, offset=offset)
        offset += bitmap_len
        count = n * dim
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated feature file ({exc})") from exc
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    present = np.unpackbits(bitmap, bitorder="little", count=n).astype(bool)
    matrix = data.reshape(n, dim).copy()
    matrix[~present] = 0.0
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    return FeatureTrack(video_id=video_id, feature_set=name, matrix=matrix, present=present)


# -- repair -------------------------------------------------------------------------

def nearest_present_donors(present: np.ndarray) -> np.ndarray:
    """For each frame, the index of the nearest present frame (ties go earlier)."""
    present = np.asarray(present, dtype=bool)
    if not present.any():
        raise DataFormatError("cannot repair a track with zero present frames")
    idx = np.flatnonzero(present)
    pos = np.arange(len(present))
    right = np.searchsorted(idx, pos, side="left")
    left = right - 1
    left_idx = idx[np.clip(left, 0, len(idx) - 1)]
    right_idx = idx[np.clip(right, 0, len(idx) - 1)]
    left_dist = np.where(left >= 0, pos - left_idx, np.iinfo(np.int64).max)
    right_dist = np.where(right < len(idx), right_idx - pos, np.iinfo(np.int64).max)
    donors = np.where(left_dist <= right_dist, left_idx, right_idx)  # tie -> earlier
    donors[present] = pos[present]
    return donors


def impute_missing(track: FeatureTrack) -> FeatureTrack:
    """Fill absent rows from the temporally nearest present frame.

    Presence flags are kept as loaded so the repair remains auditable.
    Identity on already-complete tracks.
    """
    if track.present.all():
        return FeatureTrack(track.video_id, track.feature_set,
                            track.matrix.copy(), track.present.copy())
    donors = nearest_present_donors(track.present)
    return FeatureTrack(track.video_id, track.feature_set,
                        track.matrix[donors].copy(), track.present.copy())


def imputation_plan(present: np.ndarray) -> list[tuple[int, int]]:
    """(frame, donor_frame) pairs, 1-based, for every absent frame."""
    donors = nearest_present_donors(present)
    absent = np.flatnonzero(~np.asarray(present, dtype=bool))
    return [(int(i) + 1, int(donors[i]) + 1) for i in absent]


# -- assembly ---------------------------------------------------------------------

def assemble_inputs(tracks: list[FeatureTrack], visual_names, audio_names,
                    registry: FeatureRegistry) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-frame vectors into one visual and one audio matrix.

    Column order follows the given name order. All tracks must be repaired
    (every row finite), aligned in length, and registered with matching dims.
    """
    by_name = {}
    for t in tracks:
        by_name[t.feature_set] = t
    lengths = {t.feature_set: t.n_frames for t in tracks}
    if len(set(lengths.values())) > 1:
        raise DataFormatError(f"track lengths differ: {lengths}")

    def gather(names, modality):
        parts = []
        for name in names:
            if name not in registry:
                raise DataFormatError(f"unknown feature set {name!r}")
            if registry.modality(name) != modality:
                raise DataFormatError(f"feature set {name!r} is not {modality}")
            if name not in by_name:
                raise DataFormatError(f"no track loaded for feature set {name!r}")
            t = by_name[name]
            if t.dim != registry.dim(name):
                raise DataFormatError(
                    f"feature set {name!r}: dim {t.dim} != registry dim {registry.dim(name)}")
            if not np.isfinite(t.matrix).all():
                raise DataFormatError(f"feature set {name!r}: non-finite values after repair")
            parts.append(t.matrix)
        if not parts:
            raise DataFormatError(f"no {modality} feature sets selected")
        return np.concatenate(parts, axis=1)

    return gather(visual_names, VISUAL), gather(audio_names, AUDIO)


# -- segmentation --------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentSpan:
    """One window of frames, 1-based inclusive on both ends."""

    index: int
    start: int
    end: int

    @property
    def window(self) -> int:
        return self.end - self.start + 1


def segment_video(n_frames: int, seg_len: int, stride: int) -> list[SegmentSpan]:
    """Split frames 1..n into floor(n/stride)+1 candidate windows of seg_len.

    Candidates starting past the last frame are pruned and the final window
    is truncated at n, so the result covers every frame and is never empty.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    if seg_len < 1:
        raise ValueError(f"segment length must be >= 1, got {seg_len}")
    if not 1 <= stride <= seg_len:
        raise ValueError(
            f"stride must be in [1, segment length]; got stride={stride}, length={seg_len}")
    spans = []
    candidates = n_frames // stride + 1
    for i in range(1, candidates + 1):
        start = (i - 1) * stride + 1
        if start > n_frames:
            continue
        end = min(start + seg_len - 1, n_frames)
        spans.append(SegmentSpan(index=len(spans) + 1, start=start, end=end))
    return spans


@dataclass
class Segment:
    """Contiguous window of fused-input features with labels and validity."""

    video_id: str
    index: int
    start: int
    end: int
    features: np.ndarray  # (window, visual_dim + audio_dim) float32
    labels: np.ndarray    # (window,) int64
    valid: np.ndarray     # (window,) bool


@dataclass
class VideoData:
    """A fully assembled video: labels plus the concatenated modality matrices."""

    video_id: str
    labels: np.ndarray   # (n,) int64
    visual: np.ndarray   # (n, Dv) float32
    audio: np.ndarray    # (n, Da) float32

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.visual.shape[1] + self.audio.shape[1]

    def segments(self, seg_len: int, stride: int) -> list[Segment]:
        fused = np.concatenate([self.visual, self.audio], axis=1)
        out = []
        for span in segment_video(self.n_frames, seg_len, stride):
            sl = slice(span.start - 1, span.end)
            out.append(Segment(self.video_id, span.index, span.start, span.end,
                               fused[sl], self.labels[sl],
                               self.labels[sl] != INVALID_LABEL))
        return out


# -- manifest ---------------------------------------------------------------------

@dataclass
class ManifestVideo:
    video_id: str
    n_frames: int
    label_file: str
    features: dict  # feature-set name -> path


@dataclass
class Manifest:
    videos: list
    splits: dict  # split name -> list of video ids
    path: str = ""

    def video(self, video_id: str) -> ManifestVideo:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(f"video {video_id!r} not in manifest")

    def split_ids(self, split: str) -> list:
        if split not in self.splits:
            raise DataFormatError(f"manifest has no split {split!r}")
        return list(self.splits[split])


def load_manifest(path: str) -> Manifest:
    """Read the dataset manifest JSON, resolving file paths relative to it."""
    doc = read_json(path)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    if not isinstance(doc, dict) or "videos" not in doc:
        raise DataFormatError(f"{path}: manifest must be an object with a 'videos' list")
    videos = []
    seen = set()
    for i, entry in enumerate(doc["videos"]):
        try:
            vid = entry["id"]
            n = int(entry["n_frames"])
            label_file = resolve(entry["label_file"])
            feats = {name: resolve(p) for name, p in entry["features"].items()}
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"{path}: videos[{i}] missing field ({exc})") from exc
        if vid in seen:
            raise DataFormatError(f"{path}: duplicate video id {vid!r}")
        seen.add(vid)
        videos.append(ManifestVideo(vid, n, label_file, feats))
    splits = doc.get("splits", {})
    for name, ids in splits.items():
        for vid in ids:
            if vid not in seen:
                raise DataFormatError(f"{path}: split {name!r} references unknown video {vid!r}")
    return Manifest(videos=videos, splits=splits, path=path)


def load_video(entry: ManifestVideo, registry: FeatureRegistry,
               visual_names, audio_names) -> VideoData:
    """Load, validate, repair and assemble one video's tracks."""
    track = load_labels(entry.label_file, video_id=entry.video_id)
    if track.n_frames != entry.n_frames:
        raise DataFormatError(
            f"video {entry.video_id!r}: label file covers {track.n_frames} frames, "
            f"manifest says {entry.n_frames}")
    tracks = []
    for name in list(visual_names) + list(audio_names):
        if name not in entry.features:
            raise DataFormatError(f"video {entry.video_id!r}: no file for feature set {name!r}")
        ft = read_feature_file(entry.features[name], video_id=entry.video_id)
        if ft.feature_set != name:
            raise DataFormatError(
                f"video {entry.video_id!r}: file {entry.features[name]} holds feature set "
                f"{ft.feature_set!r}, expected {name!r}")
        if ft.n_frames != entry.n_frames:
            raise DataFormatError(
                f"video {entry.video_id!r}: feature set {name!r} has {ft.n_frames} frames, "
                f"manifest says {entry.n_frames}")
        if ft.dim != registry.dim(name):
            raise DataFormatError(
                f"video {entry.video_id!r}: feature set {name!r} dim {ft.dim} != "
                f"registry dim {registry.dim(name)}")
        tracks.append(impute_missing(ft))
    visual, audio = assemble_inputs(tracks, visual_names, audio_names, registry)
    return VideoData(entry.video_id, track.labels, visual, audio)
