"""Ensembling: vote semantics, tie-breaking, and prediction file round-trips."""

import itertools

import numpy as np
import pytest

from mmexpr.ensemble import PredictionTrack, read_predictions, vote, write_predictions
from mmexpr.errors import DataFormatError, ShapeError

from tests import _reference as ref


def prob_row(label, weight=0.65):
    row = np.full(8, (1.0 - weight) / 7)
    row[label] = weight
    return row


def track_from_labels(labels, video_id="v", weight=0.65):
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.stack([prob_row(l, weight) for l in labels])
    return PredictionTrack(video_id, labels, probs)


class TestVote:
    def test_strict_majority_wins(self):
        members = [track_from_labels([2]), track_from_labels([2]), track_from_labels([5])]
        assert vote(members).labels.tolist() == [2]

    def test_three_way_tie_mean_probability_decides(self):
        # all labels distinct; member probabilities make class 2 the strongest on average
        members = [track_from_labels([1], weight=0.5),
                   track_from_labels([2], weight=0.9),
                   track_from_labels([3], weight=0.5)]
        fused = vote(members)
        assert fused.labels.tolist() == [2]
        flat = ref.brute_force_vote([1, 2, 3], [m.probs[0] for m in members])
        assert fused.labels[0] == flat

    def test_two_way_tie_mean_probability_decides(self):
        members = [track_from_labels([0], weight=0.5), track_from_labels([0], weight=0.5),
                   track_from_labels([1], weight=0.9), track_from_labels([1], weight=0.9)]
        fused = vote(members)
        assert fused.labels.tolist() == [1]

    def test_exact_tie_resolves_to_lowest_index(self):
        members = [track_from_labels([3], weight=0.6), track_from_labels([5], weight=0.6)]
        assert vote(members).labels.tolist() == [3]

    def test_unanimous_duplicates_reproduce_member(self):
        base = track_from_labels([0, 3, 7, 1])
        fused = vote([base, base, base])
        assert fused.labels.tolist() == base.labels.tolist()
        np.testing.assert_allclose(fused.probs, base.probs)

    def test_member_order_is_irrelevant(self):
        rng = np.random.default_rng(0)
        members = [track_from_labels(rng.integers(0, 8, 20)) for _ in range(3)]
        fused = vote(members)
        for perm in itertools.permutations(members):
            again = vote(list(perm))
            assert again.labels.tolist() == fused.labels.tolist()

    def test_extra_copy_of_majority_never_flips(self):
        rng = np.random.default_rng(1)
        members = [track_from_labels(rng.integers(0, 8, 30)) for _ in range(3)]
        fused = vote(members)
        majority_member = track_from_labels(fused.labels)
        extended = vote(members + [majority_member])
        assert extended.labels.tolist() == fused.labels.tolist()

    def test_fused_probs_are_member_mean(self):
        members = [track_from_labels([1, 2]), track_from_labels([1, 3])]
        fused = vote(members)
        np.testing.assert_allclose(
            fused.probs, (members[0].probs + members[1].probs) / 2)

    def test_exhaustive_small_cases_match_brute_force(self):
        rng = np.random.default_rng(2)
        for k in (2, 3, 4):
            for classes in (2, 3):
                for labels in itertools.product(range(classes), repeat=k):
                    probs = rng.dirichlet(np.ones(8), size=k)
                    members = [PredictionTrack(f"v", np.array([l]), probs[m:m + 1])
                               for m, l in enumerate(labels)]
                    fused = vote(members)
                    want = ref.brute_force_vote(labels, probs)
                    assert fused.labels[0] == want, (labels, probs)

    def test_random_eight_class_cases_match_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            k = int(rng.integers(2, 5))
            labels = rng.integers(0, 8, k)
            probs = rng.dirichlet(np.ones(8), size=k)
            members = [PredictionTrack("v", labels[m:m + 1], probs[m:m + 1])
                       for m in range(k)]
            assert vote(members).labels[0] == ref.brute_force_vote(labels, probs)

    def test_fewer_than_two_members_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            vote([track_from_labels([0])])

    def test_frame_count_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="frame counts differ"):
            vote([track_from_labels([0, 1]), track_from_labels([0])])

    def test_video_id_mismatch_rejected(self):
        with pytest.raises(ValueError, match="video ids differ"):
            vote([track_from_labels([0], video_id="a"), track_from_labels([0], video_id="b")])


class TestPredictionTrackInvariants:
    def test_probs_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            PredictionTrack("v", np.array([0]), np.full((1, 8), 0.2))

    def test_negative_probability_rejected(self):
        row = prob_row(0)
        row[1] = -row[1]
        row[0] += 2 * row[1]
        with pytest.raises(ValueError, match="negative"):
            PredictionTrack("v", np.array([0]), row[None, :] / row.sum())

    def test_from_probs_argmax_consistent(self):
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(8), size=10)
        track = PredictionTrack.from_probs("v", probs)
        np.testing.assert_array_equal(track.labels, probs.argmax(axis=1))


class TestPredictionFiles:
    def test_roundtrip_within_serialization_precision(self, tmp_path):
        rng = np.random.default_rng(5)
        probs = rng.dirichlet(np.ones(8), size=25)
        track = PredictionTrack.from_probs("clip", probs)
        path = tmp_path / "clip.csv"
        write_predictions(track, str(path))
        loaded = read_predictions(str(path))
        assert loaded.video_id == "clip"
        np.testing.assert_array_equal(loaded.labels, track.labels)
        np.testing.assert_allclose(loaded.probs, track.probs, rtol=1e-8)

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("frame,label,p0\n1,0,1.0\n")
        with pytest.raises(DataFormatError, match="header"):
            read_predictions(str(path))

    def test_empty_track_roundtrip(self, tmp_path):
        track = PredictionTrack("empty", np.zeros(0, np.int64), np.zeros((0, 8)))
        path = tmp_path / "empty.csv"
        write_predictions(track, str(path))
        assert path.read_text().strip() == "frame,pred," + ",".join(f"prob_{c}" for c in range(8))
        assert read_predictions(str(path)).n_frames == 0

    def test_malformed_row_names_line(self, tmp_path):
        track = track_from_labels([0, 1, 2], video_id="v")
        path = tmp_path / "v.csv"
        write_predictions(track, str(path))
        lines = path.read_text().splitlines()
        lines[2] = lines[2].replace(",", ";", 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="line 3"):
            read_predictions(str(path))

    def test_frame_indices_must_be_dense(self, tmp_path):
        track = track_from_labels([0, 1], video_id="v")
        path = tmp_path / "v.csv"
        write_predictions(track, str(path))
        lines = path.read_text().splitlines()
        lines[2] = lines[2].replace("2,", "9,", 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="line 3"):
            read_predictions(str(path))
