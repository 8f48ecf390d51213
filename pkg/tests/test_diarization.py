import json

import numpy as np
import pytest

from tsasr.diarization import (
    activity_matrix,
    activity_to_json,
    all_target_mask,
    binarize,
    corrupt_segments,
    group_by_recording,
    parse_rttm,
    stno_mask,
    stno_masks,
    write_rttm,
)
from tsasr.exceptions import EmptyInputError, RttmParseError, UnknownSpeakerError
from tsasr.models import DiarizationSegment, SpeakerActivity

RTTM = """\
SPEAKER rec1 1 0.00 2.00 <NA> <NA> A <NA> <NA>
SPEAKER rec1 1 1.00 2.00 <NA> <NA> B <NA> <NA>
;; comment
SPEAKER rec2 1 0.50 1.00 <NA> <NA> A <NA> <NA>
"""


@pytest.fixture
def segments():
    return [
        DiarizationSegment("A", 0.0, 2.0, "rec1"),
        DiarizationSegment("B", 1.0, 3.0, "rec1"),
    ]


class TestRttm:
    def test_parse(self):
        """Test SPEAKER lines are parsed and other lines skipped"""
        parsed = parse_rttm(RTTM)
        assert len(parsed) == 3
        assert parsed[1] == DiarizationSegment("B", 1.0, 3.0, "rec1")

    def test_group_by_recording(self):
        """Test segments are grouped per recording"""
        grouped = group_by_recording(parse_rttm(RTTM))
        assert sorted(grouped) == ["rec1", "rec2"]
        assert len(grouped["rec1"]) == 2

    def test_write_then_parse(self, segments):
        """Test written RTTM parses back to the same segments"""
        assert parse_rttm(write_rttm(segments)) == segments

    @pytest.mark.parametrize(
        "line",
        [
            "SPEAKER rec1 1 0.0 1.0",
            "SPEAKER rec1 1 x 1.0 <NA> <NA> A <NA> <NA>",
            "SPEAKER rec1 1 0.0 0.0 <NA> <NA> A <NA> <NA>",
            "SPEAKER rec1 1 -1.0 1.0 <NA> <NA> A <NA> <NA>",
        ],
    )
    def test_malformed_line(self, line):
        """Test malformed lines raise RttmParseError with the line number"""
        with pytest.raises(RttmParseError) as e:
            parse_rttm("\n" + line)
        assert e.value.line_number == 2


class TestActivityMatrix:
    def test_frame_center_rasterization(self, segments):
        """Test frames are active when their center lies inside a segment"""
        activity = activity_matrix(segments, frame_rate=1.0)
        assert activity.speaker_labels == ("A", "B")
        np.testing.assert_array_equal(activity.values, [[1, 1, 0], [0, 1, 1]])

    def test_fixed_speaker_order_adds_silent_speaker(self, segments):
        """Test a speakers list fixes the row order"""
        activity = activity_matrix(segments, 1.0, duration=4.0, speakers=["B", "C", "A"])
        np.testing.assert_array_equal(activity.values[1], [0, 0, 0, 0])
        np.testing.assert_array_equal(activity.values[2], [1, 1, 0, 0])

    def test_unknown_speaker(self, segments):
        """Test a segment speaker outside the fixed list is rejected"""
        with pytest.raises(UnknownSpeakerError):
            activity_matrix(segments, 1.0, speakers=["A"])

    def test_empty(self):
        """Test empty diarization raises EmptyInputError"""
        with pytest.raises(EmptyInputError):
            activity_matrix([], 25.0)

    def test_binarize(self):
        """Test soft activity is thresholded at 0.5"""
        soft = SpeakerActivity(np.array([[0.2, 0.5, 0.9]]), 25.0, ("A",))
        np.testing.assert_array_equal(binarize(soft).values, [[0, 1, 1]])

    def test_to_json(self, segments):
        """Test activity export carries labels, rate and rows"""
        data = json.loads(activity_to_json(activity_matrix(segments, 1.0)))
        assert data["speaker_labels"] == ["A", "B"]
        assert data["rows"][0] == [1.0, 1.0, 0.0]


class TestStnoMask:
    def test_identity_on_random_soft_activity(self):
        """Test every row sums to one for random soft activity"""
        rng = np.random.default_rng(0)
        for _ in range(10_000 // 50):
            speakers = int(rng.integers(1, 9))
            activity = SpeakerActivity(
                rng.uniform(size=(speakers, 50)), 25.0, tuple(str(i) for i in range(speakers))
            )
            for mask in stno_masks(activity):
                np.testing.assert_allclose(mask.values.sum(axis=1), 1.0, atol=1e-9)
                assert np.all(mask.values >= 0)

    def test_binary_activity_is_one_hot(self):
        """Test binary activity gives one-hot rows"""
        rng = np.random.default_rng(1)
        activity = SpeakerActivity(
            rng.integers(0, 2, size=(4, 200)).astype(float), 25.0, ("a", "b", "c", "d")
        )
        for mask in stno_masks(activity):
            assert set(np.unique(mask.values)) <= {0.0, 1.0}
            np.testing.assert_array_equal(mask.values.sum(axis=1), 1.0)

    def test_events(self, segments):
        """Test silence, target, non-target and overlap rows"""
        activity = activity_matrix(segments, 1.0, duration=4.0)
        mask = stno_mask(activity, 0)
        np.testing.assert_array_equal(
            mask.values, [[0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0], [1, 0, 0, 0]]
        )

    def test_single_speaker(self):
        """Test one speaker never produces non-target or overlap"""
        activity = SpeakerActivity(np.array([[0.3, 1.0, 0.0]]), 25.0, ("A",))
        mask = stno_mask(activity, 0)
        np.testing.assert_allclose(mask.values[:, 2:], 0.0, atol=1e-12)
        np.testing.assert_allclose(mask.values[:, 1], [0.3, 1.0, 0.0])

    def test_target_out_of_range(self, segments):
        """Test an invalid target index raises UnknownSpeakerError"""
        with pytest.raises(UnknownSpeakerError):
            stno_mask(activity_matrix(segments, 1.0), 2)

    def test_all_target_mask(self):
        """Test the all-target mask declares every frame target-only"""
        mask = all_target_mask(5)
        np.testing.assert_array_equal(mask.target_activity, np.ones(5))


class TestCorruptSegments:
    def test_deterministic(self, segments):
        """Test corruption is fixed by the seed"""
        assert corrupt_segments(segments, seed=3) == corrupt_segments(segments, seed=3)

    def test_jitter_bounded(self, segments):
        """Test boundaries move by at most the jitter"""
        corrupted = corrupt_segments(segments, jitter=0.3, deletion_rate=0.0, seed=5)
        assert len(corrupted) == len(segments)
        for before, after in zip(segments, corrupted):
            assert abs(before.start - after.start) <= 0.3 + 1e-12
            assert abs(before.end - after.end) <= 0.3 + 1e-12

    def test_deletion(self, segments):
        """Test deletion rate 1 removes every segment"""
        assert corrupt_segments(segments, deletion_rate=1.0) == []
