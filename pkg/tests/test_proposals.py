import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlmr.proposals import (GridError, Interval, enumerate_contiguous_moments,
                            generate_segment_groups, moments_grid, temporal_iou)


class TestInterval:
    def test_rejects_degenerate(self):
        with pytest.raises(GridError):
            Interval(5, 5)
        with pytest.raises(GridError):
            Interval(-1, 3)

    def test_iou_partial_overlap(self):
        assert temporal_iou(Interval(0, 16), Interval(8, 24)) == pytest.approx(1 / 3)

    def test_iou_identical(self):
        assert temporal_iou(Interval(3, 9), Interval(3, 9)) == 1.0

    def test_iou_halfopen_adjacent_disjoint(self):
        assert temporal_iou(Interval(0, 8), Interval(8, 16)) == 0.0

    @given(st.integers(0, 50), st.integers(1, 50), st.integers(0, 50), st.integers(1, 50))
    @settings(max_examples=60, deadline=None)
    def test_iou_symmetric_and_bounded(self, s1, l1, s2, l2):
        a, b = Interval(s1, s1 + l1), Interval(s2, s2 + l2)
        assert temporal_iou(a, b) == temporal_iou(b, a)
        assert 0.0 <= temporal_iou(a, b) <= 1.0
        assert (temporal_iou(a, b) == 1.0) == (a == b)


class TestSegmentGroups:
    def test_240_frame_three_scale_grid(self):
        grid = generate_segment_groups(240, 8, [176, 208, 240])
        assert grid.group_count == 9
        assert grid.scales == 3
        assert grid.proposal_count == 27
        last = grid.groups[8]
        assert last.start == 64
        assert all(w.end == 240 for w in last.windows)  # all clamped to video end

    def test_exact_fit_single_group(self):
        grid = generate_segment_groups(8, 8, [8])
        assert grid.group_count == 1
        assert grid.groups[0].windows == (Interval(0, 8),)

    def test_clamping_keeps_grid_rectangular(self):
        grid = generate_segment_groups(16, 8, [8, 16])
        assert grid.group_count == 2
        assert grid.groups[0].windows == (Interval(0, 8), Interval(0, 16))
        assert grid.groups[1].windows == (Interval(8, 16), Interval(8, 16))

    def test_video_shorter_than_smallest_window(self):
        with pytest.raises(GridError, match="shorter than smallest window"):
            generate_segment_groups(100, 8, [176, 208, 240])

    def test_common_start_within_group(self):
        grid = generate_segment_groups(100, 4, [10, 20, 30])
        for group in grid.groups:
            assert all(w.start == group.start for w in group.windows)

    def test_scale_major_ordering(self):
        grid = generate_segment_groups(32, 8, [8, 16])
        rows = grid.intervals_scale_major()
        k = grid.group_count
        for l in range(grid.scales):
            for g in range(k):
                assert rows[grid.row_index(l, g)] == grid.groups[g].windows[l]

    @given(st.integers(8, 400), st.integers(1, 20),
           st.lists(st.integers(1, 300), min_size=1, max_size=4, unique=True))
    @settings(max_examples=80, deadline=None)
    def test_group_count_formula(self, video_len, stride, windows):
        windows = sorted(windows)
        if video_len < windows[0]:
            with pytest.raises(GridError):
                generate_segment_groups(video_len, stride, windows)
            return
        grid = generate_segment_groups(video_len, stride, windows)
        assert grid.group_count == (video_len - windows[0]) // stride + 1
        # brute force: starts eligible when the smallest window fits
        brute = [s for s in range(0, video_len, stride) if s + windows[0] <= video_len]
        assert [g.start for g in grid.groups] == brute
        for iv in grid.intervals_scale_major():
            assert 0 <= iv.start < iv.end <= video_len


class TestMoments:
    def test_six_segments_give_21_moments(self):
        assert len(enumerate_contiguous_moments(6)) == 21

    def test_single_segment(self):
        assert enumerate_contiguous_moments(1) == [Interval(0, 1)]

    def test_three_segments(self):
        moments = enumerate_contiguous_moments(3)
        assert len(moments) == 6
        assert moments == sorted(moments, key=lambda m: (m.start, m.end))

    def test_zero_segments_rejected(self):
        with pytest.raises(GridError):
            enumerate_contiguous_moments(0)

    @given(st.integers(1, 25))
    @settings(max_examples=25, deadline=None)
    def test_count_formula(self, n):
        assert len(enumerate_contiguous_moments(n)) == n * (n + 1) // 2

    def test_moments_grid_is_single_scale(self):
        grid = moments_grid(5)
        assert grid.scales == 1
        assert grid.group_count == 15
        assert grid.intervals_scale_major() == enumerate_contiguous_moments(5)


class TestDeduplication:
    def test_clamped_duplicates_removed(self):
        grid = generate_segment_groups(16, 8, [8, 16])
        distinct = grid.deduplicated_intervals()
        assert len(distinct) == 3  # [0,8), [0,16), [8,16)
        assert len(set(distinct)) == len(distinct)
