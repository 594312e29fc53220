"""Temporal interval arithmetic and multi-scale proposal grids.

A video of T frames is covered by K segment groups: group k starts at
k * stride, and every group carries the same L window sizes (clamped at the
video end so the grid stays rectangular). Segment-unit datasets instead
enumerate every contiguous span, one span per group with L = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Interval:
    """Half-open temporal span [start, end) in frame or segment units."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise GridError(f"invalid interval [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def temporal_iou(a: Interval, b: Interval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


@dataclass(frozen=True)
class SegmentGroup:
    start: int
    windows: tuple[Interval, ...]


@dataclass(frozen=True)
class ProposalGrid:
    groups: tuple[SegmentGroup, ...]
    scales: int
    video_len: int

    @property
    def group_count(self) -> int:
        return len(self.groups)

    @property
    def proposal_count(self) -> int:
        return self.group_count * self.scales

    def intervals_scale_major(self) -> list[Interval]:
        """All K*L intervals, ordered scale-major: row l*K + k is the l-th
        scale of group k."""
        return [group.windows[l] for l in range(self.scales) for group in self.groups]

    def row_index(self, scale: int, group: int) -> int:
        return scale * self.group_count + group

    def group_row_indices(self, group: int) -> list[int]:
        return [self.row_index(l, group) for l in range(self.scales)]

    def row_matrix(self) -> np.ndarray:
        """(K, L) matrix of scale-major row indices, row k = group k."""
        k = self.group_count
        return np.arange(k)[:, None] + k * np.arange(self.scales)[None, :]

    def deduplicated_intervals(self) -> list[Interval]:
        seen = []
        for iv in self.intervals_scale_major():
            if iv not in seen:
                seen.append(iv)
        return seen


def generate_segment_groups(video_len: int, stride: int, window_sizes) -> ProposalGrid:
    """Windowed grid: group starts at k*stride for as long as the smallest
    window still fits; longer windows are clamped at the video end rather
    than dropped, keeping L constant per group."""
    window_sizes = [int(w) for w in window_sizes]
    if not window_sizes or sorted(window_sizes) != window_sizes or window_sizes[0] < 1:
        raise GridError(f"window sizes must be ascending positive, got {window_sizes}")
    if stride < 1:
        raise GridError(f"stride must be >= 1, got {stride}")
    if video_len < window_sizes[0]:
        raise GridError(
            f"video shorter than smallest window ({video_len} < {window_sizes[0]})")

    groups = []
    start = 0
    while start + window_sizes[0] <= video_len:
        windows = tuple(Interval(start, min(start + w, video_len)) for w in window_sizes)
        groups.append(SegmentGroup(start=start, windows=windows))
        start += stride
    return ProposalGrid(groups=tuple(groups), scales=len(window_sizes), video_len=video_len)


def enumerate_contiguous_moments(segment_count: int) -> list[Interval]:
    """Every contiguous span [i, j) with 0 <= i < j <= segment_count,
    ordered by (start, end); there are n(n+1)/2 of them."""
    if segment_count < 1:
        raise GridError(f"segment count must be >= 1, got {segment_count}")
    return [Interval(i, j)
            for i in range(segment_count)
            for j in range(i + 1, segment_count + 1)]


def moments_grid(segment_count: int) -> ProposalGrid:
    """Segment-unit grid: each enumerated moment is its own group (L = 1),
    which makes surrogate selection the identity."""
    moments = enumerate_contiguous_moments(segment_count)
    groups = tuple(SegmentGroup(start=m.start, windows=(m,)) for m in moments)
    return ProposalGrid(groups=groups, scales=1, video_len=segment_count)
