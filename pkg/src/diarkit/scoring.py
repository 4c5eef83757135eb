"""Posterior binarization, segment extraction, and DER scoring.

Interval arithmetic inside the scorer runs on exact rationals so collar
exclusion and overlap handling are free of float drift; results are
reported as 64-bit floats.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np


class Segment(NamedTuple):
    speaker: str
    onset: float
    offset: float


@dataclass(frozen=True)
class DerReport:
    """DER and its components as fractions of scored reference speech time."""

    der: float
    missed: float
    false_alarm: float
    confusion: float
    scored_speech: float  # seconds, for time-weighted aggregation

    def as_dict(self) -> dict:
        return {
            "der": self.der,
            "missed": self.missed,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "scored_speech": self.scored_speech,
        }


def binarize(
    posteriors: np.ndarray, threshold: float = 0.5, median_window: int = 1
) -> np.ndarray:
    """Threshold posteriors (>= rule) into a binary activity matrix.

    ``median_window`` > 1 applies a per-speaker median filter with the
    given odd window.
    """
    z = np.asarray(posteriors, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("posteriors must be a T x S matrix")
    activity = (z >= threshold).astype(np.int8)
    if median_window > 1:
        if median_window % 2 == 0:
            raise ValueError("median_window must be odd")
        activity = _median_filter_columns(activity, median_window)
    return activity


def _median_filter_columns(activity: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    padded = np.pad(activity, ((half, half), (0, 0)), mode="edge")
    views = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)
    return np.median(views, axis=-1).astype(np.int8)


def activity_to_segments(
    activity: np.ndarray,
    frame_seconds: float = 0.04,
    speakers: Sequence[str] | None = None,
) -> list[Segment]:
    """Maximal runs of active frames per speaker; frame t spans [t*fs, (t+1)*fs)."""
    a = np.asarray(activity)
    if a.ndim != 2:
        raise ValueError("activity must be a T x S matrix")
    num_frames, num_speakers = a.shape
    if speakers is None:
        speakers = [f"spk{i}" for i in range(num_speakers)]
    elif len(speakers) != num_speakers:
        raise ValueError("need one speaker name per activity column")
    segments: list[Segment] = []
    for s, name in enumerate(speakers):
        column = np.concatenate([[0], a[:, s] != 0, [0]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(column))
        for onset_frame, offset_frame in zip(edges[::2], edges[1::2]):
            segments.append(
                Segment(name, onset_frame * frame_seconds, offset_frame * frame_seconds)
            )
    return segments


def segments_to_activity(
    segments: Sequence[Segment],
    num_frames: int,
    frame_seconds: float,
    speakers: Sequence[str],
) -> np.ndarray:
    """Rasterize segments back onto a frame grid (inverse of activity_to_segments)."""
    index = {name: i for i, name in enumerate(speakers)}
    activity = np.zeros((num_frames, len(speakers)), dtype=np.int8)
    for seg in segments:
        if seg.speaker not in index:
            raise ValueError(f"unknown speaker {seg.speaker!r}")
        start = int(round(seg.onset / frame_seconds))
        end = int(round(seg.offset / frame_seconds))
        activity[max(0, start) : min(num_frames, end), index[seg.speaker]] = 1
    return activity


def _merge_intervals(
    segments: Sequence[Segment],
) -> dict[str, list[tuple[Fraction, Fraction]]]:
    by_speaker: dict[str, list[tuple[Fraction, Fraction]]] = {}
    for seg in segments:
        onset, offset = Fraction(seg.onset), Fraction(seg.offset)
        if offset <= onset:
            raise ValueError(f"segment {seg} has non-positive duration")
        by_speaker.setdefault(seg.speaker, []).append((onset, offset))
    for intervals in by_speaker.values():
        intervals.sort()
        merged = [intervals[0]]
        for lo, hi in intervals[1:]:
            if lo <= merged[-1][1]:  # overlapping or touching
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        intervals[:] = merged
    return by_speaker


def _covers(intervals: list[tuple[Fraction, Fraction]], point: Fraction) -> bool:
    for lo, hi in intervals:
        if lo <= point < hi:
            return True
    return False


def compute_der(
    hyp: Sequence[Segment],
    ref: Sequence[Segment],
    collar: float = 0.25,
    score_overlap: bool = True,
) -> DerReport:
    """Diarization error rate with a collar around reference boundaries.

    Time within +/- collar of any reference segment boundary is excluded
    from scoring. Hypothesis speaker labels are arbitrary: the one-to-one
    mapping onto reference speakers minimizing confusion time is chosen
    exhaustively. Overlap regions demand all their speakers and, by
    default, are scored (``score_overlap=False`` excludes them).
    """
    collar_f = Fraction(collar)
    if collar_f < 0:
        raise ValueError("collar must be non-negative")
    ref_by_spk = _merge_intervals(ref)
    hyp_by_spk = _merge_intervals(hyp)

    exclusions: list[tuple[Fraction, Fraction]] = []
    for intervals in ref_by_spk.values():
        for lo, hi in intervals:
            exclusions.append((lo - collar_f, lo + collar_f))
            exclusions.append((hi - collar_f, hi + collar_f))

    points: set[Fraction] = set()
    for by_spk in (ref_by_spk, hyp_by_spk):
        for intervals in by_spk.values():
            for lo, hi in intervals:
                points.update((lo, hi))
    for lo, hi in exclusions:
        points.update((lo, hi))
    breaks = sorted(points)

    ref_speakers = sorted(ref_by_spk)
    hyp_speakers = sorted(hyp_by_spk)

    # per elementary interval: (length, active ref speakers, active hyp speakers)
    cells: list[tuple[Fraction, frozenset[str], frozenset[str]]] = []
    for lo, hi in zip(breaks, breaks[1:]):
        if hi <= lo:
            continue
        mid = (lo + hi) / 2
        if any(zlo <= mid < zhi for zlo, zhi in exclusions if zhi > zlo):
            continue
        active_ref = frozenset(
            s for s in ref_speakers if _covers(ref_by_spk[s], mid)
        )
        if not score_overlap and len(active_ref) > 1:
            continue
        active_hyp = frozenset(
            s for s in hyp_speakers if _covers(hyp_by_spk[s], mid)
        )
        if active_ref or active_hyp:
            cells.append((hi - lo, active_ref, active_hyp))

    scored_speech = sum(
        (length * len(active_ref) for length, active_ref, _ in cells),
        start=Fraction(0),
    )
    if scored_speech == 0:
        raise ValueError("no scored reference speech: DER denominator is undefined")

    missed = Fraction(0)
    false_alarm = Fraction(0)
    for length, active_ref, active_hyp in cells:
        n_ref, n_hyp = len(active_ref), len(active_hyp)
        missed += length * max(0, n_ref - n_hyp)
        false_alarm += length * max(0, n_hyp - n_ref)

    confusion = None
    for mapping in _candidate_mappings(hyp_speakers, ref_speakers):
        total = Fraction(0)
        for length, active_ref, active_hyp in cells:
            matched = sum(1 for h in active_hyp if mapping.get(h) in active_ref)
            total += length * (min(len(active_ref), len(active_hyp)) - matched)
        if confusion is None or total < confusion:
            confusion = total
    if confusion is None:  # no hypothesis speakers at all
        confusion = Fraction(0)

    return DerReport(
        der=float((missed + false_alarm + confusion) / scored_speech),
        missed=float(missed / scored_speech),
        false_alarm=float(false_alarm / scored_speech),
        confusion=float(confusion / scored_speech),
        scored_speech=float(scored_speech),
    )


def _candidate_mappings(
    hyp_speakers: list[str], ref_speakers: list[str]
) -> list[dict[str, str]]:
    k = min(len(hyp_speakers), len(ref_speakers))
    if k == 0:
        return [{}]
    mappings = []
    for hyp_subset in itertools.permutations(hyp_speakers, k):
        for ref_subset in itertools.combinations(ref_speakers, k):
            mappings.append(dict(zip(hyp_subset, ref_subset)))
    return mappings


def aggregate_reports(reports: Sequence[DerReport]) -> DerReport:
    """Time-weighted aggregate over per-recording reports."""
    if not reports:
        raise ValueError("nothing to aggregate")
    total = sum(r.scored_speech for r in reports)
    if total == 0:
        raise ValueError("aggregate has no scored reference speech")
    missed = sum(r.missed * r.scored_speech for r in reports) / total
    fa = sum(r.false_alarm * r.scored_speech for r in reports) / total
    conf = sum(r.confusion * r.scored_speech for r in reports) / total
    return DerReport(
        der=missed + fa + conf,
        missed=missed,
        false_alarm=fa,
        confusion=conf,
        scored_speech=total,
    )
