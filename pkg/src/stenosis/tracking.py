"""IoU tracking of the dark segment and keyframe selection.

The track follows the darkest segment from the first frame. A frame whose
segment overlaps the last confirmed segment with IoU >= ``min_iou`` confirms
the track; anything else is a miss. More than ``max_missed_frames``
consecutive misses lose the track, and the keyframe is the first frame of
that final miss run, i.e. the frame where the dark region moved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable

from .core import Frame, PipelineConfig, PipelineError
from .segmentation import NoDarkRegion, SegmentMask, mask_iou, threshold_segment

log = logging.getLogger(__name__)

Segmenter = Callable[[Frame, PipelineConfig], SegmentMask]


class TrackingError(PipelineError):
    module = "tracking"
    exit_code = 3


class StateError(TrackingError):
    pass


class InitError(TrackingError):
    pass


class NoKeyframe(TrackingError):
    pass


class Status(str, Enum):
    ACTIVE = "Active"
    LOST = "Lost"


class Reason(str, Enum):
    IOU_BREAK = "IoUBreak"
    SEGMENTATION_LOSS = "SegmentationLoss"


@dataclass(frozen=True)
class TrackState:
    last_confirmed: SegmentMask
    missed_count: int = 0
    history: tuple[tuple[int, float], ...] = ()
    status: Status = Status.ACTIVE
    # Onset of the current miss run, if any.
    miss_start: int | None = None
    miss_reason: Reason | None = None

    @classmethod
    def start(cls, first: SegmentMask) -> "TrackState":
        return cls(last_confirmed=first, history=((first.frame_index, 1.0),))

    @property
    def last_index(self) -> int:
        return self.history[-1][0]


@dataclass(frozen=True)
class KeyframeDecision:
    keyframe_index: int
    first_miss_index: int
    reason: Reason

    def __post_init__(self):
        if self.keyframe_index != self.first_miss_index:
            raise ValueError("the keyframe is the first frame of the miss run")
        if self.first_miss_index <= 0:
            raise ValueError("the first frame cannot be a miss")


@dataclass(frozen=True)
class TraceRow:
    frame_index: int
    iou: float
    missed_count: int
    status: Status

    def line(self) -> str:
        return f"{self.frame_index} {self.iou:.6f} {self.missed_count} {self.status.value}"


def track_step(state: TrackState, current: SegmentMask | NoDarkRegion, cfg: PipelineConfig) -> TrackState:
    if state.status is Status.LOST:
        raise StateError("cannot step a lost track", frame_index=state.last_index)
    if isinstance(current, SegmentMask):
        index = current.frame_index
        iou = mask_iou(state.last_confirmed, current)
    elif isinstance(current, NoDarkRegion):
        if current.frame_index is None:
            raise StateError("segmentation failure without a frame index")
        index = current.frame_index
        iou = 0.0
    else:
        raise TypeError(f"expected SegmentMask or NoDarkRegion, got {type(current).__name__}")
    if index <= state.last_index:
        raise StateError(f"frame {index} does not follow frame {state.last_index}", frame_index=index)

    history = state.history + ((index, iou),)
    if isinstance(current, SegmentMask) and iou >= cfg.min_iou:
        return TrackState(last_confirmed=current, history=history)

    reason = Reason.IOU_BREAK if isinstance(current, SegmentMask) else Reason.SEGMENTATION_LOSS
    missed = state.missed_count + 1
    return replace(
        state,
        missed_count=missed,
        history=history,
        status=Status.LOST if missed > cfg.max_missed_frames else Status.ACTIVE,
        miss_start=state.miss_start if state.missed_count else index,
        miss_reason=state.miss_reason if state.missed_count else reason,
    )


def _segment(frame: Frame, cfg: PipelineConfig, segmenter: Segmenter) -> SegmentMask | NoDarkRegion:
    try:
        return segmenter(frame, cfg)
    except NoDarkRegion as exc:
        if exc.frame_index is None:
            exc.frame_index = frame.index
        return exc


def track_sequence(
    frames: Iterable[Frame],
    cfg: PipelineConfig,
    segmenter: Segmenter = threshold_segment,
) -> tuple[TrackState, list[TraceRow]]:
    """Run the tracker until the track is lost or the frames run out."""
    it = iter(frames)
    first = next(it, None)
    if first is None:
        raise InitError("empty sequence")
    seg = _segment(first, cfg, segmenter)
    if isinstance(seg, NoDarkRegion):
        raise InitError(f"first frame has no trackable dark region: {seg}", frame_index=first.index)
    state = TrackState.start(seg)
    trace = [TraceRow(first.index, 1.0, 0, state.status)]
    for frame in it:
        state = track_step(state, _segment(frame, cfg, segmenter), cfg)
        idx, iou = state.history[-1]
        trace.append(TraceRow(idx, iou, state.missed_count, state.status))
        if state.status is Status.LOST:
            break
    return state, trace


def select_keyframe(
    frames: list[Frame],
    cfg: PipelineConfig,
    segmenter: Segmenter = threshold_segment,
) -> KeyframeDecision:
    if len(frames) < 2:
        raise InitError(f"need at least 2 frames, got {len(frames)}")
    state, _ = track_sequence(frames, cfg, segmenter)
    return decision_from_state(state)


def decision_from_state(state: TrackState) -> KeyframeDecision:
    if state.status is not Status.LOST:
        raise NoKeyframe(
            f"track never lost over {len(state.history)} frames ({state.missed_count} trailing misses)",
            frame_index=state.last_index,
        )
    assert state.miss_start is not None and state.miss_reason is not None
    log.info("track lost at frame %d; break began at frame %d", state.last_index, state.miss_start)
    return KeyframeDecision(state.miss_start, state.miss_start, state.miss_reason)
