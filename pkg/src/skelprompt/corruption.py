"""Synthetic pose-detection and tracking errors for robustness evaluation.

Three error types are injected into a :class:`RawClip`:

* false positives: Gaussian jitter added to the coordinates of a seeded
  selection of joints (clamped to the frame);
* false negatives: a disjoint selection of joints has x, y and confidence set
  to 0 (the joints stay in the clip);
* tracking errors: every ``track_swap_period`` frames the track ids of the
  persons present in the following span are randomly permuted.

Joints are addressed by their flat index in (frame, person, joint) order.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from skelprompt.skeleton_data import Joint, RawClip, RawFrame, RawPerson

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorruptionSpec:
    error_ratio: float = 0.0
    fp_sigma: float | None = None
    track_swap_period: int | None = 60
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.error_ratio <= 1.0:
            raise ValueError(f"error_ratio must be in [0, 1], got {self.error_ratio}")
        if self.fp_sigma is not None and self.fp_sigma < 0:
            raise ValueError(f"fp_sigma must be >= 0, got {self.fp_sigma}")
        if self.track_swap_period is not None and self.track_swap_period < 1:
            raise ValueError(f"track_swap_period must be >= 1, got {self.track_swap_period}")

    def sigma_for(self, clip: RawClip) -> float:
        """Noise std in pixels; defaults to 5% of the frame diagonal."""
        if self.fp_sigma is not None:
            return self.fp_sigma
        return 0.05 * math.hypot(clip.width, clip.height)


@dataclass
class SelectionLog:
    clip_id: str
    fp_indices: list[int] = field(default_factory=list)
    fn_indices: list[int] = field(default_factory=list)
    swap_frames: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "fp_indices": self.fp_indices,
            "fn_indices": self.fn_indices,
            "swap_frames": self.swap_frames,
        }


def affected_count(clip: RawClip, ratio: float) -> int:
    # Round half up; Python's round() would send 2.5 to 2.
    return int(math.floor(ratio * clip.joint_count + 0.5))


def _rng(clip: RawClip, seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(clip.video_id.encode("utf-8")), stream])


def _selection_order(clip: RawClip, seed: int) -> np.ndarray:
    return _rng(clip, seed, 0).permutation(clip.joint_count)


def _map_joints(clip: RawClip, fn) -> RawClip:
    """Rebuild the clip, applying ``fn(flat_index, joint)`` to every joint."""
    flat = 0
    frames = []
    for frame in clip.frames:
        persons = []
        for person in frame.persons:
            joints = []
            for j in person.joints:
                joints.append(fn(flat, j))
                flat += 1
            persons.append(RawPerson(person.track_id, tuple(joints)))
        frames.append(RawFrame(frame.t, tuple(persons)))
    return replace(clip, frames=tuple(frames))


def _apply_fp(clip: RawClip, targets: np.ndarray, sigma: float, seed: int) -> RawClip:
    if targets.size == 0:
        return clip
    noise = _rng(clip, seed, 1).normal(0.0, sigma, size=(targets.size, 2))
    offsets = {int(t): noise[i] for i, t in enumerate(np.sort(targets))}

    def jitter(idx: int, j: Joint) -> Joint:
        if idx not in offsets:
            return j
        dx, dy = offsets[idx]
        return Joint(j.k, min(max(j.x + dx, 0.0), clip.width), min(max(j.y + dy, 0.0), clip.height), j.c)

    return _map_joints(clip, jitter)


def _apply_fn(clip: RawClip, targets: np.ndarray) -> RawClip:
    if targets.size == 0:
        return clip
    zeroed = set(targets.tolist())
    return _map_joints(clip, lambda idx, j: Joint(j.k, 0.0, 0.0, 0.0) if idx in zeroed else j)


def inject_false_positives(clip: RawClip, spec: CorruptionSpec) -> RawClip:
    n = affected_count(clip, spec.error_ratio)
    return _apply_fp(clip, _selection_order(clip, spec.seed)[:n], spec.sigma_for(clip), spec.seed)


def inject_false_negatives(clip: RawClip, spec: CorruptionSpec) -> RawClip:
    # Drawn from the opposite end of the shared order, so it is disjoint from
    # the false-positive draw whenever both fit.
    n = affected_count(clip, spec.error_ratio)
    order = _selection_order(clip, spec.seed)
    return _apply_fn(clip, order[order.size - n :])


def _swap_tracks(clip: RawClip, spec: CorruptionSpec, log: SelectionLog) -> RawClip:
    period = spec.track_swap_period
    if period is None or clip.frame_count <= period:
        return clip
    if max((len(f.persons) for f in clip.frames), default=0) < 2:
        logger.warning("clip %s: fewer than two persons, tracking errors not injected", clip.video_id)
        return clip
    rng = _rng(clip, spec.seed, 2)
    mapping_at: dict[int, dict[int, int]] = {}
    for start in range(period, clip.frame_count, period):
        stop = min(start + period, clip.frame_count)
        ids = sorted({p.track_id for f in clip.frames if start <= f.t < stop for p in f.persons})
        if len(ids) < 2:
            continue
        perm = rng.permutation(len(ids))
        log.swap_frames.append(start)
        mapping_at[start] = {ids[i]: ids[perm[i]] for i in range(len(ids))}
    if not mapping_at:
        return clip
    frames = []
    for frame in clip.frames:
        span = (frame.t // period) * period
        mapping = mapping_at.get(span)
        if mapping is None:
            frames.append(frame)
            continue
        frames.append(
            RawFrame(frame.t, tuple(RawPerson(mapping.get(p.track_id, p.track_id), p.joints) for p in frame.persons))
        )
    return replace(clip, frames=tuple(frames))


def inject_tracking_errors(clip: RawClip, spec: CorruptionSpec) -> RawClip:
    return _swap_tracks(clip, spec, SelectionLog(clip.video_id))


def corrupt_clip_logged(clip: RawClip, spec: CorruptionSpec) -> tuple[RawClip, SelectionLog]:
    """Apply FP, then FN, then tracking errors; return the clip and what was touched."""
    log = SelectionLog(clip.video_id)
    n = affected_count(clip, spec.error_ratio)
    order = _selection_order(clip, spec.seed)
    n_fn = min(n, order.size - n)
    if n_fn < n:
        logger.warning(
            "clip %s: ratio %.2f leaves room for only %d disjoint false negatives", clip.video_id, spec.error_ratio, n_fn
        )
    fp, fn = order[:n], order[order.size - n_fn :]
    log.fp_indices = sorted(fp.tolist())
    log.fn_indices = sorted(fn.tolist())
    out = _apply_fp(clip, fp, spec.sigma_for(clip), spec.seed)
    out = _apply_fn(out, fn)
    out = _swap_tracks(out, spec, log)
    return out, log


def corrupt_clip(clip: RawClip, spec: CorruptionSpec) -> RawClip:
    return corrupt_clip_logged(clip, spec)[0]


def write_selection_log(logs: list[SelectionLog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([log.to_dict() for log in logs], fh, indent=1)
