"""Pose-sequence clips: parsing, validation and conversion to joint-token clouds.

A clip is stored as one JSON object per line::

    {"video_id": str, "width": int, "height": int, "fps": num,
     "frame_count": int, "label": str | null,
     "frames": [{"t": int, "persons": [{"track_id": int,
                 "joints": [{"k": int, "x": num, "y": num, "c": num}]}]}]}

An optional ``"num_joints"`` key declares the skeleton size K (default 17,
the COCO layout).
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from skelprompt.errors import ClipParseError, ClipValidationError

logger = logging.getLogger(__name__)

DEFAULT_NUM_JOINTS = 17
TOKEN_DIM = 7
TOKEN_FIELDS = ("x", "y", "t", "confidence", "joint", "cx", "cy")


@dataclass(frozen=True)
class Joint:
    k: int
    x: float
    y: float
    c: float


@dataclass(frozen=True)
class RawPerson:
    track_id: int
    joints: tuple[Joint, ...]


@dataclass(frozen=True)
class RawFrame:
    t: int
    persons: tuple[RawPerson, ...]


@dataclass(frozen=True)
class RawClip:
    video_id: str
    width: int
    height: int
    fps: float
    frame_count: int
    label: str | None
    frames: tuple[RawFrame, ...]
    num_joints: int = DEFAULT_NUM_JOINTS

    @property
    def joint_count(self) -> int:
        return sum(len(p.joints) for f in self.frames for p in f.persons)

    def validate(self) -> RawClip:
        """Check every invariant; return self so calls can be chained."""
        vid = self.video_id
        if not isinstance(vid, str) or not vid:
            raise ClipValidationError(str(vid), "video_id must be a non-empty string")
        if self.width <= 0 or self.height <= 0:
            raise ClipValidationError(vid, f"frame size must be positive, got {self.width}x{self.height}")
        if self.frame_count < 1:
            raise ClipValidationError(vid, f"frame_count must be >= 1, got {self.frame_count}")
        if not (math.isfinite(self.fps) and self.fps > 0):
            raise ClipValidationError(vid, f"fps must be positive, got {self.fps}")
        if self.num_joints < 1:
            raise ClipValidationError(vid, f"num_joints must be >= 1, got {self.num_joints}")
        for frame in self.frames:
            if not 0 <= frame.t < self.frame_count:
                raise ClipValidationError(vid, f"frame index {frame.t} outside [0, {self.frame_count})")
            for person in frame.persons:
                for j in person.joints:
                    if not 0 <= j.k < self.num_joints:
                        raise ClipValidationError(
                            vid, f"joint index {j.k} outside [0, {self.num_joints}) at t={frame.t}"
                        )
                    if not (math.isfinite(j.c) and 0.0 <= j.c <= 1.0):
                        raise ClipValidationError(vid, f"confidence {j.c} outside [0, 1] at t={frame.t}")
                    if not (math.isfinite(j.x) and math.isfinite(j.y)):
                        raise ClipValidationError(vid, f"non-finite joint coordinate at t={frame.t}")
        return self


@dataclass(frozen=True)
class TokenCloud:
    """Unordered set of 7-dim joint tokens for one clip.

    Row order of ``tokens`` carries no meaning.
    """

    tokens: np.ndarray
    source: str
    skipped_persons: int = 0
    label: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2 or self.tokens.shape[1] != TOKEN_DIM:
            raise ValueError(f"tokens must have shape (J, {TOKEN_DIM}), got {self.tokens.shape}")
        if self.tokens.shape[0] < 1:
            raise ValueError(f"clip {self.source!r} produced an empty token cloud")

    def __len__(self) -> int:
        return self.tokens.shape[0]


# -- JSON (de)serialization -------------------------------------------------


def clip_from_dict(obj: dict) -> RawClip:
    frames = []
    for fr in obj["frames"]:
        persons = []
        for p in fr["persons"]:
            joints = tuple(
                Joint(int(j["k"]), float(j["x"]), float(j["y"]), float(j["c"])) for j in p["joints"]
            )
            persons.append(RawPerson(int(p["track_id"]), joints))
        frames.append(RawFrame(int(fr["t"]), tuple(persons)))
    label = obj.get("label")
    return RawClip(
        video_id=obj["video_id"],
        width=int(obj["width"]),
        height=int(obj["height"]),
        fps=float(obj["fps"]),
        frame_count=int(obj["frame_count"]),
        label=None if label is None else str(label),
        frames=tuple(frames),
        num_joints=int(obj.get("num_joints", DEFAULT_NUM_JOINTS)),
    )


def clip_to_dict(clip: RawClip) -> dict:
    out = {
        "video_id": clip.video_id,
        "width": clip.width,
        "height": clip.height,
        "fps": clip.fps,
        "frame_count": clip.frame_count,
        "label": clip.label,
        "frames": [
            {
                "t": fr.t,
                "persons": [
                    {
                        "track_id": p.track_id,
                        "joints": [{"k": j.k, "x": j.x, "y": j.y, "c": j.c} for j in p.joints],
                    }
                    for p in fr.persons
                ],
            }
            for fr in clip.frames
        ],
    }
    if clip.num_joints != DEFAULT_NUM_JOINTS:
        out["num_joints"] = clip.num_joints
    return out


def parse_clip_file(path: str | Path) -> list[RawClip]:
    """Read a clip JSONL file, validating each clip.

    Raises:
        ClipParseError: a line is not valid JSON or lacks required keys.
        ClipValidationError: a clip violates its invariants.
    """
    clips = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                clip = clip_from_dict(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ClipParseError(lineno, f"{type(exc).__name__}: {exc}") from exc
            clips.append(clip.validate())
    return clips


def write_clip_file(clips: Iterable[RawClip], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for clip in clips:
            fh.write(json.dumps(clip_to_dict(clip)))
            fh.write("\n")


# -- tokenization ------------------------------------------------------------


def tokenize_clip(clip: RawClip) -> TokenCloud:
    """Convert every detected joint into a normalized 7-dim token.

    Token layout is (x/W, y/H, t/(T-1), confidence, k/(K-1), cx/W, cy/H), where
    (cx, cy) is the mean of the same person's joints in the same frame. All
    components are clamped to [0, 1]; persons without joints are skipped.
    """
    t_den = clip.frame_count - 1
    k_den = clip.num_joints - 1
    rows = []
    skipped = 0
    for frame in clip.frames:
        t_norm = frame.t / t_den if t_den > 0 else 0.0
        for person in frame.persons:
            if not person.joints:
                skipped += 1
                continue
            xy = np.array([(j.x, j.y) for j in person.joints], dtype=np.float64)
            cx, cy = xy.mean(axis=0)
            for j in person.joints:
                rows.append(
                    (
                        j.x / clip.width,
                        j.y / clip.height,
                        t_norm,
                        j.c,
                        j.k / k_den if k_den > 0 else 0.0,
                        cx / clip.width,
                        cy / clip.height,
                    )
                )
    if skipped:
        logger.warning("clip %s: skipped %d person(s) with no joints", clip.video_id, skipped)
    if not rows:
        raise ClipValidationError(clip.video_id, "no joints to tokenize")
    tokens = np.clip(np.asarray(rows, dtype=np.float64), 0.0, 1.0)
    return TokenCloud(tokens=tokens, source=clip.video_id, skipped_persons=skipped, label=clip.label)


def split_subsets(clips: Sequence[RawClip], n: int, seed: int) -> list[list[RawClip]]:
    """Partition clips into n disjoint, near-equal subsets.

    Membership is drawn with a seeded shuffle; each subset keeps the input
    order, so ``n=1`` returns the input unchanged.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > len(clips):
        raise ValueError(f"cannot split {len(clips)} clips into {n} subsets")
    order = np.random.default_rng(seed).permutation(len(clips))
    return [[clips[i] for i in sorted(part)] for part in np.array_split(order, n)]
