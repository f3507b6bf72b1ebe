"""Synthetic labeled skeleton clips for desk-scale experiments.

Four motion classes over a 17-joint (COCO-ordered) skeleton:

``walk``
    one person translating across the frame with swinging legs and arms
``wave``
    one person standing still with one forearm oscillating above the shoulder
``handshake``
    two persons approaching each other and extending their right hands
``fight``
    two persons close together with fast alternating punches and kicks

Every clip gets a random scale, position, phase, mirror flip, per-joint
Gaussian jitter and random confidences.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from skelprompt.skeleton_data import Joint, RawClip, RawFrame, RawPerson

TOY_CLASSES = ("walk", "wave", "handshake", "fight")
FRAME_WIDTH, FRAME_HEIGHT = 320, 224

# Standing pose, pixels relative to the hip midpoint (y grows downwards).
_TEMPLATE = np.array(
    [
        (0, -80), (-3, -83), (3, -83), (-6, -81), (6, -81),   # nose, eyes, ears
        (-12, -65), (12, -65),                                # shoulders
        (-15, -45), (15, -45),                                # elbows
        (-17, -27), (17, -27),                                # wrists
        (-8, 0), (8, 0),                                      # hips
        (-9, 25), (9, 25),                                    # knees
        (-9, 50), (9, 50),                                    # ankles
    ],
    dtype=np.float64,
)
L_SHO, R_SHO, L_ELB, R_ELB, L_WRI, R_WRI = 5, 6, 7, 8, 9, 10
L_KNE, R_KNE, L_ANK, R_ANK = 13, 14, 15, 16


def _walk(t: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    speed = rng.uniform(2.0, 4.0) * rng.choice([-1.0, 1.0])
    omega = rng.uniform(0.35, 0.5)
    phase = rng.uniform(0, 2 * np.pi)
    start = np.array([rng.uniform(90, 230), rng.uniform(120, 150)])
    poses = np.repeat(_TEMPLATE[None], len(t), axis=0)
    swing = np.sin(omega * t + phase)
    poses[:, L_KNE, 0] += 6 * swing
    poses[:, L_ANK, 0] += 14 * swing
    poses[:, R_KNE, 0] -= 6 * swing
    poses[:, R_ANK, 0] -= 14 * swing
    poses[:, L_WRI, 0] -= 6 * swing
    poses[:, R_WRI, 0] += 6 * swing
    root = start + np.stack([speed * (t - t.mean()), 1.5 * np.abs(np.sin(omega * t + phase))], axis=1)
    return [poses + root[:, None, :]]


def _wave(t: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    omega = rng.uniform(1.0, 1.4)
    phase = rng.uniform(0, 2 * np.pi)
    root = np.array([rng.uniform(60, 260), rng.uniform(120, 150)])
    poses = np.repeat(_TEMPLATE[None], len(t), axis=0)
    osc = np.sin(omega * t + phase)
    poses[:, R_ELB] = _TEMPLATE[R_SHO] + (16, -12)
    poses[:, R_WRI, 0] = _TEMPLATE[R_SHO, 0] + 16 + 12 * osc
    poses[:, R_WRI, 1] = _TEMPLATE[R_SHO, 1] - 32 + 3 * np.abs(osc)
    return [poses + root]


def _pair_roots(t: np.ndarray, gap_start: float, gap_end: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    centre = np.array([rng.uniform(120, 200), rng.uniform(120, 150)])
    frac = (t - t.min()) / max(t.max() - t.min(), 1.0)
    gap = gap_start + (gap_end - gap_start) * np.clip(frac * 1.4, 0.0, 1.0)
    offset = np.stack([gap / 2, np.zeros_like(gap)], axis=1)
    return centre - offset, centre + offset


def _handshake(t: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    left_root, right_root = _pair_roots(t, rng.uniform(130, 170), rng.uniform(45, 55), rng)
    frac = np.clip((t - t.min()) / max(t.max() - t.min(), 1.0) * 1.4 - 0.4, 0.0, 1.0)
    shake = 2 * np.sin(rng.uniform(0.3, 0.5) * t)
    a = np.repeat(_TEMPLATE[None], len(t), axis=0)
    b = np.repeat(_TEMPLATE[None] * (-1, 1), len(t), axis=0)
    # Person a faces right, b faces left; the reaching hand extends forward.
    a[:, R_ELB, 0] += 8 * frac
    a[:, R_WRI, 0] += 18 * frac
    a[:, R_WRI, 1] += -8 * frac + shake * frac
    b[:, R_ELB, 0] -= 8 * frac
    b[:, R_WRI, 0] -= 18 * frac
    b[:, R_WRI, 1] += -8 * frac + shake * frac
    return [a + left_root[:, None, :], b + right_root[:, None, :]]


def _fight(t: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    left_root, right_root = _pair_roots(t, rng.uniform(50, 65), rng.uniform(45, 60), rng)
    people = []
    for sign, root in ((1.0, left_root), (-1.0, right_root)):
        omega = rng.uniform(1.3, 1.8)
        phase = rng.uniform(0, 2 * np.pi)
        p = np.repeat(_TEMPLATE[None] * (sign, 1), len(t), axis=0)
        punch_r = np.maximum(0.0, np.sin(omega * t + phase))
        punch_l = np.maximum(0.0, np.sin(omega * t + phase + np.pi))
        kick = np.maximum(0.0, np.sin(0.5 * omega * t + phase)) ** 2
        p[:, R_ELB, 0] += sign * 10 * punch_r
        p[:, R_WRI, 0] += sign * 26 * punch_r
        p[:, R_WRI, 1] -= 14 * punch_r
        p[:, L_ELB, 0] += sign * 10 * punch_l
        p[:, L_WRI, 0] += sign * 26 * punch_l
        p[:, L_WRI, 1] -= 14 * punch_l
        p[:, R_KNE, 0] += sign * 12 * kick
        p[:, R_ANK, 0] += sign * 28 * kick
        p[:, R_ANK, 1] -= 22 * kick
        sway = np.stack([3 * np.sin(2.1 * omega * t), 2 * np.cos(1.7 * omega * t)], axis=1)
        people.append(p + (root + sway)[:, None, :])
    return people


_GENERATORS = {"walk": _walk, "wave": _wave, "handshake": _handshake, "fight": _fight}


def make_toy_clip(
    label: str,
    video_id: str,
    rng: np.random.Generator,
    frame_count: int = 24,
    jitter: float = 1.5,
    fps: float = 30.0,
) -> RawClip:
    t = np.arange(frame_count, dtype=np.float64)
    people = _GENERATORS[label](t, rng)
    scale = rng.uniform(0.8, 1.2)
    flip = rng.random() < 0.5
    frames = []
    track_base = int(rng.integers(0, 100))
    for f in range(frame_count):
        persons = []
        for pid, poses in enumerate(people):
            pose = poses[f]
            centre = pose.mean(axis=0)
            pose = centre + (pose - centre) * scale
            if flip:
                pose = pose * (-1, 1) + (FRAME_WIDTH, 0)
            pose = pose + rng.normal(0.0, jitter, size=pose.shape)
            conf = rng.uniform(0.5, 1.0, size=len(pose))
            joints = tuple(
                Joint(k, float(np.clip(x, 0, FRAME_WIDTH)), float(np.clip(y, 0, FRAME_HEIGHT)), float(c))
                for k, ((x, y), c) in enumerate(zip(pose, conf))
            )
            persons.append(RawPerson(track_base + pid, joints))
        frames.append(RawFrame(f, tuple(persons)))
    return RawClip(video_id, FRAME_WIDTH, FRAME_HEIGHT, fps, frame_count, label, tuple(frames)).validate()


def generate_toy_clips(
    per_class: int,
    seed: int,
    classes: Sequence[str] = TOY_CLASSES,
    frame_count: int = 24,
    prefix: str = "toy",
) -> list[RawClip]:
    """``per_class`` clips of each class, interleaved, deterministic given ``seed``."""
    unknown = set(classes) - set(_GENERATORS)
    if unknown:
        raise ValueError(f"unknown toy classes {sorted(unknown)}; available: {TOY_CLASSES}")
    rng = np.random.default_rng(seed)
    return [
        make_toy_clip(label, f"{prefix}-{label}-{i:04d}", rng, frame_count)
        for i in range(per_class)
        for label in classes
    ]
