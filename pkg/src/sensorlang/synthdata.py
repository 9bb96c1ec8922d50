"""Parametric multimodal activity simulator.

A 16-joint stick figure is driven by per-class kinematic primitives over
``S`` frames and rendered three ways: a small 3-channel video grid, a
LiDAR-like xyz point cloud and a radar-like point cloud carrying radial
velocity and intensity. Subjects rescale/offset the skeleton; environments
set the sensor noise and the clutter rate.

Right-side classes are exact mirror images (x -> -x) of their left-side
counterparts, and the five unseen classes are recombinations of factor words
and motions that seen classes cover.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .textpipe import ClassEntry, ClassRegistry

# ---------------------------------------------------------------------------
# class table

_P = "an activity of a person "

# (name, description, seen, direction, body_part, motion, kinematic kind, mirror sign)
_CLASSES: list[tuple[str, str, bool, str, str, str, str, int]] = [
    ("right twist", _P + "rotating the upper body toward the right side at the waist",
     True, "right", "torso", "twist", "twist", -1),
    ("left limb extension", _P + "stretching the left arm and the left leg outward to the side",
     True, "left", "limb", "extension", "limb_extension", 1),
    ("right limb extension", _P + "stretching the right arm and the right leg outward to the side",
     True, "right", "limb", "extension", "limb_extension", -1),
    ("left side lunge", _P + "stepping the left leg out to the left side and bending the knee",
     True, "left", "leg", "lunge", "side_lunge", 1),
    ("left front lunge", _P + "stepping the left leg forward and bending the knee",
     True, "left", "leg", "lunge", "front_lunge", 1),
    ("right front lunge", _P + "stepping the right leg forward and bending the knee",
     True, "right", "leg", "lunge", "front_lunge", -1),
    ("waving right hand", _P + "raising the right hand above the head and moving it quickly from side to side",
     True, "right", "hand", "wave", "wave", -1),
    ("raising left hand", _P + "raising the left hand slowly above the head",
     True, "left", "hand", "raise", "raise", 1),
    ("raising right hand", _P + "raising the right hand slowly above the head",
     True, "right", "hand", "raise", "raise", -1),
    ("left side throwing", _P + "swinging the left arm quickly out to the left side",
     True, "left", "arm", "throw", "side_throw", 1),
    ("left kicking", _P + "swinging the left leg quickly forward",
     True, "left", "leg", "kick", "kick", 1),
    ("right kicking", _P + "swinging the right leg quickly forward",
     True, "right", "leg", "kick", "kick", -1),
    ("left body extension", _P + "bending the upper body toward the left side with the right arm above the head",
     True, "left", "torso", "extension", "body_extension", 1),
    ("right body extension", _P + "bending the upper body toward the right side with the left arm above the head",
     True, "right", "torso", "extension", "body_extension", -1),
    ("bowing", _P + "bending forward at the waist",
     True, "both", "torso", "bow", "bow", 1),
    ("squatting", _P + "bending both knees to lower the body with both arms forward",
     True, "both", "leg", "squat", "squat", 1),
    ("jumping up", _P + "jumping up with both legs",
     True, "both", "leg", "jump", "jump", 1),
    ("mark time", _P + "lifting the left knee and the right knee in turn",
     True, "both", "leg", "march", "mark_time", 1),
    ("horizontal chest expansion", _P + "opening both arms outward to the side at shoulder height",
     True, "both", "arm", "expansion", "chest_horizontal", 1),
    ("vertical chest expansion", _P + "raising both arms forward and upward above the head",
     True, "both", "arm", "expansion", "chest_vertical", 1),
    ("stretching both arms", _P + "stretching both arms slowly above the head",
     True, "both", "arm", "stretch", "stretch_both", 1),
    ("picking up things", _P + "bending forward at the waist and reaching down with the right hand",
     True, "right", "hand", "pick", "pick_up", 1),
    # unseen, in Z01..Z05 order
    ("left twist", _P + "rotating the upper body toward the left side at the waist",
     False, "left", "torso", "twist", "twist", 1),
    ("both limb extension", _P + "stretching the left arm and the right arm and the left leg and the right leg outward to the side",
     False, "both", "limb", "extension", "limb_extension_both", 1),
    ("right side lunge", _P + "stepping the right leg out to the right side and bending the knee",
     False, "right", "leg", "lunge", "side_lunge", -1),
    ("waving left hand", _P + "raising the left hand above the head and moving it quickly from side to side",
     False, "left", "hand", "wave", "wave", 1),
    ("right side throwing", _P + "swinging the right arm quickly out to the right side",
     False, "right", "arm", "throw", "side_throw", -1),
]

_FREQ = {
    "wave": 3.0, "side_throw": 2.0, "kick": 2.0, "jump": 2.0, "mark_time": 2.0,
}

# joints
HEAD, NECK, SPINE, PELVIS = 0, 1, 2, 3
L_SH, L_EL, L_HA, R_SH, R_EL, R_HA = 4, 5, 6, 7, 8, 9
L_HIP, L_KN, L_FT, R_HIP, R_KN, R_FT = 10, 11, 12, 13, 14, 15
N_JOINTS = 16
BONES = np.array([
    (HEAD, NECK), (NECK, SPINE), (SPINE, PELVIS),
    (NECK, L_SH), (L_SH, L_EL), (L_EL, L_HA),
    (NECK, R_SH), (R_SH, R_EL), (R_EL, R_HA),
    (PELVIS, L_HIP), (L_HIP, L_KN), (L_KN, L_FT),
    (PELVIS, R_HIP), (R_HIP, R_KN), (R_KN, R_FT),
])
_UPPER = [HEAD, NECK, SPINE, L_SH, L_EL, L_HA, R_SH, R_EL, R_HA]

_ACTIVE = {
    "twist": [HEAD, NECK, SPINE, L_SH, L_EL, L_HA, R_SH, R_EL, R_HA],
    "limb_extension": [L_EL, L_HA, L_KN, L_FT],
    "limb_extension_both": [L_EL, L_HA, L_KN, L_FT, R_EL, R_HA, R_KN, R_FT],
    "side_lunge": [PELVIS, L_KN, L_FT],
    "front_lunge": [PELVIS, L_KN, L_FT],
    "wave": [L_EL, L_HA],
    "raise": [L_EL, L_HA],
    "side_throw": [L_EL, L_HA],
    "kick": [L_KN, L_FT],
    "body_extension": [HEAD, NECK, SPINE, R_EL, R_HA],
    "bow": [HEAD, NECK, SPINE],
    "squat": [PELVIS, L_KN, R_KN, L_HA, R_HA],
    "jump": list(range(N_JOINTS)),
    "mark_time": [L_KN, L_FT, R_KN, R_FT],
    "chest_horizontal": [L_EL, L_HA, R_EL, R_HA],
    "chest_vertical": [L_EL, L_HA, R_EL, R_HA],
    "stretch_both": [L_EL, L_HA, R_EL, R_HA],
    "pick_up": [HEAD, NECK, SPINE, R_EL, R_HA],
    "stand": [],
}

UNSEEN_CODES = ("Z01", "Z02", "Z03", "Z04", "Z05")


@dataclass(frozen=True)
class ActivitySpec:
    class_id: int
    name: str
    description: str
    seen: bool
    direction: str
    body_part: str
    motion: str
    kind: str
    sign: tuple[float, float, float]
    frequency: float = 1.0
    amplitude: float = 1.0

    @property
    def active_joints(self) -> np.ndarray:
        mask = np.zeros(N_JOINTS, dtype=bool)
        mask[_ACTIVE[self.kind]] = True
        return mask

    def entry(self) -> ClassEntry:
        return ClassEntry(self.class_id, self.name, self.description, self.seen)


def activity_specs() -> list[ActivitySpec]:
    return [
        ActivitySpec(
            class_id=i, name=name, description=desc, seen=seen, direction=direction,
            body_part=part, motion=motion, kind=kind, sign=(float(sign), 1.0, 1.0),
            frequency=_FREQ.get(kind, 1.0),
        )
        for i, (name, desc, seen, direction, part, motion, kind, sign) in enumerate(_CLASSES)
    ]


def default_registry() -> ClassRegistry:
    return ClassRegistry(s.entry() for s in activity_specs())


# ---------------------------------------------------------------------------
# kinematics

_BASE = np.array([
    (0.0, 1.65, 0.0), (0.0, 1.45, 0.0), (0.0, 1.20, 0.0), (0.0, 0.95, 0.0),
    (0.19, 1.42, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0),
    (-0.19, 1.42, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0),
    (0.10, 0.92, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0),
    (-0.10, 0.92, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0),
])
_UPPER_ARM, _FOREARM = 0.28, 0.27
_THIGH, _SHIN = 0.43, 0.43


def _direction(elev: np.ndarray, azim: np.ndarray, out: float) -> np.ndarray:
    # elev 0 points straight down, pi/2 horizontal, pi straight up;
    # azim 0 is lateral-outward, pi/2 is forward (+z)
    s = np.sin(elev)
    return np.stack([out * np.cos(azim) * s, -np.cos(elev), np.sin(azim) * s], axis=-1)


class _Pose:
    """Per-frame pose parameters; every field is an array over frames."""

    def __init__(self, T: int):
        z = lambda: np.zeros(T)
        # (upper elev, upper azim, lower elev, lower azim) per limb
        self.l_arm = [z(), z(), z(), z()]
        self.r_arm = [z(), z(), z(), z()]
        self.l_leg = [z(), z(), z(), z()]
        self.r_leg = [z(), z(), z(), z()]
        self.yaw, self.roll, self.pitch = z(), z(), z()
        self.shift = np.zeros((T, 3))


_WAVE_SWING = 0.45      # forearm swing of a wave, radians at unit amplitude
_LIMB_SPREAD = 0.55     # leg abduction of a limb extension


def _pose_for(kind: str, u: np.ndarray, amp: float, freq: float) -> _Pose:
    T = u.shape[0]
    p = _Pose(T)
    bump = 0.5 - 0.5 * np.cos(2 * np.pi * freq * u)
    osc = np.sin(2 * np.pi * freq * u)
    rest = 0.12
    for arm in (p.l_arm, p.r_arm):
        arm[0][:] = rest
        arm[2][:] = rest
    A = amp
    if kind == "stand":
        pass
    elif kind == "twist":
        p.yaw = 0.7 * A * bump
        for arm in (p.l_arm, p.r_arm):
            arm[0][:] = arm[2][:] = 0.6
            arm[1][:] = arm[3][:] = 1.0
    elif kind in ("limb_extension", "limb_extension_both"):
        arms = [p.l_arm, p.r_arm] if kind.endswith("both") else [p.l_arm]
        legs = [p.l_leg, p.r_leg] if kind.endswith("both") else [p.l_leg]
        for arm in arms:
            arm[0] = rest + 1.4 * A * bump
            arm[2] = rest + 1.4 * A * bump
        for leg in legs:
            leg[0] = _LIMB_SPREAD * A * bump
            leg[2] = _LIMB_SPREAD * A * bump
    elif kind == "side_lunge":
        p.l_leg[0] = 0.6 * A * bump
        p.l_leg[2] = 0.2 * A * bump
        p.shift[:, 0] = 0.22 * A * bump
        p.shift[:, 1] = -0.18 * A * bump
    elif kind == "front_lunge":
        p.l_leg[0] = 1.0 * A * bump
        p.l_leg[1][:] = np.pi / 2
        p.l_leg[2] = 0.15 * A * bump
        p.l_leg[3][:] = np.pi / 2
        p.shift[:, 2] = 0.22 * A * bump
        p.shift[:, 1] = -0.2 * A * bump
    elif kind == "wave":
        p.l_arm[0][:] = rest + 2.2 * A
        p.l_arm[2] = rest + 2.5 * A + _WAVE_SWING * A * osc
    elif kind == "raise":
        p.l_arm[0] = rest + 2.45 * A * bump
        p.l_arm[2] = rest + 2.45 * A * bump
        p.l_arm[1][:] = p.l_arm[3][:] = 0.4
    elif kind == "side_throw":
        p.l_arm[0] = rest + (np.pi / 2 - rest) * A * bump
        p.l_arm[2] = rest + (np.pi / 2 - rest) * A * bump
        p.l_arm[1] = 1.2 - 1.4 * A * bump
        p.l_arm[3] = 1.2 - 1.6 * A * bump
    elif kind == "kick":
        p.l_leg[0] = 1.1 * A * bump
        p.l_leg[2] = 0.7 * A * bump
        p.l_leg[1][:] = p.l_leg[3][:] = np.pi / 2
    elif kind == "body_extension":
        p.roll = 0.45 * A * bump
        p.r_arm[0] = rest + 2.5 * A * bump
        p.r_arm[2] = rest + 2.7 * A * bump
    elif kind == "bow":
        p.pitch = 0.95 * A * bump
    elif kind == "squat":
        p.shift[:, 1] = -0.33 * A * bump
        for leg in (p.l_leg, p.r_leg):
            leg[0] = 1.1 * A * bump
            leg[1][:] = np.pi / 2
            leg[2] = 0.1 * A * bump
            leg[3][:] = -np.pi / 2
        for arm in (p.l_arm, p.r_arm):
            arm[0] = rest + 1.4 * A * bump
            arm[2] = rest + 1.4 * A * bump
            arm[1][:] = arm[3][:] = np.pi / 2
    elif kind == "jump":
        p.shift[:, 1] = 0.2 * A * np.abs(osc)
        for arm in (p.l_arm, p.r_arm):
            arm[0] = rest + 0.5 * A * np.abs(osc)
            arm[2] = rest + 0.5 * A * np.abs(osc)
    elif kind == "mark_time":
        p.l_leg[0] = 1.1 * A * np.maximum(osc, 0.0)
        p.r_leg[0] = 1.1 * A * np.maximum(-osc, 0.0)
        for leg in (p.l_leg, p.r_leg):
            leg[1][:] = np.pi / 2
            leg[3][:] = -np.pi / 2
            leg[2] = 0.1 * leg[0]
    elif kind == "chest_horizontal":
        for arm in (p.l_arm, p.r_arm):
            arm[0][:] = rest + (np.pi / 2 - rest) * A
            arm[2][:] = arm[0]
            arm[1] = np.pi / 2 * (1 - A * bump)
            arm[3] = arm[1].copy()
    elif kind == "chest_vertical":
        for arm in (p.l_arm, p.r_arm):
            arm[0] = rest + (np.pi / 2 - rest) * A + 1.2 * A * bump
            arm[2] = arm[0].copy()
            arm[1][:] = arm[3][:] = np.pi / 2
    elif kind == "stretch_both":
        for arm in (p.l_arm, p.r_arm):
            arm[0] = rest + 2.6 * A * bump
            arm[2] = rest + 2.7 * A * bump
            arm[1][:] = arm[3][:] = 0.2
        p.shift[:, 1] = 0.05 * A * bump
    elif kind == "pick_up":
        p.pitch = 1.2 * A * bump
        p.shift[:, 1] = -0.15 * A * bump
        p.r_arm[0] = rest + 0.5 * A * bump
        p.r_arm[2] = rest + 0.3 * A * bump
        p.r_arm[1][:] = p.r_arm[3][:] = np.pi / 2
    else:
        raise ValueError(f"unknown kinematic kind {kind!r}")
    return p


def _rotate_upper(j: np.ndarray, p: _Pose) -> np.ndarray:
    # rotate upper-body joints about the pelvis: pitch (forward), roll (sideways), yaw (twist)
    pelvis = j[:, PELVIS:PELVIS + 1, :]
    r = j[:, _UPPER, :] - pelvis
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    c, s = np.cos(p.pitch)[:, None], np.sin(p.pitch)[:, None]
    y, z = c * y - s * z, s * y + c * z
    c, s = np.cos(p.roll)[:, None], np.sin(p.roll)[:, None]
    x, y = c * x + s * y, -s * x + c * y
    c, s = np.cos(p.yaw)[:, None], np.sin(p.yaw)[:, None]
    x, z = c * x + s * z, -s * x + c * z
    out = j.copy()
    out[:, _UPPER, :] = np.stack([x, y, z], axis=-1) + pelvis
    return out


# left is +x in the canonical frame
_SIDE = {"left": 1.0, "right": -1.0}
_LEAN_SHIFT = 0.2
_LEAN_ROLL = 0.15


def skeleton(spec: ActivitySpec, u: np.ndarray, amplitude: float = 1.0) -> np.ndarray:
    """Joint positions ``(T, 16, 3)`` for phases ``u`` in the canonical frame."""
    p = _pose_for(spec.kind, u, spec.amplitude * amplitude, spec.frequency)
    T = u.shape[0]
    j = np.broadcast_to(_BASE, (T, N_JOINTS, 3)).copy()
    for (sh, el, ha), arm, out in ((( L_SH, L_EL, L_HA)), p.l_arm, 1.0), (((R_SH, R_EL, R_HA)), p.r_arm, -1.0):
        j[:, el] = j[:, sh] + _UPPER_ARM * _direction(arm[0], arm[1], out)
        j[:, ha] = j[:, el] + _FOREARM * _direction(arm[2], arm[3], out)
    j = _rotate_upper(j, p)
    j += p.shift[:, None, :]
    for (hip, kn, ft), leg, out in (((L_HIP, L_KN, L_FT)), p.l_leg, 1.0), (((R_HIP, R_KN, R_FT)), p.r_leg, -1.0):
        j[:, kn] = j[:, hip] + _THIGH * _direction(leg[0], leg[1], out)
        j[:, ft] = j[:, kn] + _SHIN * _direction(leg[2], leg[3], out)
    j = j * np.asarray(spec.sign)
    side = _SIDE.get(spec.direction, 0.0)
    if side:
        # hips shift toward the working side and the upper body leans back over them,
        # a lateral cue shared by every one-sided activity
        pelvis = j[:, PELVIS:PELVIS + 1, :]
        r = j[:, _UPPER, :] - pelvis
        c, s = np.cos(side * _LEAN_ROLL), np.sin(side * _LEAN_ROLL)
        x, y = r[..., 0], r[..., 1]
        j[:, _UPPER, 0] = c * x - s * y + pelvis[..., 0]
        j[:, _UPPER, 1] = s * x + c * y + pelvis[..., 1]
        j[..., 0] += side * _LEAN_SHIFT
    return j


# ---------------------------------------------------------------------------
# configuration and samples

@dataclass
class GeneratorConfig:
    seed: int = 0
    samples_per_class: int = 100
    subjects: int = 8
    environments: int = 4
    frames: int = 8
    video_size: int = 16
    lidar_points: float = 64.0
    radar_points: float = 24.0
    noise_levels: tuple[float, ...] = (0.01, 0.03, 0.05, 0.08)
    clutter_rates: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0)

    def __post_init__(self):
        self.noise_levels = tuple(float(v) for v in self.noise_levels)
        self.clutter_rates = tuple(float(v) for v in self.clutter_rates)
        if self.frames != 8:
            raise ValueError("frame count S is fixed at 8")
        if self.samples_per_class < 0:
            raise ValueError("samples_per_class must be non-negative")
        if self.subjects < 1 or self.environments < 1:
            raise ValueError("need at least one subject and one environment")
        if self.lidar_points <= 0 or self.radar_points <= 0:
            raise ValueError("point rates must be positive")
        if self.video_size % 4 != 0 or self.video_size <= 0:
            raise ValueError("video_size must be a positive multiple of 4")
        if any(r <= 0 for r in self.clutter_rates) or any(v < 0 for v in self.noise_levels):
            raise ValueError("clutter rates must be positive and noise non-negative")

    def noise(self, env: int) -> float:
        return self.noise_levels[env % len(self.noise_levels)]

    def clutter(self, env: int) -> float:
        return self.clutter_rates[env % len(self.clutter_rates)]

    def subject_params(self, subject: int) -> tuple[float, float, float]:
        """(scale, vertical offset, depth offset) for a subject, fixed per seed."""
        rng = np.random.default_rng([self.seed, 7919, subject])
        return (
            float(rng.uniform(0.8, 1.2)),
            float(rng.uniform(-0.05, 0.05)),
            float(rng.uniform(-0.3, 0.3)),
        )

    def subject_style(self, subject: int) -> tuple[float, float]:
        """(amplitude, tempo) multipliers: how broadly and how fast a subject moves."""
        rng = np.random.default_rng([self.seed, 7927, subject])
        return float(rng.uniform(0.85, 1.15)), float(rng.uniform(0.85, 1.15))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        d["clutter_rates"] = list(self.clutter_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass
class Sample:
    video: np.ndarray                  # (3, H, W, S) float32
    lidar: list[np.ndarray]            # S arrays of (n, 3) float32
    radar: list[np.ndarray]            # S arrays of (n, 5) float32
    class_id: int
    subject: int
    environment: int

    def equals(self, other: "Sample") -> bool:
        return (
            self.class_id == other.class_id
            and self.subject == other.subject
            and self.environment == other.environment
            and np.array_equal(self.video, other.video)
            and all(np.array_equal(a, b) for a, b in zip(self.lidar, other.lidar))
            and all(np.array_equal(a, b) for a, b in zip(self.radar, other.radar))
            and len(self.lidar) == len(other.lidar)
            and len(self.radar) == len(other.radar)
        )


_RADAR_POS = np.array([0.0, 1.0, 3.0])
_VIEW_X = 1.1
_VIEW_Y = (-0.05, 2.15)
_SPLAT_SIGMA = 0.12


def _bone_points(j: np.ndarray) -> np.ndarray:
    mids = 0.5 * (j[:, BONES[:, 0]] + j[:, BONES[:, 1]])
    return np.concatenate([j, mids], axis=1)


def render_video(joints: np.ndarray, velocity: np.ndarray, size: int) -> np.ndarray:
    """Gaussian-splat frontal view: occupancy, depth-weighted and speed-weighted channels.

    Pixel centres are symmetric about x = 0, so mirroring the skeleton
    mirrors the grid along the width axis exactly.
    """
    pts = _bone_points(joints)                      # (S, P, 3)
    vel = _bone_points(velocity)
    speed = np.sqrt((vel ** 2).sum(-1))             # (S, P)
    px = 2 * _VIEW_X / size
    centres_x = (np.arange(size) + 0.5 - size / 2) * px
    py = (_VIEW_Y[1] - _VIEW_Y[0]) / size
    centres_y = _VIEW_Y[1] - (np.arange(size) + 0.5) * py
    dx = pts[..., 0][:, :, None] - centres_x[None, None, :]   # (S, P, W)
    dy = pts[..., 1][:, :, None] - centres_y[None, None, :]   # (S, P, H)
    gx = np.exp(-(dx * dx) / (2 * _SPLAT_SIGMA ** 2))
    gy = np.exp(-(dy * dy) / (2 * _SPLAT_SIGMA ** 2))
    occ = np.einsum("sph,spw->hws", gy, gx)
    depth = np.einsum("sph,spw,sp->hws", gy, gx, pts[..., 2])
    spd = np.einsum("sph,spw,sp->hws", gy, gx, speed * 4.0)
    return np.stack([occ, depth, spd]).astype(np.float32)


def _surface_points(rng, joints, velocity, weights, counts, jitter):
    """Sample points along bones; returns per-frame (positions, velocities)."""
    out = []
    for f, n in enumerate(counts):
        bone = rng.choice(len(BONES), size=n, p=weights[f])
        t = rng.random(n)[:, None]
        a, b = BONES[bone, 0], BONES[bone, 1]
        pos = joints[f, a] * (1 - t) + joints[f, b] * t + rng.normal(0, jitter, (n, 3))
        vel = velocity[f, a] * (1 - t) + velocity[f, b] * t
        out.append((pos, vel))
    return out


def _floor_returns(rng, n):
    """Static clutter: ground returns scattered around the subject's footprint."""
    xz = rng.uniform(-0.9, 0.9, (n, 2))
    y = np.abs(rng.normal(0, 0.03, (n, 1)))
    return np.concatenate([xz[:, :1], y, xz[:, 1:]], axis=1)


def generate_sample(
    spec: ActivitySpec,
    subject: int,
    environment: int,
    rng: np.random.Generator,
    config: GeneratorConfig | None = None,
) -> Sample:
    cfg = config or GeneratorConfig()
    S = cfg.frames
    style_amp, tempo = cfg.subject_style(subject)
    amp = rng.uniform(0.8, 1.2) * style_amp
    u0 = rng.uniform(-0.1, 0.1)
    speed = rng.uniform(0.85, 1.15) * tempo
    u = u0 + speed * np.arange(S + 1) / S
    j = skeleton(spec, u, amp)
    scale, dy, dz = cfg.subject_params(subject)
    j = j * scale + np.array([0.0, dy, dz])
    joints, velocity = j[:S], (j[1:] - j[:S]) * S   # per-clip units

    sigma = cfg.noise(environment)
    clutter = cfg.clutter(environment)

    video = render_video(joints, velocity, cfg.video_size)
    video += rng.normal(0, sigma, video.shape).astype(np.float32)

    bone_len = np.sqrt(((joints[:, BONES[:, 0]] - joints[:, BONES[:, 1]]) ** 2).sum(-1)) + 1e-3
    w_lidar = bone_len / bone_len.sum(-1, keepdims=True)
    lidar_counts = rng.poisson(cfg.lidar_points, S)
    lidar = []
    for pos, _ in _surface_points(rng, joints, velocity, w_lidar, lidar_counts, 0.02):
        pos = pos + rng.normal(0, sigma, pos.shape)
        nc = rng.poisson(clutter)
        junk = _floor_returns(rng, nc)
        lidar.append(np.concatenate([pos, junk]).astype(np.float32))

    bone_speed = 0.5 * (
        np.sqrt((velocity[:, BONES[:, 0]] ** 2).sum(-1)) + np.sqrt((velocity[:, BONES[:, 1]] ** 2).sum(-1))
    )
    w_radar = bone_len * (bone_speed + 0.05)
    w_radar = w_radar / w_radar.sum(-1, keepdims=True)
    radar_counts = rng.poisson(cfg.radar_points, S)
    radar = []
    for pos, vel in _surface_points(rng, joints, velocity, w_radar, radar_counts, 0.03):
        ray = _RADAR_POS - pos
        dist = np.sqrt((ray ** 2).sum(-1, keepdims=True))
        radial = (vel * ray / dist).sum(-1, keepdims=True)
        # noise is multiplicative on velocity so static bodies stay exactly zero
        radial = radial * (1 + rng.normal(0, sigma, radial.shape))
        intensity = rng.uniform(0.5, 1.5, radial.shape) / (1 + dist ** 2) * 10
        pos = pos + rng.normal(0, sigma + 0.03, pos.shape)
        nc = rng.poisson(clutter / 2)
        junk_pos = _floor_returns(rng, nc)
        junk = np.concatenate([junk_pos, np.zeros((nc, 1)), rng.uniform(0.1, 0.5, (nc, 1))], axis=1)
        frame = np.concatenate([np.concatenate([pos, radial, intensity], axis=1), junk])
        radar.append(frame.astype(np.float32))

    return Sample(video, lidar, radar, spec.class_id, subject, environment)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    registry: ClassRegistry
    config: GeneratorConfig
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.registry, self.config, [self.samples[i] for i in indices])


def generate_dataset(config: GeneratorConfig, specs: Sequence[ActivitySpec] | None = None) -> Dataset:
    """Deterministic in ``config``; every sample draws from its own RNG stream."""
    specs = list(specs) if specs is not None else activity_specs()
    registry = ClassRegistry(s.entry() for s in specs)
    samples = []
    for spec in specs:
        for i in range(config.samples_per_class):
            subject = i % config.subjects
            env = (i // config.subjects) % config.environments
            rng = np.random.default_rng([config.seed, spec.class_id, i])
            samples.append(generate_sample(spec, subject, env, rng, config))
    return Dataset(registry, config, samples)


class SplitError(ValueError):
    pass


def build_splits(dataset: Dataset, strategy: str, seed: int = 0) -> tuple[list[int], list[int]]:
    """Train / test indices. Unseen classes never enter the training side.

    random: seeded 80/20 per class. cross_subject: the last quarter of
    subjects (at least one) is held out. cross_environment: the last
    environment is held out. Test sets cover every class.
    """
    cfg = dataset.config
    seen = set(dataset.registry.seen_ids)
    train, test = [], []
    if strategy == "random":
        by_class: dict[int, list[int]] = {}
        for i, s in enumerate(dataset.samples):
            by_class.setdefault(s.class_id, []).append(i)
        rng = np.random.default_rng([seed, 104729])
        for cid in sorted(by_class):
            idx = by_class[cid]
            perm = [idx[k] for k in rng.permutation(len(idx))]
            cut = int(round(0.8 * len(idx)))
            if cid in seen:
                train += perm[:cut]
            test += perm[cut:]
    elif strategy == "cross_subject":
        if cfg.subjects < 2:
            raise SplitError("cross_subject split needs at least 2 subjects")
        held = max(1, cfg.subjects // 4)
        first_test = cfg.subjects - held
        for i, s in enumerate(dataset.samples):
            if s.subject >= first_test:
                test.append(i)
            elif s.class_id in seen:
                train.append(i)
    elif strategy == "cross_environment":
        if cfg.environments < 2:
            raise SplitError("cross_environment split needs at least 2 environments")
        for i, s in enumerate(dataset.samples):
            if s.environment == cfg.environments - 1:
                test.append(i)
            elif s.class_id in seen:
                train.append(i)
    else:
        raise SplitError(f"unknown split strategy {strategy!r}")
    return sorted(train), sorted(test)


# ---------------------------------------------------------------------------
# binary container
#
# magic "SLDS" | u32 version | u32 header_len | header JSON (utf-8)
# then per sample:
#   u16 class_id | u16 subject | u16 environment
#   f32[3*H*W*S] video (C, H, W, S order)
#   u32[S] lidar counts | f32[sum*3] lidar points
#   u32[S] radar counts | f32[sum*5] radar points
# then u32 CRC32 of everything after the header.
# All integers and floats are little-endian.

DATASET_MAGIC = b"SLDS"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Bad magic or unreadable header."""


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetTruncatedError(DatasetFormatError):
    """Fewer records or bytes than the header promises."""


class DatasetCorruptError(DatasetFormatError):
    """Checksum mismatch in the record payload."""


def _write_points(buf: list[bytes], frames: list[np.ndarray], width: int) -> None:
    counts = np.array([len(f) for f in frames], dtype="<u4")
    buf.append(counts.tobytes())
    for f in frames:
        buf.append(np.ascontiguousarray(f, dtype="<f4").reshape(-1, width).tobytes())


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    cfg = dataset.config
    header = {
        "count": len(dataset.samples),
        "frames": cfg.frames,
        "video_size": cfg.video_size,
        "lidar_width": 3,
        "radar_width": 5,
        "generator": cfg.to_dict(),
        "registry": json.loads(dataset.registry.to_json()),
    }
    head = json.dumps(header, sort_keys=True).encode()
    body: list[bytes] = []
    for s in dataset.samples:
        body.append(struct.pack("<HHH", s.class_id, s.subject, s.environment))
        body.append(np.ascontiguousarray(s.video, dtype="<f4").tobytes())
        _write_points(body, s.lidar, 3)
        _write_points(body, s.radar, 5)
    payload = b"".join(body)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data, self.pos = data, offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetTruncatedError(f"dataset ends early at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).copy()


def read_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    if len(data) < 12:
        raise DatasetTruncatedError(f"{path}: header truncated")
    version, head_len = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"{path}: dataset format version {version}, expected {DATASET_VERSION}")
    if 12 + head_len > len(data):
        raise DatasetTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[12:12 + head_len])
        cfg = GeneratorConfig.from_dict(header["generator"])
        registry = ClassRegistry.from_json(json.dumps(header["registry"]))
        count, S, size = header["count"], header["frames"], header["video_size"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable header: {exc}") from exc
    body_start = 12 + head_len
    if len(data) - body_start < 4:
        raise DatasetTruncatedError(f"{path}: payload truncated")
    r = _Reader(data[:-4], body_start)
    samples = []
    for _ in range(count):
        cid, subj, env = struct.unpack("<HHH", r.take(6))
        video = r.array("<f4", 3 * size * size * S).reshape(3, size, size, S)
        lidar_counts = r.array("<u4", S)
        lidar = [r.array("<f4", int(n) * 3).reshape(-1, 3) for n in lidar_counts]
        radar_counts = r.array("<u4", S)
        radar = [r.array("<f4", int(n) * 5).reshape(-1, 5) for n in radar_counts]
        samples.append(Sample(video, lidar, radar, cid, subj, env))
    if r.pos != len(data) - 4:
        raise DatasetCorruptError(f"{path}: {len(data) - 4 - r.pos} trailing bytes after {count} records")
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[body_start:-4]):
        raise DatasetCorruptError(f"{path}: payload checksum mismatch")
    return Dataset(registry, cfg, samples)
