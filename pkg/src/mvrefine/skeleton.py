"""Canonical 15-joint body model: T-pose offsets, kinematic tree, limb table.

Offsets are metric (mm) relative to a person center on the ground plane, so
placing the T-pose at a ground point means adding that point's (x, y, 0) to
every row. Arms extend along +/- x in the canonical frame.
"""

from __future__ import annotations

import numpy as np

JOINT_NAMES = (
    "root",
    "neck",
    "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
)

NUM_JOINTS = len(JOINT_NAMES)

_J = {name: i for i, name in enumerate(JOINT_NAMES)}

# (x, y, z) mm; z is height above ground.
TPOSE_OFFSETS = np.array([
    [0.0, 0.0, 1000.0],      # root
    [0.0, 0.0, 1450.0],      # neck
    [0.0, 0.0, 1650.0],      # head
    [200.0, 0.0, 1400.0],    # left_shoulder
    [450.0, 0.0, 1400.0],    # left_elbow
    [700.0, 0.0, 1400.0],    # left_wrist
    [-200.0, 0.0, 1400.0],   # right_shoulder
    [-450.0, 0.0, 1400.0],   # right_elbow
    [-700.0, 0.0, 1400.0],   # right_wrist
    [100.0, 0.0, 950.0],     # left_hip
    [100.0, 0.0, 500.0],     # left_knee
    [100.0, 0.0, 80.0],      # left_ankle
    [-100.0, 0.0, 950.0],    # right_hip
    [-100.0, 0.0, 500.0],    # right_knee
    [-100.0, 0.0, 80.0],     # right_ankle
])
TPOSE_OFFSETS.flags.writeable = False

# Kinematic tree as (parent, child) joint indices; root is the tree root.
BONES = tuple(
    (_J[p], _J[c])
    for p, c in (
        ("root", "neck"),
        ("neck", "head"),
        ("neck", "left_shoulder"),
        ("left_shoulder", "left_elbow"),
        ("left_elbow", "left_wrist"),
        ("neck", "right_shoulder"),
        ("right_shoulder", "right_elbow"),
        ("right_elbow", "right_wrist"),
        ("root", "left_hip"),
        ("left_hip", "left_knee"),
        ("left_knee", "left_ankle"),
        ("root", "right_hip"),
        ("right_hip", "right_knee"),
        ("right_knee", "right_ankle"),
    )
)

# Limbs scored by the percentage-of-correct-parts metric: the named subset of
# bones with unambiguous endpoints (upper/lower arms and legs, torso, head).
PCP_LIMBS = tuple(
    (_J[a], _J[b])
    for a, b in (
        ("root", "neck"),
        ("neck", "head"),
        ("left_shoulder", "left_elbow"),
        ("left_elbow", "left_wrist"),
        ("right_shoulder", "right_elbow"),
        ("right_elbow", "right_wrist"),
        ("left_hip", "left_knee"),
        ("left_knee", "left_ankle"),
        ("right_hip", "right_knee"),
        ("right_knee", "right_ankle"),
    )
)


def bone_lengths(pose: np.ndarray) -> np.ndarray:
    """Euclidean length of every kinematic bone for a (J, 3) pose."""
    p = np.asarray(pose, dtype=float)
    return np.array([np.linalg.norm(p[c] - p[a]) for a, c in BONES])


CANONICAL_BONE_LENGTHS = bone_lengths(TPOSE_OFFSETS)
CANONICAL_BONE_LENGTHS.flags.writeable = False


def pose_center(pose: np.ndarray) -> np.ndarray:
    """Pose center used by matching and suppression: the mean of all joints."""
    return np.asarray(pose, dtype=float).mean(axis=-2)


def tpose_at(center_xy) -> np.ndarray:
    """T-pose joints (J, 3) for a ground-plane center (x, y)."""
    out = TPOSE_OFFSETS.copy()
    out[:, 0] += center_xy[0]
    out[:, 1] += center_xy[1]
    return out
