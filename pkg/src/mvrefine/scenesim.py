"""Synthetic multi-person scenes and the feature maps that replace a CNN backbone.

Scenes articulate the canonical skeleton inside a ground-plane space and are
rendered per view as C-channel grids: channels 0..J-1 carry Gaussian
heatmaps at the (optionally jittered) projected joint positions of every
visible person; the remaining channels are seeded noise. Ground-truth 2D
stays exact while the rendered evidence carries the observation noise, so
supervision targets are separate from what the appearance module sees.

Everything is a pure function of (config, seed): scene z of a dataset uses
the seed sequence (cfg.seed, z), and rendering derives its own stream from
the scene seed, so maps never need to be stored to be reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .camgeom import (ArrangementSpec, CameraModel, GroundPlaneSpec,
                      load_calibration, make_arrangement, project_points,
                      save_calibration)
from .errors import ParseError
from .querydecoder import FeatureMapSet
from .skeleton import BONES, NUM_JOINTS, TPOSE_OFFSETS

RENDER_SALT = 0x5EED
MIN_CENTER_SEPARATION_MM = 600.0


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class OcclusionConfig:
    """Observation corruption: per joint-view dropout, per-view occluder
    rectangles (pixel x0, y0, x1, y1), and jitter applied to heatmap centers
    only (ground truth stays exact)."""

    dropout_prob: float = 0.0
    occluder_boxes: dict[int, list[tuple[float, float, float, float]]] = field(default_factory=dict)
    noise_sigma_px: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.dropout_prob <= 1.0):
            raise ValueError(f"dropout_prob {self.dropout_prob} outside [0, 1]")
        if not np.isfinite(self.noise_sigma_px) or self.noise_sigma_px < 0:
            raise ValueError("noise_sigma_px must be finite and non-negative")

    def to_dict(self) -> dict:
        return {
            "dropout_prob": self.dropout_prob,
            "occluder_boxes": {str(k): [list(b) for b in v] for k, v in self.occluder_boxes.items()},
            "noise_sigma_px": self.noise_sigma_px,
        }

    @staticmethod
    def from_dict(d: dict) -> "OcclusionConfig":
        return OcclusionConfig(
            dropout_prob=d.get("dropout_prob", 0.0),
            occluder_boxes={int(k): [tuple(b) for b in v]
                            for k, v in d.get("occluder_boxes", {}).items()},
            noise_sigma_px=d.get("noise_sigma_px", 0.0),
        )


@dataclass
class Scene:
    """Ground truth for one time instant: Z posed persons plus the rig."""

    persons: list[np.ndarray]          # each (J, 3) mm
    rig: list[CameraModel]
    space: GroundPlaneSpec
    seed: int

    @property
    def person_count(self) -> int:
        return len(self.persons)


@dataclass
class GroundTruth2D:
    """Exact projections plus visibility per (person, view, joint)."""

    points: np.ndarray        # (Z, T, J, 2) px; zero where never projectable
    visibility: np.ndarray    # (Z, T, J) bool


@dataclass
class PosePrior:
    """Articulation budget for skeleton sampling, radians per bone."""

    torso_angle: float = 0.15
    limb_angle: float = 0.5


# ---------------------------------------------------------------------------
# Skeleton sampling
# ---------------------------------------------------------------------------

def _rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


_CHILDREN: dict[int, list[int]] = {}
for _p, _c in BONES:
    _CHILDREN.setdefault(_p, []).append(_c)


def _subtree(joint: int) -> list[int]:
    out = [joint]
    for child in _CHILDREN.get(joint, []):
        out.extend(_subtree(child))
    return out


_TORSO_BONES = {(0, 1), (0, 9), (0, 12)}   # spine and hips articulate less


def sample_skeleton(rng: np.random.Generator, space: GroundPlaneSpec,
                    pose_prior: PosePrior | None = None) -> np.ndarray:
    """Random articulated pose: T-pose at a random center and yaw, each bone's
    subtree rotated by a bounded random rotation about the parent joint.

    Rotations are isometries, so bone lengths are preserved exactly. Poses
    leaving the capture volume are rejection-sampled away.
    """
    prior = pose_prior or PosePrior()
    for _ in range(1000):
        pose = TPOSE_OFFSETS.copy()
        for parent, child in BONES:
            budget = prior.torso_angle if (parent, child) in _TORSO_BONES else prior.limb_angle
            if budget <= 0.0:
                continue
            axis = rng.normal(size=3)
            angle = rng.uniform(-budget, budget)
            R = _rotation_from_axis_angle(axis, angle)
            pivot = pose[parent].copy()
            for j in _subtree(child):
                pose[j] = pivot + R @ (pose[j] - pivot)
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        Rz = _rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
        pose = pose @ Rz.T
        cx = rng.uniform(space.x_min, space.x_max)
        cy = rng.uniform(space.y_min, space.y_max)
        pose[:, 0] += cx
        pose[:, 1] += cy
        if bool(space.contains(pose).all()):
            return pose
    raise RuntimeError("failed to sample an in-bounds skeleton in 1000 attempts")


def make_scene(rng: np.random.Generator, space: GroundPlaneSpec,
               rig: list[CameraModel], person_range: tuple[int, int],
               seed: int, pose_prior: PosePrior | None = None) -> Scene:
    """Sample persons with mutually separated centers."""
    count = int(rng.integers(person_range[0], person_range[1] + 1))
    persons: list[np.ndarray] = []
    guard = 0
    while len(persons) < count:
        pose = sample_skeleton(rng, space, pose_prior)
        center = pose.mean(axis=0)[:2]
        if all(np.linalg.norm(center - p.mean(axis=0)[:2]) > MIN_CENTER_SEPARATION_MM
               for p in persons):
            persons.append(pose)
        guard += 1
        if guard > 200 * count:
            break
    return Scene(persons=persons, rig=rig, space=space, seed=seed)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _splat(channel: np.ndarray, cx: float, cy: float, sigma: float) -> None:
    """Add a unit-peak Gaussian at (cx, cy) into a (H, W) channel."""
    H, W = channel.shape
    r = int(np.ceil(4.0 * sigma))
    x0, x1 = int(np.floor(cx)) - r, int(np.floor(cx)) + r + 1
    y0, y1 = int(np.floor(cy)) - r, int(np.floor(cy)) + r + 1
    x0c, x1c = max(x0, 0), min(x1, W)
    y0c, y1c = max(y0, 0), min(y1, H)
    if x0c >= x1c or y0c >= y1c:
        return
    xs = np.arange(x0c, x1c) - cx
    ys = np.arange(y0c, y1c) - cy
    channel[y0c:y1c, x0c:x1c] += np.exp(
        -(xs[None, :] ** 2 + ys[:, None] ** 2) / (2.0 * sigma * sigma))


def render_feature_maps(scene: Scene, occ: OcclusionConfig | None = None, *,
                        heatmap_sigma_px: float = 2.0, noise_channels: int = 4,
                        noise_amp: float = 0.25,
                        rng: np.random.Generator | None = None):
    """Render per-view feature grids and the exact 2D ground truth.

    Channels 0..J-1 are joint heatmaps (all persons added together); the rest
    is noise. Joints dropped out, occluded by a box, behind the camera, or
    projecting outside the image are flagged invisible and contribute no
    signal. Returns (FeatureMapSet, GroundTruth2D).
    """
    occ = occ or OcclusionConfig()
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([scene.seed, RENDER_SALT]))
    Z = scene.person_count
    T = len(scene.rig)
    J = NUM_JOINTS
    C = J + noise_channels

    points = np.zeros((Z, T, J, 2))
    vis = np.zeros((Z, T, J), dtype=bool)
    # one dropout/jitter draw per (person, view, joint), independent of geometry,
    # so rendering stays deterministic under rig changes of the same size
    dropout = rng.random((Z, T, J)) < occ.dropout_prob if occ.dropout_prob > 0 else np.zeros((Z, T, J), bool)
    jitter = (rng.normal(0.0, occ.noise_sigma_px, size=(Z, T, J, 2))
              if occ.noise_sigma_px > 0 else np.zeros((Z, T, J, 2)))

    maps = []
    for t, cam in enumerate(scene.rig):
        w_img, h_img = cam.image_size
        grid = np.zeros((h_img, w_img, C))
        boxes = occ.occluder_boxes.get(t, [])
        for z, pose in enumerate(scene.persons):
            pix, depth = project_points(pose, cam.projection)
            in_front = depth > 1e-9
            points[z, t][in_front] = pix[in_front]
            inside = (in_front & (pix[:, 0] >= 0) & (pix[:, 0] <= w_img - 1)
                      & (pix[:, 1] >= 0) & (pix[:, 1] <= h_img - 1))
            boxed = np.zeros(J, dtype=bool)
            for (bx0, by0, bx1, by1) in boxes:
                boxed |= ((pix[:, 0] >= bx0) & (pix[:, 0] <= bx1)
                          & (pix[:, 1] >= by0) & (pix[:, 1] <= by1)) & in_front
            visible = inside & ~boxed & ~dropout[z, t]
            vis[z, t] = visible
            for j in np.flatnonzero(visible):
                cx, cy = pix[j] + jitter[z, t, j]
                _splat(grid[:, :, j], cx, cy, heatmap_sigma_px)
        for (bx0, by0, bx1, by1) in boxes:
            ix0, iy0 = max(int(np.ceil(bx0)), 0), max(int(np.ceil(by0)), 0)
            ix1, iy1 = min(int(np.floor(bx1)) + 1, w_img), min(int(np.floor(by1)) + 1, h_img)
            if ix0 < ix1 and iy0 < iy1:
                grid[iy0:iy1, ix0:ix1, :J] = 0.0
        if noise_channels > 0:
            grid[:, :, J:] = noise_amp * rng.normal(size=(h_img, w_img, noise_channels))
        maps.append(grid)
    return FeatureMapSet(maps=maps), GroundTruth2D(points=points, visibility=vis)


# ---------------------------------------------------------------------------
# Dataset generation and loading
# ---------------------------------------------------------------------------

FORMAT_TAG = "mvrefine-dataset-v1"


@dataclass
class DatasetConfig:
    name: str = "desk"
    train_scenes: int = 500
    val_scenes: int = 50
    test_scenes: int = 50
    persons_min: int = 1
    persons_max: int = 5
    space_halfwidth_mm: float = 4000.0
    camera_count: int = 5
    rig_radius_mm: float = 9000.0
    rig_height_range_mm: tuple[float, float] = (2200.0, 3200.0)
    rig_azimuth_deg: tuple[float, float] = (0.0, 360.0)
    image_size: tuple[int, int] = (96, 96)
    heatmap_sigma_px: float = 2.0
    noise_channels: int = 4
    noise_amp: float = 0.25
    occlusion: OcclusionConfig = field(default_factory=lambda: OcclusionConfig(
        dropout_prob=0.05, noise_sigma_px=0.5))
    torso_angle: float = 0.15
    limb_angle: float = 0.5
    seed: int = 0

    @property
    def channels(self) -> int:
        return NUM_JOINTS + self.noise_channels

    def space(self) -> GroundPlaneSpec:
        return GroundPlaneSpec.square(self.space_halfwidth_mm)

    def arrangement(self) -> ArrangementSpec:
        return ArrangementSpec(
            name=f"{self.name}-rig", camera_count=self.camera_count,
            radius_mm=self.rig_radius_mm, height_range_mm=self.rig_height_range_mm,
            azimuth_coverage_deg=self.rig_azimuth_deg, look_at=(0.0, 0.0, 1000.0),
            seed=self.seed, image_size=self.image_size,
            capture_halfwidth_mm=self.space_halfwidth_mm * 1.05,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occlusion"] = self.occlusion.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetConfig":
        d = dict(d)
        if "occlusion" in d and isinstance(d["occlusion"], dict):
            d["occlusion"] = OcclusionConfig.from_dict(d["occlusion"])
        for key in ("rig_height_range_mm", "rig_azimuth_deg", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        return DatasetConfig(**d)


def _scene_rng(cfg_seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed, scene_id]))


def build_scene(cfg: DatasetConfig, rig: list[CameraModel], scene_id: int) -> Scene:
    rng = _scene_rng(cfg.seed, scene_id)
    prior = PosePrior(torso_angle=cfg.torso_angle, limb_angle=cfg.limb_angle)
    scene = make_scene(rng, cfg.space(), rig, (cfg.persons_min, cfg.persons_max),
                       seed=scene_id, pose_prior=prior)
    return scene


def generate_dataset(cfg: DatasetConfig, out_dir, write_maps: bool = False) -> str:
    """Write manifest, calibration, scenes and ground truth (and, optionally,
    rendered maps) under out_dir. Deterministic for a given (cfg, seed)."""
    os.makedirs(out_dir, exist_ok=True)
    rig = make_arrangement(cfg.arrangement())
    save_calibration(rig, os.path.join(out_dir, "calibration.json"))

    n_total = cfg.train_scenes + cfg.val_scenes + cfg.test_scenes
    splits = {
        "train": list(range(cfg.train_scenes)),
        "val": list(range(cfg.train_scenes, cfg.train_scenes + cfg.val_scenes)),
        "test": list(range(cfg.train_scenes + cfg.val_scenes, n_total)),
    }
    manifest = {"format": FORMAT_TAG, "config": cfg.to_dict(), "splits": splits}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    scenes_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    for sid in range(n_total):
        scene = build_scene(cfg, rig, sid)
        doc = {"seed": sid, "persons": [p.tolist() for p in scene.persons]}
        with open(os.path.join(scenes_dir, f"scene_{sid:05d}.json"), "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")
        maps, gt2d = render_feature_maps(
            scene, cfg.occlusion, heatmap_sigma_px=cfg.heatmap_sigma_px,
            noise_channels=cfg.noise_channels, noise_amp=cfg.noise_amp)
        gt_doc = {"points": gt2d.points.tolist(), "visibility": gt2d.visibility.tolist()}
        with open(os.path.join(scenes_dir, f"gt2d_{sid:05d}.json"), "w") as fh:
            json.dump(gt_doc, fh)
            fh.write("\n")
        if write_maps:
            np.savez_compressed(
                os.path.join(scenes_dir, f"maps_{sid:05d}.npz"),
                **{f"view{t}": m for t, m in enumerate(maps.maps)})
    return str(out_dir)


@dataclass
class LoadedScene:
    scene: Scene
    gt2d: GroundTruth2D
    scene_id: int


class DatasetHandle:
    """Random access into a generated dataset; maps render on demand."""

    def __init__(self, root: str):
        self.root = str(root)
        manifest_path = os.path.join(self.root, "manifest.json")
        if not os.path.exists(manifest_path):
            raise ParseError(f"{manifest_path}: not found")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if manifest.get("format") != FORMAT_TAG:
            raise ParseError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
        self.manifest = manifest
        self.cfg = DatasetConfig.from_dict(manifest["config"])
        self.rig = load_calibration(os.path.join(self.root, "calibration.json"))
        self.splits: dict[str, list[int]] = {k: list(v) for k, v in manifest["splits"].items()}

    def scene_ids(self, split: str) -> list[int]:
        return self.splits[split]

    def load_scene(self, scene_id: int, rig: list[CameraModel] | None = None) -> LoadedScene:
        rig = rig if rig is not None else self.rig
        path = os.path.join(self.root, "scenes", f"scene_{scene_id:05d}.json")
        with open(path) as fh:
            doc = json.load(fh)
        persons = [np.asarray(p, dtype=float) for p in doc["persons"]]
        scene = Scene(persons=persons, rig=rig, space=self.cfg.space(), seed=doc["seed"])
        gt_path = os.path.join(self.root, "scenes", f"gt2d_{scene_id:05d}.json")
        if rig is self.rig and os.path.exists(gt_path):
            with open(gt_path) as fh:
                gt_doc = json.load(fh)
            gt2d = GroundTruth2D(points=np.asarray(gt_doc["points"], dtype=float),
                                 visibility=np.asarray(gt_doc["visibility"], dtype=bool))
            self._assert_gt_consistency(scene, gt2d, scene_id)
        else:
            _, gt2d = self.render(scene)
        return LoadedScene(scene=scene, gt2d=gt2d, scene_id=scene_id)

    def render(self, scene: Scene, occ: OcclusionConfig | None = None):
        cfg = self.cfg
        return render_feature_maps(
            scene, occ if occ is not None else cfg.occlusion,
            heatmap_sigma_px=cfg.heatmap_sigma_px, noise_channels=cfg.noise_channels,
            noise_amp=cfg.noise_amp)

    def feature_maps(self, loaded: LoadedScene, occ: OcclusionConfig | None = None):
        maps_path = os.path.join(self.root, "scenes", f"maps_{loaded.scene_id:05d}.npz")
        if occ is None and loaded.scene.rig is self.rig and os.path.exists(maps_path):
            with np.load(maps_path) as data:
                return FeatureMapSet(maps=[data[f"view{t}"].copy()
                                           for t in range(len(loaded.scene.rig))])
        maps, _ = self.render(loaded.scene, occ)
        return maps

    def _assert_gt_consistency(self, scene: Scene, gt2d: GroundTruth2D, scene_id: int) -> None:
        for z, pose in enumerate(scene.persons):
            for t, cam in enumerate(scene.rig):
                mask = gt2d.visibility[z, t]
                if not mask.any():
                    continue
                pix, _ = project_points(pose[mask], cam.projection)
                if not np.array_equal(pix, gt2d.points[z, t][mask]):
                    raise ParseError(
                        f"scene {scene_id}: stored 2D ground truth does not match "
                        f"projection for person {z}, view {t}")


def load_dataset(root) -> DatasetHandle:
    return DatasetHandle(root)
