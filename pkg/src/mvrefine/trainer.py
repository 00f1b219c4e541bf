"""Anchor matching, loss assembly, per-layer supervision, and the training loop.

Each ground-truth pose is assigned to its W nearest initial queries by pose
center; the assignment is a function of the (fixed) anchors, so it never
changes during a run. Matched queries receive a 3D L1 loss on their lifted
pose and a per-view 2D L1 loss on their refined projections (invisible
ground-truth joints are excluded from the 2D term); every query alive in a
layer enters a binary cross-entropy classification loss (target 1 when
matched). Losses are applied at every decoder layer under a configurable
weighting scheme, and gradients flow through the entire stack including the
triangulation backward pass.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from . import evalbench
from .errors import InsufficientAnchors, NonFiniteLoss
from .nnkernel import AdamState, adam_step, bce_loss, l1_loss, load_checkpoint, save_checkpoint
from .querydecoder import (CompositionalQuery, DecoderConfig, LayerSnapshot,
                           ModelParams, decode, decode_backward, init_queries)
from .scenesim import DatasetHandle, LoadedScene
from .skeleton import NUM_JOINTS, TPOSE_OFFSETS, pose_center


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    """Per ground-truth person: the anchor ids of its matched queries.

    matched[z] lists W anchor ids (in increasing distance); negatives holds
    every unmatched anchor id. Sets are disjoint: an anchor matches at most
    one person, the nearest one (ties to the lower person index).
    """

    matched: list[list[int]]
    negatives: np.ndarray

    def matched_set(self) -> set[int]:
        return {k for ids in self.matched for k in ids}


@dataclass
class TrainConfig:
    K: int = 256
    J: int = NUM_JOINTS
    L: int = 64
    T: int = 5
    W: int = 5
    N_layers: int = 4
    epsilon: float = 0.1
    lr: float = 4e-4
    epochs: int = 40
    layer_weight_mode: str = "uniform"
    init_mode: str = "grid"              # "grid" | "gt_noise"
    gt_noise_sigma_mm: float = 20.0
    seed: int = 0
    balance_2d: float = 1.0              # optional 2D/3D weight, 1 = as written
    num_samples: int = 4
    gtheta_hidden: int = 64
    fgamma_hidden: int = 256
    nms_radius_mm: float = 500.0
    analog_tau_mm: float = 100.0
    shared_layers: bool = False
    lift_mode: str = "triangulate"       # "triangulate" | "regress"
    fusion_mode: str = "eq4"
    val_interval: int = 1                # epochs between validation passes
    max_steps: int | None = None         # optional cap, for quick runs

    def __post_init__(self):
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError("epsilon must lie in [0, 1)")
        if self.lr < 0.0:
            raise ValueError("lr must be non-negative")

    def decoder_config(self, in_channels: int) -> DecoderConfig:
        return DecoderConfig(
            num_joints=self.J, feature_dim=self.L, in_channels=in_channels,
            num_samples=self.num_samples, num_layers=self.N_layers,
            epsilon=self.epsilon, nms_radius_mm=self.nms_radius_mm,
            shared_layers=self.shared_layers, lift_mode=self.lift_mode,
            fusion_mode=self.fusion_mode, gtheta_hidden=self.gtheta_hidden,
            fgamma_hidden=self.fgamma_hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# Matching and initialization
# ---------------------------------------------------------------------------

def match_anchors(gts: Sequence[np.ndarray], anchors: np.ndarray, W: int) -> Assignment:
    """Give each ground truth its W nearest anchors by pose-center distance.

    Conflicts go to the nearer ground truth (global greedy over sorted
    distances; ties break to the lower person index, then lower anchor id).
    """
    Z = len(gts)
    K = anchors.shape[0]
    if K < W * Z:
        raise InsufficientAnchors(f"{K} anchors cannot give {Z} persons {W} matches each")
    matched: list[list[int]] = [[] for _ in range(Z)]
    if Z > 0:
        gt_centers = np.stack([pose_center(g) for g in gts])
        anchor_centers = anchors.mean(axis=1)
        dist = np.linalg.norm(gt_centers[:, None, :] - anchor_centers[None, :, :], axis=2)
        order = sorted(((dist[z, k], z, k) for z in range(Z) for k in range(K)))
        taken = np.zeros(K, dtype=bool)
        assigned = 0
        for _, z, k in order:
            if assigned == Z * W:
                break
            if taken[k] or len(matched[z]) >= W:
                continue
            matched[z].append(k)
            taken[k] = True
            assigned += 1
        negatives = np.flatnonzero(~taken)
    else:
        negatives = np.arange(K)
    return Assignment(matched=matched, negatives=negatives)


def denoise_init(gts: Sequence[np.ndarray], sigma_mm: float, rng: np.random.Generator,
                 space, K: int, tpose: np.ndarray, embeddings) -> list[CompositionalQuery]:
    """Grid initialization with one anchor per ground truth snapped to a
    noise-corrupted copy of it (the refiner-style start); the remaining
    anchors stay on the grid as negatives, keeping the query count fixed."""
    queries = init_queries(space, K, tpose, embeddings)
    centers = np.stack([q.geometry.mean(axis=0) for q in queries])
    snapped = np.zeros(K, dtype=bool)
    for gt in gts:
        gt = np.asarray(gt, dtype=float)
        d = np.linalg.norm(centers - pose_center(gt), axis=1)
        d[snapped] = np.inf
        k = int(np.argmin(d))
        noise = rng.normal(0.0, sigma_mm, size=gt.shape) if sigma_mm > 0 else 0.0
        queries[k].geometry = gt + noise
        snapped[k] = True
    return queries


def layer_weights(mode: str, n_layers: int) -> np.ndarray:
    """Loss weight per layer, last layer always 1."""
    if mode == "uniform":
        return np.ones(n_layers)
    if mode == "exp_decay":
        return 0.5 ** np.arange(n_layers - 1, -1, -1)
    if mode == "linear_decay":
        return np.arange(1, n_layers + 1) / n_layers
    if mode == "final_only":
        w = np.zeros(n_layers)
        w[-1] = 1.0
        return w
    raise ValueError(f"unknown layer weight mode {mode!r}")


# ---------------------------------------------------------------------------
# Losses over decoder snapshots
# ---------------------------------------------------------------------------

def pose_loss(snapshot: LayerSnapshot, assignment: Assignment,
              gt3d: Sequence[np.ndarray], gt2d, balance_2d: float = 1.0,
              with_grads: bool = False):
    """Matched-query pose loss for one layer: 3D L1 plus per-view 2D L1.

    The 2D term compares refined projections against exact ground-truth 2D
    and skips invisible joints. Matched queries filtered out at an earlier
    layer simply contribute nothing here. Returns (loss3d, loss2d) or, with
    gradients, (loss3d, loss2d, d_geometry, d_refined2d) where the balance
    factor is already folded into both the 2D value and gradient.
    """
    a = snapshot.anchor_indices
    d_geom = np.zeros_like(snapshot.geometry)
    d_ref = np.zeros_like(snapshot.refined2d)
    loss3d = 0.0
    loss2d = 0.0
    pos = {int(k): i for i, k in enumerate(a)}
    T = snapshot.refined2d.shape[2]
    for z, anchor_ids in enumerate(assignment.matched):
        gt = np.asarray(gt3d[z], dtype=float)
        for k in anchor_ids:
            q = pos.get(int(k))
            if q is None:
                continue
            l3, g3 = l1_loss(snapshot.geometry[q], gt)
            loss3d += l3
            d_geom[q] += g3
            for t in range(T):
                vis = gt2d.visibility[z, t]
                if not vis.any():
                    continue
                l2, g2 = l1_loss(snapshot.refined2d[q, vis, t, :], gt2d.points[z, t, vis])
                loss2d += balance_2d * l2
                d_ref[q, vis, t, :] += balance_2d * g2
    if with_grads:
        return loss3d, loss2d, d_geom, d_ref
    return loss3d, loss2d


def classification_loss(scores: np.ndarray, anchor_indices: np.ndarray,
                        assignment: Assignment, with_grads: bool = False):
    """Mean binary cross-entropy with target 1 on matched queries, 0 otherwise."""
    if len(scores) == 0:
        return (0.0, np.zeros(0)) if with_grads else 0.0
    matched = assignment.matched_set()
    targets = np.array([1.0 if int(k) in matched else 0.0 for k in anchor_indices])
    total, grad = bce_loss(scores, targets)
    loss = total / len(scores)
    if with_grads:
        return loss, grad / len(scores)
    return loss


def scene_loss_and_grads(snapshots: list[LayerSnapshot], assignment: Assignment,
                         gt3d, gt2d, weights: np.ndarray, balance_2d: float):
    """Weighted per-layer losses and the gradient arrays decode_backward wants.

    Returns (loss3d, loss2d, loss_cls, layer_grads); the component values are
    already layer-weighted so their sum is the training objective.
    """
    total3d = total2d = total_cls = 0.0
    layer_grads = []
    for i, snap in enumerate(snapshots):
        w = float(weights[i])
        l3, l2, d_geom, d_ref = pose_loss(snap, assignment, gt3d, gt2d,
                                          balance_2d, with_grads=True)
        lc, d_score = classification_loss(snap.scores, snap.anchor_indices,
                                          assignment, with_grads=True)
        total3d += w * l3
        total2d += w * l2
        total_cls += w * lc
        layer_grads.append({
            "geometry": w * d_geom if w != 0.0 else None,
            "refined2d": w * d_ref if w != 0.0 else None,
            "score": w * d_score if w != 0.0 else None,
        })
    return total3d, total2d, total_cls, layer_grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path, params: ModelParams, extra_meta: dict | None = None) -> None:
    meta = {"decoder_config": asdict(params.config),
            "query_capacity": params.query_capacity}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, params.to_flat(), meta)


def load_model(path) -> ModelParams:
    values, meta = load_checkpoint(path)
    cfg = DecoderConfig(**meta["decoder_config"])
    params = ModelParams.init(np.random.default_rng(0), cfg, meta["query_capacity"])
    params.load_flat(values)
    return params


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    checkpoint_path: str
    metrics_path: str
    final_val_mpjpe: float | None = None
    final_val_ap: float | None = None


def _fmt(x: float) -> str:
    return repr(float(x))


class _SceneCache:
    """Keeps parsed scenes in memory; feature maps re-render per access."""

    def __init__(self, handle: DatasetHandle):
        self.handle = handle
        self._scenes: dict[int, LoadedScene] = {}

    def get(self, sid: int) -> LoadedScene:
        if sid not in self._scenes:
            self._scenes[sid] = self.handle.load_scene(sid)
        return self._scenes[sid]


def _training_queries(cfg: TrainConfig, params: ModelParams, space, loaded: LoadedScene,
                      base_queries: list[CompositionalQuery]):
    if cfg.init_mode == "grid":
        return base_queries
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, loaded.scene_id]))
    return denoise_init(loaded.scene.persons, cfg.gt_noise_sigma_mm, rng, space,
                        cfg.K, TPOSE_OFFSETS, params.embedding_table())


def train(cfg: TrainConfig, handle: DatasetHandle, out_dir,
          log_every: int = 1) -> TrainResult:
    """Train a model on the dataset's train split; deterministic under
    (cfg, dataset). Writes metrics.csv and checkpoint.npz under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    if len(handle.rig) != cfg.T:
        cfg = replace(cfg, T=len(handle.rig))
    dec_cfg = cfg.decoder_config(handle.cfg.channels)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    params = ModelParams.init(init_rng, dec_cfg, cfg.K)
    flat = params.to_flat()
    state = AdamState.zeros_like(flat)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    space = handle.cfg.space()
    base_queries = init_queries(space, cfg.K, TPOSE_OFFSETS, params.embedding_table())
    base_anchors = np.stack([q.geometry for q in base_queries])
    weights = layer_weights(cfg.layer_weight_mode, cfg.N_layers)
    cache = _SceneCache(handle)
    grid_assignments: dict[int, Assignment] = {}

    rows: list[str] = []
    step = 0
    t_start = time.perf_counter()
    final_val_mpjpe = final_val_ap = None
    train_ids = handle.scene_ids("train")
    stop = False
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(train_ids)
        for sid in order:
            loaded = cache.get(int(sid))
            maps = handle.feature_maps(loaded)
            queries = _training_queries(cfg, params, space, loaded, base_queries)
            if cfg.init_mode == "grid":
                if sid not in grid_assignments:
                    grid_assignments[sid] = match_anchors(
                        loaded.scene.persons, base_anchors, cfg.W)
                assignment = grid_assignments[sid]
            else:
                anchors = np.stack([q.geometry for q in queries])
                assignment = match_anchors(loaded.scene.persons, anchors, cfg.W)

            result = decode(queries, maps, loaded.scene.rig, params,
                            apply_nms=False, want_tape=True)
            l3, l2, lc, layer_grads = scene_loss_and_grads(
                result.snapshots, assignment, loaded.scene.persons, loaded.gt2d,
                weights, cfg.balance_2d)
            total = l3 + l2 + lc
            if not np.isfinite(total):
                raise NonFiniteLoss(f"non-finite loss at step {step} (scene {sid})", step)
            grads = decode_backward(params, maps, loaded.scene.rig, result.tape,
                                    layer_grads)
            flat, state = adam_step(flat, grads, state, lr=cfg.lr)
            params.load_flat(flat)
            if step % log_every == 0:
                rows.append(f"{epoch},{step},{_fmt(total)},{_fmt(l3)},{_fmt(l2)},{_fmt(lc)},,")
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break

        if (epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1 or stop:
            init = "grid" if cfg.init_mode == "grid" else "snap"
            rep = evalbench.evaluate_split(
                params, handle, "val", analog_tau=cfg.analog_tau_mm, init=init,
                init_sigma_mm=cfg.gt_noise_sigma_mm, init_seed=cfg.seed)
            final_val_mpjpe = rep.mpjpe_mm
            final_val_ap = rep.ap_analog
            mp = _fmt(rep.mpjpe_mm) if rep.mpjpe_mm is not None else ""
            rows.append(f"{epoch},{step},,,,,{mp},{_fmt(rep.ap_analog)}")
        if stop:
            break

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w") as fh:
        fh.write("epoch,step,loss_total,loss_pose_3d,loss_pose_2d,loss_cls,"
                 "val_mpjpe,val_ap25_analog\n")
        fh.write("\n".join(rows) + "\n")
    checkpoint_path = os.path.join(out_dir, "checkpoint.npz")
    save_model(checkpoint_path, params,
               {"train_config": cfg.to_dict(),
                "train_seconds": time.perf_counter() - t_start})
    return TrainResult(params=params, checkpoint_path=checkpoint_path,
                       metrics_path=metrics_path, final_val_mpjpe=final_val_mpjpe,
                       final_val_ap=final_val_ap)


# ---------------------------------------------------------------------------
# Whole-stack gradient check support
# ---------------------------------------------------------------------------

def loss_and_grad_flat(params: ModelParams, maps, rig, queries, assignment,
                       gt3d, gt2d, weights, balance_2d: float = 1.0,
                       epsilon: float = 0.0):
    """Total training loss and its flat gradient vector for one scene.

    Evaluated with filtering disabled by default so the loss stays smooth
    around the operating point (the filter is a hard selection).
    """
    result = decode(queries, maps, rig, params, apply_nms=False, want_tape=True,
                    epsilon=epsilon)
    l3, l2, lc, layer_grads = scene_loss_and_grads(result.snapshots, assignment,
                                                   gt3d, gt2d, weights, balance_2d)
    grads = decode_backward(params, maps, rig, result.tape, layer_grads)
    return l3 + l2 + lc, grads


def flatten_params(params: ModelParams):
    """(flat vector, unflatten function, names, slices) for gradient checks."""
    tensors = params.to_flat()
    names = list(tensors)
    sizes = [tensors[n].size for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    theta = np.concatenate([tensors[n].ravel() for n in names])

    def unflatten(vec: np.ndarray) -> dict[str, np.ndarray]:
        return {n: vec[offsets[i]:offsets[i + 1]].reshape(tensors[n].shape)
                for i, n in enumerate(names)}

    slices = {n: (int(offsets[i]), int(offsets[i + 1])) for i, n in enumerate(names)}
    return theta, unflatten, names, slices
