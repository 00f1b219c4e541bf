"""Finite-difference verification of every gradient path in the stack.

Three stages: the triangulation backward pass on random noisy instances, the
full-size network architectures, and the complete per-layer training loss on
a two-person/three-camera micro-scene differentiated w.r.t. every parameter
group. Used by the `gradcheck` CLI command and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkernel as nn
from .camgeom import ArrangementSpec, GroundPlaneSpec, make_arrangement, project
from .querydecoder import DecoderConfig, ModelParams, init_queries
from .scenesim import OcclusionConfig, make_scene, render_feature_maps
from .skeleton import TPOSE_OFFSETS
from .trainer import (TrainConfig, layer_weights, loss_and_grad_flat, match_anchors,
                      flatten_params)
from .triangulation import ViewObservation, triangulate, triangulate_vjp


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def check_triangulation_vjp(n_instances: int = 100, seed: int = 0,
                            tolerance: float = 1e-5) -> SuiteResult:
    """VJP vs central differences (1e-4 px / 1e-5 confidence steps)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        n_cams = int(rng.integers(3, 7))
        spec = ArrangementSpec(
            name="chk", camera_count=n_cams, radius_mm=float(rng.uniform(6000, 11000)),
            height_range_mm=(2200.0, 3200.0), azimuth_coverage_deg=(0.0, 360.0),
            look_at=(0.0, 0.0, 1000.0), seed=int(rng.integers(1 << 30)),
            image_size=(128, 128), capture_halfwidth_mm=3000.0)
        cams = make_arrangement(spec)
        p = np.array([rng.uniform(-2500, 2500), rng.uniform(-2500, 2500),
                      rng.uniform(200, 2000)])
        obs = [ViewObservation(project(p, c) + rng.normal(0, 2.0, 2),
                               float(rng.uniform(0.2, 1.0)), t)
               for t, c in enumerate(cams)]
        upstream = rng.normal(size=3)
        g_pts, g_conf = triangulate_vjp(obs, cams, upstream)

        def value(o):
            return float(triangulate(o, cams).point3d @ upstream)

        for t in range(n_cams):
            for axis in range(2):
                h = 1e-4
                plus = [ViewObservation(o.point2d + h * (np.arange(2) == axis) * (t == s),
                                        o.confidence, o.camera_index)
                        for s, o in enumerate(obs)]
                minus = [ViewObservation(o.point2d - h * (np.arange(2) == axis) * (t == s),
                                         o.confidence, o.camera_index)
                         for s, o in enumerate(obs)]
                fd = (value(plus) - value(minus)) / (2 * h)
                worst = max(worst, abs(fd - g_pts[t][axis]) / max(1.0, abs(fd)))
            h = 1e-5
            plus = [ViewObservation(o.point2d, o.confidence + h * (t == s), o.camera_index)
                    for s, o in enumerate(obs)]
            minus = [ViewObservation(o.point2d, o.confidence - h * (t == s), o.camera_index)
                     for s, o in enumerate(obs)]
            fd = (value(plus) - value(minus)) / (2 * h)
            worst = max(worst, abs(fd - g_conf[t]) / max(1.0, abs(fd)))
    return SuiteResult("triangulate_vjp", worst, tolerance)


def _check_dense(params: nn.DenseParams, rng: np.random.Generator,
                 coords_per_tensor: int, step: float) -> float:
    """FD-check one network's parameter and input gradients."""
    x0 = rng.normal(size=params.in_dim)
    probe = rng.normal(size=params.out_dim)
    names = [n for n, _ in params.named_tensors()]
    shapes = {n: a.shape for n, a in params.named_tensors()}
    theta0 = np.concatenate([a.ravel() for _, a in params.named_tensors()])
    sizes = [int(np.prod(shapes[n])) for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def rebuild(theta):
        vals = {n: theta[offsets[i]:offsets[i + 1]].reshape(shapes[n])
                for i, n in enumerate(names)}
        return params.replace_tensors(vals)

    def f(theta):
        p = rebuild(theta)
        y, tape = nn.mlp_forward(p, x0)
        grads, _ = nn.mlp_backward(p, tape, probe)
        flat_g = np.concatenate([grads[n].ravel() for n in names])
        return float(y @ probe), flat_g

    idx = []
    for i in range(len(names)):
        lo, hi = offsets[i], offsets[i + 1]
        take = min(coords_per_tensor, hi - lo)
        idx.extend(rng.choice(np.arange(lo, hi), size=take, replace=False))
    worst = nn.grad_check(f, theta0, step=step, indices=idx)

    def fx(xv):
        y, tape = nn.mlp_forward(params, xv)
        _, gx = nn.mlp_backward(params, tape, probe)
        return float(y @ probe), gx

    return max(worst, nn.grad_check(fx, x0, step=step))


def check_networks(seed: int = 0, coords_per_tensor: int = 24,
                   tolerance: float = 1e-5) -> SuiteResult:
    """All four full-size architectures pass FD checks.

    Hidden-layer biases are perturbed off zero so no relu kink sits exactly
    at the finite-difference point.
    """
    rng = np.random.default_rng(seed)
    L = 256
    nets = {
        "g_theta": nn.make_residual_head(rng, L, hidden=256, zero_last=False),
        "f_alpha": nn.make_fusion_linear(rng, L),
        "f_gamma": nn.make_fusion_ffn(rng, L, hidden=1024),
        "f_beta": nn.make_classifier(rng, L),
    }
    worst = 0.0
    for net in nets.values():
        for layer in net.layers:
            layer.bias[:] = rng.normal(0, 0.05, layer.bias.shape)
        worst = max(worst, _check_dense(net, rng, coords_per_tensor, step=1e-5))
    return SuiteResult("appendix_networks", worst, tolerance)


def micro_scene(seed: int = 11):
    """Deterministic 2-person, 3-camera scene plus a small model and loss setup."""
    rng = np.random.default_rng(seed)
    space = GroundPlaneSpec.square(2000.0)
    spec = ArrangementSpec(name="micro", camera_count=3, radius_mm=6000.0,
                           height_range_mm=(2200.0, 3000.0),
                           azimuth_coverage_deg=(0.0, 360.0),
                           look_at=(0.0, 0.0, 1000.0), seed=5,
                           image_size=(64, 64), capture_halfwidth_mm=2100.0)
    rig = make_arrangement(spec)
    scene = make_scene(rng, space, rig, (2, 2), seed=seed)
    maps, gt2d = render_feature_maps(scene, OcclusionConfig(noise_sigma_px=0.3))

    cfg = DecoderConfig(feature_dim=16, num_layers=2, gtheta_hidden=16,
                        fgamma_hidden=32, in_channels=maps.channels, epsilon=0.0)
    K = 16
    params = ModelParams.init(np.random.default_rng(1), cfg, K)
    wiggle = np.random.default_rng(2)
    for lp in params.layers:
        lp.g_theta.layers[-1].weights[:] = wiggle.normal(0, 0.05, lp.g_theta.layers[-1].weights.shape)
        lp.attn_offset.layers[0].weights[:] = wiggle.normal(0, 0.02, lp.attn_offset.layers[0].weights.shape)
        lp.attn_weight.layers[0].weights[:] = wiggle.normal(0, 0.05, lp.attn_weight.layers[0].weights.shape)
    queries = init_queries(space, K, TPOSE_OFFSETS, params.embedding_table())
    anchors = np.stack([q.geometry for q in queries])
    assignment = match_anchors(scene.persons, anchors, W=3)
    weights = layer_weights("uniform", cfg.num_layers)
    return params, maps, rig, queries, assignment, scene.persons, gt2d, weights


PARAM_GROUPS = ("instance_embed", "joint_embed", "attn_offset", "attn_weight",
                "attn_out", "g_theta", "f_alpha", "f_gamma", "f_beta")


def check_full_loss(seed: int = 11, coords_per_group: int = 8,
                    tolerance: float = 1e-5) -> SuiteResult:
    """The complete per-layer training loss differentiated w.r.t. every
    parameter group on the micro-scene, with filtering disabled so the loss
    is smooth at the operating point."""
    params, maps, rig, queries, assignment, gt3d, gt2d, weights = micro_scene(seed)
    theta0, unflatten, names, slices = flatten_params(params)

    def f(theta):
        params.load_flat(unflatten(theta))
        total, grads = loss_and_grad_flat(params, maps, rig, queries, assignment,
                                          gt3d, gt2d, weights)
        flat_g = np.concatenate([grads[n].ravel() for n in names])
        return total, flat_g

    rng = np.random.default_rng(seed + 1)
    idx: list[int] = []
    for group in PARAM_GROUPS:
        group_coords = []
        for n in names:
            if group in n:
                lo, hi = slices[n]
                group_coords.extend(range(lo, hi))
        take = min(coords_per_group, len(group_coords))
        idx.extend(rng.choice(np.array(group_coords), size=take, replace=False))
    try:
        worst = nn.grad_check_adaptive(f, theta0, indices=idx)
    finally:
        params.load_flat(unflatten(theta0))
    return SuiteResult("full_layer_loss", worst, tolerance)


def run_suite(seed: int = 0, quick: bool = False) -> list[SuiteResult]:
    n_tri = 20 if quick else 100
    coords = 8 if quick else 24
    per_group = 4 if quick else 8
    return [
        check_triangulation_vjp(n_instances=n_tri, seed=seed),
        check_networks(seed=seed, coords_per_tensor=coords),
        check_full_loss(seed=11, coords_per_group=per_group),
    ]
