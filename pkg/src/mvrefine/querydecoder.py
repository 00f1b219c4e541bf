"""Iterative query decoder: per-view 2D refinement plus learning-free 3D lifting.

A compositional query pairs an appearance matrix (one feature row per joint)
with an explicit 3D joint matrix. Each decoder layer, per joint:

  1. project the 3D position into every view,
  2. sample map features around the projection (learned offsets and softmax
     weights predicted from the joint feature),
  3. regress a per-view 2D residual and confidence from the sampled feature,
  4. lift the refined per-view 2D points to 3D by confidence-weighted
     triangulation (or, for the ablation baseline, a learned regressor),
  5. fuse the per-view features back into the joint feature,
  6. classify the query and drop low-score queries.

The whole stack is differentiable; decode() can record a tape and
decode_backward() contains the hand-written reverse pass used for training
and for finite-difference verification. All heavy paths are batched over
(query, joint, view).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nnkernel as nn
from .camgeom import CameraModel, GroundPlaneSpec, project_points, project_points_vjp
from .errors import NonSquareK, ShapeMismatch
from .nnkernel import DenseParams, sigmoid
from .skeleton import NUM_JOINTS, TPOSE_OFFSETS
from .triangulation import triangulate_batch, triangulate_batch_vjp

DEPTH_EPS = 1e-9
REGRESS_SCALE = 1000.0   # regressor outputs are in meters; positions in mm


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class CompositionalQuery:
    """One hypothesized person: appearance rows (J, L), geometry (J, 3) mm."""

    appearance: np.ndarray
    geometry: np.ndarray
    score: float
    anchor_index: int


@dataclass
class EmbeddingTable:
    instance_embeddings: np.ndarray   # (K, L)
    joint_embeddings: np.ndarray      # (J, L)


@dataclass
class FeatureMapSet:
    """Per-view dense feature grids standing in for backbone output.

    maps[t] has shape (H, W, C) indexed [y, x]; scales[t] converts pixel
    coordinates to map cell coordinates (1 when maps are rendered at image
    resolution, the default).
    """

    maps: list[np.ndarray]
    scales: list[tuple[float, float]] | None = None

    def __post_init__(self):
        channels = {m.shape[2] for m in self.maps}
        if len(channels) > 1:
            raise ShapeMismatch(f"views disagree on channel count: {channels}")
        if self.scales is None:
            self.scales = [(1.0, 1.0)] * len(self.maps)

    @property
    def view_count(self) -> int:
        return len(self.maps)

    @property
    def channels(self) -> int:
        return self.maps[0].shape[2]


@dataclass
class ViewStepOutput:
    """One view's appearance-step result for a single joint."""

    refined2d: np.ndarray      # (2,) px
    confidence: float
    attention_feature: np.ndarray   # (L,)
    projected2d: np.ndarray    # (2,) px
    residual2d: np.ndarray     # (2,) px
    camera_index: int


@dataclass
class DecoderConfig:
    num_joints: int = NUM_JOINTS
    feature_dim: int = 64
    in_channels: int = NUM_JOINTS + 4
    num_samples: int = 4
    num_layers: int = 4
    epsilon: float = 0.1
    nms_radius_mm: float = 500.0
    shared_layers: bool = False
    lift_mode: str = "triangulate"    # "triangulate" | "regress"
    fusion_mode: str = "eq4"          # "eq4" | "no_ffn" | "mean"
    gtheta_hidden: int = 64
    fgamma_hidden: int = 256
    regressor_hidden: int = 64
    offset_init_px: float = 2.0

    @staticmethod
    def paper_scale(**overrides) -> "DecoderConfig":
        """Full-size network dimensions (feature 256, refinement hidden 256,
        fusion hidden 1024); used by the gradient-check suite."""
        base = dict(feature_dim=256, gtheta_hidden=256, fgamma_hidden=1024)
        base.update(overrides)
        return DecoderConfig(**base)


@dataclass
class DecoderLayerParams:
    """All learnable parameters of one decoder layer."""

    attn_offset: DenseParams   # L -> 2S
    attn_weight: DenseParams   # L -> S
    attn_out: DenseParams      # C -> L
    g_theta: DenseParams       # L -> 3 (2D residual + confidence logit)
    f_alpha: DenseParams       # L -> L
    f_gamma: DenseParams       # L -> L, residual + layer norm
    f_beta: DenseParams        # L -> 2 logits
    regressor_view: DenseParams | None = None   # (L + 12) -> hidden
    regressor_out: DenseParams | None = None    # hidden -> 3

    def named_tensors(self, prefix: str):
        parts = [
            ("attn_offset", self.attn_offset), ("attn_weight", self.attn_weight),
            ("attn_out", self.attn_out), ("g_theta", self.g_theta),
            ("f_alpha", self.f_alpha), ("f_gamma", self.f_gamma), ("f_beta", self.f_beta),
        ]
        if self.regressor_view is not None:
            parts += [("regressor_view", self.regressor_view), ("regressor_out", self.regressor_out)]
        for tag, dense in parts:
            yield from dense.named_tensors(f"{prefix}{tag}.")


@dataclass
class ModelParams:
    """Embeddings plus per-layer parameters (one entry when layers share)."""

    config: DecoderConfig
    instance_embed: np.ndarray
    joint_embed: np.ndarray
    layers: list[DecoderLayerParams]

    @property
    def query_capacity(self) -> int:
        return self.instance_embed.shape[0]

    def layer(self, i: int) -> DecoderLayerParams:
        return self.layers[0] if self.config.shared_layers else self.layers[i]

    def layer_prefix(self, i: int) -> str:
        return "layer0." if self.config.shared_layers else f"layer{i}."

    def embedding_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.instance_embed, self.joint_embed)

    def named_tensors(self):
        yield "instance_embed", self.instance_embed
        yield "joint_embed", self.joint_embed
        for i, lp in enumerate(self.layers):
            yield from lp.named_tensors(f"layer{i}.")

    def to_flat(self) -> dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def load_flat(self, values: dict[str, np.ndarray]) -> None:
        current = self.to_flat()
        if set(current) != set(values):
            raise ShapeMismatch(f"checkpoint names differ: {set(current) ^ set(values)}")
        self.instance_embed = np.array(values["instance_embed"], dtype=float)
        self.joint_embed = np.array(values["joint_embed"], dtype=float)
        for i, lp in enumerate(self.layers):
            prefix = f"layer{i}."
            lp.attn_offset = lp.attn_offset.replace_tensors(values, prefix + "attn_offset.")
            lp.attn_weight = lp.attn_weight.replace_tensors(values, prefix + "attn_weight.")
            lp.attn_out = lp.attn_out.replace_tensors(values, prefix + "attn_out.")
            lp.g_theta = lp.g_theta.replace_tensors(values, prefix + "g_theta.")
            lp.f_alpha = lp.f_alpha.replace_tensors(values, prefix + "f_alpha.")
            lp.f_gamma = lp.f_gamma.replace_tensors(values, prefix + "f_gamma.")
            lp.f_beta = lp.f_beta.replace_tensors(values, prefix + "f_beta.")
            if lp.regressor_view is not None:
                lp.regressor_view = lp.regressor_view.replace_tensors(values, prefix + "regressor_view.")
                lp.regressor_out = lp.regressor_out.replace_tensors(values, prefix + "regressor_out.")

    @staticmethod
    def init(rng: np.random.Generator, config: DecoderConfig, query_count: int) -> "ModelParams":
        L, S, C = config.feature_dim, config.num_samples, config.in_channels
        instance = rng.standard_normal((query_count, L))
        joint = rng.standard_normal((config.num_joints, L))
        n_layer_sets = 1 if config.shared_layers else config.num_layers
        layers = []
        for _ in range(n_layer_sets):
            attn_offset = nn.init_dense(rng, [L, 2 * S], ["none"])
            attn_offset.layers[0].weights[:] = 0.0
            angles = 2.0 * np.pi * np.arange(S) / S
            attn_offset.layers[0].bias[:] = (
                config.offset_init_px
                * np.stack([np.cos(angles), np.sin(angles)], axis=1).ravel()
            )
            attn_weight = nn.init_dense(rng, [L, S], ["none"])
            attn_weight.layers[0].weights[:] = 0.0
            layer = DecoderLayerParams(
                attn_offset=attn_offset,
                attn_weight=attn_weight,
                attn_out=nn.init_dense(rng, [C, L], ["none"]),
                g_theta=nn.make_residual_head(rng, L, hidden=config.gtheta_hidden),
                f_alpha=nn.make_fusion_linear(rng, L),
                f_gamma=nn.make_fusion_ffn(rng, L, hidden=config.fgamma_hidden),
                f_beta=nn.make_classifier(rng, L),
            )
            if config.lift_mode == "regress":
                layer.regressor_view = nn.init_dense(
                    rng, [L + 12, config.regressor_hidden], ["relu"])
                layer.regressor_out = nn.init_dense(
                    rng, [config.regressor_hidden, config.regressor_hidden, 3],
                    ["relu", "none"], zero_last=True)
            layers.append(layer)
        return ModelParams(config=config, instance_embed=instance, joint_embed=joint,
                           layers=layers)


# ---------------------------------------------------------------------------
# Query initialization
# ---------------------------------------------------------------------------

def grid_centers(space: GroundPlaneSpec, count: int) -> np.ndarray:
    """Cell centers of the g x g uniform grid over the ground plane, (count, 2)."""
    g = round(count ** 0.5)
    if g * g != count:
        raise NonSquareK(f"query count {count} is not a perfect square")
    xs = space.x_min + (np.arange(g) + 0.5) * (space.x_max - space.x_min) / g
    ys = space.y_min + (np.arange(g) + 0.5) * (space.y_max - space.y_min) / g
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def init_queries(space: GroundPlaneSpec, count: int, tpose: np.ndarray,
                 embeddings: EmbeddingTable) -> list[CompositionalQuery]:
    """Place a canonical pose at each grid cell center; appearance row j of
    query k is instance embedding k plus joint embedding j; scores start at 1."""
    centers = grid_centers(space, count)
    if embeddings.instance_embeddings.shape[0] < count:
        raise ShapeMismatch("embedding table smaller than query count")
    tpose = np.asarray(tpose, dtype=float)
    queries = []
    for k, (cx, cy) in enumerate(centers):
        geom = tpose + np.array([cx, cy, 0.0])
        app = embeddings.instance_embeddings[k][None, :] + embeddings.joint_embeddings
        queries.append(CompositionalQuery(appearance=app, geometry=geom, score=1.0,
                                          anchor_index=k))
    return queries


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def _bilinear_forward(map_t: np.ndarray, cell: np.ndarray):
    """Sample (H, W, C) at clamped cell coords (..., 2); returns values and cache."""
    H, W, _ = map_t.shape
    x = np.clip(cell[..., 0], 0.0, W - 1.0)
    y = np.clip(cell[..., 1], 0.0, H - 1.0)
    # open-interval mask: positions at/"beyond" the border get zero position grad
    inb_x = (cell[..., 0] > 0.0) & (cell[..., 0] < W - 1.0)
    inb_y = (cell[..., 1] > 0.0) & (cell[..., 1] < H - 1.0)
    x0 = np.minimum(np.floor(x), W - 2).astype(int)
    y0 = np.minimum(np.floor(y), H - 2).astype(int)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v00 = map_t[y0, x0]
    v01 = map_t[y0, x0 + 1]
    v10 = map_t[y0 + 1, x0]
    v11 = map_t[y0 + 1, x0 + 1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    val = top + (bot - top) * fy
    cache = (x0, y0, fx, fy, inb_x, inb_y)
    return val, cache


def _bilinear_position_grad(map_t: np.ndarray, cache, grad_val: np.ndarray) -> np.ndarray:
    """Gradient of the sampled value w.r.t. the (unclamped) cell coordinates."""
    x0, y0, fx, fy, inb_x, inb_y = cache
    v00 = map_t[y0, x0]
    v01 = map_t[y0, x0 + 1]
    v10 = map_t[y0 + 1, x0]
    v11 = map_t[y0 + 1, x0 + 1]
    dval_dx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
    dval_dy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
    gx = np.einsum("...c,...c->...", grad_val, dval_dx) * inb_x
    gy = np.einsum("...c,...c->...", grad_val, dval_dy) * inb_y
    return np.stack([gx, gy], axis=-1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _camera_codes(cams: Sequence[CameraModel]) -> np.ndarray:
    """Flattened, norm-scaled projection matrices fed to the ablation regressor."""
    codes = np.stack([c.projection.ravel() for c in cams])
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Layer forward / backward (batched over alive queries x joints x views)
# ---------------------------------------------------------------------------

@dataclass
class _LayerTape:
    idx: np.ndarray                 # (Q,) anchor indices alive at layer entry
    F_in: np.ndarray                # (Q, J, L)
    P_in: np.ndarray                # (Q, J, 3)
    tape_off: object = None
    tape_wgt: object = None
    offsets: np.ndarray | None = None       # (R, S, 2)
    weights: np.ndarray | None = None       # (R, S)
    u: np.ndarray | None = None             # (T, R, 2)
    valid: np.ndarray | None = None         # (T, R)
    bil_caches: list = field(default_factory=list)
    samples: list = field(default_factory=list)   # per view (R, S, C)
    tape_out: object = None
    s_all: np.ndarray | None = None         # (T*R, L)
    tape_g: object = None
    conf: np.ndarray | None = None          # (T, R) post-mask
    logit: np.ndarray | None = None         # (T, R)
    du: np.ndarray | None = None            # (T, R, 2)
    tri_cache: dict | None = None
    tri_ok: np.ndarray | None = None        # (R,)
    reg_tapes: tuple | None = None
    reg_vbar: np.ndarray | None = None
    tape_alpha: object = None
    tape_gamma: object = None
    tape_beta: object = None
    pj: np.ndarray | None = None            # (R,) per-joint positive scores
    kill: np.ndarray | None = None          # (Q,) triangulation-failure kill mask
    keep_local: np.ndarray | None = None    # indices into Q surviving the filter
    u_prime: np.ndarray | None = None       # (T, R, 2)
    P_out: np.ndarray | None = None         # (Q, J, 3)
    F_out: np.ndarray | None = None         # (Q, J, L)
    score: np.ndarray | None = None         # (Q,)


@dataclass
class LayerSnapshot:
    """Per-layer record retained for supervision and trace dumps."""

    anchor_indices: np.ndarray      # (Q,)
    projected2d: np.ndarray         # (Q, J, T, 2) px
    residual2d: np.ndarray          # (Q, J, T, 2) px
    refined2d: np.ndarray           # (Q, J, T, 2) px
    confidences: np.ndarray         # (Q, J, T)
    geometry: np.ndarray            # (Q, J, 3) mm
    scores: np.ndarray              # (Q,)
    kept: np.ndarray                # (Q,) bool, survived the score filter


@dataclass
class DecodeTape:
    layer_tapes: list[_LayerTape]
    anchor_indices: np.ndarray
    view_count: int
    consumed: bool = False


@dataclass
class DecodeResult:
    queries: list[CompositionalQuery]
    snapshots: list[LayerSnapshot]
    tape: DecodeTape | None = None


def _layer_forward(lp: DecoderLayerParams, cfg: DecoderConfig, F_in, P_in, idx,
                   maps: FeatureMapSet, projections, cam_codes):
    Q, J, L = F_in.shape
    S = cfg.num_samples
    T = maps.view_count
    R = Q * J
    tape = _LayerTape(idx=idx, F_in=F_in, P_in=P_in)

    rows_F = F_in.reshape(R, L)
    off_raw, tape.tape_off = nn.mlp_forward_batch(lp.attn_offset, rows_F)
    tape.offsets = off_raw.reshape(R, S, 2)
    logits, tape.tape_wgt = nn.mlp_forward_batch(lp.attn_weight, rows_F)
    tape.weights = _softmax(logits)

    P_rows = P_in.reshape(R, 3)
    u = np.empty((T, R, 2))
    valid = np.empty((T, R), dtype=bool)
    mixes = np.empty((T, R, maps.channels))
    for t in range(T):
        u_t, depth_t = project_points(P_rows, projections[t])
        valid[t] = depth_t > DEPTH_EPS
        u_t = np.where(valid[t][:, None], u_t, 0.0)
        u[t] = u_t
        scale = np.asarray(maps.scales[t])
        cell = (u_t[:, None, :] + tape.offsets) * scale
        samp, cache = _bilinear_forward(maps.maps[t], cell)
        tape.bil_caches.append(cache)
        tape.samples.append(samp)
        mixes[t] = np.einsum("rs,rsc->rc", tape.weights, samp)
    tape.u = u
    tape.valid = valid

    s_all, tape.tape_out = nn.mlp_forward_batch(lp.attn_out, mixes.reshape(T * R, maps.channels))
    tape.s_all = s_all

    g_all, tape.tape_g = nn.mlp_forward_batch(lp.g_theta, s_all)
    du = g_all[:, :2].reshape(T, R, 2)
    tape.du = du
    tape.logit = g_all[:, 2].reshape(T, R)
    conf = sigmoid(tape.logit)
    conf = np.where(valid, conf, 0.0)
    tape.conf = conf
    u_prime = u + du
    tape.u_prime = u_prime

    if cfg.lift_mode == "triangulate":
        pts = np.ascontiguousarray(u_prime.transpose(1, 0, 2))   # (R, T, 2)
        p_new, _, ok, tri_cache = triangulate_batch(pts, conf.T, projections)
        tape.tri_cache = tri_cache
        tape.tri_ok = ok
        P_out_rows = np.where(ok[:, None], p_new, P_rows)
    else:
        s_resh = s_all.reshape(T, R, L)
        reg_in = np.concatenate(
            [s_resh, np.broadcast_to(cam_codes[:, None, :], (T, R, 12))], axis=2)
        v, tape_v = nn.mlp_forward_batch(lp.regressor_view, reg_in.reshape(T * R, L + 12))
        vbar = v.reshape(T, R, v.shape[1]).mean(axis=0)
        dp, tape_o = nn.mlp_forward_batch(lp.regressor_out, vbar)
        tape.reg_tapes = (tape_v, tape_o)
        tape.reg_vbar = vbar
        tape.tri_ok = np.ones(R, dtype=bool)
        P_out_rows = P_rows + REGRESS_SCALE * dp
    tape.P_out = P_out_rows.reshape(Q, J, 3)
    tape.kill = ~tape.tri_ok.reshape(Q, J).all(axis=1)

    s_mean = s_all.reshape(T, R, L).mean(axis=0)
    if cfg.fusion_mode == "mean":
        F_out_rows = s_mean
    else:
        a_out, tape.tape_alpha = nn.mlp_forward_batch(lp.f_alpha, s_mean)
        added = rows_F + a_out
        if cfg.fusion_mode == "no_ffn":
            F_out_rows = added
        else:
            F_out_rows, tape.tape_gamma = nn.mlp_forward_batch(lp.f_gamma, added)
    tape.F_out = F_out_rows.reshape(Q, J, L)

    logits2, tape.tape_beta = nn.mlp_forward_batch(lp.f_beta, F_out_rows)
    tape.pj = sigmoid(logits2[:, 0])
    score = tape.pj.reshape(Q, J).mean(axis=1)
    score = np.where(tape.kill, 0.0, score)
    tape.score = score
    return tape


def _layer_backward(lp: DecoderLayerParams, cfg: DecoderConfig, tape: _LayerTape,
                    maps: FeatureMapSet, projections, cam_codes,
                    dF_out, dP_out, dscore, d_refined2d, grads: dict, prefix: str):
    """Reverse the layer; returns (dF_in, dP_in). External gradients:

    dF_out, dP_out : (Q, J, L/3) from the next layer (plus any external 3D term)
    dscore : (Q,) classification gradient
    d_refined2d : (T, R, 2) 2D-supervision gradient on this layer's refined points
    """
    Q, J, L = tape.F_in.shape
    S = cfg.num_samples
    T = tape.u.shape[0]
    R = Q * J

    def acc(local: dict):
        for name, g in local.items():
            key = prefix + name
            if key in grads:
                grads[key] += g
            else:
                grads[key] = g

    # classifier
    d_raw = np.where(tape.kill, 0.0, dscore) / J
    d_pj = np.repeat(d_raw, J)
    d_logit0 = d_pj * tape.pj * (1.0 - tape.pj)
    d_logits2 = np.zeros((R, 2))
    d_logits2[:, 0] = d_logit0
    g_beta, d_beta_in = nn.mlp_backward_batch(lp.f_beta, tape.tape_beta, d_logits2)
    acc({f"f_beta.{k}": v for k, v in g_beta.items()})
    dF_out_rows = dF_out.reshape(R, L) + d_beta_in

    # fusion
    dF_in_rows = np.zeros((R, L))
    if cfg.fusion_mode == "mean":
        d_s_mean = dF_out_rows
    else:
        if cfg.fusion_mode == "no_ffn":
            d_added = dF_out_rows
        else:
            g_gamma, d_added = nn.mlp_backward_batch(lp.f_gamma, tape.tape_gamma, dF_out_rows)
            acc({f"f_gamma.{k}": v for k, v in g_gamma.items()})
        dF_in_rows += d_added
        g_alpha, d_s_mean = nn.mlp_backward_batch(lp.f_alpha, tape.tape_alpha, d_added)
        acc({f"f_alpha.{k}": v for k, v in g_alpha.items()})
    d_s_all = np.broadcast_to(d_s_mean / T, (T, R, L)).reshape(T * R, L).copy()

    # geometry
    dP_out_rows = dP_out.reshape(R, 3)
    dP_in_rows = np.where(tape.tri_ok[:, None], 0.0, dP_out_rows)
    d_u_prime = np.array(d_refined2d)  # (T, R, 2)
    d_conf = np.zeros((T, R))
    if cfg.lift_mode == "triangulate":
        d_pnew = np.where(tape.tri_ok[:, None], dP_out_rows, 0.0)
        d_pts, d_conf_rt = triangulate_batch_vjp(tape.tri_cache, d_pnew)
        d_u_prime += d_pts.transpose(1, 0, 2)
        d_conf += d_conf_rt.T
    else:
        dP_in_rows = dP_in_rows + np.where(tape.tri_ok[:, None], dP_out_rows, 0.0)
        tape_v, tape_o = tape.reg_tapes
        d_dp = REGRESS_SCALE * dP_out_rows
        g_out, d_vbar = nn.mlp_backward_batch(lp.regressor_out, tape_o, d_dp)
        acc({f"regressor_out.{k}": v for k, v in g_out.items()})
        d_v = np.broadcast_to(d_vbar / T, (T, R, d_vbar.shape[1])).reshape(T * R, d_vbar.shape[1])
        g_view, d_reg_in = nn.mlp_backward_batch(lp.regressor_view, tape_v, d_v)
        acc({f"regressor_view.{k}": v for k, v in g_view.items()})
        d_s_all += d_reg_in[:, :L]

    # refinement head
    d_conf = np.where(tape.valid, d_conf, 0.0)
    d_logit = d_conf * tape.conf * (1.0 - tape.conf)
    d_g_all = np.concatenate(
        [d_u_prime.reshape(T * R, 2), d_logit.reshape(T * R, 1)], axis=1)
    g_theta_grads, d_s_from_g = nn.mlp_backward_batch(lp.g_theta, tape.tape_g, d_g_all)
    acc({f"g_theta.{k}": v for k, v in g_theta_grads.items()})
    d_s_all += d_s_from_g

    # attention output map
    g_out_map, d_mix_flat = nn.mlp_backward_batch(lp.attn_out, tape.tape_out, d_s_all)
    acc({f"attn_out.{k}": v for k, v in g_out_map.items()})
    d_mixes = d_mix_flat.reshape(T, R, d_mix_flat.shape[1])

    # per-view sampling
    d_weights = np.zeros((R, S))
    d_offsets = np.zeros((R, S, 2))
    d_u = d_u_prime.copy()   # residual connection u' = u + du
    P_rows = tape.P_in.reshape(R, 3)
    dP_from_proj = np.zeros((R, 3))
    for t in range(T):
        d_mix = d_mixes[t]
        samp = tape.samples[t]
        d_weights += np.einsum("rc,rsc->rs", d_mix, samp)
        d_samp = tape.weights[:, :, None] * d_mix[:, None, :]
        d_cell = _bilinear_position_grad(maps.maps[t], tape.bil_caches[t], d_samp)
        d_pos = d_cell * np.asarray(maps.scales[t])
        d_offsets += d_pos
        d_u[t] += d_pos.sum(axis=1)
        d_u_t = np.where(tape.valid[t][:, None], d_u[t], 0.0)
        dP_from_proj += project_points_vjp(P_rows, projections[t], d_u_t)
    dP_in_rows = dP_in_rows + dP_from_proj

    g_off, dF_from_off = nn.mlp_backward_batch(
        lp.attn_offset, tape.tape_off, d_offsets.reshape(R, 2 * S))
    acc({f"attn_offset.{k}": v for k, v in g_off.items()})
    dF_in_rows += dF_from_off

    w = tape.weights
    d_logits_w = w * (d_weights - (w * d_weights).sum(axis=1, keepdims=True))
    g_wgt, dF_from_wgt = nn.mlp_backward_batch(lp.attn_weight, tape.tape_wgt, d_logits_w)
    acc({f"attn_weight.{k}": v for k, v in g_wgt.items()})
    dF_in_rows += dF_from_wgt

    return dF_in_rows.reshape(Q, J, L), dP_in_rows.reshape(Q, J, 3)


# ---------------------------------------------------------------------------
# Full decode
# ---------------------------------------------------------------------------

def decode(queries: Sequence[CompositionalQuery], maps: FeatureMapSet,
           cams: Sequence[CameraModel], params: ModelParams, *,
           epsilon: float | None = None, apply_nms: bool = True,
           want_tape: bool = False) -> DecodeResult:
    """Run the full decoder stack.

    Appearance features are rebuilt from the model's embedding table via each
    query's anchor_index so that training can differentiate into the
    embeddings; geometry and scores come from the query objects. Per-layer
    snapshots retain 2D/3D outputs for supervision and trace dumps. An empty
    result (everything filtered) is a valid outcome, not an error.
    """
    cfg = params.config
    eps = cfg.epsilon if epsilon is None else epsilon
    anchor_idx = np.array([q.anchor_index for q in queries], dtype=int)
    P = np.stack([q.geometry for q in queries]).astype(float)
    F = params.instance_embed[anchor_idx][:, None, :] + params.joint_embed[None, :, :]
    projections = np.stack([c.projection for c in cams])
    cam_codes = _camera_codes(cams)

    idx = np.arange(len(queries))
    snapshots: list[LayerSnapshot] = []
    layer_tapes: list[_LayerTape] = []
    for li in range(cfg.num_layers):
        lp = params.layer(li)
        tape = _layer_forward(lp, cfg, F, P, idx, maps, projections, cam_codes)
        Q, J = F.shape[0], cfg.num_joints
        T = maps.view_count
        keep_mask = tape.score >= eps
        tape.keep_local = np.flatnonzero(keep_mask)
        u = tape.u.reshape(T, Q, J, 2).transpose(1, 2, 0, 3)
        up = tape.u_prime.reshape(T, Q, J, 2).transpose(1, 2, 0, 3)
        snapshots.append(LayerSnapshot(
            anchor_indices=anchor_idx[idx],
            projected2d=u.copy(),
            residual2d=tape.du.reshape(T, Q, J, 2).transpose(1, 2, 0, 3).copy(),
            refined2d=up.copy(),
            confidences=tape.conf.reshape(T, Q, J).transpose(1, 2, 0).copy(),
            geometry=tape.P_out.copy(),
            scores=tape.score.copy(),
            kept=keep_mask.copy(),
        ))
        layer_tapes.append(tape)
        F = tape.F_out[tape.keep_local]
        P = tape.P_out[tape.keep_local]
        idx = idx[tape.keep_local]

    last_keep = layer_tapes[-1].keep_local
    final = [
        CompositionalQuery(appearance=F[i].copy(), geometry=P[i].copy(),
                           score=float(snapshots[-1].scores[last_keep[i]]),
                           anchor_index=int(anchor_idx[idx[i]]))
        for i in range(len(idx))
    ]
    if apply_nms:
        final = nms(final, cfg.nms_radius_mm)
    tape_out = DecodeTape(layer_tapes=layer_tapes, anchor_indices=anchor_idx,
                          view_count=maps.view_count) if want_tape else None
    return DecodeResult(queries=final, snapshots=snapshots, tape=tape_out)


def decode_backward(params: ModelParams, maps: FeatureMapSet,
                    cams: Sequence[CameraModel], tape: DecodeTape,
                    layer_grads: list[dict]) -> dict[str, np.ndarray]:
    """Backpropagate per-layer loss gradients through the whole stack.

    layer_grads[i] may contain 'geometry' (Q_i, J, 3), 'refined2d'
    (Q_i, J, T, 2) and 'score' (Q_i,) arrays in snapshot layout. Returns a
    flat name->gradient dict covering every model tensor.
    """
    from .errors import TapeReuse

    if tape.consumed:
        raise TapeReuse("decode tape already consumed")
    tape.consumed = True
    cfg = params.config
    projections = np.stack([c.projection for c in cams])
    cam_codes = _camera_codes(cams)
    grads: dict[str, np.ndarray] = {}

    J, L = cfg.num_joints, cfg.feature_dim
    T = tape.view_count
    dF_next = None
    dP_next = None
    for li in reversed(range(cfg.num_layers)):
        lt = tape.layer_tapes[li]
        Q = lt.F_in.shape[0]
        R = Q * J
        ext = layer_grads[li] if li < len(layer_grads) else {}
        dF_out = np.zeros((Q, J, L))
        dP_out = np.zeros((Q, J, 3))
        dscore = np.zeros(Q)
        d_ref = np.zeros((T, R, 2))
        if dF_next is not None and len(lt.keep_local) > 0:
            dF_out[lt.keep_local] += dF_next
            dP_out[lt.keep_local] += dP_next
        if ext.get("geometry") is not None:
            dP_out += ext["geometry"]
        if ext.get("score") is not None:
            dscore += ext["score"]
        if ext.get("refined2d") is not None:
            d_ref += ext["refined2d"].transpose(2, 0, 1, 3).reshape(T, R, 2)
        dF_next, dP_next = _layer_backward(
            params.layer(li), cfg, lt, maps, projections, cam_codes,
            dF_out, dP_out, dscore, d_ref, grads, params.layer_prefix(li))

    # initial appearance is instance_embed[anchor] + joint_embed
    first_idx = tape.layer_tapes[0].idx
    anchors = tape.anchor_indices[first_idx]
    d_inst = np.zeros_like(params.instance_embed)
    np.add.at(d_inst, anchors, dF_next.sum(axis=1))
    grads["instance_embed"] = d_inst
    grads["joint_embed"] = dF_next.sum(axis=0)

    # geometry anchors are fixed; dP_next is dropped by design
    for name, arr in params.named_tensors():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return grads


# ---------------------------------------------------------------------------
# Public single-query operations (thin wrappers over the batched kernels)
# ---------------------------------------------------------------------------

def projective_attention(f: np.ndarray, u_t: np.ndarray, map_t: np.ndarray,
                         lp: DecoderLayerParams, scale=(1.0, 1.0)) -> np.ndarray:
    """Deformable-style sampling: offsets and softmax weights predicted from
    the joint feature, bilinear samples mixed and mapped into feature space."""
    f = np.asarray(f, dtype=float)[None, :]
    off, _ = nn.mlp_forward_batch(lp.attn_offset, f)
    S = off.shape[1] // 2
    offsets = off.reshape(1, S, 2)
    logits, _ = nn.mlp_forward_batch(lp.attn_weight, f)
    w = _softmax(logits)
    cell = (np.asarray(u_t, dtype=float)[None, None, :] + offsets) * np.asarray(scale)
    samp, _ = _bilinear_forward(map_t, cell)
    mix = np.einsum("rs,rsc->rc", w, samp)
    s, _ = nn.mlp_forward_batch(lp.attn_out, mix)
    return s[0]


def appearance_step(query: CompositionalQuery, joint: int, cams: Sequence[CameraModel],
                    maps: FeatureMapSet, lp: DecoderLayerParams) -> list[ViewStepOutput]:
    """One joint's per-view refinement: project, attend, regress residual and
    confidence. A view behind the camera is emitted with confidence zero."""
    f = query.appearance[joint]
    p = query.geometry[joint]
    outputs = []
    for t, cam in enumerate(cams):
        pix, depth = project_points(p[None, :], cam.projection)
        if depth[0] <= DEPTH_EPS:
            L = f.shape[0]
            zero2 = np.zeros(2)
            outputs.append(ViewStepOutput(refined2d=zero2, confidence=0.0,
                                          attention_feature=np.zeros(L),
                                          projected2d=zero2.copy(),
                                          residual2d=np.zeros(2), camera_index=t))
            continue
        u_t = pix[0]
        s_t = projective_attention(f, u_t, maps.maps[t], lp, maps.scales[t])
        g, _ = nn.mlp_forward_batch(lp.g_theta, s_t[None, :])
        du = g[0, :2]
        c = float(sigmoid(g[0, 2:3])[0])
        outputs.append(ViewStepOutput(refined2d=u_t + du, confidence=c,
                                      attention_feature=s_t, projected2d=u_t,
                                      residual2d=du, camera_index=t))
    return outputs


def geometry_step(view_outputs: Sequence[ViewStepOutput],
                  cams: Sequence[CameraModel]) -> np.ndarray:
    """Confidence-weighted triangulation of one joint's refined 2D positions."""
    from .triangulation import ViewObservation, triangulate

    obs = [ViewObservation(v.refined2d, v.confidence, v.camera_index) for v in view_outputs]
    return triangulate(obs, cams).point3d


def fuse_features(f: np.ndarray, s_list: np.ndarray, lp: DecoderLayerParams,
                  fusion_mode: str = "eq4") -> np.ndarray:
    """Feature update: f' = ffn(f + linear(mean of per-view features))."""
    s_mean = np.asarray(s_list, dtype=float).mean(axis=0)[None, :]
    if fusion_mode == "mean":
        return s_mean[0]
    a, _ = nn.mlp_forward_batch(lp.f_alpha, s_mean)
    added = np.asarray(f, dtype=float)[None, :] + a
    if fusion_mode == "no_ffn":
        return added[0]
    out, _ = nn.mlp_forward_batch(lp.f_gamma, added)
    return out[0]


def score_query(query: CompositionalQuery, lp: DenseParams | DecoderLayerParams) -> float:
    """Positive-channel sigmoid of the classifier, averaged over joints."""
    f_beta = lp.f_beta if isinstance(lp, DecoderLayerParams) else lp
    logits, _ = nn.mlp_forward_batch(f_beta, np.asarray(query.appearance, dtype=float))
    return float(sigmoid(logits[:, 0]).mean())


def filter_queries(queries: Sequence[CompositionalQuery], eps: float) -> list[CompositionalQuery]:
    """Keep exactly the queries with score >= eps, preserving order."""
    return [q for q in queries if q.score >= eps]


def nms(queries: Sequence[CompositionalQuery], radius_mm: float) -> list[CompositionalQuery]:
    """Greedy suppression by descending score (ties: lower anchor index);
    a query is dropped when its pose center falls within radius_mm of a kept
    query's center."""
    order = sorted(range(len(queries)),
                   key=lambda i: (-queries[i].score, queries[i].anchor_index))
    centers = [np.asarray(q.geometry, dtype=float).mean(axis=0) for q in queries]
    kept: list[int] = []
    for i in order:
        if all(np.linalg.norm(centers[i] - centers[j]) > radius_mm for j in kept):
            kept.append(i)
    return [queries[i] for i in kept]
