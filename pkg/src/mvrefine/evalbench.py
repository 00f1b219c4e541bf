"""Pose metrics, the evaluation harness, the generalization suite, and ablations.

Matching protocol: predictions are processed in descending score order; each
claims the nearest still-unclaimed ground truth whose pose error is below the
threshold (a true positive) or becomes a false positive. AP is the area under
the resulting precision-recall steps. Across scenes, per-scene claims are
pooled by score into one curve. AP at tau = 100 mm plays the role the paper's
strictest threshold plays at full scale and is labeled the "AP25 analog"
throughout; the mean over the reported thresholds is labeled mAP by our own
convention.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camgeom import CameraModel
from .errors import MissingCheckpoint
from .querydecoder import ModelParams, decode, init_queries
from .scenesim import DatasetHandle, OcclusionConfig
from .skeleton import PCP_LIMBS, TPOSE_OFFSETS

DEFAULT_TAUS = (25.0, 50.0, 100.0, 150.0)
ANALOG_TAU_MM = 100.0


# ---------------------------------------------------------------------------
# Core metrics
# ---------------------------------------------------------------------------

def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over joints of the Euclidean distance, mm."""
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    return float(np.linalg.norm(p - g, axis=-1).mean())


@dataclass
class MatchOutcome:
    """Greedy claims of one instance: per-prediction flags in score order."""

    order: np.ndarray          # prediction indices sorted by descending score
    is_tp: np.ndarray          # (N,) in sorted order
    errors: np.ndarray         # (N,) pose error of the claimed GT (inf for FP)
    claimed_gt: np.ndarray     # (N,) claimed GT index or -1
    scores: np.ndarray         # (N,) in sorted order


def greedy_claims(poses: np.ndarray, scores: np.ndarray, gts: Sequence[np.ndarray],
                  tau: float) -> MatchOutcome:
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    Z = len(gts)
    claimed = np.zeros(Z, dtype=bool)
    is_tp = np.zeros(len(order), dtype=bool)
    errors = np.full(len(order), np.inf)
    claimed_gt = np.full(len(order), -1, dtype=int)
    for rank, pi in enumerate(order):
        best_z, best_err = -1, np.inf
        for z in range(Z):
            if claimed[z]:
                continue
            err = mpjpe(poses[pi], gts[z])
            if err < tau and err < best_err:
                best_z, best_err = z, err
        if best_z >= 0:
            claimed[best_z] = True
            is_tp[rank] = True
            errors[rank] = best_err
            claimed_gt[rank] = best_z
    return MatchOutcome(order=order, is_tp=is_tp, errors=errors,
                        claimed_gt=claimed_gt,
                        scores=np.asarray(scores, dtype=float)[order])


def _ap_from_flags(is_tp: np.ndarray, total_gt: int) -> tuple[float, float]:
    """Area under the precision-recall steps plus the final recall."""
    if len(is_tp) == 0 or total_gt == 0:
        return 0.0, 0.0
    tp_cum = np.cumsum(is_tp)
    ranks = np.arange(1, len(is_tp) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / total_gt
    prev = np.concatenate([[0.0], recall[:-1]])
    ap = float(((recall - prev) * precision).sum())
    return ap, float(recall[-1])


def match_and_score(poses: np.ndarray, scores: np.ndarray, gts: Sequence[np.ndarray],
                    tau: float):
    """Evaluate one instance; returns (AP, recall, matched MPJPE or None).

    Empty predictions give AP 0 and recall 0 with the matched error absent.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    outcome = greedy_claims(np.asarray(poses, dtype=float), scores, gts, tau)
    ap, recall = _ap_from_flags(outcome.is_tp, len(gts))
    matched = outcome.errors[outcome.is_tp]
    return ap, recall, (float(matched.mean()) if matched.size else None)


def pcp(pred: np.ndarray, gt: np.ndarray, limbs=PCP_LIMBS) -> float:
    """Fraction of limbs with both endpoints within half the GT limb length."""
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    good = 0
    for a, b in limbs:
        half = 0.5 * np.linalg.norm(g[a] - g[b])
        if np.linalg.norm(p[a] - g[a]) < half and np.linalg.norm(p[b] - g[b]) < half:
            good += 1
    return good / len(limbs)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    ap: dict[float, float] = field(default_factory=dict)
    recall: dict[float, float] = field(default_factory=dict)
    mean_ap: float = 0.0
    mpjpe_mm: float | None = None
    pcp: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    per_arrangement: dict[str, dict] = field(default_factory=dict)
    runtime: dict[str, float] = field(default_factory=dict)
    analog_tau_mm: float = ANALOG_TAU_MM

    @property
    def ap_analog(self) -> float:
        return self.ap.get(self.analog_tau_mm, 0.0)

    def to_json(self) -> str:
        doc = {
            "ap": {str(k): v for k, v in self.ap.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_ap": self.mean_ap,
            "mpjpe_mm": self.mpjpe_mm,
            "pcp": self.pcp,
            "counts": self.counts,
            "per_arrangement": self.per_arrangement,
            "runtime": self.runtime,
            "analog_tau_mm": self.analog_tau_mm,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        doc = json.loads(text)
        return EvalReport(
            ap={float(k): v for k, v in doc["ap"].items()},
            recall={float(k): v for k, v in doc["recall"].items()},
            mean_ap=doc["mean_ap"],
            mpjpe_mm=doc["mpjpe_mm"],
            pcp=doc["pcp"],
            counts={k: int(v) for k, v in doc["counts"].items()},
            per_arrangement=doc["per_arrangement"],
            runtime=doc["runtime"],
            analog_tau_mm=doc["analog_tau_mm"],
        )

    def metrics_csv(self) -> str:
        """Deterministic one-row summary (no runtime fields)."""
        taus = sorted(self.ap)
        header = ",".join([f"ap{int(t)}" for t in taus] + [f"recall{int(t)}" for t in taus]
                          + ["map", "mpjpe_mm", "pcp", "tp", "fp", "fn"])
        row = ",".join(
            [repr(self.ap[t]) for t in taus] + [repr(self.recall[t]) for t in taus]
            + [repr(self.mean_ap),
               repr(self.mpjpe_mm) if self.mpjpe_mm is not None else "",
               repr(self.pcp) if self.pcp is not None else "",
               str(self.counts.get("tp", 0)), str(self.counts.get("fp", 0)),
               str(self.counts.get("fn", 0))])
        return header + "\n" + row + "\n"


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------

def _init_eval_queries(params: ModelParams, handle: DatasetHandle, loaded, mode: str,
                       sigma_mm: float, seed: int):
    space = handle.cfg.space()
    if mode == "grid":
        return init_queries(space, params.query_capacity, TPOSE_OFFSETS,
                            params.embedding_table())
    from .trainer import denoise_init

    rng = np.random.default_rng(np.random.SeedSequence([seed, 7700, loaded.scene_id]))
    return denoise_init(loaded.scene.persons, sigma_mm, rng, space,
                        params.query_capacity, TPOSE_OFFSETS, params.embedding_table())


def evaluate_split(params: ModelParams, handle: DatasetHandle, split: str, *,
                   rig: Sequence[CameraModel] | None = None,
                   occ: OcclusionConfig | None = None,
                   taus: Sequence[float] = DEFAULT_TAUS,
                   analog_tau: float = ANALOG_TAU_MM,
                   init: str = "grid", init_sigma_mm: float = 50.0, init_seed: int = 0,
                   epsilon: float | None = None, apply_nms: bool = True,
                   scene_ids: Sequence[int] | None = None) -> EvalReport:
    """Decode every scene of a split and pool the greedy matches.

    `rig`/`occ` override the dataset's camera set or occlusion (maps and 2D
    ground truth are re-rendered); `init` is 'grid' or 'snap' (grid anchors
    snapped to noisy ground truth, the external-estimate refiner mode).
    """
    ids = list(scene_ids) if scene_ids is not None else handle.scene_ids(split)
    per_tau_flags: dict[float, list] = {float(t): [] for t in taus}
    per_tau_scores: dict[float, list] = {float(t): [] for t in taus}
    analog_rows = []
    pcp_values: list[float] = []
    total_gt = 0
    t0 = time.perf_counter()
    for sid in ids:
        loaded = handle.load_scene(sid, rig=rig)
        maps = handle.feature_maps(loaded, occ=occ)
        queries = _init_eval_queries(params, handle, loaded, init, init_sigma_mm, init_seed)
        result = decode(queries, maps, loaded.scene.rig, params,
                        epsilon=epsilon, apply_nms=apply_nms)
        poses = np.stack([q.geometry for q in result.queries]) if result.queries else np.zeros((0, params.config.num_joints, 3))
        scores = np.array([q.score for q in result.queries])
        gts = loaded.scene.persons
        total_gt += len(gts)
        for t in per_tau_flags:
            outcome = greedy_claims(poses, scores, gts, t)
            per_tau_flags[t].append(outcome.is_tp)
            per_tau_scores[t].append(outcome.scores)
            if t == float(analog_tau):
                analog_rows.append(outcome)
                for rank, z in enumerate(outcome.claimed_gt):
                    if z >= 0:
                        pcp_values.append(pcp(poses[outcome.order[rank]], gts[z]))
    runtime = time.perf_counter() - t0

    report = EvalReport(analog_tau_mm=float(analog_tau))
    for t in per_tau_flags:
        if per_tau_flags[t]:
            scores_all = np.concatenate(per_tau_scores[t])
            flags_all = np.concatenate(per_tau_flags[t])
            pool_order = np.argsort(-scores_all, kind="stable")
            ap, rec = _ap_from_flags(flags_all[pool_order], total_gt)
        else:
            ap, rec = 0.0, 0.0
        report.ap[t] = ap
        report.recall[t] = rec
    report.mean_ap = float(np.mean([report.ap[t] for t in report.ap])) if report.ap else 0.0
    matched_errors = np.concatenate(
        [o.errors[o.is_tp] for o in analog_rows]) if analog_rows else np.array([])
    report.mpjpe_mm = float(matched_errors.mean()) if matched_errors.size else None
    report.pcp = float(np.mean(pcp_values)) if pcp_values else None
    tp = int(sum(o.is_tp.sum() for o in analog_rows))
    fp = int(sum((~o.is_tp).sum() for o in analog_rows))
    report.counts = {"tp": tp, "fp": fp, "fn": total_gt - tp, "total_gt": total_gt,
                     "scenes": len(ids)}
    report.runtime = {"eval_s": runtime}
    return report


# ---------------------------------------------------------------------------
# Generalization suite
# ---------------------------------------------------------------------------

def _load_model(path) -> ModelParams:
    from .trainer import load_model

    if not os.path.exists(path):
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return load_model(path)


def generalization_conditions(handle: DatasetHandle, *, fresh_seed: int = 913,
                              fresh_count: int = 7):
    """The benchmark's camera conditions keyed by name.

    in_domain: the training rig; minus2/plus2: the training rig with two
    cameras removed/added; fresh7: an independently sampled rig; hard_occ:
    the training rig under heavier dropout plus an occluder strip per view.
    """
    from dataclasses import replace

    from .camgeom import extend_arrangement, make_arrangement

    spec = handle.cfg.arrangement()
    rig = handle.rig
    w, h = handle.cfg.image_size
    strip = (0.30 * w, 0.25 * h, 0.55 * w, 0.95 * h)
    hard_occ = OcclusionConfig(
        dropout_prob=min(0.25, handle.cfg.occlusion.dropout_prob + 0.15),
        occluder_boxes={t: [strip] for t in range(len(rig))},
        noise_sigma_px=handle.cfg.occlusion.noise_sigma_px + 0.5)
    fresh_spec = replace(spec, name="fresh", camera_count=fresh_count,
                         radius_mm=spec.radius_mm * 1.1,
                         height_range_mm=(spec.height_range_mm[0] + 300.0,
                                          spec.height_range_mm[1] + 300.0),
                         seed=fresh_seed)
    return {
        "in_domain": {"rig": rig, "occ": None},
        "minus2": {"rig": rig[: len(rig) - 2], "occ": None},
        "plus2": {"rig": extend_arrangement(rig, spec, 2, seed=fresh_seed + 1), "occ": None},
        "fresh7": {"rig": make_arrangement(fresh_spec), "occ": None},
        "hard_occ": {"rig": rig, "occ": hard_occ},
    }


def run_generalization_suite(checkpoint, handle: DatasetHandle, out_dir, *,
                             baseline_checkpoint=None, split: str = "test",
                             analog_tau: float = ANALOG_TAU_MM) -> dict[str, EvalReport]:
    """Evaluate a trained model across camera conditions; optionally contrast
    with the geometry-ablated regressor baseline on the unseen rig."""
    os.makedirs(out_dir, exist_ok=True)
    params = _load_model(checkpoint)
    conditions = generalization_conditions(handle)
    reports: dict[str, EvalReport] = {}
    for name, cond in conditions.items():
        reports[name] = evaluate_split(params, handle, split, rig=cond["rig"],
                                       occ=cond["occ"], analog_tau=analog_tau)
    if baseline_checkpoint is not None:
        baseline = _load_model(baseline_checkpoint)
        reports["baseline_in_domain"] = evaluate_split(
            baseline, handle, split, rig=conditions["in_domain"]["rig"],
            analog_tau=analog_tau)
        reports["baseline_fresh7"] = evaluate_split(
            baseline, handle, split, rig=conditions["fresh7"]["rig"],
            analog_tau=analog_tau)

    summary = {name: json.loads(rep.to_json()) for name, rep in reports.items()}
    with open(os.path.join(out_dir, "generalization.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["condition,ap_analog,map,recall_analog,mpjpe_mm,tp,fp,fn"]
    for name, rep in reports.items():
        lines.append(",".join([
            name, repr(rep.ap_analog), repr(rep.mean_ap),
            repr(rep.recall.get(float(analog_tau), 0.0)),
            repr(rep.mpjpe_mm) if rep.mpjpe_mm is not None else "",
            str(rep.counts.get("tp", 0)), str(rep.counts.get("fp", 0)),
            str(rep.counts.get("fn", 0))]))
    with open(os.path.join(out_dir, "generalization.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return reports


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_NAMES = ("queries", "layers", "knn", "fusion", "nms", "sharing",
                  "layer_weights", "denoise", "camera_count")


def run_ablation(name: str, grid: Sequence, base_cfg, handle: DatasetHandle,
                 out_dir, *, split: str = "test") -> list[dict]:
    """Train/evaluate across one ablation axis with shared seeds; writes one
    CSV per ablation. `base_cfg` is a trainer.TrainConfig used as template."""
    from dataclasses import replace

    from .trainer import train

    if name not in ABLATION_NAMES:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATION_NAMES}")
    os.makedirs(out_dir, exist_ok=True)
    rows: list[dict] = []

    def eval_and_row(value, params, *, rig=None, apply_nms=True, init="grid",
                     init_sigma=50.0):
        rep = evaluate_split(params, handle, split, rig=rig, apply_nms=apply_nms,
                             init=init, init_sigma_mm=init_sigma,
                             analog_tau=base_cfg.analog_tau_mm)
        rows.append({
            "value": value, "ap_analog": rep.ap_analog, "map": rep.mean_ap,
            "mpjpe_mm": rep.mpjpe_mm, "tp": rep.counts["tp"], "fp": rep.counts["fp"],
            "fn": rep.counts["fn"],
        })
        return rep

    if name in ("queries", "layers", "knn", "fusion", "sharing", "layer_weights"):
        field_of = {"queries": "K", "layers": "N_layers", "knn": "W",
                    "fusion": "fusion_mode", "sharing": "shared_layers",
                    "layer_weights": "layer_weight_mode"}[name]
        for value in grid:
            cfg = replace(base_cfg, **{field_of: value})
            run = train(cfg, handle, os.path.join(out_dir, f"{name}_{value}"))
            eval_and_row(value, run.params)
    elif name == "denoise":
        for sigma in grid:
            cfg = replace(base_cfg, init_mode="gt_noise", gt_noise_sigma_mm=float(sigma))
            run = train(cfg, handle, os.path.join(out_dir, f"{name}_{sigma}"))
            eval_and_row(sigma, run.params, init="snap", init_sigma=float(sigma))
    elif name == "nms":
        run = train(base_cfg, handle, os.path.join(out_dir, "nms_base"))
        for value in grid:
            eval_and_row(value, run.params, apply_nms=bool(value))
    elif name == "camera_count":
        run = train(base_cfg, handle, os.path.join(out_dir, "camera_base"))
        for count in grid:
            eval_and_row(count, run.params, rig=handle.rig[: int(count)])

    path = os.path.join(out_dir, f"ablation_{name}.csv")
    with open(path, "w") as fh:
        fh.write("value,ap_analog,map,mpjpe_mm,tp,fp,fn\n")
        for row in rows:
            fh.write(",".join([
                str(row["value"]), repr(row["ap_analog"]), repr(row["map"]),
                repr(row["mpjpe_mm"]) if row["mpjpe_mm"] is not None else "",
                str(row["tp"]), str(row["fp"]), str(row["fn"])]) + "\n")
    return rows
