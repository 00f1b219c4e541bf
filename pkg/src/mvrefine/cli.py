"""Command-line entry points: simulate, train, eval, generalize, ablate,
gradcheck, and a batch triangulation utility.

Configs are JSON documents; `simulate` reads a {"dataset": {...}} section and
`train`/`ablate` a {"train": {...}} section (a bare top-level dict of the
same fields also works).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _load_config(path, section: str) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if section in doc:
        return doc[section]
    return doc


def _dataset_config(args):
    from .scenesim import DatasetConfig

    cfg = DatasetConfig.from_dict(_load_config(args.config, "dataset"))
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _train_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.from_dict(_load_config(args.config, "train"))
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_simulate(args) -> int:
    from .scenesim import generate_dataset

    cfg = _dataset_config(args)
    out = generate_dataset(cfg, args.out, write_maps=args.write_maps)
    total = cfg.train_scenes + cfg.val_scenes + cfg.test_scenes
    print(f"wrote {total} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from .scenesim import load_dataset
    from .trainer import train

    handle = load_dataset(args.data)
    cfg = _train_config(args)
    result = train(cfg, handle, args.out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if result.final_val_mpjpe is not None:
        print(f"val mpjpe:  {result.final_val_mpjpe:.2f} mm")
    print(f"val ap:     {result.final_val_ap}")
    return 0


def _dump_snapshots(result, scene_id: int, view_fh, query_fh) -> None:
    for li, snap in enumerate(result.snapshots):
        Q, J, T, _ = snap.projected2d.shape
        for qi in range(Q):
            k = int(snap.anchor_indices[qi])
            for j in range(J):
                for t in range(T):
                    u = snap.projected2d[qi, j, t]
                    du = snap.residual2d[qi, j, t]
                    c = snap.confidences[qi, j, t]
                    view_fh.write(f"{scene_id},{li},{k},{j},{t},{u[0]!r},{u[1]!r},"
                                  f"{du[0]!r},{du[1]!r},{c!r}\n")
                p = snap.geometry[qi, j]
                query_fh.write(f"{scene_id},{li},{k},{j},{p[0]!r},{p[1]!r},{p[2]!r},"
                               f"{snap.scores[qi]!r}\n")


def cmd_eval(args) -> int:
    from .evalbench import evaluate_split
    from .scenesim import load_dataset
    from .trainer import load_model

    handle = load_dataset(args.data)
    params = load_model(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    report = evaluate_split(params, handle, args.split,
                            apply_nms=not args.no_nms,
                            epsilon=args.epsilon, init=args.init,
                            init_sigma_mm=args.init_sigma,
                            analog_tau=args.analog_tau)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(report.metrics_csv())
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())

    if args.snapshots:
        from .querydecoder import decode, init_queries
        from .skeleton import TPOSE_OFFSETS

        view_path = os.path.join(args.out, "snapshots_views.csv")
        query_path = os.path.join(args.out, "snapshots_queries.csv")
        with open(view_path, "w") as vfh, open(query_path, "w") as qfh:
            vfh.write("scene,layer,query,joint,view,u_x,u_y,du_x,du_y,confidence\n")
            qfh.write("scene,layer,query,joint,p_x,p_y,p_z,score\n")
            for sid in handle.scene_ids(args.split):
                loaded = handle.load_scene(sid)
                maps = handle.feature_maps(loaded)
                queries = init_queries(handle.cfg.space(), params.query_capacity,
                                       TPOSE_OFFSETS, params.embedding_table())
                result = decode(queries, maps, loaded.scene.rig, params,
                                apply_nms=not args.no_nms)
                _dump_snapshots(result, sid, vfh, qfh)
        print(f"snapshots: {view_path}, {query_path}")
    return 0


def cmd_generalize(args) -> int:
    from .evalbench import run_generalization_suite
    from .scenesim import load_dataset

    handle = load_dataset(args.data)
    reports = run_generalization_suite(args.checkpoint, handle, args.out,
                                       baseline_checkpoint=args.baseline_checkpoint)
    for name, rep in reports.items():
        mp = f"{rep.mpjpe_mm:.1f}" if rep.mpjpe_mm is not None else "n/a"
        print(f"{name:22s} ap_analog={rep.ap_analog:.3f} mpjpe={mp}")
    return 0


def cmd_ablate(args) -> int:
    from .evalbench import run_ablation
    from .scenesim import load_dataset

    handle = load_dataset(args.data)
    cfg = _train_config(args)
    grid = []
    for tok in args.grid.split(","):
        tok = tok.strip()
        if tok.lower() in ("true", "false"):
            grid.append(tok.lower() == "true")
        else:
            try:
                grid.append(int(tok))
            except ValueError:
                try:
                    grid.append(float(tok))
                except ValueError:
                    grid.append(tok)
    rows = run_ablation(args.name, grid, cfg, handle, args.out)
    for row in rows:
        print(row)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed or 0, quick=not args.full)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:20s} max rel err {r.max_rel_err:.3e} (tol {r.tolerance:g}) {status}")
        failed |= not r.passed
    return 1 if failed else 0


def cmd_triangulate(args) -> int:
    from .camgeom import load_calibration
    from .triangulation import ViewObservation, reprojection_error, triangulate

    with open(args.config) as fh:
        doc = json.load(fh)
    cams = load_calibration(doc["calibration"])
    results = []
    for entry in doc["points"]:
        obs = [ViewObservation(np.asarray(o["point2d"], dtype=float),
                               float(o["confidence"]), int(o["view"]))
               for o in entry["observations"]]
        res = triangulate(obs, cams)
        results.append({
            "point3d": res.point3d.tolist(),
            "residual": res.residual,
            "effective_views": res.effective_views,
            "reprojection_rms_px": reprojection_error(res.point3d, obs, cams),
        })
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "triangulated.json")
    with open(out_path, "w") as fh:
        json.dump({"points": results}, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvrefine",
                                     description="multi-view pose refinement benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config with a 'dataset' section")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--write-maps", action="store_true",
                   help="also store rendered feature maps on disk")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config with a 'train' section")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--no-nms", action="store_true")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--init", default="grid", choices=["grid", "snap"])
    p.add_argument("--init-sigma", type=float, default=50.0)
    p.add_argument("--analog-tau", type=float, default=100.0)
    p.add_argument("--snapshots", action="store_true",
                   help="dump per-layer refinement traces")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generalize", help="cross-camera benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--name", required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--config", help="JSON config with a 'train' section")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--full", action="store_true", help="acceptance-scale sweep")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("triangulate", help="batch triangulation utility")
    p.add_argument("--config", required=True,
                   help="JSON with 'calibration' path and 'points' observations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_triangulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
