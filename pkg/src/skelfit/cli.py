"""Command-line entry point.

Diagnostics go to stderr; machine-readable results go to files. Exit codes:
0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import optim, synth
from .errors import SkelfitError
from .geom import read_obj, write_obj
from .lift import (
    coarse_mesh_from_ellipsoids,
    descriptors_from_ellipsoids,
    fit_part_ellipsoids,
    lift_to_3d,
    match_symmetric_parts,
    place_parts_3d,
    read_descriptors,
)
from .losses import LossWeights
from .render import rasterize
from .silhouette import (
    build_skeleton_graph,
    canonical_frame,
    default_prune_len,
    read_mask,
    thin_silhouette,
    write_graph_json,
    write_pgm,
)
from .skeleton import read_skel, write_skel
from .skinning import FrameParams, forward_skin, skinning_weights
from .geom import SE3, Camera

log = logging.getLogger("skelfit")

PRESETS = {
    "chain3": lambda seed: synth.make_chain(3, root_amplitude=0.12, seed=seed),
    "chain5": lambda seed: synth.make_chain(5, root_amplitude=0.12, seed=seed),
    "quadruped": lambda seed: synth.make_quadruped(seed=seed),
    "quadruped-turntable": lambda seed: _turntable(seed),
}


def _turntable(seed):
    sc = synth.make_quadruped(amplitude=0.0, leg_length=1.3, leg_z_offset=0.15, seed=seed)
    sc.distance_scale = 4.0
    sc.turntable_span = np.deg2rad(144.0)
    sc.width, sc.height = 320, 240
    return sc


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelfit", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=0, help="0 = hardware count")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("skel2d", help="extract a 2D skeleton graph from a mask")
    s.add_argument("mask")
    s.add_argument("out", help="output JSON graph")
    s.add_argument("--prune", type=float, default=None, help="spur prune length (px)")
    s.add_argument("--raster", default=None, help="also write the thinned mask (PGM)")

    s = sub.add_parser("canonical", help="pick the canonical frame of a mask directory")
    s.add_argument("mask_dir")

    s = sub.add_parser("lift", help="lift a mask directory to a 3D skeleton and coarse mesh")
    s.add_argument("mask_dir")
    s.add_argument("out_dir")
    s.add_argument("--descriptors", default=None)
    s.add_argument("--tol", type=float, default=0.15)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("preset", choices=sorted(PRESETS))
    s.add_argument("out_dir")
    s.add_argument("--frames", type=int, default=30)

    s = sub.add_parser("fit", help="run the full reconstruction")
    s.add_argument("obs_dir")
    s.add_argument("out_dir")
    s.add_argument("--config", default=None)
    s.add_argument("--t_o", type=float, default=None)
    s.add_argument("--t_d", type=float, default=None)
    s.add_argument("--t_r", type=float, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")

    s = sub.add_parser("render", help="render silhouettes from a fitted bundle")
    s.add_argument("bundle_dir")
    s.add_argument("out_dir")

    s = sub.add_parser("export", help="summarize a fitted bundle as JSON")
    s.add_argument("bundle_dir")
    s.add_argument("out")
    return p


def _mask_files(d: Path) -> list[Path]:
    files = sorted(list(d.glob("*.pgm")) + list(d.glob("*.png")))
    return [f for f in files if "mask" in f.name or f.suffix == ".png" or "flow" not in f.name]


def cmd_skel2d(args) -> int:
    mask = read_mask(args.mask)
    prune = args.prune if args.prune is not None else default_prune_len(mask)
    skel = thin_silhouette(mask, largest_component=True)
    graph = build_skeleton_graph(skel, prune)
    write_graph_json(args.out, graph)
    if args.raster:
        write_pgm(args.raster, skel)
    log.info("%d nodes, %d edges -> %s", len(graph.nodes), len(graph.edges), args.out)
    return 0


def _graphs_from_dir(d: Path):
    files = _mask_files(d)
    if not files:
        raise SkelfitError(f"no masks in {d}")
    graphs = []
    for f in files:
        m = read_mask(f)
        graphs.append(build_skeleton_graph(thin_silhouette(m, largest_component=True), default_prune_len(m)))
    return files, graphs


def cmd_canonical(args) -> int:
    files, graphs = _graphs_from_dir(Path(args.mask_dir))
    idx = canonical_frame(graphs)
    print(idx)
    log.info("canonical frame: %s", files[idx].name)
    return 0


def cmd_lift(args) -> int:
    files, graphs = _graphs_from_dir(Path(args.mask_dir))
    idx = canonical_frame(graphs)
    mask = read_mask(files[idx])
    graph = graphs[idx]
    ellipsoids = fit_part_ellipsoids(graph, mask)
    if args.descriptors:
        desc = read_descriptors(args.descriptors)
    else:
        desc = descriptors_from_ellipsoids(graph, ellipsoids)
    pairs = match_symmetric_parts(desc, graph, args.tol)
    skel = lift_to_3d(graph, ellipsoids, pairs)
    placed = place_parts_3d(graph, ellipsoids, pairs)
    mesh = coarse_mesh_from_ellipsoids(placed, [(int(a), int(b)) for a, b in skel.joint_bones])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_skel(out / "skeleton_initial.skel", skel)
    write_obj(out / "mesh_coarse.obj", mesh)
    log.info("lifted %d bones, %d joints (canonical frame %d)", skel.num_bones, skel.num_joints, idx)
    return 0


def cmd_synth(args) -> int:
    scene = PRESETS[args.preset](args.seed)
    synth.render_dataset(scene, args.frames, args.out_dir)
    log.info("dataset written to %s", args.out_dir)
    return 0


def cmd_fit(args) -> int:
    cfg = optim.ScheduleConfig(seed=args.seed, threads=args.threads)
    if args.config:
        cfg = optim.load_config(args.config, cfg)
    overrides = {}
    for kv in args.set:
        if "=" not in kv:
            raise SkelfitError(f"--set expects KEY=VALUE, got {kv}")
        k, v = kv.split("=", 1)
        if k.startswith("loss."):
            w = {f: getattr(cfg.weights, f) for f in LossWeights.__dataclass_fields__}
            w[k[5:]] = float(v)
            overrides["weights"] = LossWeights(**w)
        else:
            overrides[k] = optim._parse_scalar(k, v)
    for name in ("t_o", "t_d", "t_r", "epochs"):
        val = getattr(args, name)
        if val is not None:
            overrides[name] = val
    cfg = replace(cfg, **overrides)
    obs = optim.Observations.load(args.obs_dir)
    optim.run_s3o(obs, cfg, out_dir=args.out_dir)
    log.info("bundle written to %s", args.out_dir)
    return 0


def _read_params(bundle: Path):
    import csv as _csv

    frames: dict[int, dict] = {}
    with open(bundle / "params.csv") as fh:
        for row in _csv.DictReader(fh):
            f = int(row["frame"])
            rec = frames.setdefault(f, {"bones": {}})
            R = np.array([float(row[f"r{i}"]) for i in range(9)]).reshape(3, 3)
            t = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
            if row["kind"] == "root":
                rec["root"] = SE3(R, t)
            elif row["kind"] == "bone":
                rec["bones"][int(row["index"])] = SE3(R, t)
            else:
                rec["camera"] = (SE3(R, t), float(row["focal"]))
    return frames


def cmd_render(args) -> int:
    bundle = Path(args.bundle_dir)
    mesh = read_obj(bundle / "mesh_canonical.obj")
    skel = read_skel(bundle / "skeleton_final.skel")
    W = skinning_weights(mesh, skel)
    frames = _read_params(bundle)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first_cam = None
    for f in sorted(frames):
        rec = frames[f]
        ext, focal = rec["camera"]
        if first_cam is None:
            # image size is not stored in params; reuse canonical mask size
            # when present, else a square guess from the focal
            size = _bundle_image_size(bundle, focal)
            first_cam = size
        w, h = first_cam
        cam = Camera(ext, focal, w / 2, h / 2, w, h)
        bones = [rec["bones"][b] for b in sorted(rec["bones"])]
        fp = FrameParams(rec["root"], bones, cam)
        ro = rasterize(forward_skin(mesh, W, fp), cam)
        write_pgm(out / f"render_{f:04d}.pgm", ro.silhouette)
    log.info("rendered %d frames to %s", len(frames), args.out_dir)
    return 0


def _bundle_image_size(bundle: Path, focal: float):
    cfg = bundle / "config_effective.txt"
    size = None
    if (bundle / "image_size.txt").exists():
        w, h = (int(x) for x in (bundle / "image_size.txt").read_text().split())
        size = (w, h)
    if size is None:
        size = (int(round(focal)), int(round(focal * 0.75)))
    return size


def cmd_export(args) -> int:
    bundle = Path(args.bundle_dir)
    skel = read_skel(bundle / "skeleton_final.skel")
    frames = _read_params(bundle)
    doc = {
        "bones": [
            {
                "center": skel.centers[b].tolist(),
                "length": float(skel.lengths[b]),
                "precision": skel.precisions[b].reshape(9).tolist(),
            }
            for b in range(skel.num_bones)
        ],
        "joints": [
            {
                "bones": [int(x) for x in skel.joint_bones[j]],
                "position": skel.joint_positions[j].tolist(),
            }
            for j in range(skel.num_joints)
        ],
        "frames": {
            str(f): {
                "root_rotation": rec["root"].rotation.reshape(9).tolist(),
                "root_translation": rec["root"].translation.tolist(),
            }
            for f, rec in sorted(frames.items())
        },
    }
    Path(args.out).write_text(json.dumps(doc, indent=1))
    log.info("exported %s", args.out)
    return 0


_COMMANDS = {
    "skel2d": cmd_skel2d,
    "canonical": cmd_canonical,
    "lift": cmd_lift,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "render": cmd_render,
    "export": cmd_export,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose > 1 else
        logging.INFO if args.verbose == 1 else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.random.seed(args.seed)
    try:
        return _COMMANDS[args.command](args)
    except SkelfitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
