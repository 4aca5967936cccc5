"""Command line surface tying the pipeline together.

Exit codes: 0 success, 2 input error, 3 registry error, 4 lock
contention, 5 overlay produced no drawing. Data goes to standard output
or the named output files; diagnostics go to the error stream.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import imaging, marker, registry, synth
from . import pose as posemod
from .errors import (
    FormatError,
    GeometryError,
    LockContentionError,
    RegistryError,
    SceneError,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_REGISTRY = 3
EXIT_LOCK = 4
EXIT_NO_OVERLAY = 5


def _err(msg: str) -> None:
    print(f"arsite: {msg}", file=sys.stderr)


def _load_dictionary(path: str | None) -> marker.MarkerDictionary:
    if path is None:
        return marker.default_dictionary()
    return marker.load_markers(path)


def _load_intrinsics(path: str | None) -> posemod.CameraIntrinsics:
    if path is None:
        return synth.DEFAULT_INTRINSICS
    return posemod.load_camera(path)


def _threshold(text: str) -> int | None:
    if text.lower() == "auto":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold must be an integer or 'auto', got {text!r}")
    if not 0 <= value <= 255:
        raise argparse.ArgumentTypeError(f"threshold {value} outside [0, 255]")
    return value


def _pose_json(p: posemod.Pose) -> dict:
    return {
        "R": [float(v) for v in p.R.ravel()],
        "t": [float(v) for v in p.t],
    }


def _pose_from_json(rec: dict) -> posemod.Pose:
    R = np.asarray(rec["R"], dtype=np.float64).reshape(3, 3)
    t = np.asarray(rec["t"], dtype=np.float64)
    return posemod.Pose(R, t)


# ---------------------------------------------------------------------------
# detect

def cmd_detect(args) -> int:
    try:
        dictionary = _load_dictionary(args.markers)
        cam = _load_intrinsics(args.intrinsics)
        store = registry.load_site(args.site) if args.site else None
    except (OSError, FormatError) as e:
        _err(str(e))
        return EXIT_INPUT

    frames = list(args.image or []) + list(args.images or [])
    if not frames:
        _err("no input frames: pass --image or --images")
        return EXIT_INPUT

    params = marker.DetectParams(threshold=args.threshold, min_confidence=args.min_confidence)
    names = {}
    if store is not None:
        names = {b.marker_id: b.name for b in store.buildings if b.marker_id is not None}

    if args.plot_dir:
        os.makedirs(args.plot_dir, exist_ok=True)

    out_fh = open(args.out, "w") if args.out else sys.stdout
    failed = False
    try:
        for path in frames:
            try:
                img = imaging.load_pgm(path)
            except (OSError, FormatError) as e:
                _err(str(e))
                failed = True
                continue
            detections = marker.detect_markers(img, dictionary, params)
            rows = []
            for det in detections:
                tpl = dictionary.get(det.marker_id)
                try:
                    p = posemod.estimate_pose(det.corners, tpl.side_m, cam)
                    if args.refine:
                        p, degraded = posemod.refine_pose(p, det.corners, tpl.side_m, cam)
                        if degraded:
                            _err(f"{path}: refinement degraded for marker {det.marker_id}")
                    err_px = posemod.reprojection_error(p, det.corners, tpl.side_m, cam)
                except GeometryError as e:
                    _err(f"{path}: pose failed for marker {det.marker_id}: {e}")
                    continue
                rows.append(
                    {
                        "marker_id": det.marker_id,
                        "building": names.get(det.marker_id),
                        "corners": [[float(x), float(y)] for x, y in det.corners],
                        "rotation": det.rotation,
                        "confidence": det.confidence,
                        "pose": _pose_json(p),
                        "reprojection_error_px": err_px,
                    }
                )
            out_fh.write(json.dumps({"frame": path, "detections": rows}) + "\n")
            if args.plot_dir:
                from . import plotting

                stem = os.path.splitext(os.path.basename(path))[0]
                plotting.save_detection_figure(
                    img,
                    detections,
                    os.path.join(args.plot_dir, stem + ".png"),
                    names=names,
                    title=os.path.basename(path),
                )
    finally:
        if args.out:
            out_fh.close()
    return EXIT_INPUT if failed else EXIT_OK


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    try:
        dictionary = _load_dictionary(args.markers)
        cam = _load_intrinsics(args.intrinsics)
    except (OSError, FormatError) as e:
        _err(str(e))
        return EXIT_INPUT

    tpl = dictionary.get(args.marker_id)
    if tpl is None:
        _err(f"marker id {args.marker_id} not in dictionary")
        return EXIT_INPUT

    parts = args.pose.split(",")
    if len(parts) != 6:
        _err(f"--pose needs 6 comma-separated numbers, got {args.pose!r}")
        return EXIT_INPUT
    try:
        yaw, pitch, roll, tx, ty, tz = (float(v) for v in parts)
    except ValueError:
        _err(f"--pose needs numeric fields, got {args.pose!r}")
        return EXIT_INPUT

    try:
        pose = synth.pose_from_euler(yaw, pitch, roll, (tx, ty, tz))
        scene = synth.SynthScene(
            template=tpl,
            pose=pose,
            intrinsics=cam,
            background=args.background,
            noise_sigma=args.noise,
            seed=args.seed,
        )
        img = synth.render_marker(scene)
    except (GeometryError, SceneError) as e:
        _err(str(e))
        return EXIT_INPUT

    try:
        imaging.save_pgm(img, args.out)
        sidecar = {
            "pose": _pose_json(pose),
            "marker_id": tpl.id,
            "seed": args.seed,
        }
        sidecar_path = os.path.splitext(args.out)[0] + ".json"
        with open(sidecar_path, "w") as fh:
            json.dump(sidecar, fh, indent=2)
            fh.write("\n")
    except OSError as e:
        _err(str(e))
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------------------
# site

def _load_store_or_empty(path: str) -> registry.SiteStore:
    if os.path.exists(path):
        return registry.load_site(path)
    return registry.SiteStore()


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def _site_mutate(args, apply) -> int:
    """Common flow for mutating site subcommands: lock, load, apply, save."""
    try:
        with registry.site_lock(args.site):
            store = _load_store_or_empty(args.site)
            result = apply(store)
            registry.save_site(store, args.site)
    except LockContentionError as e:
        _err(str(e))
        return EXIT_LOCK
    except RegistryError as e:
        _err(str(e))
        return EXIT_REGISTRY
    except (OSError, FormatError) as e:
        _err(str(e))
        return EXIT_INPUT
    _print_json(result)
    return EXIT_OK


def cmd_site_building_add(args) -> int:
    def apply(store):
        record = registry.BuildingRecord(
            id=args.id,
            name=args.name,
            description=args.description,
            marker_id=args.marker,
            model_path=args.model,
        )
        registry.upsert_building(store, record)
        return registry.building_to_json(record)

    return _site_mutate(args, apply)


def cmd_site_building_list(args) -> int:
    try:
        store = _load_store_or_empty(args.site)
    except (OSError, FormatError) as e:
        _err(str(e))
        return EXIT_INPUT
    _print_json(registry.store_to_json(store)["buildings"])
    return EXIT_OK


def cmd_site_comment_add(args) -> int:
    timestamp = args.timestamp if args.timestamp is not None else int(time.time())

    def apply(store):
        registry.post_comment(store, args.author, args.text, timestamp)
        return {"author": args.author, "timestamp": timestamp, "text": args.text}

    return _site_mutate(args, apply)


def cmd_site_comment_list(args) -> int:
    try:
        store = _load_store_or_empty(args.site)
    except (OSError, FormatError) as e:
        _err(str(e))
        return EXIT_INPUT
    _print_json(registry.store_to_json(store)["comments"])
    return EXIT_OK


def cmd_site_manager_add(args) -> int:
    def apply(store):
        registry.add_manager(store, args.name)
        return {"name": args.name}

    return _site_mutate(args, apply)


def cmd_site_bind(args) -> int:
    def apply(store):
        building = registry.lookup_building(store, args.building)
        if building is None:
            raise registry.ValidationError(f"no building with id {args.building}")
        updated = dataclasses.replace(building, marker_id=args.marker)
        registry.upsert_building(store, updated)
        return registry.building_to_json(updated)

    return _site_mutate(args, apply)


# ---------------------------------------------------------------------------
# overlay

def _bresenham(x0: int, y0: int, x1: int, y1: int):
    """Integer Bresenham pixels from (x0, y0) to (x1, y1), inclusive."""
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx - dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x0 += sx
        if e2 < dx:
            err += dx
            y0 += sy


def _draw_segment(img: np.ndarray, p0, p1, value: int = 255) -> int:
    """Rasterize a 1 px segment, clipping to the frame. Returns pixels set."""
    h, w = img.shape
    x0 = int(np.floor(p0[0] + 0.5))
    y0 = int(np.floor(p0[1] + 0.5))
    x1 = int(np.floor(p1[0] + 0.5))
    y1 = int(np.floor(p1[1] + 0.5))
    n = 0
    for x, y in _bresenham(x0, y0, x1, y1):
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = value
            n += 1
    return n


def cmd_overlay(args) -> int:
    try:
        frame = imaging.load_pgm(args.frame)
        store = registry.load_site(args.site)
        cam = _load_intrinsics(args.intrinsics)
        with open(args.detections) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
    except (OSError, FormatError, json.JSONDecodeError) as e:
        _err(str(e))
        return EXIT_INPUT

    frame_key = os.path.basename(args.frame)
    rows = [
        rec
        for rec in lines
        if rec.get("frame") == args.frame or os.path.basename(rec.get("frame", "")) == frame_key
    ]

    img = frame.copy()
    drawn = 0
    for rec in rows:
        for det in rec.get("detections", []):
            building = registry.lookup_by_marker(store, det.get("marker_id"))
            if building is None or not building.model_path:
                _err(f"marker {det.get('marker_id')}: no bound building with a mesh, skipping")
                continue
            try:
                mesh = posemod.load_obj(building.model_path)
            except (OSError, FormatError) as e:
                _err(f"building {building.id}: {e}")
                continue
            try:
                pose = _pose_from_json(det["pose"])
                mv = posemod.model_view_matrix(pose)
                segments = posemod.project_model(mesh, mv, cam)
            except (KeyError, ValueError) as e:
                _err(f"building {building.id}: bad detection pose: {e}")
                continue
            if not segments:
                _err(f"building {building.id}: mesh fully behind camera, nothing drawn")
                continue
            pixels = 0
            for a, b in segments:
                pixels += _draw_segment(img, a, b)
            if pixels > 0:
                drawn += 1

    try:
        imaging.save_pgm(img, args.out)
    except OSError as e:
        _err(str(e))
        return EXIT_INPUT
    return EXIT_OK if drawn > 0 else EXIT_NO_OVERLAY


# ---------------------------------------------------------------------------
# marker files

def cmd_marker_init(args) -> int:
    try:
        marker.save_markers(marker.default_dictionary(), args.out)
    except OSError as e:
        _err(str(e))
        return EXIT_INPUT
    print(args.out)
    return EXIT_OK


def cmd_marker_render(args) -> int:
    try:
        dictionary = _load_dictionary(args.markers)
    except (OSError, FormatError) as e:
        _err(str(e))
        return EXIT_INPUT
    tpl = dictionary.get(args.id)
    if tpl is None:
        _err(f"marker id {args.id} not in dictionary")
        return EXIT_INPUT
    try:
        img = marker.generate_marker_image(tpl, cell_px=args.cell_px)
    except ValueError as e:
        _err(str(e))
        return EXIT_INPUT
    try:
        imaging.save_pgm(img, args.out)
    except OSError as e:
        _err(str(e))
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="arsite",
        description="Square fiducial marker tracking and site registry toolkit.",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("detect", help="detect marks in PGM frames, stream JSONL reports")
    d.add_argument("--image", action="append", help="input PGM frame (repeatable)")
    d.add_argument("--images", nargs="+", help="ordered list of PGM frames")
    d.add_argument("--markers", help="marker dictionary JSON (default: built-in)")
    d.add_argument("--intrinsics", help="camera JSON (default: built-in 640x480)")
    d.add_argument("--site", help="site.json for building name joins")
    d.add_argument("--threshold", type=_threshold, default=128, help="0..255 or 'auto'")
    d.add_argument("--min-confidence", type=float, default=0.8)
    d.add_argument("--refine", action="store_true", help="Gauss-Newton pose polish")
    d.add_argument("--out", help="JSONL output path (default: stdout)")
    d.add_argument("--plot-dir", help="also save a detection figure PNG per frame")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("synth", help="render a ground-truth frame of one mark")
    s.add_argument("--markers", help="marker dictionary JSON (default: built-in)")
    s.add_argument("--marker-id", type=int, required=True)
    s.add_argument("--pose", required=True, help="yaw,pitch,roll,tx,ty,tz (deg, m)")
    s.add_argument("--intrinsics", help="camera JSON (default: built-in 640x480)")
    s.add_argument("--background", type=int, default=255)
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian sigma in grey levels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output PGM; sidecar JSON lands next to it")
    s.set_defaults(func=cmd_synth)

    site = sub.add_parser("site", help="manage the site registry")
    site.add_argument("--site", default="site.json", help="registry path (default: site.json)")
    site_sub = site.add_subparsers(dest="site_cmd", required=True)

    def leaf(parent_sub, name, func, help=None):
        # --site is also accepted after the subcommand; SUPPRESS keeps the
        # leaf from clobbering the value the parent parser already set.
        sp = parent_sub.add_parser(name, help=help)
        sp.add_argument("--site", default=argparse.SUPPRESS, help="registry path")
        sp.set_defaults(func=func)
        return sp

    b = site_sub.add_parser("building", help="building records")
    b_sub = b.add_subparsers(dest="building_cmd", required=True)
    ba = leaf(b_sub, "add", cmd_site_building_add)
    ba.add_argument("--id", type=int, required=True)
    ba.add_argument("--name", required=True)
    ba.add_argument("--description", default="")
    ba.add_argument("--marker", type=int, default=None, help="marker id to bind")
    ba.add_argument("--model", default=None, help="OBJ mesh path for overlays")
    leaf(b_sub, "list", cmd_site_building_list)

    c = site_sub.add_parser("comment", help="visitor comments")
    c_sub = c.add_subparsers(dest="comment_cmd", required=True)
    ca = leaf(c_sub, "add", cmd_site_comment_add)
    ca.add_argument("--author", required=True)
    ca.add_argument("--text", required=True)
    ca.add_argument("--timestamp", type=int, default=None, help="UTC seconds (default: now)")
    leaf(c_sub, "list", cmd_site_comment_list)

    m = site_sub.add_parser("manager", help="manager records")
    m_sub = m.add_subparsers(dest="manager_cmd", required=True)
    ma = leaf(m_sub, "add", cmd_site_manager_add)
    ma.add_argument("--name", required=True)

    bind = leaf(site_sub, "bind", cmd_site_bind, help="bind an existing building to a marker")
    bind.add_argument("--building", type=int, required=True)
    bind.add_argument("--marker", type=int, required=True)

    o = sub.add_parser("overlay", help="draw mesh wireframes onto a frame")
    o.add_argument("--detections", required=True, help="JSONL from detect")
    o.add_argument("--site", required=True)
    o.add_argument("--intrinsics", help="camera JSON (default: built-in 640x480)")
    o.add_argument("--frame", required=True, help="input PGM")
    o.add_argument("--out", required=True, help="output PGM")
    o.set_defaults(func=cmd_overlay)

    mk = sub.add_parser("marker", help="marker dictionary files")
    mk_sub = mk.add_subparsers(dest="marker_cmd", required=True)
    mi = mk_sub.add_parser("init", help="write the built-in dictionary as JSON")
    mi.add_argument("--out", default="markers.json")
    mi.set_defaults(func=cmd_marker_init)
    mr = mk_sub.add_parser("render", help="render one mark to a printable PGM")
    mr.add_argument("--id", type=int, required=True)
    mr.add_argument("--markers", help="marker dictionary JSON (default: built-in)")
    mr.add_argument("--cell-px", type=int, default=16)
    mr.add_argument("--out", required=True)
    mr.set_defaults(func=cmd_marker_render)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
