"""Persistence formats: recordings, taught maps, annotation sets.

Recording files are JSON-lines. The first line is a header carrying
{version, seed, scenario} plus the reconstruction metadata (cameras, dt,
pad dims); every following line is tagged by "type": odom, frame, featobs,
or final_pose. Rasters travel as base64 of the row-major array bytes with
the dtype and shape declared next to them, so a reader needs no side
channel. Appearance is quantized to uint8 on write; every consumer of a
stored recording sees the identical bytes, which is what the determinism
contract needs.

Map files and annotation files are plain JSON / JSON-lines respectively.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .autolabel import AnnotationEntry, AnnotationSet, Recording
from .geom import FisheyeCamera, Pose2, Pose3
from .render import Frame, GtBox
from .vehicle import OdometrySample
from .vslam import TaughtMap

RECORDING_VERSION = 1
MAP_VERSION = 1


class StorageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raster codec


def encode_raster(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr)
    return {
        "shape": list(a.shape),
        "dtype": str(a.dtype),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_raster(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"]))
    return arr.reshape(obj["shape"]).copy()


def _quantize_appearance(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _dequantize_appearance(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# camera codec (cameras ride in the recording header)


def camera_to_dict(cam: FisheyeCamera) -> dict:
    return {
        "cam_id": cam.cam_id,
        "resolution": list(cam.resolution),
        "fov": cam.fov,
        "focal": cam.focal,
        "pp": list(cam.pp),
        "q": [float(v) for v in cam.extrinsic.q],
        "t": [float(v) for v in cam.extrinsic.t],
    }


def camera_from_dict(d: dict) -> FisheyeCamera:
    return FisheyeCamera(
        cam_id=d["cam_id"],
        resolution=tuple(int(v) for v in d["resolution"]),
        fov=float(d["fov"]),
        focal=float(d["focal"]),
        pp=tuple(float(v) for v in d["pp"]),
        extrinsic=Pose3(q=np.asarray(d["q"], dtype=float), t=np.asarray(d["t"], dtype=float)),
    )


# ---------------------------------------------------------------------------
# recording files


def _frame_to_dict(fr: Frame) -> dict:
    d = {
        "type": "frame",
        "t": fr.t,
        "camera_id": fr.camera_id,
        "resolution": list(fr.resolution),
        "gt_boxes": [[float(v) for v in gb.box] for gb in fr.gt_boxes],
        "pad_appearance_id": fr.pad_appearance_id,
    }
    if fr.seg is not None:
        d["seg"] = encode_raster(fr.seg.astype(np.uint8))
    if fr.depth is not None:
        d["depth"] = encode_raster(fr.depth.astype(np.float32))
    if fr.appearance is not None:
        d["appearance"] = encode_raster(_quantize_appearance(fr.appearance))
    return d


def _frame_from_dict(d: dict) -> Frame:
    seg = decode_raster(d["seg"]) if "seg" in d else None
    depth = decode_raster(d["depth"]) if "depth" in d else None
    appearance = _dequantize_appearance(decode_raster(d["appearance"])) if "appearance" in d else None
    return Frame(
        t=float(d["t"]),
        camera_id=d["camera_id"],
        resolution=tuple(int(v) for v in d["resolution"]),
        seg=seg,
        depth=depth,
        appearance=appearance,
        gt_boxes=[GtBox(box=tuple(float(v) for v in b)) for b in d.get("gt_boxes", [])],
        pad_appearance_id=d.get("pad_appearance_id"),
    )


def write_recording(rec: Recording, path, seed: int, scenario: str) -> None:
    header = {
        "version": RECORDING_VERSION,
        "kind": "recording",
        "seed": int(seed),
        "scenario": scenario,
        "dt": rec.dt,
        "pad_dims": list(rec.pad_dims),
        "cameras": [camera_to_dict(c) for c in rec.cameras],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in rec.odometry:
            fh.write(
                json.dumps(
                    {
                        "type": "odom",
                        "dx": sample.delta.x,
                        "dy": sample.delta.y,
                        "dheading": sample.delta.heading,
                        "dt": sample.dt,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for fr in rec.frames:
            fh.write(json.dumps(_frame_to_dict(fr), sort_keys=True) + "\n")
        for t, obs in rec.feature_obs:
            fh.write(
                json.dumps(
                    {
                        "type": "featobs",
                        "t": t,
                        "obs": [[int(i), float(u), float(v)] for i, u, v in obs],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        if rec.final_pad_pose_vehicle is not None:
            p = rec.final_pad_pose_vehicle
            fh.write(
                json.dumps(
                    {"type": "final_pose", "x": p.x, "y": p.y, "heading": p.heading},
                    sort_keys=True,
                )
                + "\n"
            )


def read_recording(path) -> Recording:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise StorageError(f"{path}: empty recording file")
    header = json.loads(lines[0])
    if header.get("version") != RECORDING_VERSION or header.get("kind") != "recording":
        raise StorageError(f"{path}: not a version-{RECORDING_VERSION} recording file")
    odometry: list[OdometrySample] = []
    frames: list[Frame] = []
    feature_obs: list[tuple[float, list]] = []
    final_pose: Pose2 | None = None
    for i, ln in enumerate(lines[1:], start=2):
        d = json.loads(ln)
        kind = d.get("type")
        if kind == "odom":
            odometry.append(
                OdometrySample(delta=Pose2(d["dx"], d["dy"], d["dheading"]), dt=float(d["dt"]))
            )
        elif kind == "frame":
            frames.append(_frame_from_dict(d))
        elif kind == "featobs":
            feature_obs.append((float(d["t"]), [(int(i_), float(u), float(v)) for i_, u, v in d["obs"]]))
        elif kind == "final_pose":
            final_pose = Pose2(d["x"], d["y"], d["heading"])
        else:
            raise StorageError(f"{path}:{i}: unknown line type {kind!r}")
    return Recording(
        frames=tuple(frames),
        odometry=tuple(odometry),
        feature_obs=tuple(feature_obs),
        cameras=tuple(camera_from_dict(c) for c in header.get("cameras", [])),
        final_pad_pose_vehicle=final_pose,
        pad_dims=tuple(header.get("pad_dims", (0.76, 0.62, 0.06))),
        meta={"dt": header.get("dt", 0.1), "seed": header.get("seed"), "scenario": header.get("scenario")},
    )


# ---------------------------------------------------------------------------
# map files


def write_map(taught: TaughtMap, path) -> None:
    doc = {
        "version": MAP_VERSION,
        "keyframes": [[p.x, p.y, p.heading] for p in taught.keyframe_poses],
        "landmarks": {str(k): [float(x) for x in v] for k, v in sorted(taught.landmarks.items())},
        "pad_anchor": [taught.pad_anchor.x, taught.pad_anchor.y, taught.pad_anchor.heading],
        "final_cost": float(taught.stats.get("cost", float("nan"))),
        "camera_id": taught.camera_id,
        "stats": taught.stats,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_map(path) -> TaughtMap:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != MAP_VERSION:
        raise StorageError(f"{path}: not a version-{MAP_VERSION} map file")
    return TaughtMap(
        keyframe_poses=[Pose2(*p) for p in doc["keyframes"]],
        landmarks={int(k): np.asarray(v, dtype=float) for k, v in doc["landmarks"].items()},
        pad_anchor=Pose2(*doc["pad_anchor"]),
        camera_id=doc["camera_id"],
        stats=dict(doc.get("stats", {})),
    )


# ---------------------------------------------------------------------------
# annotation files


def write_annotations(ann: AnnotationSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in ann.entries:
            fh.write(
                json.dumps(
                    {
                        "t": e.t,
                        "camera_id": e.camera_id,
                        "box": [float(v) for v in e.box],
                        "stage": e.stage,
                        "keep": e.keep,
                        "snapped": e.snapped,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_annotations(path) -> AnnotationSet:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if not ln.strip():
                continue
            d = json.loads(ln)
            entries.append(
                AnnotationEntry(
                    t=float(d["t"]),
                    camera_id=d["camera_id"],
                    box=tuple(float(v) for v in d["box"]),
                    stage=d["stage"],
                    keep=bool(d["keep"]),
                    snapped=bool(d.get("snapped", True)),
                )
            )
    return AnnotationSet(entries)
