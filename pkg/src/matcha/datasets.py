"""Synthetic benchmark directories: materialization (the synth command) and
loading for the evaluation commands.

Layout: <root>/manifest.json plus features/, keypoints/, gt/, tracks/
subdirectories referenced by relative paths in the manifest.
"""

from dataclasses import dataclass
from fractions import Fraction
import json
import os

import numpy as np

from matcha import kernels
from matcha.errors import ConfigError, DomainError, FormatError
from matcha.evaluate import (
    HomographyPair,
    PosePair,
    SemanticPair,
    TemporalSequence,
    write_tracks,
    read_tracks,
)
from matcha.featuremap import FeatureMap, feature_file_name, read_feature_map, write_feature_map
from matcha.geometry import CameraIntrinsics, Homography, RelativePose, apply_homography
from matcha.ioutil import atomic_write_text
from matcha.losses import CorrespondenceSet, read_correspondences, write_correspondences
from matcha.matching import read_keypoints, write_keypoints
from matcha.synth import (
    PoseSceneConfig,
    _grid_centers_px,
    _pull_map,
    _rng,
    _smooth_plus_blobs,
    SceneGenConfig,
    generate_pose_scene,
    random_warp,
    splat_feature_maps,
)

KINDS = ("homography", "pose", "semantic", "temporal")


@dataclass(frozen=True)
class BenchConfig:
    kind: str
    count: int = 8
    seed: int = 0
    image_size: int = 128
    stride: int = 8
    channels: int = 24
    keypoints_per_image: int = 150
    queries_per_pair: int = 40
    frames_per_sequence: int = 6
    warp_jitter_frac: float = 0.12
    feature_noise_std: float = 0.0
    drift_px_per_frame: float = 6.0
    pose: PoseSceneConfig = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.pose is None:
            object.__setattr__(self, "pose", PoseSceneConfig())


def _unified_pair(seed, cfg: BenchConfig):
    """A warped unified-map pair with its ground-truth homography."""
    rng = _rng(seed, 10)
    scene_cfg = SceneGenConfig(
        image_size=cfg.image_size,
        warp_jitter_frac=cfg.warp_jitter_frac,
        feature_noise_std=cfg.feature_noise_std,
    )
    warp = random_warp(rng, cfg.image_size, cfg.warp_jitter_frac)
    field = _smooth_plus_blobs(rng, cfg.image_size, cfg.channels, scene_cfg)
    n, centers = _grid_centers_px(cfg.image_size, cfg.stride)
    map_a = FeatureMap(
        field(centers).reshape(n, n, cfg.channels), Fraction(cfg.stride), "unified"
    )
    map_b = _pull_map(
        map_a, warp.inverse(), n, centers, cfg.stride, rng,
        cfg.feature_noise_std, "unified",
    )
    return map_a, map_b, warp, rng


def _points_inside_both(rng, warp, size, count, margin=3.0):
    lo, hi = margin, size - 1 - margin
    pts_a, pts_b = [], []
    attempts = 0
    while len(pts_a) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise DomainError("could not place benchmark keypoints")
        p = rng.uniform(lo, hi, size=(1, 2))
        q = apply_homography(warp, p)[0]
        if lo <= q[0] <= hi and lo <= q[1] <= hi:
            pts_a.append(p[0])
            pts_b.append(q)
    return np.array(pts_a), np.array(pts_b)


def _drift_homography(step, drift_px, angle_deg, size):
    c = (size - 1) / 2.0
    th = np.radians(angle_deg * step)
    cos, sin = np.cos(th), np.sin(th)
    # rotate about the image center, then translate
    m = np.array([
        [cos, -sin, c - cos * c + sin * c + drift_px * step],
        [sin, cos, c - sin * c - cos * c],
        [0.0, 0.0, 1.0],
    ])
    return Homography(m)


def write_benchmark(root, cfg: BenchConfig) -> dict:
    """Materialize a benchmark directory; returns the manifest."""
    features = os.path.join(root, "features")
    keypoints = os.path.join(root, "keypoints")
    gt_dir = os.path.join(root, "gt")
    tracks_dir = os.path.join(root, "tracks")
    os.makedirs(root, exist_ok=True)

    manifest = {"kind": cfg.kind, "seed": cfg.seed}
    if cfg.kind == "temporal":
        sequences = []
        for i in range(cfg.count):
            name = f"seq{i:04d}"
            rng = _rng(cfg.seed, 20, i)
            scene_cfg = SceneGenConfig(image_size=cfg.image_size)
            field = _smooth_plus_blobs(rng, cfg.image_size, cfg.channels, scene_cfg)
            n, centers = _grid_centers_px(cfg.image_size, cfg.stride)
            frame0 = FeatureMap(
                field(centers).reshape(n, n, cfg.channels), Fraction(cfg.stride), "unified"
            )
            frame_files = []
            queries = rng.uniform(8, cfg.image_size - 9, size=(cfg.queries_per_pair, 2))
            positions = np.zeros((cfg.frames_per_sequence, cfg.queries_per_pair, 2))
            visibility = np.zeros((cfg.frames_per_sequence, cfg.queries_per_pair), dtype=bool)
            for t in range(cfg.frames_per_sequence):
                warp = _drift_homography(t, cfg.drift_px_per_frame, 1.5, cfg.image_size)
                frame = frame0 if t == 0 else _pull_map(
                    frame0, warp.inverse(), n, centers, cfg.stride, rng,
                    cfg.feature_noise_std, "unified",
                )
                fname = os.path.join("features", feature_file_name(f"{name}_f{t:03d}", "unified"))
                write_feature_map(os.path.join(root, fname), frame)
                frame_files.append(fname)
                pos = apply_homography(warp, queries)
                positions[t] = pos
                visibility[t] = (
                    (pos[:, 0] >= 0) & (pos[:, 0] <= cfg.image_size - 1)
                    & (pos[:, 1] >= 0) & (pos[:, 1] <= cfg.image_size - 1)
                )
            os.makedirs(tracks_dir, exist_ok=True)
            tpath = os.path.join("tracks", f"{name}.csv")
            write_tracks(os.path.join(root, tpath), positions, visibility)
            sequences.append({"name": name, "frames": frame_files, "tracks": tpath})
        manifest["sequences"] = sequences
        atomic_write_text(os.path.join(root, "manifest.json"),
                          json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest

    pairs = []
    for i in range(cfg.count):
        name = f"pair{i:04d}"
        entry = {"name": name}
        if cfg.kind == "pose":
            scene = generate_pose_scene(int(_rng(cfg.seed, 30, i).integers(2**31)), cfg.pose)
            map_a, map_b = splat_feature_maps(
                int(_rng(cfg.seed, 31, i).integers(2**31)), scene,
                stride=cfg.stride, channels=cfg.channels,
            )
            perm = _rng(cfg.seed, 32, i).permutation(len(scene.points_b))
            kps_a, kps_b = scene.points_a, scene.points_b[perm]
            entry["rotation"] = scene.pose.rotation.tolist()
            entry["translation"] = scene.pose.translation.tolist()
            entry["intrinsics"] = {
                "fx": scene.intrinsics.fx, "fy": scene.intrinsics.fy,
                "cx": scene.intrinsics.cx, "cy": scene.intrinsics.cy,
            }
        else:
            map_a, map_b, warp, rng = _unified_pair(int(_rng(cfg.seed, 33, i).integers(2**31)), cfg)
            if cfg.kind == "homography":
                kps_a, kps_b = _points_inside_both(
                    rng, warp, cfg.image_size, cfg.keypoints_per_image
                )
                entry["homography"] = warp.matrix.tolist()
            else:  # semantic
                q_a, q_b = _points_inside_both(rng, warp, cfg.image_size, cfg.queries_per_pair)
                os.makedirs(gt_dir, exist_ok=True)
                gpath = os.path.join("gt", f"{name}.csv")
                write_correspondences(os.path.join(root, gpath), CorrespondenceSet(q_a, q_b))
                entry["correspondences"] = gpath
                x0, y0 = q_b.min(axis=0)
                x1, y1 = q_b.max(axis=0)
                entry["bbox_b"] = [float(x0), float(y0), float(x1), float(y1)]
        for tag, fmap in (("a", map_a), ("b", map_b)):
            fname = os.path.join("features", feature_file_name(f"{name}_{tag}", "unified"))
            write_feature_map(os.path.join(root, fname), fmap)
            entry[f"map_{tag}"] = fname
        if cfg.kind in ("homography", "pose"):
            os.makedirs(keypoints, exist_ok=True)
            for tag, pts in (("a", kps_a), ("b", kps_b)):
                kpath = os.path.join("keypoints", f"{name}_{tag}.csv")
                write_keypoints(os.path.join(root, kpath), pts)
                entry[f"keypoints_{tag}"] = kpath
        pairs.append(entry)
    manifest["pairs"] = pairs
    atomic_write_text(os.path.join(root, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- loading ------------------------------------------------------------------


def _load_manifest(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DomainError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if manifest.get("kind") not in KINDS:
        raise FormatError(f"{path}: unknown dataset kind {manifest.get('kind')!r}")
    return manifest


def _intrinsics_from(doc):
    try:
        return CameraIntrinsics(doc["fx"], doc["fy"], doc["cx"], doc["cy"])
    except KeyError as exc:
        raise FormatError(f"manifest intrinsics missing {exc}") from None


def load_geometric_pairs(root):
    manifest = _load_manifest(root)
    if manifest["kind"] not in ("homography", "pose"):
        raise DomainError(f"{root}: dataset kind {manifest['kind']} is not geometric")
    pairs = []
    for entry in manifest.get("pairs", []):
        map_a = read_feature_map(os.path.join(root, entry["map_a"]))
        map_b = read_feature_map(os.path.join(root, entry["map_b"]))
        kps_a = read_keypoints(os.path.join(root, entry["keypoints_a"]))
        kps_b = read_keypoints(os.path.join(root, entry["keypoints_b"]))
        if manifest["kind"] == "homography":
            pairs.append(HomographyPair(
                entry["name"], map_a, map_b, kps_a, kps_b,
                Homography(np.array(entry["homography"])),
            ))
        else:
            intr = _intrinsics_from(entry["intrinsics"])
            pose = RelativePose(np.array(entry["rotation"]), np.array(entry["translation"]))
            pairs.append(PosePair(
                entry["name"], map_a, map_b, kps_a, kps_b, pose,
                entry.get("intrinsics_a") and _intrinsics_from(entry["intrinsics_a"]) or intr,
                entry.get("intrinsics_b") and _intrinsics_from(entry["intrinsics_b"]) or intr,
            ))
    return manifest["kind"], pairs


def load_semantic_pairs(root):
    manifest = _load_manifest(root)
    if manifest["kind"] != "semantic":
        raise DomainError(f"{root}: dataset kind {manifest['kind']} is not semantic")
    pairs = []
    for entry in manifest.get("pairs", []):
        pairs.append(SemanticPair(
            entry["name"],
            read_feature_map(os.path.join(root, entry["map_a"])),
            read_feature_map(os.path.join(root, entry["map_b"])),
            read_correspondences(os.path.join(root, entry["correspondences"])),
            tuple(entry["bbox_b"]) if entry.get("bbox_b") else None,
        ))
    return pairs


def load_temporal_sequences(root):
    manifest = _load_manifest(root)
    if manifest["kind"] != "temporal":
        raise DomainError(f"{root}: dataset kind {manifest['kind']} is not temporal")
    sequences = []
    for entry in manifest.get("sequences", []):
        frames = [read_feature_map(os.path.join(root, f)) for f in entry["frames"]]
        positions, visibility = read_tracks(os.path.join(root, entry["tracks"]))
        sequences.append(TemporalSequence(entry["name"], frames, positions, visibility))
    return sequences
