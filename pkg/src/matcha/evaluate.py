"""The three evaluation protocols (geometric, semantic, temporal), report
serialization (JSON + aligned text), and the PGM heatmap writer.

Per-pair work is pure and may run on a thread pool; aggregation is ordered
by pair index so reports are identical at any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import csv
import json

import numpy as np

from matcha.errors import ConfigError, DomainError, FormatError
from matcha.featuremap import FeatureMap
from matcha.geometry import (
    CameraIntrinsics,
    Homography,
    RansacConfig,
    RelativePose,
    estimate_essential_ransac,
    pose_auc,
    pose_error,
)
from matcha.ioutil import atomic_write_bytes, atomic_write_text
from matcha.losses import CorrespondenceSet
from matcha.matching import (
    MatchSet,
    dense_argmax_predict,
    mma,
    mutual_nn_match,
    pck,
    sample_descriptors,
)

MMA_THRESHOLDS = tuple(range(1, 11))
DEFAULT_ALPHAS = (0.05, 0.1, 0.15)


@dataclass(frozen=True)
class HomographyPair:
    name: str
    map_a: FeatureMap
    map_b: FeatureMap
    keypoints_a: np.ndarray
    keypoints_b: np.ndarray
    gt_homography: Homography


@dataclass(frozen=True)
class PosePair:
    name: str
    map_a: FeatureMap
    map_b: FeatureMap
    keypoints_a: np.ndarray
    keypoints_b: np.ndarray
    gt_pose: RelativePose
    intrinsics_a: CameraIntrinsics
    intrinsics_b: CameraIntrinsics


@dataclass(frozen=True)
class SemanticPair:
    name: str
    map_a: FeatureMap
    map_b: FeatureMap
    gt: CorrespondenceSet      # queries in image a, ground truth in image b
    target_bbox: tuple = None  # (x0, y0, x1, y1) of the target object, optional


@dataclass(frozen=True)
class TemporalSequence:
    name: str
    frames: list
    positions: np.ndarray   # (F, P, 2) track positions, image pixels
    visibility: np.ndarray  # (F, P) boolean

    def __post_init__(self):
        f, p = self.visibility.shape
        if self.positions.shape != (f, p, 2):
            raise DomainError("track positions and visibility shapes disagree")
        if len(self.frames) != f:
            raise DomainError(f"{len(self.frames)} frames but {f} track rows")


def _map_threads(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _match_pair(pair, normalize):
    da = sample_descriptors(pair.map_a, pair.keypoints_a, normalize=normalize)
    db = sample_descriptors(pair.map_b, pair.keypoints_b, normalize=normalize)
    return mutual_nn_match(da, db)


def evaluate_geometric(pairs, ransac_config: RansacConfig = None, threads=1,
                       normalize=True) -> dict:
    """Mutual-NN matching, then MMA against GT homographies and pose AUC
    via essential-matrix RANSAC for pose pairs. Per-pair failures are
    recorded and enter the AUC as infinite error."""
    ransac_config = ransac_config or RansacConfig()

    def run_one(item):
        idx, pair = item
        matches = _match_pair(pair, normalize)
        entry = {"name": pair.name, "num_matches": len(matches)}
        if isinstance(pair, HomographyPair):
            entry["kind"] = "homography"
            if len(matches) == 0:
                entry["failure"] = "no matches"
            else:
                entry["mma"] = mma(matches, pair.gt_homography, MMA_THRESHOLDS)
        elif isinstance(pair, PosePair):
            entry["kind"] = "pose"
            if len(matches) < 8:
                entry["failure"] = f"only {len(matches)} matches"
                entry["max_angular_error_deg"] = float("inf")
            else:
                seed = int(np.random.SeedSequence(
                    [ransac_config.seed & 0xFFFFFFFF, idx]).generate_state(1)[0])
                cfg = RansacConfig(
                    max_iterations=ransac_config.max_iterations,
                    inlier_threshold=ransac_config.inlier_threshold,
                    homography_threshold_px=ransac_config.homography_threshold_px,
                    confidence=ransac_config.confidence,
                    lo_rounds=ransac_config.lo_rounds,
                    seed=seed,
                )
                pose, mask = estimate_essential_ransac(
                    matches.points_a, matches.points_b,
                    pair.intrinsics_a, pair.intrinsics_b, cfg,
                )
                if pose is None:
                    entry["failure"] = "estimation failed"
                    entry["max_angular_error_deg"] = float("inf")
                else:
                    rot, trans = pose_error(pose, pair.gt_pose)
                    entry["rotation_error_deg"] = rot
                    entry["translation_error_deg"] = trans
                    entry["max_angular_error_deg"] = max(rot, trans)
                    entry["num_inliers"] = int(mask.sum())
        else:
            raise DomainError(f"unknown pair type {type(pair).__name__}")
        return entry

    results = _map_threads(run_one, list(enumerate(pairs)), threads)
    report = {"protocol": "geometric", "num_pairs": len(pairs), "pairs": results}
    mma_curves = [r["mma"] for r in results if "mma" in r]
    if mma_curves:
        report["mma_thresholds_px"] = list(MMA_THRESHOLDS)
        report["mma_mean"] = [float(v) for v in np.mean(mma_curves, axis=0)]
    pose_errors = [r["max_angular_error_deg"] for r in results
                   if r.get("kind") == "pose" and "max_angular_error_deg" in r]
    if pose_errors:
        report["pose_auc_thresholds_deg"] = [5, 10, 20]
        report["pose_auc"] = pose_auc(pose_errors, (5.0, 10.0, 20.0))
        report["num_pose_failures"] = int(sum(np.isinf(pose_errors)))
    return report


def _check_alphas(alphas):
    alphas = [float(a) for a in alphas]
    if not alphas or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ConfigError(f"alphas must be strictly increasing, got {alphas}")
    return alphas


def _norm_length(pair_map: FeatureMap, bbox, mode):
    if mode == "bbox" and bbox is not None:
        x0, y0, x1, y1 = bbox
        side = max(abs(x1 - x0), abs(y1 - y0))
        if side <= 0:
            raise DomainError(f"degenerate bbox {bbox}")
        return side
    return max(pair_map.image_width, pair_map.image_height)


def evaluate_semantic(pairs, alphas=DEFAULT_ALPHAS, norm_mode="bbox", threads=1,
                      normalize=True) -> dict:
    """Dense-argmax prediction over the target map for each query keypoint,
    scored by PCK. bbox mode normalizes by the target box when present,
    falling back to the image side."""
    alphas = _check_alphas(alphas)
    if norm_mode not in ("bbox", "image"):
        raise ConfigError(f"norm_mode must be bbox or image, got {norm_mode!r}")

    def run_one(pair):
        queries = sample_descriptors(pair.map_a, pair.gt.points_a, normalize=normalize)
        pred_pts, _ = dense_argmax_predict(queries, pair.map_b, normalize=normalize)
        pred = CorrespondenceSet(pair.gt.points_a, pred_pts)
        norm = _norm_length(pair.map_b, pair.target_bbox, norm_mode)
        return {
            "name": pair.name,
            "num_queries": pair.gt.count,
            "norm_length": float(norm),
            "pck": [pck(pred, pair.gt, a, norm) for a in alphas],
        }

    results = _map_threads(run_one, list(pairs), threads)
    report = {
        "protocol": "semantic",
        "norm_mode": norm_mode,
        "alphas": alphas,
        "num_pairs": len(results),
        "pairs": results,
    }
    if results:
        report["pck_mean"] = [float(v) for v in np.mean([r["pck"] for r in results], axis=0)]
    return report


def evaluate_temporal(sequence: TemporalSequence, alphas=DEFAULT_ALPHAS,
                      norm_mode="image", threads=1, normalize=True) -> dict:
    """Match frame-0 queries against every later frame; PCK per frame over
    visible points, occluded points excluded from both sides."""
    alphas = _check_alphas(alphas)
    if norm_mode != "image":
        raise ConfigError("temporal protocol normalizes by the image side")
    frame0 = sequence.frames[0]
    vis0 = sequence.visibility[0]
    if not vis0.any():
        raise DomainError("no visible query points on frame 0")
    query_pts = sequence.positions[0][vis0]
    queries = sample_descriptors(frame0, query_pts, normalize=normalize)
    norm = max(frame0.image_width, frame0.image_height)

    def run_one(t):
        visible = sequence.visibility[t] & vis0
        entry = {"frame": int(t), "num_visible": int(visible.sum())}
        if not visible.any():
            entry["skipped"] = True
            return entry
        keep = visible[vis0]
        from matcha.losses import DescriptorSet

        sub = DescriptorSet(queries.vectors[keep], queries.keypoints[keep])
        pred_pts, _ = dense_argmax_predict(sub, sequence.frames[t], normalize=normalize)
        gt_pts = sequence.positions[t][visible]
        pred = CorrespondenceSet(sub.keypoints, pred_pts)
        gt = CorrespondenceSet(sub.keypoints, gt_pts)
        entry["pck"] = [pck(pred, gt, a, norm) for a in alphas]
        return entry

    results = _map_threads(run_one, list(range(1, len(sequence.frames))), threads)
    report = {
        "protocol": "temporal",
        "name": sequence.name,
        "alphas": alphas,
        "norm_length": float(norm),
        "num_frames": len(sequence.frames),
        "frames": results,
        "num_skipped_frames": int(sum(1 for r in results if r.get("skipped"))),
    }
    scored = [r["pck"] for r in results if "pck" in r]
    if scored:
        report["pck_mean"] = [float(v) for v in np.mean(scored, axis=0)]
    return report


# -- report output ---------------------------------------------------------


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _fmt_row(cells, widths):
    return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()


def report_to_text(report: dict) -> str:
    """Aligned-column rendering of any protocol report."""
    lines = [f"protocol: {report['protocol']}"]
    for key in ("norm_mode", "name"):
        if key in report:
            lines.append(f"{key}: {report[key]}")
    if "mma_mean" in report:
        lines.append("mean matching accuracy (px threshold: fraction)")
        rows = [(t, f"{v:.4f}") for t, v in zip(report["mma_thresholds_px"], report["mma_mean"])]
        widths = [max(len(str(r[i])) for r in rows) for i in range(2)]
        lines += [_fmt_row(r, widths) for r in rows]
    if "pose_auc" in report:
        lines.append("pose AUC (deg threshold: value)")
        for t, v in zip(report["pose_auc_thresholds_deg"], report["pose_auc"]):
            lines.append(f"{t:>3}: {v:.4f}")
    if "pck_mean" in report:
        lines.append("PCK (alpha: value)")
        for a, v in zip(report["alphas"], report["pck_mean"]):
            lines.append(f"{a}: {v:.4f}")
    section = report.get("pairs") or report.get("frames") or []
    if section:
        keys = sorted({k for entry in section for k in entry})
        rows = [keys] + [[entry.get(k, "") for k in keys] for entry in section]
        rendered = [[_cell_text(c) for c in row] for row in rows]
        widths = [max(len(r[i]) for r in rendered) for i in range(len(keys))]
        lines.append("")
        lines += [_fmt_row(r, widths) for r in rendered]
    return "\n".join(lines) + "\n"


def _cell_text(value):
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, list):
        return "/".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in value)
    return str(value)


def write_report(path, report: dict, fmt: str):
    if fmt == "json":
        atomic_write_text(path, report_to_json(report))
    elif fmt == "text":
        atomic_write_text(path, report_to_text(report))
    else:
        raise ConfigError(f"report format must be json or text, got {fmt!r}")


# -- PGM heatmaps ------------------------------------------------------------


def write_pgm(path, values: np.ndarray):
    """8-bit binary PGM of values in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DomainError(f"PGM needs a 2D array, got shape {arr.shape}")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise DomainError("PGM values must lie in [0, 1]")
    pixels = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + pixels.tobytes())


# -- track CSV ---------------------------------------------------------------


def tracks_to_csv(positions: np.ndarray, visibility: np.ndarray) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "point_id", "x", "y", "visible"])
    f, p = visibility.shape
    for t in range(f):
        for i in range(p):
            x, y = positions[t, i]
            w.writerow([t, i, repr(float(x)), repr(float(y)), int(visibility[t, i])])
    return buf.getvalue()


def write_tracks(path, positions, visibility):
    atomic_write_text(path, tracks_to_csv(positions, visibility))


def read_tracks(path):
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame", "point_id", "x", "y", "visible"]:
        raise FormatError(f"{path}: expected header frame,point_id,x,y,visible")
    try:
        recs = [(int(r[0]), int(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not recs:
        raise FormatError(f"{path}: no track records")
    n_frames = max(r[0] for r in recs) + 1
    n_points = max(r[1] for r in recs) + 1
    positions = np.zeros((n_frames, n_points, 2))
    visibility = np.zeros((n_frames, n_points), dtype=bool)
    for t, i, x, y, vis in recs:
        positions[t, i] = (x, y)
        visibility[t, i] = bool(vis)
    return positions, visibility
