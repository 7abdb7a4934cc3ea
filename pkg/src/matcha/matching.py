"""Descriptor sampling, mutual nearest-neighbor matching, similarity
heatmaps, and the pointwise accuracy metrics (PCK, MMA)."""

from dataclasses import dataclass
import csv
import io

import numpy as np

from matcha.errors import ConfigError, DomainError, FormatError
from matcha.featuremap import FeatureMap, normalize_rows
from matcha.geometry import Homography, apply_homography
from matcha.ioutil import atomic_write_text
from matcha.losses import CorrespondenceSet, DescriptorSet


@dataclass(frozen=True)
class MatchSet:
    """Matched image-pixel point pairs with a similarity score each."""

    points_a: np.ndarray
    points_b: np.ndarray
    scores: np.ndarray
    image_size_a: tuple = None  # (width, height), informational
    image_size_b: tuple = None

    def __post_init__(self):
        pa = np.asarray(self.points_a, dtype=np.float64).reshape(-1, 2)
        pb = np.asarray(self.points_b, dtype=np.float64).reshape(-1, 2)
        sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (pa.shape[0] == pb.shape[0] == sc.shape[0]):
            raise DomainError("match arrays must have equal length")
        if pa.size and not (
            np.isfinite(pa).all() and np.isfinite(pb).all() and np.isfinite(sc).all()
        ):
            raise DomainError("matches contain non-finite values")
        object.__setattr__(self, "points_a", pa)
        object.__setattr__(self, "points_b", pb)
        object.__setattr__(self, "scores", sc)

    def __len__(self):
        return self.points_a.shape[0]


def grid_sample_clamped(fmap: FeatureMap, points_image: np.ndarray) -> np.ndarray:
    """Bilinear-sample image-pixel points, clamping to the cell-center hull."""
    from matcha import kernels

    grid = fmap.image_to_grid(points_image)
    xs = np.clip(grid[:, 0], 0.0, fmap.width - 1.0)
    ys = np.clip(grid[:, 1], 0.0, fmap.height - 1.0)
    return kernels.bilinear_gather(fmap.data, xs, ys)


def sample_descriptors(fmap: FeatureMap, keypoints, normalize=True) -> DescriptorSet:
    """Descriptors at image-pixel keypoints (bilinear, optionally L2-normalized)."""
    kps = np.atleast_2d(np.asarray(keypoints, dtype=np.float64))
    if kps.ndim != 2 or kps.shape[1] != 2:
        raise DomainError(f"keypoints must be (M, 2), got {kps.shape}")
    bad = (
        (kps[:, 0] < 0)
        | (kps[:, 0] > fmap.image_width - 1)
        | (kps[:, 1] < 0)
        | (kps[:, 1] > fmap.image_height - 1)
        | ~np.isfinite(kps).all(axis=1)
    )
    if bad.any():
        raise DomainError(
            f"keypoints outside image at indices {np.flatnonzero(bad).tolist()}"
        )
    vectors = grid_sample_clamped(fmap, kps)
    if normalize:
        vectors = normalize_rows(vectors)
    return DescriptorSet(vectors, kps)


def mutual_nn_match(da: DescriptorSet, db: DescriptorSet) -> MatchSet:
    """Pairs (i, j) that are each other's highest-similarity neighbor.

    Ties break toward the lowest index. Empty inputs give an empty MatchSet.
    """
    if da.count and db.count and da.dim != db.dim:
        raise DomainError(f"descriptor dims differ: {da.dim} vs {db.dim}")
    if da.count == 0 or db.count == 0:
        empty = np.zeros((0, 2))
        return MatchSet(empty, empty, np.zeros(0))
    if da.keypoints is None or db.keypoints is None:
        raise DomainError("mutual matching needs descriptor source keypoints")
    sim = da.vectors @ db.vectors.T
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    idx_a = np.flatnonzero(nn_ba[nn_ab] == np.arange(da.count))
    idx_b = nn_ab[idx_a]
    return MatchSet(
        da.keypoints[idx_a], db.keypoints[idx_b], sim[idx_a, idx_b]
    )


def dense_argmax_predict(queries: DescriptorSet, target: FeatureMap, normalize=True):
    """Highest-similarity target cell per query, as image-pixel positions.

    Ties break toward the lowest row-major cell index (argmax convention).
    """
    cells = target.data.reshape(-1, target.channels)
    if normalize:
        cells = normalize_rows(cells)
    sim = queries.vectors @ cells.T
    best = np.argmax(sim, axis=1)
    centers = target.cell_centers_image()
    return centers[best], sim[np.arange(len(best)), best]


def similarity_heatmap(query_map: FeatureMap, query_point, target_map: FeatureMap) -> FeatureMap:
    """Cosine similarity of one query descriptor against every target cell,
    affinely rescaled so min -> 0 and max -> 1 (constant map -> 0.5)."""
    desc = sample_descriptors(query_map, [query_point], normalize=True)
    if query_map.channels != target_map.channels:
        raise DomainError(
            f"channel mismatch: {query_map.channels} vs {target_map.channels}"
        )
    cells = normalize_rows(target_map.data.reshape(-1, target_map.channels))
    raw = cells @ desc.vectors[0]
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12:
        scaled = np.full_like(raw, 0.5)
    else:
        scaled = (raw - lo) / (hi - lo)
    data = scaled.reshape(target_map.height, target_map.width, 1)
    return FeatureMap(data, target_map.stride_to_image, "unified")


def pck(pred: CorrespondenceSet, gt: CorrespondenceSet, alpha: float,
        norm_length: float) -> float:
    """Fraction of target-side predictions within alpha * norm_length of GT."""
    if pred.count != gt.count:
        raise DomainError(f"pred has {pred.count} pairs, gt has {gt.count}")
    if pred.count == 0:
        raise DomainError("pck needs at least one pair")
    if norm_length <= 0:
        raise DomainError(f"norm_length must be positive, got {norm_length}")
    err = np.linalg.norm(pred.points_b - gt.points_b, axis=1)
    return float(np.mean(err <= alpha * norm_length))


def mma(matches: MatchSet, h_gt: Homography, thresholds=tuple(range(1, 11))):
    """Fraction of matches with homography transfer error <= t, per threshold."""
    if len(matches) == 0:
        raise DomainError("mma is undefined for an empty match set")
    transferred = apply_homography(h_gt, matches.points_a)
    err = np.linalg.norm(transferred - matches.points_b, axis=1)
    return [float(np.mean(err <= t)) for t in thresholds]


# -- point files ---------------------------------------------------------


def keypoints_to_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"])
    for x, y in np.atleast_2d(points):
        w.writerow([repr(float(x)), repr(float(y))])
    return buf.getvalue()


def write_keypoints(path, points):
    atomic_write_text(path, keypoints_to_csv(points))


def read_keypoints(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["x", "y"]:
        raise FormatError(f"{path}: expected header x,y")
    try:
        pts = [[float(r[0]), float(r[1])] for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def matches_to_csv(matches: MatchSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["xa", "ya", "xb", "yb", "score"])
    for (xa, ya), (xb, yb), s in zip(matches.points_a, matches.points_b, matches.scores):
        w.writerow([repr(float(v)) for v in (xa, ya, xb, yb, s)])
    return buf.getvalue()


def write_matches(path, matches: MatchSet):
    atomic_write_text(path, matches_to_csv(matches))


def read_matches(path) -> MatchSet:
    with open(path, "r", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["xa", "ya", "xb", "yb", "score"]:
        raise FormatError(f"{path}: expected header xa,ya,xb,yb,score")
    try:
        vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    vals = vals.reshape(-1, 5)
    return MatchSet(vals[:, 0:2], vals[:, 2:4], vals[:, 4])
