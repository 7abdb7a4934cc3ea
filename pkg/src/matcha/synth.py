"""Seeded synthetic data: warped feature-field scenes for training, pose
scenes for robust-geometry evaluation, and benchmark directories for the
evaluation CLI.

Base fields are smooth low-frequency noise plus localized descriptor blobs;
the second view is the base grid bilinearly pulled through the ground-truth
warp with per-channel noise, so correspondences are exact by construction.
"""

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from matcha import kernels
from matcha.errors import ConfigError, DomainError
from matcha.featuremap import FeatureMap
from matcha.geometry import (
    CameraIntrinsics,
    Homography,
    RelativePose,
    apply_homography,
    homography_from_corners,
    random_rotation,
)
from matcha.losses import CorrespondenceSet


@dataclass(frozen=True)
class SceneGenConfig:
    image_size: int = 128
    geo_stride: int = 8
    sem_stride: int = 16
    dino_stride: int = 14
    in_dim_geometric: int = 32
    in_dim_semantic: int = 64
    dino_dim: int = 128
    smooth_cells: int = 5
    field_amplitude: float = 1.0
    num_blobs: int = 12
    blob_sigma_px: float = 10.0
    blob_amplitude: float = 1.5
    warp_jitter_frac: float = 0.15
    feature_noise_std: float = 0.02
    # View-inconsistent smooth fields on a fixed trailing channel block of
    # the raw semantic/geometric maps. They bury the warp-consistent signal
    # for an untrained readout while staying linearly suppressible, which is
    # what the supervised stages must learn to do.
    distractor_fraction: float = 0.0
    distractor_amplitude: float = 2.0
    keypoint_count: int = 64
    keypoint_margin_px: float = 4.0
    keypoint_min_separation_px: float = 0.0
    outlier_fraction: float = 0.0
    supervision: str = "geometric"

    def __post_init__(self):
        if not 0 < self.warp_jitter_frac <= 0.25:
            raise ConfigError(
                f"homography corner jitter must be in (0, 0.25], got {self.warp_jitter_frac}"
            )
        if not 0 <= self.distractor_fraction < 1:
            raise ConfigError(
                f"distractor fraction must be in [0, 1), got {self.distractor_fraction}"
            )
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError(f"outlier fraction must be in [0, 1), got {self.outlier_fraction}")
        if self.supervision not in ("geometric", "semantic"):
            raise ConfigError(f"unknown supervision kind {self.supervision!r}")
        if self.keypoint_count < 1 or self.image_size < 16:
            raise ConfigError("scene too small")


@dataclass(frozen=True)
class SyntheticScene:
    semantic_a: FeatureMap
    geometric_a: FeatureMap
    dino_a: FeatureMap
    semantic_b: FeatureMap
    geometric_b: FeatureMap
    dino_b: FeatureMap
    warp: Homography
    correspondences: CorrespondenceSet
    inlier_mask: np.ndarray
    supervision: str
    seed: int


def _rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *tags]))


def _smooth_plus_blobs(rng, size_px, channels, cfg: SceneGenConfig):
    """Continuous base field sampled on demand: coarse grid + blob list."""
    coarse = rng.normal(0.0, cfg.field_amplitude, size=(cfg.smooth_cells, cfg.smooth_cells, channels))
    centers = rng.uniform(0, size_px - 1, size=(cfg.num_blobs, 2))
    vectors = rng.normal(0.0, cfg.blob_amplitude, size=(cfg.num_blobs, channels))

    def evaluate(points_px):
        pts = np.asarray(points_px, dtype=np.float64)
        u = pts / (size_px - 1) * (cfg.smooth_cells - 1)
        xs = np.clip(u[:, 0], 0, cfg.smooth_cells - 1)
        ys = np.clip(u[:, 1], 0, cfg.smooth_cells - 1)
        out = kernels.bilinear_gather(coarse, xs, ys)
        for c, v in zip(centers, vectors):
            d2 = ((pts - c) ** 2).sum(axis=1)
            out = out + np.exp(-d2 / (2.0 * cfg.blob_sigma_px**2))[:, None] * v
        return out

    return evaluate


def _grid_centers_px(size_px, stride):
    n = size_px // stride
    coords = np.arange(n) * stride + stride / 2.0 - 0.5
    xs, ys = np.meshgrid(coords, coords)
    return n, np.column_stack([xs.ravel(), ys.ravel()])


def random_warp(rng, size_px, jitter_frac, retries=20) -> Homography:
    corners = np.array(
        [[0.0, 0.0], [size_px - 1.0, 0.0], [size_px - 1.0, size_px - 1.0], [0.0, size_px - 1.0]]
    )
    jitter = jitter_frac * size_px
    for _ in range(retries):
        dst = corners + rng.uniform(-jitter, jitter, size=(4, 2))
        try:
            h = homography_from_corners(corners, dst)
        except (DomainError, np.linalg.LinAlgError):
            continue
        return h
    raise DomainError(f"no invertible warp after {retries} attempts")


def _pull_map(base: FeatureMap, warp_inv: Homography, n, centers_b, stride, rng, noise_std, role):
    """View-b grid: base features bilinearly pulled through the inverse warp."""
    src_px = apply_homography(warp_inv, centers_b)
    grid = base.image_to_grid(src_px)
    xs = np.clip(grid[:, 0], 0, base.width - 1.0)
    ys = np.clip(grid[:, 1], 0, base.height - 1.0)
    data = kernels.bilinear_gather(base.data, xs, ys)
    if noise_std > 0:
        data = data + rng.normal(0.0, noise_std, size=data.shape)
    return FeatureMap(data.reshape(n, n, base.channels), Fraction(stride), role)


def _sample_keypoints(rng, warp, cfg: SceneGenConfig):
    """Keypoints inside both views, never at exact cell centers.

    With a minimum separation, points come from a jittered slot grid (a
    visibility-pruned permutation of slots), which bounds the rejection work
    and guarantees the separation exactly.
    """
    m = cfg.keypoint_count
    margin = cfg.keypoint_margin_px
    min_sep = cfg.keypoint_min_separation_px
    lo, hi = margin, cfg.image_size - 1 - margin
    pts_a, pts_b = [], []

    def try_point(p):
        q = apply_homography(warp, p[None])[0]
        if lo <= q[0] <= hi and lo <= q[1] <= hi:
            pts_a.append(p)
            pts_b.append(q)

    if min_sep > 0:
        per_axis = int(np.ceil(np.sqrt(m / 0.7)))
        pitch = (hi - lo) / per_axis
        jitter = (pitch - min_sep) / 2.0
        if jitter <= 0:
            raise ConfigError(
                f"cannot fit {m} keypoints at separation {min_sep} in a "
                f"{cfg.image_size} px image"
            )
        centers = lo + pitch / 2.0 + pitch * np.arange(per_axis)
        slots = np.array([(x, y) for y in centers for x in centers])
        for idx in rng.permutation(len(slots)):
            if len(pts_a) == m:
                break
            try_point(slots[idx] + rng.uniform(-jitter, jitter, 2))
        if len(pts_a) < m:
            raise DomainError(
                f"warp leaves only {len(pts_a)} of {m} separated keypoints visible"
            )
    else:
        attempts = 0
        while len(pts_a) < m:
            attempts += 1
            if attempts > 500 * m:
                raise DomainError("could not place keypoints inside both views")
            try_point(rng.uniform(lo, hi, size=2))
    return np.array(pts_a), np.array(pts_b)


def generate_scene(seed: int, cfg: SceneGenConfig) -> SyntheticScene:
    """Deterministic warped-pair scene with exact sparse correspondences."""
    rng = _rng(seed, 0)
    warp = random_warp(rng, cfg.image_size, cfg.warp_jitter_frac)
    warp_inv = warp.inverse()

    families = (
        ("semantic", cfg.sem_stride, cfg.in_dim_semantic, "semantic_raw"),
        ("geometric", cfg.geo_stride, cfg.in_dim_geometric, "geometric_raw"),
        ("dino", cfg.dino_stride, cfg.dino_dim, "dino"),
    )
    maps_a, maps_b = {}, {}
    for name, stride, channels, role in families:
        n_dis = int(cfg.distractor_fraction * channels) if name != "dino" else 0
        n_sig = channels - n_dis
        field = _smooth_plus_blobs(rng, cfg.image_size, n_sig, cfg)
        n, centers = _grid_centers_px(cfg.image_size, stride)
        base = FeatureMap(field(centers).reshape(n, n, n_sig), Fraction(stride), role)
        pulled = _pull_map(base, warp_inv, n, centers, stride, rng, cfg.feature_noise_std, role)
        data_a, data_b = base.data, pulled.data
        if n_dis:
            dis_cfg = replace(cfg, num_blobs=0, field_amplitude=cfg.distractor_amplitude)
            dis_a = _smooth_plus_blobs(rng, cfg.image_size, n_dis, dis_cfg)
            dis_b = _smooth_plus_blobs(rng, cfg.image_size, n_dis, dis_cfg)
            data_a = np.concatenate([data_a, dis_a(centers).reshape(n, n, n_dis)], axis=2)
            data_b = np.concatenate([data_b, dis_b(centers).reshape(n, n, n_dis)], axis=2)
        maps_a[name] = FeatureMap(data_a, Fraction(stride), role)
        maps_b[name] = FeatureMap(data_b, Fraction(stride), role)

    pts_a, pts_b = _sample_keypoints(rng, warp, cfg)

    m = cfg.keypoint_count
    inlier_mask = np.ones(m, dtype=bool)
    n_out = int(round(cfg.outlier_fraction * m))
    if n_out:
        idx = rng.choice(m, size=n_out, replace=False)
        pts_b[idx] = rng.uniform(lo, hi, size=(n_out, 2))
        inlier_mask[idx] = False

    return SyntheticScene(
        semantic_a=maps_a["semantic"], geometric_a=maps_a["geometric"], dino_a=maps_a["dino"],
        semantic_b=maps_b["semantic"], geometric_b=maps_b["geometric"], dino_b=maps_b["dino"],
        warp=warp,
        correspondences=CorrespondenceSet(pts_a, pts_b),
        inlier_mask=inlier_mask,
        supervision=cfg.supervision,
        seed=seed,
    )


# -- pose scenes ---------------------------------------------------------


@dataclass(frozen=True)
class PoseSceneConfig:
    num_points: int = 100
    image_width: int = 640
    image_height: int = 480
    focal: float = 600.0
    max_rotation_deg: float = 30.0
    baseline: float = 1.0
    depth_min: float = 4.0
    depth_max: float = 10.0
    pixel_noise_std: float = 0.5
    outlier_fraction: float = 0.3

    def __post_init__(self):
        if not 0 < self.max_rotation_deg <= 30.0:
            raise ConfigError(f"rotation bound must be in (0, 30] deg, got {self.max_rotation_deg}")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier fraction must be in [0, 1)")
        if self.depth_min <= 0 or self.depth_max <= self.depth_min:
            raise ConfigError("invalid depth range")


@dataclass(frozen=True)
class PoseScene:
    points_a: np.ndarray
    points_b: np.ndarray
    inlier_mask: np.ndarray
    pose: RelativePose
    intrinsics: CameraIntrinsics
    seed: int


def generate_pose_scene(seed: int, cfg: PoseSceneConfig) -> PoseScene:
    """Random relative pose viewing a 3D point cloud, with pixel noise and
    uniform outliers replacing a fraction of the second-view points."""
    rng = _rng(seed, 1)
    intr = CameraIntrinsics(cfg.focal, cfg.focal, cfg.image_width / 2.0, cfg.image_height / 2.0)
    rot = random_rotation(rng, cfg.max_rotation_deg)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    t *= cfg.baseline

    half_w = cfg.image_width / (2.0 * cfg.focal)
    half_h = cfg.image_height / (2.0 * cfg.focal)
    pts_a, pts_b = [], []
    attempts = 0
    while len(pts_a) < cfg.num_points:
        attempts += 1
        if attempts > 1000 * cfg.num_points:
            raise DomainError("could not build a visible point cloud")
        z = rng.uniform(cfg.depth_min, cfg.depth_max)
        x = rng.uniform(-half_w, half_w) * z
        y = rng.uniform(-half_h, half_h) * z
        point = np.array([x, y, z])
        in_b = rot @ point + t
        if in_b[2] <= 0.1:
            continue
        pa = intr.project(point[None])[0]
        pb = intr.project(in_b[None])[0]
        if not (0 <= pa[0] < cfg.image_width and 0 <= pa[1] < cfg.image_height):
            continue
        if not (0 <= pb[0] < cfg.image_width and 0 <= pb[1] < cfg.image_height):
            continue
        pts_a.append(pa)
        pts_b.append(pb)
    pts_a = np.array(pts_a)
    pts_b = np.array(pts_b)
    if cfg.pixel_noise_std > 0:
        pts_a = pts_a + rng.normal(0, cfg.pixel_noise_std, pts_a.shape)
        pts_b = pts_b + rng.normal(0, cfg.pixel_noise_std, pts_b.shape)

    n = cfg.num_points
    inlier_mask = np.ones(n, dtype=bool)
    n_out = int(round(cfg.outlier_fraction * n))
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        pts_b[idx] = np.column_stack([
            rng.uniform(0, cfg.image_width, n_out),
            rng.uniform(0, cfg.image_height, n_out),
        ])
        inlier_mask[idx] = False

    return PoseScene(
        pts_a, pts_b, inlier_mask,
        RelativePose(rot, t / np.linalg.norm(t)), intr, seed,
    )


def splat_feature_maps(seed: int, pose_scene: PoseScene, stride=8, channels=24,
                       background_amplitude=0.3, splat_sigma_px=6.0, noise_std=0.02):
    """Feature-map pair for a pose scene: shared random descriptors splatted
    at the true projections over independent low-contrast backgrounds, so
    descriptor matching recovers the 3D-consistent correspondences."""
    rng = _rng(seed, 2)
    w = pose_scene.intrinsics.cx * 2
    h = pose_scene.intrinsics.cy * 2
    nx, ny = int(w // stride), int(h // stride)
    coords_x = np.arange(nx) * stride + stride / 2.0 - 0.5
    coords_y = np.arange(ny) * stride + stride / 2.0 - 0.5
    gx, gy = np.meshgrid(coords_x, coords_y)
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    descs = rng.normal(0.0, 1.0, size=(len(pose_scene.points_a), channels))

    def render(points, tag):
        bg = _rng(seed, 3, tag).normal(0.0, background_amplitude, size=(ny * nx, channels))
        data = bg
        for p, v in zip(points, descs):
            d2 = ((centers - p) ** 2).sum(axis=1)
            data = data + np.exp(-d2 / (2.0 * splat_sigma_px**2))[:, None] * v
        if noise_std > 0:
            data = data + _rng(seed, 4, tag).normal(0.0, noise_std, size=data.shape)
        return FeatureMap(data.reshape(ny, nx, channels), Fraction(stride), "unified")

    return render(pose_scene.points_a, 0), render(pose_scene.points_b, 1)
