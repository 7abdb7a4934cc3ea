"""Robust two-view geometry: homography transfer, essential-matrix
estimation with LO-RANSAC (normalized 8-point minimal stage, Sampson
scoring, inlier refit, cheirality disambiguation), and pose metrics.
"""

from dataclasses import dataclass

import numpy as np

from matcha import kernels
from matcha.errors import ConfigError, DomainError, InsufficientDataError


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, bottom-right normalized to 1 when nonzero."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise DomainError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DomainError("homography is not invertible")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def inverse(self):
        return Homography(np.linalg.inv(self.matrix))


def apply_homography(h: Homography, points) -> np.ndarray:
    """Projective transform of (N, 2) points with division by w."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ h.matrix.T
    w = proj[:, 2]
    bad = np.abs(w) <= 1e-12
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"point {i} = {pts[i].tolist()} maps to infinity")
    return proj[:, :2] / w[:, None]


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Exact 4-point homography (direct linear solve)."""
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise DomainError("need exactly 4 source and 4 destination corners")
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    sol = np.linalg.solve(np.array(a), np.array(b))
    return Homography(np.append(sol, 1.0).reshape(3, 3))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive: {self.fx}, {self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return (pts - [self.cx, self.cy]) / [self.fx, self.fy]

    def project(self, xyz):
        """Pinhole projection of (N, 3) camera-frame points to pixels."""
        z = xyz[:, 2]
        return xyz[:, :2] / z[:, None] * [self.fx, self.fy] + [self.cx, self.cy]


@dataclass(frozen=True)
class RelativePose:
    """Rotation plus unit translation direction (scale is unobservable)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise DomainError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise DomainError("rotation is not orthonormal with det +1")
        norm = np.linalg.norm(t)
        if abs(norm - 1.0) > 1e-9:
            if norm <= 1e-12:
                raise DomainError("translation direction has zero norm")
            t = t / norm
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def essential(self):
        tx = np.array([
            [0, -self.translation[2], self.translation[1]],
            [self.translation[2], 0, -self.translation[0]],
            [-self.translation[1], self.translation[0], 0],
        ])
        return tx @ self.rotation


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 10000
    inlier_threshold: float = 1e-3       # Sampson distance, normalized coords
    homography_threshold_px: float = 3.0  # kept for planar models
    confidence: float = 0.9999
    lo_rounds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0 or self.homography_threshold_px <= 0:
            raise ConfigError("inlier thresholds must be positive")
        if not 0 < self.confidence < 1:
            raise ConfigError(f"confidence must be in (0, 1), got {self.confidence}")
        if self.max_iterations < 1 or self.lo_rounds < 0:
            raise ConfigError("iteration counts out of range")


def _hartley_normalization(pts):
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.sqrt((centered**2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(mean_dist, 1e-12)
    t = np.array([
        [scale, 0, -scale * centroid[0]],
        [0, scale, -scale * centroid[1]],
        [0, 0, 1.0],
    ])
    return centered * scale, t


def eight_point_essential(pts_a: np.ndarray, pts_b: np.ndarray):
    """Least-squares essential matrix from >= 8 normalized correspondences.

    Hartley-conditioned linear solve followed by projection onto the
    essential manifold (equal nonzero singular values, rank 2). Returns
    None when the system is numerically degenerate.
    """
    n = pts_a.shape[0]
    if n < 8:
        raise InsufficientDataError(f"need >= 8 correspondences, got {n}")
    qa, ta = _hartley_normalization(pts_a)
    qb, tb = _hartley_normalization(pts_b)
    a = np.empty((n, 9))
    a[:, 0] = qb[:, 0] * qa[:, 0]
    a[:, 1] = qb[:, 0] * qa[:, 1]
    a[:, 2] = qb[:, 0]
    a[:, 3] = qb[:, 1] * qa[:, 0]
    a[:, 4] = qb[:, 1] * qa[:, 1]
    a[:, 5] = qb[:, 1]
    a[:, 6] = qa[:, 0]
    a[:, 7] = qa[:, 1]
    a[:, 8] = 1.0
    try:
        _, svals, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if n > 8 and svals[7] <= 1e-14:
        # rank-deficient beyond the expected null space: degenerate sample
        return None
    f = vt[-1].reshape(3, 3)
    f = tb.T @ f @ ta
    try:
        u, s, vt = np.linalg.svd(f)
    except np.linalg.LinAlgError:
        return None
    sigma = (s[0] + s[1]) / 2.0
    if sigma <= 1e-14:
        return None
    e = u @ np.diag([sigma, sigma, 0.0]) @ vt
    return e / np.linalg.norm(e)


def decompose_essential(e: np.ndarray):
    """The four (R, t) candidates of an essential matrix."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _triangulate_depths(r, t, pa, pb):
    """Linear triangulation; returns (z in view a, z in view b) per point."""
    n = pa.shape[0]
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, t.reshape(3, 1)])
    z1 = np.empty(n)
    z2 = np.empty(n)
    for i in range(n):
        a = np.stack([
            pa[i, 0] * p1[2] - p1[0],
            pa[i, 1] * p1[2] - p1[1],
            pb[i, 0] * p2[2] - p2[0],
            pb[i, 1] * p2[2] - p2[1],
        ])
        _, _, vt = np.linalg.svd(a)
        x = vt[-1]
        if abs(x[3]) < 1e-12:
            z1[i] = z2[i] = -1.0
            continue
        x = x / x[3]
        z1[i] = x[2]
        z2[i] = (p2 @ x)[2]
    return z1, z2


def cheirality_pose(e: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray,
                    max_points: int = 50) -> RelativePose:
    """Pick the (R, t) candidate with the most points in front of both views."""
    if pts_a.shape[0] > max_points:
        pts_a = pts_a[:max_points]
        pts_b = pts_b[:max_points]
    best, best_count = None, -1
    for r, t in decompose_essential(e):
        z1, z2 = _triangulate_depths(r, t, pts_a, pts_b)
        count = int(((z1 > 0) & (z2 > 0)).sum())
        if count > best_count:
            best, best_count = (r, t), count
    r, t = best
    return RelativePose(r, t)


def _adaptive_iterations(inlier_ratio, confidence, cap):
    w8 = inlier_ratio**8
    if w8 >= 1.0 - 1e-12:
        return 1
    if w8 <= 1e-12:
        return cap
    need = np.log(1.0 - confidence) / np.log(1.0 - w8)
    return int(min(cap, np.ceil(need)))


def _score(e, pa, pb, thr):
    d = kernels.sampson_distances(e, pa, pb)
    m = d < thr
    return m, int(m.sum()), float(d[m].sum())


def _lo_refine(e, mask, count, pa, pb, thr, rounds, rng):
    """Local optimization: non-minimal inner resamples of the inlier set
    followed by full-inlier least-squares polish, keeping the candidate
    with (most inliers, smallest inlier residual)."""
    d = kernels.sampson_distances(e, pa, pb)
    best = (e, mask, count, float(d[mask].sum()))
    for _ in range(rounds):
        inl = np.flatnonzero(best[1])
        if inl.size < 8:
            break
        k = max(8, inl.size // 2)
        sample = rng.choice(inl, size=k, replace=False)
        refit = eight_point_essential(pa[sample], pb[sample])
        if refit is None:
            continue
        m, c, s = _score(refit, pa, pb, thr)
        if (c, -s) > (best[2], -best[3]):
            best = (refit, m, c, s)
    for _ in range(3):
        inl = np.flatnonzero(best[1])
        if inl.size < 8:
            break
        refit = eight_point_essential(pa[inl], pb[inl])
        if refit is None:
            break
        m, c, s = _score(refit, pa, pb, thr)
        if (c, -s) > (best[2], -best[3]):
            best = (refit, m, c, s)
        else:
            break
    return best[0], best[1], best[2]


def estimate_essential_ransac(points_a: np.ndarray, points_b: np.ndarray,
                              intr_a: CameraIntrinsics, intr_b: CameraIntrinsics,
                              config: RansacConfig):
    """LO-RANSAC essential matrix and relative pose from pixel matches.

    Returns (RelativePose | None, inlier_mask). None signals that no valid
    model survived (distinguishable from a pose); fewer than 8 matches is a
    contract violation and raises.
    """
    pa_px = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    pb_px = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    n = pa_px.shape[0]
    if n < 8 or pb_px.shape[0] != n:
        raise InsufficientDataError(f"essential estimation needs >= 8 matches, got {n}")
    pa = intr_a.normalize(pa_px)
    pb = intr_b.normalize(pb_px)
    thr = config.inlier_threshold
    rng = np.random.default_rng(config.seed)

    best_e = None
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        try:
            e = eight_point_essential(pa[sample], pb[sample])
        except InsufficientDataError:  # pragma: no cover - sample is 8
            continue
        if e is None:
            continue
        mask = kernels.sampson_distances(e, pa, pb) < thr
        count = int(mask.sum())
        if count <= best_count:
            continue
        best_e, best_mask, best_count = _lo_refine(
            e, mask, count, pa, pb, thr, config.lo_rounds, rng
        )
        needed = _adaptive_iterations(best_count / n, config.confidence, config.max_iterations)
    if best_e is None or best_count < 8:
        return None, np.zeros(n, dtype=bool)
    best_e, best_mask, best_count = _lo_refine(
        best_e, best_mask, best_count, pa, pb, thr, config.lo_rounds, rng
    )
    pose = cheirality_pose(best_e, pa[best_mask], pb[best_mask])
    return pose, best_mask


def pose_error(est: RelativePose, gt: RelativePose):
    """(rotation angle, translation-direction angle) in degrees."""
    cos_r = (np.trace(est.rotation.T @ gt.rotation) - 1.0) / 2.0
    rot = np.degrees(np.arccos(np.clip(cos_r, -1.0, 1.0)))
    cos_t = abs(float(est.translation @ gt.translation))
    trans = np.degrees(np.arccos(np.clip(cos_t, -1.0, 1.0)))
    return float(rot), float(trans)


def pose_auc(errors, thresholds=(5.0, 10.0, 20.0)):
    """Exact area under the accuracy-vs-error step curve, per threshold.

    accuracy(theta) = fraction of errors <= theta; failed estimations enter
    as +inf and never contribute.
    """
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        raise DomainError("pose_auc needs at least one error value")
    if np.isnan(errs).any() or (errs < 0).any():
        raise DomainError("errors must be non-negative (use +inf for failures)")
    out = []
    for t in thresholds:
        clipped = np.minimum(errs, t)
        out.append(float(np.mean(t - clipped) / t))
    return out


def random_rotation(rng, max_angle_deg: float) -> np.ndarray:
    """Uniform random axis, uniform angle in (0, max_angle_deg]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
