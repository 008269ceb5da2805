"""Core 3D geometry: point sets, rigid transforms, weighted Procrustes, metrics.

All operations are pure; the dataclasses are frozen and safe to share across
threads. Angles are degrees at the API surface, radians internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration

ORTHONORMAL_TOL = 1e-6
#: Relative singular-value floor below which the cross-covariance is treated
#: as rank-deficient and the correspondence seed is rejected.
DEGENERACY_RATIO = 1e-10


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 3) array of finite coordinates in meters, N >= 1."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"expected (N, 3) with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation matrix in SO(3) plus translation vector."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: `other` is applied first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class RegistrationMetrics:
    """Registration quality summary for one pair.

    chamfer is the sum of the two directed means of *squared*
    nearest-neighbor distances between the registered clouds.
    """

    rre: float
    rte: float
    chamfer: float
    inlier_ratio: float
    rmse: float

    def __post_init__(self):
        if min(self.rre, self.rte, self.chamfer, self.inlier_ratio, self.rmse) < 0:
            raise ValueError("metrics must be non-negative")
        if self.inlier_ratio > 1.0:
            raise ValueError("inlier_ratio must be <= 1")


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
    return v / n


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0.0, -a[2], a[1]],
                  [a[2], 0.0, -a[0]],
                  [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def random_rotation(rng: np.random.Generator, max_angle_deg: float) -> np.ndarray:
    """Rotation about a random axis with angle uniform in [0, max_angle_deg]."""
    if max_angle_deg <= 0:
        return np.eye(3)
    angle = rng.uniform(0.0, np.deg2rad(max_angle_deg))
    return rotation_about_axis(random_unit_vector(rng), angle)


def rotation_angle_deg(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Rotate-then-translate every point; length preserved."""
    return PointCloud(transform.apply(cloud.points))


def weighted_procrustes(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """Least-squares rigid alignment: argmin_T sum_i w_i ||R src_i + t - dst_i||^2.

    Closed form via SVD of the weighted cross-covariance, with the usual
    sign flip of the smallest singular direction when the raw solution
    would be a reflection.

    Raises DegenerateConfiguration when the cross-covariance is rank
    deficient (smallest singular value below DEGENERACY_RATIO times the
    largest), signalling the caller to reject this correspondence seed.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(src) != len(dst) or len(src) != len(w):
        raise ValueError("src, dst and weights must have equal length")
    if len(src) < 3:
        raise ValueError("need at least 3 correspondences")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("weights must not all be zero")

    wn = w / wsum
    c_src = wn @ src
    c_dst = wn @ dst
    h = (src - c_src).T @ ((dst - c_dst) * wn[:, None])

    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[-1] < DEGENERACY_RATIO * s[0]:
        raise DegenerateConfiguration(
            f"cross-covariance singular values {s} are rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = c_dst - rot @ c_src
    return RigidTransform(rot, t)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean_a min_b d^2 + mean_b min_a d^2."""
    tree_a = cKDTree(a)
    tree_b = cKDTree(b)
    d_ab, _ = tree_b.query(a, k=1)
    d_ba, _ = tree_a.query(b, k=1)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def compute_metrics(estimated: RigidTransform,
                    ground_truth: RigidTransform,
                    src: PointCloud,
                    dst: PointCloud,
                    correspondences: np.ndarray,
                    inlier_threshold: float = 0.1) -> RegistrationMetrics:
    """Evaluate an estimated transform against the ground truth.

    RRE = arccos((trace(R_gt^T R_est) - 1) / 2) in degrees, RTE is the
    translation gap, inlier_ratio is the fraction of the given
    correspondence index pairs within `inlier_threshold` of the ground
    truth, rmse is taken over ground-truth-overlapping points and chamfer
    over the registered full clouds. An empty correspondence list yields
    inlier_ratio = 0.
    """
    rre = rotation_angle_deg(ground_truth.rotation.T @ estimated.rotation)
    rte = float(np.linalg.norm(estimated.translation - ground_truth.translation))

    corr = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
    if corr.shape[0] == 0:
        inlier_ratio = 0.0
    else:
        gt_src = ground_truth.apply(src.points[corr[:, 0]])
        resid = np.linalg.norm(gt_src - dst.points[corr[:, 1]], axis=1)
        inlier_ratio = float(np.mean(resid < inlier_threshold))

    # Ground-truth overlap pairs: source points whose true image has a
    # target neighbor within the inlier threshold.
    gt_all = ground_truth.apply(src.points)
    tree = cKDTree(dst.points)
    nn_dist, nn_idx = tree.query(gt_all, k=1)
    mask = nn_dist <= inlier_threshold
    if np.any(mask):
        est_pts = estimated.apply(src.points[mask])
        partners = dst.points[nn_idx[mask]]
        rmse = float(np.sqrt(np.mean(np.sum((est_pts - partners) ** 2, axis=1))))
    else:
        rmse = float("inf")

    chamfer = chamfer_distance(estimated.apply(src.points), dst.points)
    return RegistrationMetrics(rre=rre, rte=rte, chamfer=chamfer,
                               inlier_ratio=inlier_ratio, rmse=rmse)
