"""Synthetic scenes with known ground truth, superpoints and descriptors.

A scene is a union of surfaces (floor, walls, boxes, cylinders) sampled with
a minimum inter-point spacing; partial overlap is produced by cropping the
master sample set with a random half-space on each side. Ambiguous planar
regions (floor/walls) coexist with distinctive structure (corners, curved
patches) on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .geometry import PointCloud, RigidTransform, apply_transform, random_rotation, random_unit_vector

#: Column layout of the base geometric features, before projection to width d.
BASE_FEATURES = (
    "linearity", "planarity", "sphericity", "omnivariance", "anisotropy",
    "eigenentropy", "curvature", "height_spread", "density", "centroid_offset",
)


@dataclass(frozen=True, eq=False)
class SuperpointSet:
    """Voxel-downsampled representatives with patch membership.

    points are the raw cloud coordinates the patch indices refer to;
    every raw index belongs to exactly one patch. features is an
    (N', d) matrix once descriptors are computed, else None.
    """

    points: np.ndarray
    superpoints: np.ndarray
    patch_members: tuple
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return self.superpoints.shape[0]


@dataclass(frozen=True, eq=False)
class ScenePair:
    source: PointCloud
    target: PointCloud
    ground_truth: RigidTransform
    overlap_fraction: float
    seed: int = 0


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and sampling knobs for generate_scene."""

    n_points: int = 1300
    overlap: float = 0.6
    noise_sigma: float = 0.003
    min_spacing: float = 0.09
    rotation_max_deg: float = 50.0
    translation_max: float = 0.5
    room_size: float = 2.4
    wall_height: float = 1.2
    n_boxes: int = 4
    n_cylinders: int = 3
    overlap_check_radius: float | None = None

    def check_radius(self) -> float:
        if self.overlap_check_radius is not None:
            return self.overlap_check_radius
        return max(self.min_spacing / 2.0, 6.0 * self.noise_sigma)


# ---------------------------------------------------------------------------
# surface sampling


def _rect_candidates(rng, origin, u, v, count):
    """Stratified samples on a parallelogram patch."""
    if count < 1:
        return np.zeros((0, 3))
    lu = np.linalg.norm(u)
    lv = np.linalg.norm(v)
    nu = max(1, int(round(math.sqrt(count * lu / max(lv, 1e-9)))))
    nv = max(1, int(math.ceil(count / nu)))
    gi, gj = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    fu = (gi.ravel() + rng.uniform(size=nu * nv)) / nu
    fv = (gj.ravel() + rng.uniform(size=nu * nv)) / nv
    return origin + fu[:, None] * u + fv[:, None] * v


def _cylinder_candidates(rng, center, radius, height, count):
    if count < 1:
        return np.zeros((0, 3))
    ntheta = max(3, int(round(math.sqrt(count * 2 * math.pi * radius / max(height, 1e-9)))))
    nz = max(1, int(math.ceil(count / ntheta)))
    gi, gj = np.meshgrid(np.arange(ntheta), np.arange(nz), indexing="ij")
    theta = 2 * math.pi * (gi.ravel() + rng.uniform(size=ntheta * nz)) / ntheta
    z = height * (gj.ravel() + rng.uniform(size=ntheta * nz)) / nz
    return np.stack([center[0] + radius * np.cos(theta),
                     center[1] + radius * np.sin(theta),
                     center[2] + z], axis=1)


def _build_surfaces(rng, cfg: SceneConfig):
    """Return a list of (area, sampler) pairs for the scene recipe."""
    s = cfg.room_size
    h = cfg.wall_height
    surfaces = []

    def rect(origin, u, v):
        area = np.linalg.norm(np.cross(u, v))
        surfaces.append((area, lambda r, n, o=np.asarray(origin, float), uu=np.asarray(u, float),
                         vv=np.asarray(v, float): _rect_candidates(r, o, uu, vv, n)))

    rect([0, 0, 0], [s, 0, 0], [0, s, 0])                     # floor
    rect([0, 0, 0], [s, 0, 0], [0, 0, h])                     # wall y=0
    rect([0, 0, 0], [0, s, 0], [0, 0, h])                     # wall x=0

    for _ in range(cfg.n_boxes):
        size = rng.uniform(0.35, 0.8, size=3)
        yaw = rng.uniform(0, 2 * math.pi)
        c, sn = math.cos(yaw), math.sin(yaw)
        ex = np.array([c, sn, 0.0]) * size[0]
        ey = np.array([-sn, c, 0.0]) * size[1]
        ez = np.array([0.0, 0.0, size[2]])
        base = np.array([rng.uniform(0.3, s - 1.0), rng.uniform(0.3, s - 1.0), 0.0])
        rect(base, ex, ez)
        rect(base + ey, ex, ez)
        rect(base, ey, ez)
        rect(base + ex, ey, ez)
        rect(base + ez, ex, ey)                               # lid

    for _ in range(cfg.n_cylinders):
        radius = rng.uniform(0.15, 0.3)
        height = rng.uniform(0.5, 1.1)
        center = np.array([rng.uniform(0.5, s - 0.5), rng.uniform(0.5, s - 0.5), 0.0])
        area = 2 * math.pi * radius * height
        surfaces.append((area, lambda r, n, c=center, rad=radius, hh=height:
                         _cylinder_candidates(r, c, rad, hh, n)))
    return surfaces


def _min_spacing_filter(candidates: np.ndarray, spacing: float, limit: int) -> np.ndarray:
    """Greedy acceptance with a spatial hash; keeps the first `limit` points
    no closer than `spacing` to any previously accepted point."""
    cell = spacing
    grid: dict = {}
    accepted = []
    sq = spacing * spacing
    for p in candidates:
        key = (int(math.floor(p[0] / cell)), int(math.floor(p[1] / cell)),
               int(math.floor(p[2] / cell)))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for q in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        d = p - q
                        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < sq:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault(key, []).append(p)
            accepted.append(p)
            if len(accepted) >= limit:
                break
    return np.asarray(accepted)


def generate_scene(seed: int, config: SceneConfig) -> ScenePair:
    """Deterministically generate a partially overlapping pair.

    The master sample set is cropped with quantiles of a random direction:
    with overlap target t, each side keeps the fraction 1/(2-t) so that the
    shared band is t of either cloud. Ground truth maps source coordinates
    into the target frame; both clouds carry independent jitter of the
    configured sigma.
    """
    if not (0.0 < config.overlap <= 1.0):
        raise ConfigError(f"overlap target {config.overlap} outside (0, 1]")
    if config.n_points < 100:
        raise ConfigError(f"n_points {config.n_points} < 100")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    surfaces = _build_surfaces(rng, config)
    total_area = sum(a for a, _ in surfaces)
    oversample = int(config.n_points * 1.8) + 64
    chunks = []
    for area, sampler in surfaces:
        n = int(math.ceil(oversample * area / total_area))
        chunks.append(sampler(rng, n))
    candidates = np.concatenate(chunks, axis=0)
    candidates = candidates[rng.permutation(len(candidates))]
    master = _min_spacing_filter(candidates, config.min_spacing, config.n_points)
    if len(master) < 100:
        raise ConfigError(
            f"only {len(master)} samples fit the requested geometry/spacing")

    gt = RigidTransform(random_rotation(rng, config.rotation_max_deg),
                        random_unit_vector(rng) * rng.uniform(0, config.translation_max))

    keep = 1.0 / (2.0 - config.overlap)
    if config.overlap >= 1.0:
        src_mask = np.ones(len(master), dtype=bool)
        tgt_mask = src_mask
    else:
        direction = random_unit_vector(rng)
        s = master @ direction
        src_mask = s <= np.quantile(s, keep)
        tgt_mask = s >= np.quantile(s, 1.0 - keep)

    source = master[src_mask]
    target = gt.apply(master[tgt_mask])
    if config.noise_sigma > 0:
        source = source + rng.normal(scale=config.noise_sigma, size=source.shape)
        target = target + rng.normal(scale=config.noise_sigma, size=target.shape)

    src_cloud = PointCloud(source)
    tgt_cloud = PointCloud(target)
    measured = measure_overlap(src_cloud, tgt_cloud, gt, config.check_radius())
    return ScenePair(source=src_cloud, target=tgt_cloud, ground_truth=gt,
                     overlap_fraction=measured, seed=int(seed))


def measure_overlap(source: PointCloud, target: PointCloud,
                    transform: RigidTransform, radius: float) -> float:
    """Fraction of source points whose image has a target neighbor within radius."""
    d, _ = cKDTree(target.points).query(transform.apply(source.points), k=1)
    return float(np.mean(d <= radius))


# ---------------------------------------------------------------------------
# superpoints


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> SuperpointSet:
    """One superpoint per occupied voxel, at the member centroid.

    The grid is axis-aligned in the cloud's own coordinates. Patch
    membership partitions the raw indices; superpoint order is the
    lexicographic order of the voxel keys (deterministic). Re-voxelizing
    the centroids at the same size preserves the count, since each centroid
    stays inside its own cell.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    k = len(uniq)
    sums = np.zeros((k, 3))
    np.add.at(sums, inverse, cloud.points)
    counts = np.bincount(inverse, minlength=k).astype(np.float64)
    centroids = sums / counts[:, None]
    members = tuple(np.flatnonzero(inverse == i) for i in range(k))
    return SuperpointSet(points=cloud.points, superpoints=centroids,
                         patch_members=members, features=None)


def local_geometry_features(cloud: PointCloud, centers: np.ndarray,
                            radius: float) -> np.ndarray:
    """Rotation-invariant base features per center, columns per BASE_FEATURES.

    Eigenvalue ratios of the neighborhood covariance are measured in the
    local eigenvector frame, which is what keeps the descriptor stable
    under rigid motion of the whole cloud. Centers with fewer than three
    neighbors get the all-zero fallback row.
    """
    tree = cKDTree(cloud.points)
    neighborhoods = tree.query_ball_point(np.asarray(centers), r=radius)
    out = np.zeros((len(centers), len(BASE_FEATURES)))
    for i, idx in enumerate(neighborhoods):
        if len(idx) < 3:
            continue
        pts = cloud.points[idx]
        mu = pts.mean(axis=0)
        off = pts - mu
        cov = off.T @ off / len(idx)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.clip(evals[::-1], 0.0, None)          # descending
        e3_axis = evecs[:, 0]                            # smallest-eigenvalue direction
        total = evals.sum()
        if total <= 0 or evals[0] <= 0:
            continue
        e = evals / total
        l1, l2, l3 = evals
        linearity = (l1 - l2) / l1
        planarity = (l2 - l3) / l1
        sphericity = l3 / l1
        omnivariance = float(np.cbrt(np.clip(e[0] * e[1] * e[2], 0.0, None)))
        anisotropy = (l1 - l3) / l1
        nz = e[e > 0]
        eigenentropy = float(-(nz * np.log(nz)).sum())
        curvature = l3 / total
        height_spread = float(np.std(off @ e3_axis)) / radius
        density = len(idx) / (len(idx) + 25.0)
        centroid_offset = float(np.linalg.norm(mu - centers[i])) / radius
        out[i] = (linearity, planarity, sphericity, omnivariance, anisotropy,
                  eigenentropy, curvature, height_spread, density, centroid_offset)
    return out


#: Neighborhood radius multipliers for the multi-scale descriptor. A single
#: scale leaves all interior plane patches identical; the wider rings encode
#: each patch's surroundings, which is what separates one wall patch from
#: another when there is structure nearby.
DESCRIPTOR_SCALES = (1.0, 1.8, 3.0)


def compute_descriptors(cloud: PointCloud, sp: SuperpointSet, radius: float,
                        d: int, seed: int = 0,
                        scales: tuple = DESCRIPTOR_SCALES) -> SuperpointSet:
    """Multi-scale base features lifted to width d by a fixed seeded linear map.

    Base features are computed at `scales` multiples of `radius` and
    concatenated before projection. Rows are L2-normalized; a superpoint
    with no informative neighborhood at any scale keeps the zero vector.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if d < 8:
        raise ValueError("descriptor width must be >= 8")
    base = np.concatenate(
        [local_geometry_features(cloud, sp.superpoints, radius * s) for s in scales],
        axis=1)
    # Column-wise standardization strips the component every patch shares
    # (planar scenes would otherwise saturate cosine similarity near 1).
    mu = base.mean(axis=0)
    sigma = base.std(axis=0)
    base = (base - mu) / np.where(sigma > 1e-12, sigma, 1.0)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD]))
    proj = rng.normal(size=(d, base.shape[1])) / math.sqrt(base.shape[1])
    feats = base @ proj.T
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = np.where(norms > 0, feats / np.where(norms > 0, norms, 1.0), 0.0)
    return replace(sp, features=feats)
