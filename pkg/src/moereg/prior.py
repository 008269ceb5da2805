"""Prior superpoint correspondences from a (simulated) prior transform.

The prior transform stands in for a pretrained coarse aligner: the known
ground truth composed with bounded random rotation/translation noise. From
it, the patch overlap-ratio matrix selects the superpoint pairs that guide
expert routing downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPrior
from .geometry import RigidTransform, random_rotation, random_unit_vector
from .scenes import SuperpointSet


@dataclass(frozen=True)
class PriorConfig:
    tau_o: float = 0.0
    rotation_noise_deg: float = 10.0
    translation_noise: float = 0.2
    patch_inlier_radius: float | None = None   # None -> voxel size at call site

    def __post_init__(self):
        if not (0.0 <= self.tau_o < 1.0):
            raise ValueError(f"tau_o {self.tau_o} outside [0, 1)")
        if self.rotation_noise_deg < 0 or self.translation_noise < 0:
            raise ValueError("noise magnitudes must be non-negative")


@dataclass(frozen=True, eq=False)
class PriorCorrespondences:
    """Selected pairs, their overlap ratios, and per-side anchor indices.

    pairs is (c, 2) in row-major selection order; src_positions[i] lists the
    positions in `pairs` whose source index is i (symmetrically for
    dst_positions). Position lists are disjoint and jointly cover all pairs.
    """

    pairs: np.ndarray
    ratios: np.ndarray
    src_positions: dict
    dst_positions: dict

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def to_json(self) -> dict:
        return {"pairs": self.pairs.tolist(), "ratios": self.ratios.tolist()}

    @classmethod
    def empty(cls) -> "PriorCorrespondences":
        return cls(pairs=np.zeros((0, 2), dtype=np.int64), ratios=np.zeros(0),
                   src_positions={}, dst_positions={})


def simulate_prior_transform(ground_truth: RigidTransform, config: PriorConfig,
                             seed: int) -> RigidTransform:
    """Ground truth perturbed by a bounded random rotation and translation.

    Deterministic per seed; zero noise returns the ground truth exactly.
    """
    if config.rotation_noise_deg == 0 and config.translation_noise == 0:
        return ground_truth
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    delta_r = random_rotation(rng, config.rotation_noise_deg)
    delta_t = random_unit_vector(rng) * rng.uniform(0.0, config.translation_noise)
    perturb = RigidTransform(delta_r, delta_t)
    return perturb.compose(ground_truth)


def overlap_ratio_matrix(src_sp: SuperpointSet, dst_sp: SuperpointSet,
                         prior_transform: RigidTransform, radius: float) -> np.ndarray:
    """Patch overlap ratios under the prior transform.

    Entry (i, j) is the fraction of raw points in source patch i whose
    image lies within `radius` (inclusive) of some raw point of target
    patch j. Matches the per-point counting oracle exactly: the predicate
    is the same squared-distance comparison in float64.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    moved = prior_transform.apply(src_sp.points)
    n = moved.shape[0]
    m = len(dst_sp)
    r2 = radius * radius
    # within[a, j]: does source raw point a land within radius of patch j?
    within = np.zeros((n, m), dtype=bool)
    for j, members in enumerate(dst_sp.patch_members):
        q = dst_sp.points[members]
        d2 = np.sum((moved[:, None, :] - q[None, :, :]) ** 2, axis=-1)
        within[:, j] = (d2 <= r2).any(axis=1)
    out = np.zeros((len(src_sp), m))
    for i, members in enumerate(src_sp.patch_members):
        out[i] = within[members].sum(axis=0) / len(members)
    return out


def select_prior_correspondences(overlap: np.ndarray, tau_o: float) -> PriorCorrespondences:
    """All entries strictly above tau_o, in row-major order.

    The ordering is a contract: it defines the ordered coding downstream.
    Raises EmptyPrior when nothing qualifies, signalling the pipeline to
    fall back to pure attention.
    """
    overlap = np.asarray(overlap)
    pairs = np.argwhere(overlap > tau_o)
    if pairs.shape[0] == 0:
        raise EmptyPrior(f"no overlap ratio above {tau_o}")
    ratios = overlap[pairs[:, 0], pairs[:, 1]]
    src_positions: dict = {}
    dst_positions: dict = {}
    for pos, (i, j) in enumerate(pairs):
        src_positions.setdefault(int(i), []).append(pos)
        dst_positions.setdefault(int(j), []).append(pos)
    src_positions = {k: np.asarray(v, dtype=np.int64) for k, v in src_positions.items()}
    dst_positions = {k: np.asarray(v, dtype=np.int64) for k, v in dst_positions.items()}
    return PriorCorrespondences(pairs=pairs.astype(np.int64), ratios=ratios,
                                src_positions=src_positions, dst_positions=dst_positions)
