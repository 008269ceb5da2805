"""Transform estimation: local-to-global registration and the outer
prior-update loop.

LGR solves one weighted Procrustes per coarse group's fine subset, scores
every candidate by its inlier count over all fine pairs, then refines the
best candidate on its inliers. The outer loop re-derives the prior
correspondences from the previous iteration's estimate (transform only is
re-fed) and exits early once successive estimates agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import encoding, network, prior as prior_mod
from .config import ExperimentConfig
from .errors import (DegenerateConfiguration, EmptyPrior,
                     InsufficientCorrespondences, NoMatches)
from .geometry import (PointCloud, RegistrationMetrics, RigidTransform,
                       compute_metrics, rotation_about_axis, rotation_angle_deg,
                       weighted_procrustes)
from .matching import CorrespondenceSet, FineMatches, match_coarse, match_fine
from .scenes import (ScenePair, SuperpointSet, compute_descriptors,
                     local_geometry_features, voxel_downsample)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    transform: RigidTransform
    metrics: RegistrationMetrics
    inlier_count: int
    num_fine: int


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    per_iteration: tuple
    routing_history: tuple
    correspondences: CorrespondenceSet | None
    prior_transform: RigidTransform
    prior_metrics: RegistrationMetrics
    failed: bool = False

    @property
    def metrics(self) -> RegistrationMetrics:
        return self.per_iteration[-1].metrics if self.per_iteration else self.prior_metrics


def lgr(fine: FineMatches, src: PointCloud, dst: PointCloud,
        rounds: int = 5, inlier_radius: float = 0.05,
        initial: RigidTransform | None = None,
        extra_candidates: tuple = (),
        accept_margin: float = 0.0,
        verify_radius: float | None = None,
        verify_sample: int = 400,
        return_trace: bool = False):
    """Local-to-global estimation over grouped fine correspondences.

    Degenerate group seeds (collinear/coincident) are skipped; if no group
    yields a candidate the transform is seeded from all pairs at once. An
    optional `initial` transform joins the candidate pool (the outer
    iteration passes its current prior, making the loop a warm start).

    By default candidates are scored by their inlier count over all fine
    pairs. When `verify_radius` is set the score is instead the fraction of
    (subsampled) source points whose image lands within that radius of the
    target cloud: in self-similar scenes a block of mutually consistent
    wrong matches can out-vote the truth on fine pairs alone, but it cannot
    align the full clouds. Refinement re-solves on the fine-pair inliers
    and keeps the best-scoring transform seen, so the reported trace never
    decreases.
    """
    if len(fine) < 3:
        raise InsufficientCorrespondences(f"{len(fine)} fine correspondences < 3")
    p = src.points[fine.src_idx]
    q = dst.points[fine.dst_idx]
    w = fine.confidence

    def inliers_of(transform):
        resid = np.linalg.norm(p @ transform.rotation.T + transform.translation - q, axis=1)
        return resid < inlier_radius

    if verify_radius is not None:
        step = max(1, len(src.points) // verify_sample)
        sample = src.points[::step]
        dst_tree = cKDTree(dst.points)

        def score_of(transform):
            # Cloud alignment dominates; the bounded fine-inlier bonus breaks
            # the ties that appear once most of the overlap is within the
            # verification radius.
            d, _ = dst_tree.query(transform.apply(sample), k=1)
            bonus = min(int(inliers_of(transform).sum()), 200) / 2000.0
            return float(np.mean(d <= verify_radius)) + bonus
    else:
        def score_of(transform):
            return float(inliers_of(transform).sum())

    def solve_trimmed(sel):
        # iterated trimmed least squares: the threshold starts at the
        # residual bulk and shrinks toward the inlier radius, so a seed is
        # not dragged outside the refinement basin by mismatched members
        ps, qs, ws = p[sel], q[sel], w[sel]
        t = weighted_procrustes(ps, qs, ws)
        for _ in range(3):
            resid = np.linalg.norm(ps @ t.rotation.T + t.translation - qs, axis=1)
            threshold = max(inlier_radius, 1.5 * float(np.median(resid)))
            keep = resid < threshold
            if keep.sum() < 3 or keep.all():
                break
            t = weighted_procrustes(ps[keep], qs[keep], ws[keep])
            ps, qs, ws = ps[keep], qs[keep], ws[keep]
        return t

    candidates = [] if initial is None else [initial]
    candidates.extend(extra_candidates)
    for g in np.unique(fine.group):
        mask = fine.group == g
        if mask.sum() < 3:
            continue
        try:
            candidates.append(solve_trimmed(mask))
        except DegenerateConfiguration:
            continue
    if not candidates:
        try:
            candidates.append(weighted_procrustes(p, q, w))
        except DegenerateConfiguration as exc:
            raise InsufficientCorrespondences("no usable correspondence seed") from exc

    scored = [(score_of(t), -i, t) for i, t in enumerate(candidates)]
    best_score, _, best = max(scored, key=lambda s: (s[0], s[1]))
    if initial is not None and accept_margin > 0.0:
        # a marginal win over the prior is indistinguishable from noise in
        # self-similar scenes; keep the prior unless the winner is clear
        if best_score < score_of(initial) + accept_margin:
            best, best_score = initial, score_of(initial)
    trace = [best_score]
    for _ in range(rounds):
        mask = inliers_of(best)
        if mask.sum() < 3:
            break
        try:
            refined = weighted_procrustes(p[mask], q[mask], w[mask])
        except DegenerateConfiguration:
            break
        score = score_of(refined)
        if score < best_score:
            break
        best, best_score = refined, score
        trace.append(best_score)
    best_count = int(inliers_of(best).sum())
    if return_trace:
        return best, best_count, trace
    return best, best_count


def _transform_delta(a: RigidTransform, b: RigidTransform):
    return (rotation_angle_deg(a.rotation.T @ b.rotation),
            float(np.linalg.norm(a.translation - b.translation)))


def _expected_displacement(scene_radius: float, uncert_rotation_deg: float,
                           uncert_translation: float) -> float:
    return (2.0 * math.sin(math.radians(uncert_rotation_deg) / 2.0) * scene_radius
            + uncert_translation)


def build_superpoints(scene: ScenePair, config: ExperimentConfig):
    sp_src = voxel_downsample(scene.source, config.voxel_size)
    sp_dst = voxel_downsample(scene.target, config.voxel_size)
    sp_src = compute_descriptors(scene.source, sp_src, config.descriptor_radius,
                                 config.model.d, seed=config.model.seed)
    sp_dst = compute_descriptors(scene.target, sp_dst, config.descriptor_radius,
                                 config.model.d, seed=config.model.seed)
    return sp_src, sp_dst


def _prior_embeddings(prior, n_src, n_dst, config, mlp):
    coding = encoding.PriorCoding(scheme=config.model.coding, pair_count=len(prior))
    table = encoding.build_embedding_table(coding, config.model.d, mlp)
    emb_src = encoding.assign_prior_embeddings(n_src, "source", prior, table, coding)
    emb_dst = encoding.assign_prior_embeddings(n_dst, "target", prior, table, coding)
    return emb_src, emb_dst


_MOVE_AXES = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
              np.array([0.0, 0.0, 1.0]))


def score_ascent(start: RigidTransform, source: PointCloud, target: PointCloud,
                 step_deg: float = 6.0, step_m: float = 0.15,
                 min_step_deg: float = 0.05, sample: int = 400) -> RigidTransform:
    """Derivative-free ascent of the cloud-alignment score from `start`.

    Greedy pattern search over rotations about the moved cloud's centroid
    and axis translations, halving the step when no move improves the
    multi-radius alignment fraction. Deterministic; no correspondences are
    formed, so this is a pose polish, not an ICP loop. Used to drop an
    uncertain prior into the basin where sharp point matching takes over.
    """
    step = max(1, len(source.points) // sample)
    pts = source.points[::step]
    centroid = source.points.mean(axis=0)
    tree = cKDTree(target.points)

    def score(t):
        d, _ = tree.query(t.apply(pts), k=1)
        return float(np.mean(d <= 0.04) + np.mean(d <= 0.08) + np.mean(d <= 0.16))

    current = start
    best = score(current)
    dr, dt = step_deg, step_m
    while dr >= min_step_deg:
        improved = False
        pivot = current.apply(centroid.reshape(1, 3))[0]
        for axis in _MOVE_AXES:
            for sign in (1.0, -1.0):
                rot = rotation_about_axis(axis, math.radians(sign * dr))
                cand = RigidTransform(rot @ current.rotation,
                                      rot @ (current.translation - pivot) + pivot)
                s = score(cand)
                if s > best:
                    current, best, improved = cand, s, True
                cand = RigidTransform(current.rotation,
                                      current.translation + sign * dt * axis)
                s = score(cand)
                if s > best:
                    current, best, improved = cand, s, True
        if not improved:
            dr /= 2.0
            dt /= 2.0
    return current


def mutual_best_pairs(overlap: np.ndarray, moved_superpoints: np.ndarray,
                      dst_superpoints: np.ndarray, limit: int) -> np.ndarray:
    """Mutually-nearest patch pairs among the overlap-endorsed entries.

    Overlap ratios saturate once the alignment is decent (every patch fully
    overlaps several neighbors at the overlap radius), so ties are broken
    by centroid distance under the current alignment: for each row, the
    closest endorsed column, kept when the choice is mutual. Closest pairs
    first.
    """
    if overlap.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    dist = np.linalg.norm(moved_superpoints[:, None, :] - dst_superpoints[None, :, :],
                          axis=-1)
    dist = np.where(overlap > 0, dist, np.inf)
    row_best = dist.argmin(axis=1)
    col_best = dist.argmin(axis=0)
    rows = np.arange(dist.shape[0])
    mutual = rows[(col_best[row_best[rows]] == rows)
                  & np.isfinite(dist[rows, row_best[rows]])]
    pairs = np.stack([mutual, row_best[mutual]], axis=1)
    gaps = dist[pairs[:, 0], pairs[:, 1]]
    order = np.argsort(gaps, kind="stable")[:limit]
    return pairs[order].astype(np.int64)


def group_seed_transforms(fine: FineMatches, src: PointCloud, dst: PointCloud,
                          inlier_radius: float) -> tuple:
    """Trimmed per-group Procrustes seeds (same recipe as LGR's local stage)."""
    p = src.points[fine.src_idx]
    q = dst.points[fine.dst_idx]
    w = fine.confidence
    seeds = []
    for g in np.unique(fine.group):
        mask = fine.group == g
        if mask.sum() < 3:
            continue
        try:
            t = weighted_procrustes(p[mask], q[mask], w[mask])
            resid = np.linalg.norm(p[mask] @ t.rotation.T + t.translation - q[mask], axis=1)
            keep = resid < inlier_radius
            if 3 <= keep.sum() < int(mask.sum()):
                t = weighted_procrustes(p[mask][keep], q[mask][keep], w[mask][keep])
            seeds.append(t)
        except DegenerateConfiguration:
            continue
    return tuple(seeds)


def run_iteration(scene: ScenePair, sp_src: SuperpointSet, sp_dst: SuperpointSet,
                  prior_transform: RigidTransform, model: network.ModelParams,
                  mlp: encoding.EmbeddingMlp, config: ExperimentConfig,
                  point_features: tuple | None = None,
                  trust: tuple | None = None):
    """One pass of prior -> encoding -> matching -> estimation.

    `trust` is the current (rotation deg, translation m) uncertainty of the
    prior: the fine position term is widened to tolerate that much
    displacement, and LGR candidates outside the trust region around the
    prior are rejected. Returns (transform, inlier_count, correspondences,
    encode_result).
    """
    radius = config.prior.patch_inlier_radius or config.voxel_size
    overlap = prior_mod.overlap_ratio_matrix(sp_src, sp_dst, prior_transform, radius)
    try:
        selected = prior_mod.select_prior_correspondences(overlap, config.prior.tau_o)
    except EmptyPrior:
        selected = prior_mod.PriorCorrespondences.empty()

    mode = config.model.routing
    if mode == "prior":
        emb_src, emb_dst = _prior_embeddings(selected, len(sp_src), len(sp_dst),
                                             config, mlp)
    else:
        emb_src = emb_dst = None
    enc = network.encode(sp_src.features, sp_dst.features, model, mode=mode,
                         prior_src=emb_src, prior_dst=emb_dst,
                         embedding_scale=config.model.embedding_scale)

    coarse, scores = match_coarse(enc.tokens_src, enc.tokens_dst,
                                  top_c=config.match.top_c,
                                  mutual_top=config.match.mutual_top,
                                  min_similarity=config.match.min_similarity)
    feat_src, feat_dst = point_features if point_features is not None else (None, None)
    position_sigma = config.match.position_sigma
    inlier_radius = config.register.inlier_radius
    center_pairs = False
    if trust is not None:
        uncert_rotation, uncert_translation = trust
        scene_radius = float(np.linalg.norm(
            scene.source.points - scene.source.points.mean(axis=0), axis=1).max())
        displacement = _expected_displacement(scene_radius, uncert_rotation,
                                              uncert_translation)
        if displacement > config.match.position_cut:
            # The prior is too uncertain for an absolute positional term:
            # cancel each patch pair's centroid gap instead and let cloud
            # verification sort the resulting candidates.
            center_pairs = True
        else:
            # Tolerances track the remaining uncertainty and collapse back
            # to the sharp configured values as the loop converges.
            position_sigma = max(position_sigma, 0.5 * displacement)
            inlier_radius = max(inlier_radius, 0.4 * displacement)
    fine = match_fine(scene, sp_src, sp_dst, coarse,
                      iterations=config.match.sinkhorn_iterations,
                      alignment=prior_transform,
                      feature_radius=config.match.feature_radius,
                      feature_sigma=config.match.feature_sigma,
                      position_sigma=position_sigma,
                      center_pairs=center_pairs,
                      slack_cost=config.match.slack_cost,
                      min_confidence=config.match.min_confidence,
                      src_features=feat_src, dst_features=feat_dst)
    seeds: list = []
    if center_pairs:
        # Score ascent drops the uncertain prior into the basin where the
        # sharp point matching of later iterations takes over.
        seeds.append(score_ascent(prior_transform, scene.source, scene.target))
    # Prior-endorsed patch pairs are far more precise than token matching;
    # their point matches provide near-true candidates at any prior quality
    # (verification decides whether they beat the rest).
    endorsed = mutual_best_pairs(overlap, prior_transform.apply(sp_src.superpoints),
                                 sp_dst.superpoints, limit=config.register.seed_pairs)
    seed_fine = None
    if len(endorsed):
        seed_fine = match_fine(scene, sp_src, sp_dst, endorsed,
                               iterations=config.match.sinkhorn_iterations,
                               alignment=prior_transform,
                               feature_radius=config.match.feature_radius,
                               feature_sigma=config.match.feature_sigma,
                               position_sigma=position_sigma,
                               center_pairs=center_pairs,
                               slack_cost=config.match.slack_cost,
                               min_confidence=config.match.min_confidence,
                               src_features=feat_src, dst_features=feat_dst)
        seeds.extend(group_seed_transforms(seed_fine, scene.source, scene.target,
                                           config.register.inlier_radius))
    # The endorsed-pair matches join the estimation support set; the
    # reported correspondences (and the IR they are judged on) stay with
    # the token-matching path.
    support = fine if seed_fine is None else fine.merged_with(seed_fine)
    transform, count = lgr(support, scene.source, scene.target,
                           rounds=config.register.lgr_rounds,
                           inlier_radius=inlier_radius,
                           initial=prior_transform,
                           extra_candidates=tuple(seeds),
                           accept_margin=config.register.accept_margin,
                           verify_radius=config.register.verify_radius)
    corr = CorrespondenceSet(coarse=coarse, coarse_scores=scores, fine=fine)
    return transform, count, corr, enc


def register_pair(scene: ScenePair, config: ExperimentConfig,
                  seed: int | None = None) -> RegistrationResult:
    """Full pipeline with the iterative prior update.

    Iteration 0 consumes the simulated prior transform; each later
    iteration recomputes the prior correspondences from the previous
    estimate. Stops early when successive transforms differ by less than
    the configured tolerances. A pair that fails before any iteration
    completes is flagged and reports the prior transform.
    """
    seed = scene.seed if seed is None else seed
    sp_src, sp_dst = build_superpoints(scene, config)
    model = network.build_model(config.model.d, config.model.num_experts,
                                config.model.k, config.model.num_blocks,
                                seed=config.model.seed,
                                smoe_in_cross=config.model.smoe_in_cross,
                                attn_out_scale=config.model.attn_out_scale)
    mlp = encoding.random_embedding_mlp(config.model.d, seed=config.model.seed)
    point_features = (
        local_geometry_features(scene.source, sp_src.points, config.match.feature_radius),
        local_geometry_features(scene.target, sp_dst.points, config.match.feature_radius),
    )

    prior_transform = prior_mod.simulate_prior_transform(scene.ground_truth,
                                                         config.prior, seed)
    prior_metrics = compute_metrics(prior_transform, scene.ground_truth,
                                    scene.source, scene.target,
                                    np.zeros((0, 2), dtype=np.int64),
                                    config.metrics.inlier_threshold)

    records = []
    history: tuple = ()
    corr = None
    inlier_count = 0
    current_prior = prior_transform
    estimate = None
    failed = False
    # Prior uncertainty starts at the declared noise and shrinks with the
    # measured per-iteration step (an upper proxy for the remaining error).
    uncert_rot = config.prior.rotation_noise_deg
    uncert_t = config.prior.translation_noise
    scene_radius = float(np.linalg.norm(
        scene.source.points - scene.source.points.mean(axis=0), axis=1).max())
    for _ in range(config.register.iterations):
        sharp = (_expected_displacement(scene_radius, uncert_rot, uncert_t)
                 <= config.match.position_cut)
        try:
            estimate_new, inlier_count, corr, enc = run_iteration(
                scene, sp_src, sp_dst, current_prior, model, mlp, config,
                point_features=point_features, trust=(uncert_rot, uncert_t))
        except (NoMatches, InsufficientCorrespondences):
            failed = estimate is None
            break
        history = enc.history
        metrics = compute_metrics(estimate_new, scene.ground_truth, scene.source,
                                  scene.target, corr.fine.pairs(),
                                  config.metrics.inlier_threshold)
        records.append(IterationRecord(transform=estimate_new, metrics=metrics,
                                       inlier_count=inlier_count,
                                       num_fine=len(corr.fine)))
        estimate = estimate_new
        d_rot, d_t = _transform_delta(current_prior, estimate_new)
        if d_rot < config.register.early_exit_deg and d_t < config.register.early_exit_m:
            if sharp:
                break
            # Converged while the matcher was still displacement-tolerant:
            # collapse the uncertainty so the next pass runs sharp, and only
            # that pass may declare convergence.
            uncert_rot, uncert_t = d_rot, d_t
        else:
            uncert_rot = min(uncert_rot, d_rot)
            uncert_t = min(uncert_t, d_t)
        current_prior = estimate_new

    final = estimate if estimate is not None else prior_transform
    return RegistrationResult(transform=final, inlier_count=inlier_count,
                              per_iteration=tuple(records),
                              routing_history=history,
                              correspondences=corr,
                              prior_transform=prior_transform,
                              prior_metrics=prior_metrics,
                              failed=failed)
