"""Coarse superpoint matching, fine point matching, and the training losses.

Fine matching is an optimal-transport reconstruction: per matched patch
pair, a similarity matrix over member points (local-frame coordinates,
optionally augmented with alignment-transformed positions) is augmented
with a slack row/column and balanced by Sinkhorn normalisation; mutual-max
cells become fine correspondences with the transport mass as confidence.

The losses are written dtype-generically so the gradient evaluator can run
them on complex inputs (complex-step differentiation); discrete decisions
(masks, argmax) always read real parts and are locally constant away from
routing boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoMatches, NoSupervision
from .geometry import RigidTransform
from .network import RouterParams, gate_probs
from .numerics import l2_normalize, pairwise_sq_dists, softmax
from .scenes import ScenePair, SuperpointSet

COMPLEX_STEP = 1e-20


@dataclass(frozen=True, eq=False)
class FineMatches:
    """Fine correspondences over raw points, grouped by coarse pair."""

    src_idx: np.ndarray
    dst_idx: np.ndarray
    confidence: np.ndarray
    group: np.ndarray
    transports: tuple      # per coarse pair: (n_i+1, m_i+1) transport matrix
    memberships: tuple     # per coarse pair: (src member indices, dst member indices)

    def __len__(self) -> int:
        return self.src_idx.shape[0]

    def pairs(self) -> np.ndarray:
        return np.stack([self.src_idx, self.dst_idx], axis=1) if len(self) else \
            np.zeros((0, 2), dtype=np.int64)

    def merged_with(self, other: "FineMatches") -> "FineMatches":
        """Concatenate two match sets, keeping group ids disjoint."""
        offset = int(self.group.max()) + 1 if len(self) else 0
        return FineMatches(
            src_idx=np.concatenate([self.src_idx, other.src_idx]),
            dst_idx=np.concatenate([self.dst_idx, other.dst_idx]),
            confidence=np.concatenate([self.confidence, other.confidence]),
            group=np.concatenate([self.group, other.group + offset]),
            transports=self.transports + other.transports,
            memberships=self.memberships + other.memberships)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    coarse: np.ndarray         # (C, 2) superpoint index pairs
    coarse_scores: np.ndarray  # (C,)
    fine: FineMatches

    def to_json(self) -> dict:
        return {
            "coarse": [[int(i), int(j), float(s)] for (i, j), s in
                       zip(self.coarse, self.coarse_scores)],
            "fine": [[int(p), int(q), float(c)] for p, q, c in
                     zip(self.fine.src_idx, self.fine.dst_idx, self.fine.confidence)],
        }


@dataclass(frozen=True)
class LossReport:
    coarse_loss: float
    fine_loss: float
    balance_loss: float
    total: float

    def __post_init__(self):
        if abs(self.total - (self.coarse_loss + self.fine_loss + self.balance_loss)) > 1e-9:
            raise ValueError("total must equal the sum of the three terms")


# ---------------------------------------------------------------------------
# coarse matching


def match_coarse(tok_src: np.ndarray, tok_dst: np.ndarray, top_c: int,
                 mutual_top: int = 3, min_similarity: float = 0.0):
    """Mutual-top-k cosine matching.

    Rows are L2-normalized; a cell qualifies when it sits in the top
    `mutual_top` of both its row and its column and its similarity exceeds
    `min_similarity`; the `top_c` highest qualifying cells are returned with
    softmax-normalized similarities as scores. Raises NoMatches when nothing
    qualifies.
    """
    if top_c < 1:
        raise ValueError("top_c must be >= 1")
    a = l2_normalize(np.asarray(tok_src, dtype=np.float64))
    b = l2_normalize(np.asarray(tok_dst, dtype=np.float64))
    sim = a @ b.T
    kr = min(mutual_top, sim.shape[1])
    kc = min(mutual_top, sim.shape[0])
    row_rank = np.argsort(-sim, axis=1, kind="stable")[:, :kr]
    col_rank = np.argsort(-sim, axis=0, kind="stable")[:kc, :]
    row_mask = np.zeros_like(sim, dtype=bool)
    np.put_along_axis(row_mask, row_rank, True, axis=1)
    col_mask = np.zeros_like(sim, dtype=bool)
    np.put_along_axis(col_mask, col_rank, True, axis=0)
    mutual = row_mask & col_mask & (sim > min_similarity)
    cand = np.argwhere(mutual)
    if cand.shape[0] == 0:
        raise NoMatches("no mutual coarse candidates above the similarity floor")
    values = sim[cand[:, 0], cand[:, 1]]
    order = np.argsort(-values, kind="stable")[:top_c]
    selected = cand[order]
    scores = softmax(values[order])
    return selected.astype(np.int64), scores


# ---------------------------------------------------------------------------
# patch frames and fine matching


def sinkhorn_transport(scores: np.ndarray, slack_score: float, iterations: int) -> np.ndarray:
    """Balanced transport with one slack row/column.

    Marginals: each real row/column carries mass 1; the slack row absorbs up
    to m, the slack column up to n. After every full iteration the column
    sums equal the column marginals, so the total mass stays n + m.
    """
    n, m = scores.shape
    k = np.full((n + 1, m + 1), slack_score)
    k[:n, :m] = scores
    a = np.concatenate([np.ones(n), [float(m)]])
    b = np.concatenate([np.ones(m), [float(n)]])
    v = np.ones(m + 1)
    for _ in range(iterations):
        u = a / (k @ v)
        v = b / (k.T @ u)
    return u[:, None] * k * v[None, :]


def match_fine(scene: ScenePair, src_sp: SuperpointSet, dst_sp: SuperpointSet,
               coarse: np.ndarray, iterations: int = 100,
               alignment: RigidTransform | None = None,
               feature_radius: float = 0.25, feature_sigma: float = 0.35,
               position_sigma: float = 0.10, center_pairs: bool = False,
               slack_cost: float = 2.0, min_confidence: float = 0.06,
               src_features: np.ndarray | None = None,
               dst_features: np.ndarray | None = None) -> FineMatches:
    """Fine correspondences inside each matched patch pair.

    Similarity is exp(-d^2/2) over per-point descriptors: local geometric
    features (scaled by feature_sigma) plus, when an alignment transform is
    given, alignment-space positions (scaled by position_sigma). The slack
    score adapts to the per-pair score maximum so that a common prior
    displacement rescales, rather than empties, the transport. Extraction
    keeps mutual-argmax cells among the real entries whose mass clears
    min_confidence; the rest of a row's mass sits in its slack cell.
    Precomputed per-point feature matrices may be passed to avoid
    recomputation across prior iterations. Empty patches contribute nothing.
    """
    coarse = np.asarray(coarse, dtype=np.int64).reshape(-1, 2)
    if coarse.shape[0] == 0:
        raise ValueError("coarse pairs must be non-empty")
    from .scenes import local_geometry_features

    if src_features is None:
        src_features = local_geometry_features(scene.source, src_sp.points, feature_radius)
    if dst_features is None:
        dst_features = local_geometry_features(scene.target, dst_sp.points, feature_radius)
    moved_src = alignment.apply(src_sp.points) if alignment is not None else None
    moved_sp = alignment.apply(src_sp.superpoints) if alignment is not None else None

    src_out, dst_out, conf_out, group_out = [], [], [], []
    transports = []
    memberships = []
    for g, (i, j) in enumerate(coarse):
        mi = src_sp.patch_members[i]
        mj = dst_sp.patch_members[j]
        memberships.append((mi, mj))
        if len(mi) == 0 or len(mj) == 0:
            transports.append(np.zeros((len(mi) + 1, len(mj) + 1)))
            continue
        da = [src_features[mi] / feature_sigma]
        db = [dst_features[mj] / feature_sigma]
        if alignment is not None:
            moved = moved_src[mi]
            if center_pairs:
                # Uncertain-prior regime: a truly corresponding patch pair is
                # displaced by a nearly constant offset; cancel the centroid
                # gap so the within-patch ranking survives. Wrong pairings
                # become self-consistent slides, which the caller's
                # verification scoring rejects.
                moved = moved - (moved_sp[i] - dst_sp.superpoints[j])
            da.append(moved / position_sigma)
            db.append(dst_sp.points[mj] / position_sigma)
        scores = np.exp(-0.5 * pairwise_sq_dists(np.concatenate(da, axis=1),
                                                 np.concatenate(db, axis=1)))
        peak = float(scores.max())
        if peak <= 1e-150:
            # hopeless pair (e.g. patches meters apart under the alignment):
            # nothing to extract, and Sinkhorn would divide by zero
            transports.append(np.zeros((len(mi) + 1, len(mj) + 1)))
            continue
        slack = peak * np.exp(-slack_cost)
        transport = sinkhorn_transport(scores, slack, iterations)
        transports.append(transport)

        real = transport[:-1, :-1]
        row_best = real.argmax(axis=1)
        col_best = real.argmax(axis=0)
        for a in range(len(mi)):
            bsel = row_best[a]
            mass = real[a, bsel]
            if col_best[bsel] == a and mass > min_confidence:
                src_out.append(mi[a])
                dst_out.append(mj[bsel])
                conf_out.append(float(min(mass, 1.0)))
                group_out.append(g)
    return FineMatches(
        src_idx=np.asarray(src_out, dtype=np.int64),
        dst_idx=np.asarray(dst_out, dtype=np.int64),
        confidence=np.asarray(conf_out, dtype=np.float64),
        group=np.asarray(group_out, dtype=np.int64),
        transports=tuple(transports),
        memberships=tuple(memberships))


def ground_truth_fine_assignments(scene: ScenePair, fine: FineMatches,
                                  radius: float = 0.05):
    """Ground-truth cells per coarse pair, for the fine NLL loss.

    A source member matches the nearest target member of the paired patch
    when their ground-truth distance is within radius; members without such
    a partner are charged to the slack cells.
    """
    gt_points = scene.ground_truth.apply(scene.source.points)
    assignments = []
    for (mi, mj) in fine.memberships:
        if len(mi) == 0 or len(mj) == 0:
            assignments.append({"matched": [], "unmatched_rows": list(range(len(mi))),
                                "unmatched_cols": list(range(len(mj)))})
            continue
        d2 = pairwise_sq_dists(gt_points[mi], scene.target.points[mj])
        nn = d2.argmin(axis=1)
        matched = []
        used_cols = set()
        for a in range(len(mi)):
            if d2[a, nn[a]] <= radius * radius and int(nn[a]) not in used_cols:
                matched.append((a, int(nn[a])))
                used_cols.add(int(nn[a]))
        matched_rows = {a for a, _ in matched}
        assignments.append({
            "matched": matched,
            "unmatched_rows": [a for a in range(len(mi)) if a not in matched_rows],
            "unmatched_cols": [b for b in range(len(mj)) if b not in used_cols],
        })
    return assignments


# ---------------------------------------------------------------------------
# losses


def circle_loss(tok_src: np.ndarray, tok_dst: np.ndarray, overlap_gt: np.ndarray,
                positive_threshold: float = 0.1, delta_p: float = 0.1,
                delta_n: float = 1.4, beta: float = 10.0):
    """Overlap-aware circle loss over superpoint tokens.

    Anchors are rows (and, symmetrically, columns) with at least one
    positive (overlap above positive_threshold) and one negative (zero
    overlap). Per anchor:

        log(1 + sum_pos exp(lam * beta * (d_pos - delta_p))
              * sum_neg exp(beta * (delta_n - d_neg)))

    with lam the positive pair's overlap ratio and d the Euclidean distance
    between token rows. Raises NoSupervision when no anchor qualifies.
    """
    overlap = np.asarray(overlap_gt, dtype=np.float64)
    d = np.sqrt(pairwise_sq_dists(np.asarray(tok_src), np.asarray(tok_dst)))
    pos_mask = overlap > positive_threshold
    neg_mask = overlap == 0.0

    def log1p(x):
        # np.log1p has no complex support; the plain form is fine here since
        # the gradient path never needs log1p's tiny-argument precision.
        return np.log1p(x) if not np.iscomplexobj(x) else np.log(1.0 + x)

    def one_side(dist, pos, neg, lam):
        terms = []
        for i in range(dist.shape[0]):
            p = pos[i]
            n = neg[i]
            if not (p.any() and n.any()):
                continue
            sp = np.sum(np.exp(lam[i][p] * beta * (dist[i][p] - delta_p)))
            sn = np.sum(np.exp(beta * (delta_n - dist[i][n])))
            terms.append(log1p(sp * sn))
        return terms

    anchors = one_side(d, pos_mask, neg_mask, overlap)
    anchors += one_side(d.T, pos_mask.T, neg_mask.T, overlap.T)
    if not anchors:
        raise NoSupervision("no anchor has both positives and negatives")
    return sum(anchors) / len(anchors)


def nll_fine_loss(transports, assignments):
    """Mean negative log transport mass over ground-truth cells.

    Matched cells read the real transport entry; ground-truth-unmatched
    rows/columns read their slack cell. Empty supervision yields 0.
    """
    cells = []
    for transport, asg in zip(transports, assignments):
        for a, b in asg["matched"]:
            cells.append(transport[a, b])
        for a in asg["unmatched_rows"]:
            cells.append(transport[a, -1])
        for b in asg["unmatched_cols"]:
            cells.append(transport[-1, b])
    if not cells:
        return 0.0
    stacked = np.stack(cells)
    return -np.mean(np.log(stacked))


def balance_loss(f: np.ndarray, p: np.ndarray, num_experts: int, alpha: float = 0.01):
    """Load-balancing penalty alpha * L * sum_i f_i * P_i.

    Equals alpha exactly at uniform load and alpha * L when everything
    collapses onto one expert.
    """
    f = np.asarray(f)
    p = np.asarray(p)
    if f.shape[0] != num_experts or p.shape[0] != num_experts:
        raise ValueError("f and P must have one entry per expert")
    return alpha * num_experts * np.sum(f * p)


def total_loss(coarse_loss: float, fine_loss: float, balance: float) -> LossReport:
    return LossReport(coarse_loss=float(coarse_loss), fine_loss=float(fine_loss),
                      balance_loss=float(balance),
                      total=float(coarse_loss) + float(fine_loss) + float(balance))


# ---------------------------------------------------------------------------
# gradients (complex-step)


def routing_balance_loss(tokens: np.ndarray, router: RouterParams,
                         alpha: float = 0.01, prior_emb: np.ndarray | None = None,
                         embedding_scale: float = 1.0):
    """Balance loss as a function of the tokens feeding the router.

    The top-1 histogram f is a step function of the tokens, hence locally
    constant away from routing boundaries; the smooth dependence enters
    through the mean gate probabilities.
    """
    composite = tokens if prior_emb is None else tokens + embedding_scale * prior_emb
    probs = gate_probs(composite, router.w_g)
    top1 = np.argmax(np.real(probs), axis=1)
    f = np.bincount(top1, minlength=router.num_experts) / tokens.shape[0]
    p = probs.mean(axis=0)
    return balance_loss(f, p, router.num_experts, alpha)


def complex_step_gradient(fn, tokens: np.ndarray, coords) -> np.ndarray:
    """d fn / d tokens[r, c] for each (r, c) via complex-step differentiation.

    Machine-accurate for the piecewise-analytic losses in this module and
    independent of the central-difference oracle used to verify it.
    """
    base = np.asarray(tokens, dtype=np.complex128)
    out = np.zeros(len(coords))
    for idx, (r, c) in enumerate(coords):
        x = base.copy()
        x[r, c] += 1j * COMPLEX_STEP
        out[idx] = np.imag(fn(x)) / COMPLEX_STEP
    return out


def circle_loss_token_gradient(tok_src, tok_dst, overlap_gt, side, coords, **kw):
    """Gradient of circle_loss w.r.t. one side's token entries."""
    if side == "source":
        return complex_step_gradient(
            lambda x: circle_loss(x, tok_dst, overlap_gt, **kw), tok_src, coords)
    return complex_step_gradient(
        lambda x: circle_loss(tok_src, x, overlap_gt, **kw), tok_dst, coords)


def balance_loss_token_gradient(tokens, router, coords, alpha=0.01,
                                prior_emb=None, embedding_scale=1.0):
    return complex_step_gradient(
        lambda x: routing_balance_loss(x, router, alpha, prior_emb, embedding_scale),
        tokens, coords)


def fine_loss_token_gradient(tokens, coords):
    """The fine NLL is built from patch geometry, not transformer tokens:
    its token gradient is identically zero."""
    return np.zeros(len(coords))
