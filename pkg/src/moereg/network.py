"""Attention blocks and the sparse mixture-of-experts layer.

The encoder interleaves [self-attention, SMoE, cross-attention, SMoE] per
round on both clouds, pre-norm residual everywhere. The SMoE router scores
tokens with a linear gate; in prior-guided mode the gate sees token + prior
embedding while the experts process the unmodified tokens. Forward passes
are pure functions of the parameter values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numerics import layer_norm, soft_clip, softmax


@dataclass(frozen=True, eq=False)
class RouterParams:
    """Linear gate: logits = tokens @ w_g.T, top-k selection (ties -> lowest index)."""

    w_g: np.ndarray
    k: int = 1

    def __post_init__(self):
        if not (1 <= self.k <= self.w_g.shape[0]):
            raise ValueError(f"k={self.k} outside [1, {self.w_g.shape[0]}]")

    @property
    def num_experts(self) -> int:
        return self.w_g.shape[0]


@dataclass(frozen=True, eq=False)
class ExpertParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return soft_clip(x @ self.w1.T + self.b1) @ self.w2.T + self.b2


@dataclass(frozen=True, eq=False)
class ExpertBank:
    experts: tuple

    def __post_init__(self):
        shapes = {(e.w1.shape, e.w2.shape) for e in self.experts}
        if len(shapes) > 1:
            raise ValueError("all experts must share one shape")

    def __len__(self) -> int:
        return len(self.experts)


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True, eq=False)
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm: LayerNormParams


@dataclass(frozen=True, eq=False)
class RoutingDecision:
    """Per-token expert choice: top-k indices, aligned gate values, full softmax."""

    expert_of: np.ndarray   # (T, k) int
    gate_of: np.ndarray     # (T, k)
    probs: np.ndarray       # (T, L)

    def top1(self) -> np.ndarray:
        return self.expert_of[:, 0]

    def to_json(self) -> dict:
        return {"expert": self.expert_of[:, 0].tolist(),
                "gate": self.gate_of[:, 0].tolist()}


def gate_probs(tokens: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    """Router softmax; complex-safe for the loss-gradient path."""
    return softmax(tokens @ w_g.T, axis=-1)


def route(tokens: np.ndarray, router: RouterParams) -> RoutingDecision:
    """Top-k routing on raw tokens, ties broken toward the lowest expert index."""
    if tokens.shape[1] != router.w_g.shape[1]:
        raise ShapeError(f"token width {tokens.shape[1]} != router width {router.w_g.shape[1]}")
    probs = gate_probs(tokens, router.w_g)
    order = np.argsort(-probs, axis=1, kind="stable")
    expert_of = order[:, :router.k]
    gate_of = np.take_along_axis(probs, expert_of, axis=1)
    return RoutingDecision(expert_of=expert_of, gate_of=gate_of, probs=probs)


def route_prior_guided(tokens: np.ndarray, prior_emb: np.ndarray,
                       router: RouterParams, scale: float = 1.0) -> RoutingDecision:
    """Routing on composite tokens (token + scale * prior embedding).

    Only the routing sees the composite; callers keep feeding the original
    tokens to the experts.
    """
    prior_emb = np.asarray(prior_emb)
    if prior_emb.shape != tokens.shape:
        raise ShapeError(f"prior embedding shape {prior_emb.shape} != tokens {tokens.shape}")
    return route(tokens + scale * prior_emb, router)


def smoe_forward(tokens: np.ndarray, decision: RoutingDecision, bank: ExpertBank,
                 norm: LayerNormParams | None = None,
                 return_counts: bool = False):
    """Residual SMoE sublayer: tokens + sum_k gate * expert(LN(tokens)).

    Each expert is evaluated only on the tokens routed to it; with k = 1
    that is exactly one expert evaluation per token.
    """
    if decision.expert_of.shape[0] != tokens.shape[0]:
        raise ShapeError("decision rows != token rows")
    h = layer_norm(tokens, norm.gamma, norm.beta) if norm is not None else tokens
    update = np.zeros_like(tokens)
    counts = np.zeros(len(bank), dtype=np.int64)
    for slot in range(decision.expert_of.shape[1]):
        chosen = decision.expert_of[:, slot]
        gates = decision.gate_of[:, slot]
        for e in np.unique(chosen):
            mask = chosen == e
            counts[e] += int(mask.sum())
            update[mask] += gates[mask, None] * bank.experts[e].apply(h[mask])
    out = tokens + update
    if return_counts:
        return out, counts
    return out


def dense_decision(n_tokens: int) -> RoutingDecision:
    """The no-router baseline: every token to expert 0 with gate 1."""
    return RoutingDecision(expert_of=np.zeros((n_tokens, 1), dtype=np.int64),
                           gate_of=np.ones((n_tokens, 1)),
                           probs=np.ones((n_tokens, 1)))


def attention_block(tokens_a: np.ndarray, tokens_b: np.ndarray,
                    params: AttentionParams, mode: str) -> np.ndarray:
    """Scaled dot-product attention with pre-norm residual.

    Queries come from tokens_a; keys/values from tokens_a in 'self' mode or
    tokens_b in 'cross' mode. Attention weight rows sum to 1.
    """
    if mode not in ("self", "cross"):
        raise ValueError(f"mode must be 'self' or 'cross', got {mode!r}")
    if tokens_a.shape[1] != tokens_b.shape[1]:
        raise ShapeError("token widths differ")
    ha = layer_norm(tokens_a, params.norm.gamma, params.norm.beta)
    hb = ha if mode == "self" else layer_norm(tokens_b, params.norm.gamma, params.norm.beta)
    q = ha @ params.wq.T
    k = hb @ params.wk.T
    v = hb @ params.wv.T
    weights = softmax(q @ k.T / math.sqrt(q.shape[1]), axis=-1)
    return tokens_a + (weights @ v) @ params.wo.T


@dataclass(frozen=True, eq=False)
class SmoeParams:
    router: RouterParams
    bank: ExpertBank
    norm: LayerNormParams


@dataclass(frozen=True, eq=False)
class BlockParams:
    self_attn: AttentionParams
    smoe_self: SmoeParams
    cross_attn: AttentionParams
    smoe_cross: SmoeParams


@dataclass(frozen=True, eq=False)
class ModelParams:
    d: int
    num_experts: int
    k: int
    blocks: tuple
    smoe_in_cross: bool = True

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True, eq=False)
class RoutingRecord:
    block: int
    stage: str   # 'self' | 'cross'
    side: str    # 'source' | 'target'
    decision: RoutingDecision


@dataclass(frozen=True, eq=False)
class EncodeResult:
    tokens_src: np.ndarray
    tokens_dst: np.ndarray
    history: tuple

    def last_decisions(self) -> dict:
        """Final recorded decision per side."""
        out = {}
        for rec in self.history:
            out[rec.side] = rec.decision
        return out


def build_model(d: int, num_experts: int, k: int, num_blocks: int,
                hidden: int | None = None, seed: int = 0,
                smoe_in_cross: bool = True,
                attn_out_scale: float = 0.5) -> ModelParams:
    """Seeded random parameters.

    Expert FFNs are d -> hidden -> d (hidden defaults to 2d). Attention
    output projections are drawn at attn_out_scale/sqrt(d): random
    (untrained) attention must perturb, not drown, the descriptor signal
    the matching stage relies on.
    """
    hidden = hidden if hidden is not None else 2 * d
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    inv = 1.0 / math.sqrt(d)

    def attn() -> AttentionParams:
        return AttentionParams(
            wq=rng.normal(size=(d, d)) * inv,
            wk=rng.normal(size=(d, d)) * inv,
            wv=rng.normal(size=(d, d)) * inv,
            wo=rng.normal(size=(d, d)) * inv * attn_out_scale,
            norm=LayerNormParams(gamma=np.ones(d), beta=np.zeros(d)))

    def smoe() -> SmoeParams:
        experts = tuple(
            ExpertParams(w1=rng.normal(size=(hidden, d)) * inv,
                         b1=np.zeros(hidden),
                         w2=rng.normal(size=(d, hidden)) / math.sqrt(hidden),
                         b2=np.zeros(d))
            for _ in range(num_experts))
        router = RouterParams(w_g=rng.normal(size=(num_experts, d)) * inv, k=k)
        return SmoeParams(router=router, bank=ExpertBank(experts=experts),
                          norm=LayerNormParams(gamma=np.ones(d), beta=np.zeros(d)))

    blocks = tuple(BlockParams(self_attn=attn(), smoe_self=smoe(),
                               cross_attn=attn(), smoe_cross=smoe())
                   for _ in range(num_blocks))
    return ModelParams(d=d, num_experts=num_experts, k=k, blocks=blocks,
                       smoe_in_cross=smoe_in_cross)


def _smoe_sublayer(tokens, prior_emb, params: SmoeParams, mode, scale):
    if mode == "dense":
        decision = dense_decision(tokens.shape[0])
    elif mode == "prior" and prior_emb is not None:
        h = layer_norm(tokens, params.norm.gamma, params.norm.beta)
        decision = route_prior_guided(h, prior_emb, params.router, scale)
    else:
        h = layer_norm(tokens, params.norm.gamma, params.norm.beta)
        decision = route(h, params.router)
    return smoe_forward(tokens, decision, params.bank, params.norm), decision


def encode(feats_src: np.ndarray, feats_dst: np.ndarray, model: ModelParams,
           mode: str = "prior", prior_src: np.ndarray | None = None,
           prior_dst: np.ndarray | None = None,
           embedding_scale: float = 1.0) -> EncodeResult:
    """Run the interleaved rounds on both clouds.

    mode selects routing: 'prior' (composite gating), 'vanilla' (token
    gating) or 'dense' (single FFN, no router). The per-sublayer routing
    decisions are recorded for visualization and load statistics.
    """
    if mode not in ("prior", "vanilla", "dense"):
        raise ValueError(f"unknown routing mode {mode!r}")
    if mode == "prior" and (prior_src is None or prior_dst is None):
        raise ValueError("prior mode needs prior embeddings for both sides")
    xs = np.array(feats_src, dtype=np.float64, copy=True)
    xd = np.array(feats_dst, dtype=np.float64, copy=True)
    history = []
    for b, block in enumerate(model.blocks):
        xs = attention_block(xs, xs, block.self_attn, "self")
        xd = attention_block(xd, xd, block.self_attn, "self")
        xs, dec = _smoe_sublayer(xs, prior_src, block.smoe_self, mode, embedding_scale)
        history.append(RoutingRecord(b, "self", "source", dec))
        xd, dec = _smoe_sublayer(xd, prior_dst, block.smoe_self, mode, embedding_scale)
        history.append(RoutingRecord(b, "self", "target", dec))
        xs_new = attention_block(xs, xd, block.cross_attn, "cross")
        xd_new = attention_block(xd, xs, block.cross_attn, "cross")
        xs, xd = xs_new, xd_new
        if model.smoe_in_cross:
            xs, dec = _smoe_sublayer(xs, prior_src, block.smoe_cross, mode, embedding_scale)
            history.append(RoutingRecord(b, "cross", "source", dec))
            xd, dec = _smoe_sublayer(xd, prior_dst, block.smoe_cross, mode, embedding_scale)
            history.append(RoutingRecord(b, "cross", "target", dec))
    return EncodeResult(tokens_src=xs, tokens_dst=xd, history=tuple(history))


def load_stats(decision: RoutingDecision, num_experts: int):
    """Per-expert load fractions and mean gate probabilities.

    f_i counts top-1 assignments, P_i averages the softmax column; both sum
    to one.
    """
    if decision.probs.shape[1] != num_experts:
        raise ShapeError(f"probs width {decision.probs.shape[1]} != {num_experts}")
    t = decision.probs.shape[0]
    f = np.bincount(decision.top1(), minlength=num_experts) / t
    p = decision.probs.mean(axis=0)
    return f, p


def anchor_copurity(result: EncodeResult, prior) -> float:
    """Fraction of single-pair anchors whose two sides share an expert.

    Measured on the last recorded decision of each side (the final SMoE
    block). Returns NaN when the prior has no single-pair anchors.
    """
    last = result.last_decisions()
    if "source" not in last or "target" not in last:
        return float("nan")
    src_top = last["source"].top1()
    dst_top = last["target"].top1()
    hits = 0
    total = 0
    for pos, (i, j) in enumerate(prior.pairs):
        if len(prior.src_positions.get(int(i), ())) == 1 and \
           len(prior.dst_positions.get(int(j), ())) == 1:
            total += 1
            if src_top[int(i)] == dst_top[int(j)]:
                hits += 1
    return hits / total if total else float("nan")


def routing_history_json(result: EncodeResult) -> list:
    return [{"block": rec.block, "stage": rec.stage, "side": rec.side,
             **rec.decision.to_json()} for rec in result.history]
