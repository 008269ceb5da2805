"""Prior-correspondence encoding: code numbers, sinusoidal table, assignment.

Matched superpoints receive discrete code numbers (consecutive from 1 in
selection order, or the single number 1 under binary coding); unmatched
superpoints share code 0. Codes are embedded through a sinusoidal table and
a two-layer perceptron; a superpoint matched by several pairs gets the
overlap-softmax blend of its pair rows:

    row(i) = softmax(ratios(X_i)) . projected[numbers(X_i)]   |X_i| > 1
           = projected[number(X_i)]                           |X_i| = 1
           = projected[0]                                     otherwise
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, WidthError
from .numerics import soft_clip, softmax
from .prior import PriorCorrespondences

#: Input magnitude up to which the embedding perceptron's nonlinearity is
#: exactly the identity; sinusoidal rows lie in [-1, 1], well inside.
CLIP_RANGE = 2.0


@dataclass(frozen=True)
class PriorCoding:
    """Code-number scheme: 'ordered' uses {0..c}, 'binary' uses {0, 1}."""

    scheme: str
    pair_count: int

    def __post_init__(self):
        if self.scheme not in ("ordered", "binary"):
            raise ValueError(f"unknown coding scheme {self.scheme!r}")
        if self.pair_count < 0:
            raise ValueError("pair_count must be >= 0")

    @property
    def numbers(self) -> np.ndarray:
        if self.scheme == "ordered":
            return np.arange(self.pair_count + 1)
        return np.arange(2)

    def number_for_position(self, position: int) -> int:
        """Code number of the pair at a given selection position."""
        return position + 1 if self.scheme == "ordered" else 1


@dataclass(frozen=True, eq=False)
class EmbeddingMlp:
    """Two-layer perceptron d -> d -> d with the soft-clip nonlinearity."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def width(self) -> int:
        return self.w1.shape[1]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self.width:
            raise ShapeError(f"expected width {self.width}, got {rows.shape}")
        hidden = soft_clip(rows @ self.w1.T + self.b1, CLIP_RANGE)
        return hidden @ self.w2.T + self.b2


def identity_embedding_mlp(d: int) -> EmbeddingMlp:
    """Identity weights, zero biases: exact identity for inputs in the clip range."""
    eye = np.eye(d)
    zero = np.zeros(d)
    return EmbeddingMlp(w1=eye, b1=zero, w2=eye.copy(), b2=zero.copy())


def random_embedding_mlp(d: int, seed: int = 0) -> EmbeddingMlp:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    scale = 1.0 / np.sqrt(d)
    return EmbeddingMlp(w1=rng.normal(size=(d, d)) * scale, b1=np.zeros(d),
                        w2=rng.normal(size=(d, d)) * scale, b2=np.zeros(d))


@dataclass(frozen=True, eq=False)
class PriorEmbeddingTable:
    """Sinusoidal rows and their perceptron projection; row 0 is the
    non-anchor code in both schemes."""

    raw: np.ndarray
    projected: np.ndarray


def sinusoidal_table(count: int, d: int) -> np.ndarray:
    """Positional table: entry (i, 2k) = sin(i / 10000^(2k/d)), (i, 2k+1) the cosine."""
    if d % 2 != 0:
        raise WidthError(f"width {d} must be even")
    if count < 1:
        raise ValueError("count must be >= 1")
    i = np.arange(count)[:, None]
    k = np.arange(d // 2)[None, :]
    angle = i / np.power(10000.0, 2.0 * k / d)
    table = np.zeros((count, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def embed_table(raw: np.ndarray, mlp: EmbeddingMlp) -> np.ndarray:
    """Row-wise perceptron application; deterministic for fixed parameters."""
    return mlp.apply(raw)


def build_embedding_table(coding: PriorCoding, d: int, mlp: EmbeddingMlp) -> PriorEmbeddingTable:
    raw = sinusoidal_table(len(coding.numbers), d)
    return PriorEmbeddingTable(raw=raw, projected=embed_table(raw, mlp))


def assign_prior_embeddings(sp_count: int, side: str, prior: PriorCorrespondences,
                            table: PriorEmbeddingTable, coding: PriorCoding) -> np.ndarray:
    """Per-superpoint prior embedding for one side ('source' or 'target')."""
    if side not in ("source", "target"):
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    positions = prior.src_positions if side == "source" else prior.dst_positions
    col = 0 if side == "source" else 1
    d = table.projected.shape[1]
    out = np.tile(table.projected[0], (sp_count, 1))
    for sp_index, pos_list in positions.items():
        if sp_index >= sp_count:
            raise IndexError(
                f"prior references {side} superpoint {sp_index} >= {sp_count}")
        rows = table.projected[[coding.number_for_position(int(p)) for p in pos_list]]
        if len(pos_list) == 1:
            out[sp_index] = rows[0]
        else:
            weights = softmax(prior.ratios[pos_list])
            out[sp_index] = weights @ rows
    # Positions reference superpoints of this side by construction; double-check
    # pair indices too so a truncated superpoint set fails loudly.
    if len(prior) and prior.pairs[:, col].max() >= sp_count:
        raise IndexError(f"prior references {side} superpoint beyond {sp_count}")
    return out


def coding_dump(sp_count: int, side: str, prior: PriorCorrespondences,
                coding: PriorCoding) -> list:
    """Per-superpoint code numbers and assignment branch, for harness JSON."""
    positions = prior.src_positions if side == "source" else prior.dst_positions
    dump = []
    for i in range(sp_count):
        pos_list = positions.get(i)
        if pos_list is None or len(pos_list) == 0:
            dump.append({"superpoint": i, "numbers": [0], "branch": "non_anchor"})
        elif len(pos_list) == 1:
            dump.append({"superpoint": i,
                         "numbers": [coding.number_for_position(int(pos_list[0]))],
                         "branch": "single"})
        else:
            dump.append({"superpoint": i,
                         "numbers": [coding.number_for_position(int(p)) for p in pos_list],
                         "branch": "multi"})
    return dump
