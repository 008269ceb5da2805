import math

import numpy as np
import pytest

from moereg.encoding import (PriorCoding, assign_prior_embeddings,
                             build_embedding_table, coding_dump, embed_table,
                             identity_embedding_mlp, random_embedding_mlp,
                             sinusoidal_table)
from moereg.errors import ShapeError, WidthError
from moereg.prior import PriorCorrespondences, select_prior_correspondences


def make_prior(pairs, ratios):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    src_positions, dst_positions = {}, {}
    for pos, (i, j) in enumerate(pairs):
        src_positions.setdefault(int(i), []).append(pos)
        dst_positions.setdefault(int(j), []).append(pos)
    return PriorCorrespondences(
        pairs=pairs, ratios=np.asarray(ratios, dtype=np.float64),
        src_positions={k: np.asarray(v) for k, v in src_positions.items()},
        dst_positions={k: np.asarray(v) for k, v in dst_positions.items()})


def test_sinusoidal_row_zero():
    table = sinusoidal_table(4, 8)
    np.testing.assert_array_equal(table[0, 0::2], np.zeros(4))
    np.testing.assert_array_equal(table[0, 1::2], np.ones(4))


def test_sinusoidal_direct_values():
    table = sinusoidal_table(3, 6)
    assert abs(table[1, 0] - math.sin(1.0)) < 1e-12
    assert abs(table[1, 1] - math.cos(1.0)) < 1e-12
    # direct evaluation of every entry
    for i in range(3):
        for k in range(3):
            angle = i / 10000 ** (2 * k / 6)
            assert abs(table[i, 2 * k] - math.sin(angle)) < 1e-12
            assert abs(table[i, 2 * k + 1] - math.cos(angle)) < 1e-12


def test_sinusoidal_range_and_width_check():
    table = sinusoidal_table(1000, 64)
    assert table.min() >= -1.0 and table.max() <= 1.0
    with pytest.raises(WidthError):
        sinusoidal_table(10, 7)


def test_sinusoidal_rows_distinct():
    # ordered-coding injectivity up to large counts: sorted rows never repeat
    table = sinusoidal_table(10_000, 16)
    order = np.lexsort(table.T[::-1])
    adjacent_equal = np.all(np.isclose(table[order][1:], table[order][:-1],
                                       atol=1e-12), axis=1)
    assert not adjacent_equal.any()


def test_embed_table_identity_mode():
    table = sinusoidal_table(6, 8)
    mlp = identity_embedding_mlp(8)
    np.testing.assert_array_equal(embed_table(table, mlp), table)


def test_embed_table_zero_weights_bias():
    table = sinusoidal_table(5, 8)
    mlp = identity_embedding_mlp(8)
    b = np.arange(8.0)
    from dataclasses import replace
    zmlp = replace(mlp, w1=np.zeros((8, 8)), w2=np.zeros((8, 8)), b2=b)
    out = embed_table(table, zmlp)
    np.testing.assert_array_equal(out, np.tile(b, (5, 1)))


def test_embed_table_deterministic_equal_rows():
    mlp = random_embedding_mlp(8, seed=3)
    rows = np.tile(np.linspace(-1, 1, 8), (2, 1))
    out = embed_table(rows, mlp)
    np.testing.assert_array_equal(out[0], out[1])


def test_embed_table_shape_error():
    mlp = random_embedding_mlp(8)
    with pytest.raises(ShapeError):
        embed_table(np.zeros((3, 6)), mlp)


def test_coding_numbers():
    ordered = PriorCoding("ordered", pair_count=4)
    np.testing.assert_array_equal(ordered.numbers, [0, 1, 2, 3, 4])
    assert ordered.number_for_position(2) == 3
    binary = PriorCoding("binary", pair_count=4)
    np.testing.assert_array_equal(binary.numbers, [0, 1])
    assert binary.number_for_position(2) == 1
    with pytest.raises(ValueError):
        PriorCoding("gray", 2)


def test_unmatched_superpoint_gets_row_zero():
    prior = make_prior([[0, 1]], [0.7])
    coding = PriorCoding("ordered", 1)
    table = build_embedding_table(coding, 8, identity_embedding_mlp(8))
    emb = assign_prior_embeddings(3, "source", prior, table, coding)
    np.testing.assert_array_equal(emb[1], table.projected[0])
    np.testing.assert_array_equal(emb[2], table.projected[0])
    np.testing.assert_array_equal(emb[0], table.projected[1])


def test_matched_pair_identical_embeddings_across_sides():
    prior = make_prior([[2, 5], [3, 1]], [0.4, 0.9])
    coding = PriorCoding("ordered", 2)
    table = build_embedding_table(coding, 16, random_embedding_mlp(16, seed=1))
    src = assign_prior_embeddings(6, "source", prior, table, coding)
    dst = assign_prior_embeddings(7, "target", prior, table, coding)
    np.testing.assert_array_equal(src[2], dst[5])
    np.testing.assert_array_equal(src[3], dst[1])
    assert not np.allclose(src[2], src[3])


def test_equal_ratio_multi_match_is_mean():
    prior = make_prior([[0, 0], [0, 1]], [0.5, 0.5])
    coding = PriorCoding("ordered", 2)
    table = build_embedding_table(coding, 8, random_embedding_mlp(8, seed=2))
    emb = assign_prior_embeddings(1, "source", prior, table, coding)
    expected = 0.5 * (table.projected[1] + table.projected[2])
    np.testing.assert_allclose(emb[0], expected, atol=1e-9)


def scalar_assignment_oracle(sp_count, side, prior, table, coding):
    """Independent per-superpoint weighted-sum evaluation."""
    out = np.zeros((sp_count, table.projected.shape[1]))
    col = 0 if side == "source" else 1
    for sp in range(sp_count):
        positions = [pos for pos, pair in enumerate(prior.pairs)
                     if pair[col] == sp]
        if not positions:
            out[sp] = table.projected[0]
        elif len(positions) == 1:
            out[sp] = table.projected[coding.number_for_position(positions[0])]
        else:
            logits = [prior.ratios[p] for p in positions]
            exps = [math.exp(v - max(logits)) for v in logits]
            weights = [e / sum(exps) for e in exps]
            acc = np.zeros(table.projected.shape[1])
            for wgt, pos in zip(weights, positions):
                acc += wgt * table.projected[coding.number_for_position(pos)]
            out[sp] = acc
    return out


def test_three_ratio_softmax_matches_scalar_oracle():
    prior = make_prior([[0, 0], [0, 1], [0, 2]], [0.2, 0.5, 0.3])
    coding = PriorCoding("ordered", 3)
    table = build_embedding_table(coding, 8, random_embedding_mlp(8, seed=4))
    emb = assign_prior_embeddings(2, "source", prior, table, coding)
    oracle = scalar_assignment_oracle(2, "source", prior, table, coding)
    np.testing.assert_allclose(emb, oracle, atol=1e-9)


def test_random_priors_match_scalar_oracle():
    rng = np.random.default_rng(33)
    for trial in range(50):
        n_src, n_dst = rng.integers(3, 10, size=2)
        overlap = rng.uniform(size=(n_src, n_dst)) * (rng.uniform(size=(n_src, n_dst)) > 0.5)
        if not (overlap > 0.1).any():
            continue
        prior = select_prior_correspondences(overlap, 0.1)
        for scheme in ("ordered", "binary"):
            coding = PriorCoding(scheme, len(prior))
            table = build_embedding_table(coding, 8,
                                          random_embedding_mlp(8, seed=trial))
            for side, count in (("source", n_src), ("target", n_dst)):
                emb = assign_prior_embeddings(count, side, prior, table, coding)
                oracle = scalar_assignment_oracle(count, side, prior, table, coding)
                np.testing.assert_allclose(emb, oracle, atol=1e-9)


def test_binary_coding_two_values():
    rng = np.random.default_rng(41)
    overlap = rng.uniform(size=(8, 8))
    prior = select_prior_correspondences(overlap, 0.5)
    coding = PriorCoding("binary", len(prior))
    table = build_embedding_table(coding, 8, random_embedding_mlp(8, seed=0))
    emb = assign_prior_embeddings(8, "source", prior, table, coding)
    distinct = np.unique(np.round(emb, 12), axis=0)
    assert distinct.shape[0] <= 2


def test_out_of_range_superpoint_raises():
    prior = make_prior([[5, 0]], [0.5])
    coding = PriorCoding("ordered", 1)
    table = build_embedding_table(coding, 8, identity_embedding_mlp(8))
    with pytest.raises(IndexError):
        assign_prior_embeddings(3, "source", prior, table, coding)


def test_coding_dump_branches():
    prior = make_prior([[0, 0], [0, 1], [2, 2]], [0.5, 0.4, 0.9])
    coding = PriorCoding("ordered", 3)
    dump = coding_dump(4, "source", prior, coding)
    assert dump[0]["branch"] == "multi" and dump[0]["numbers"] == [1, 2]
    assert dump[1]["branch"] == "non_anchor" and dump[1]["numbers"] == [0]
    assert dump[2]["branch"] == "single" and dump[2]["numbers"] == [3]
