import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgts.errors import ConfigError, ShapeError
from hgts.hypergraph import (
    EdgeToNodeBlock,
    InterHGABlock,
    IntraHGABlock,
    _HGABase,
    build_structure,
    dump_structure_csv,
    flatten_channels,
    topk_count,
)
from hgts.oracles import loop_confidence, loop_hga, loop_topk_columns
from hgts.tensor import Tensor


def test_topk_count():
    assert [topk_count(e) for e in (4, 5, 6, 7, 21, 24)] == [1, 1, 2, 2, 7, 8]
    assert topk_count(2, floor_one=True) == 1


def test_structure_fields():
    rng = np.random.default_rng(0)
    s = build_structure(rng.standard_normal((7, 8)), rng.standard_normal((14, 8)), -1e4, 2)
    assert s.confidence.shape == s.incidence.shape == s.mask.shape == (7, 14)
    assert np.all((s.confidence > 0) & (s.confidence < 1))
    np.testing.assert_array_equal(s.incidence.sum(axis=0), 2)
    assert set(np.unique(s.mask)) == {0.0, -1e4}
    # rows variant: every hyperedge keeps k nodes
    r = build_structure(rng.standard_normal((7, 8)), rng.standard_normal((14, 8)), -1e4, 3, axis="edge")
    np.testing.assert_array_equal(r.incidence.sum(axis=1), 3)


def test_structure_errors():
    with pytest.raises(ShapeError):
        build_structure(np.zeros((4, 3)), np.zeros((5, 2)), -1e4, 1)
    with pytest.raises(ConfigError):
        build_structure(np.zeros((4, 3)), np.zeros((5, 3)), -1e4, 5)
    with pytest.raises(ConfigError):
        IntraHGABlock(8, 16, 1, 3, np.random.default_rng(0))


@given(
    e=st.integers(1, 5), n=st.integers(1, 9), d=st.integers(1, 8), seed=st.integers(0, 2**16), data=st.data()
)
def test_hga_matches_incidence_restricted_loop(e, n, d, seed, data):
    k = data.draw(st.integers(1, e))
    rng = np.random.default_rng(seed)
    block = _HGABase(d, 2 * d, 1, rng, np.float64)
    for p in block.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    q, x = rng.standard_normal((e, d)), rng.standard_normal((n, d))
    s = build_structure(q, x, -1e9, k)
    np.testing.assert_allclose(s.confidence, loop_confidence(q, x), atol=1e-14)
    np.testing.assert_array_equal(s.incidence, loop_topk_columns(s.confidence, k))
    fast = block.aggregate(Tensor(q), Tensor(x), s.mask).data
    np.testing.assert_allclose(fast, loop_hga(q, x, s.incidence, block), atol=1e-5)


def test_masked_nodes_do_not_influence_member_edges():
    rng = np.random.default_rng(4)
    block = _HGABase(4, 8, 2, rng, np.float64)
    q, x = rng.standard_normal((3, 4)), rng.standard_normal((6, 4))
    mask = np.full((3, 6), -1e9)
    mask[:, :2] = 0.0  # every hyperedge owns nodes 0 and 1 only
    a = block.aggregate(Tensor(q), Tensor(x), mask).data
    y = x.copy()
    y[2:] += 100.0
    b = block.aggregate(Tensor(q), Tensor(y), mask).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_block_shapes():
    rng = np.random.default_rng(0)
    b, c, n, d, e = 2, 3, 5, 8, 4
    tokens = Tensor(rng.standard_normal((b * c, n, d)))
    intra = IntraHGABlock(d, 16, 2, e, rng, dtype=np.float64)
    edges, s = intra(tokens, -1e4)
    assert edges.shape == (b * c, e, d) and s.confidence.shape == (b * c, e, n)
    nodes = flatten_channels(edges, b)
    assert nodes.shape == (b, c * e, d)
    np.testing.assert_array_equal(nodes.data[1, e : 2 * e], edges.data[c + 1])  # channel-major
    inter = InterHGABlock(d, 16, 2, rng, dtype=np.float64)
    ch_edges, s2 = inter(nodes, Tensor(rng.standard_normal((b, c, d))), -1e4)
    assert ch_edges.shape == (b, c, d) and s2.incidence.shape == (b, c, c * e)
    np.testing.assert_array_equal(s2.incidence.sum(axis=-2), 1)
    out = EdgeToNodeBlock(d, 16, 2, rng, dtype=np.float64)(flatten_channels(tokens, b), ch_edges)
    assert out.shape == (b, c * n, d)


def test_dump_structure_csv(tmp_path):
    rng = np.random.default_rng(0)
    s = build_structure(rng.standard_normal((2, 7, 4)), rng.standard_normal((2, 14, 4)), -1e4, 2)
    paths = dump_structure_csv(s, str(tmp_path), "blk")
    assert len(paths) == 6
    with open(tmp_path / "blk_adj_s1.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == [str(i) for i in range(14)]
    adj = np.array(rows[1:], dtype=float)
    assert adj.shape == (7, 14)
    np.testing.assert_array_equal(adj.sum(axis=0), 2)
