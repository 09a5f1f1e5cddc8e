import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tprm.errors import ShapeError
from tprm.tensor import (
    CPFactors, DenseTensor, PartitionGrid, cp_reconstruct, inner_product, khatri_rao,
    outer_product, partition, partition_array, read_tensor, unpartition, write_tensor,
)


def test_dense_tensor_invariants():
    t = DenseTensor(np.arange(6.0), dims=(2, 3))
    assert t.dims == (2, 3) and t.order == 2 and t.size == 6
    assert t.array[1, 0] == 3.0  # last index fastest
    with pytest.raises(ShapeError):
        DenseTensor(np.arange(5.0), dims=(2, 3))
    with pytest.raises(ValueError):
        DenseTensor([1.0, np.nan])
    with pytest.raises(ValueError):
        t.array[0, 0] = 1.0


def test_inner_product_examples():
    ones = DenseTensor(np.ones((2, 2)))
    assert inner_product(ones, ones) == 4.0
    assert inner_product(DenseTensor([[1, 2], [3, 4]]), DenseTensor(np.eye(2))) == 5.0
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    loop = sum(x[i, j, k] * y[i, j, k] for i, j, k in itertools.product(range(3), range(4), range(5)))
    assert inner_product(DenseTensor(x), DenseTensor(y)) == pytest.approx(loop, rel=1e-12)
    with pytest.raises(ShapeError):
        inner_product(DenseTensor(np.ones(3)), DenseTensor(np.ones(4)))


def test_outer_product_examples():
    assert np.array_equal(outer_product([[1, 2], [3, 4]]).array, [[3, 4], [6, 8]])
    t = outer_product([[1, 0], [0, 1], [1, 1]]).array
    expected = np.zeros((2, 2, 2))
    expected[0, 1, :] = 1  # one-based (1,2,1) and (1,2,2)
    assert np.array_equal(t, expected)
    rng = np.random.default_rng(1)
    a, b, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=2)
    loop = np.empty((3, 4, 2))
    for i, j, k in itertools.product(range(3), range(4), range(2)):
        loop[i, j, k] = a[i] * b[j] * c[k]
    assert np.allclose(outer_product([a, b, c]).array, loop, rtol=1e-14)
    with pytest.raises(ShapeError):
        outer_product([[1.0], []])
    with pytest.raises(ShapeError):
        outer_product([[1.0, 2.0]])


def test_cp_reconstruct_examples():
    f = CPFactors([2.0], [[[1], [0]], [[0], [1]]])
    assert np.array_equal(cp_reconstruct(f).array, [[0, 2], [0, 0]])
    rng = np.random.default_rng(2)
    mats = [rng.normal(size=(J, 3)) for J in (6, 5, 4)]
    assert np.all(cp_reconstruct(CPFactors(np.zeros(3), mats)).array == 0)
    lam = rng.normal(size=3)
    oracle = sum(lam[r] * np.einsum("i,j,k->ijk", *(m[:, r] for m in mats)) for r in range(3))
    assert np.allclose(cp_reconstruct(CPFactors(lam, mats)).array, oracle, atol=1e-12)
    with pytest.raises(ShapeError):
        CPFactors(np.ones(2), [np.ones((3, 2)), np.ones((3, 3))])


def test_cp_reconstruct_with_subject_mode():
    rng = np.random.default_rng(3)
    mats = [rng.normal(size=(J, 2)) for J in (3, 4, 5)]
    f = CPFactors(np.ones(2), mats[:2], mats[2])
    assert cp_reconstruct(f).dims == (3, 4, 5)
    assert np.allclose(cp_reconstruct(f).array, cp_reconstruct(CPFactors(np.ones(2), mats)).array)


def test_khatri_rao_last_fastest():
    a, b = np.array([[1.0], [2.0]]), np.array([[3.0], [4.0], [5.0]])
    assert np.array_equal(khatri_rao([a, b])[:, 0], [3, 4, 5, 6, 8, 10])


def test_partition_examples():
    x = DenseTensor(np.arange(1.0, 17.0).reshape(4, 4))
    grid = PartitionGrid.create((4, 4), (2, 2))
    blocks = partition(x, grid)
    assert len(blocks) == 4 == grid.block_count
    assert np.array_equal(blocks[0].array, [[1, 2], [5, 6]])
    assert np.array_equal(blocks[1].array, [[3, 4], [7, 8]])
    assert grid.block_index(1) == (0, 1) and grid.block_id((1, 0)) == 2
    assert unpartition(blocks, grid) == x

    single = PartitionGrid.create((4, 4), (4, 4))
    (b,) = partition(x, single)
    assert b == x and unpartition([b], single) == x

    rng = np.random.default_rng(4)
    y = DenseTensor(rng.normal(size=(8, 8, 8)))
    g3 = PartitionGrid.create((8, 8, 8), (4, 4, 4))
    parts = partition(y, g3)
    for s, blk in enumerate(parts):
        assert np.array_equal(blk.array, y.array[g3.block_slices(s)])
    assert unpartition(parts, g3) == y


def test_partition_errors_and_padding():
    with pytest.raises(ShapeError):
        PartitionGrid.create((5, 4), (2, 2))
    grid = PartitionGrid.create((5, 4), (2, 2), pad=True)
    assert grid.padded_dims == (6, 4) and grid.block_count == 6
    x = np.arange(20.0).reshape(5, 4)
    blocks = partition_array(x, grid)
    assert np.all(blocks[4:][:, 1] == 0)
    assert np.array_equal(unpartition(list(blocks), grid).array, x)
    with pytest.raises(ShapeError):
        unpartition(list(blocks[:3]), grid)
    with pytest.raises(ShapeError):
        unpartition([np.zeros((3, 3))] * 6, grid)
    with pytest.raises(ShapeError):
        partition(DenseTensor(np.ones((4, 4))), grid)


def test_tprm_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    x = DenseTensor(rng.normal(size=(3, 4, 2)))
    p = tmp_path / "x.tprm"
    write_tensor(p, x)
    raw = p.read_bytes()
    assert raw[:4] == bytes([0x54, 0x50, 0x52, 0x4D]) and raw[4] == 1 and raw[5] == 3
    assert int.from_bytes(raw[6:14], "little") == 3
    assert np.frombuffer(raw[30:38], "<f8")[0] == x.array[0, 0, 0]
    assert read_tensor(p) == x
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "short")


dims3 = st.lists(st.integers(1, 3), min_size=1, max_size=3)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_partition_roundtrip_property(data):
    grid_shape = data.draw(dims3)
    block = data.draw(st.lists(st.integers(1, 3), min_size=len(grid_shape), max_size=len(grid_shape)))
    parent = tuple(g * b for g, b in zip(grid_shape, block))
    x = data.draw(arrays(np.float64, parent, elements=st.floats(-1e6, 1e6)))
    grid = PartitionGrid.create(parent, block)
    out = unpartition(partition(DenseTensor(x), grid), grid)
    assert np.array_equal(out.array, x)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-150)))
def test_inner_product_nonnegative(x):
    v = inner_product(DenseTensor(x), DenseTensor(x))
    assert v >= 0
    assert (v == 0) == (not np.any(x))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_cp_linear_in_weights_and_separable(seed, R):
    rng = np.random.default_rng(seed)
    mats = [rng.normal(size=(J, R)) for J in (3, 2, 4)]
    lam = rng.normal(size=R)
    one = cp_reconstruct(CPFactors(lam, mats)).array
    two = cp_reconstruct(CPFactors(2 * lam, mats)).array
    assert np.allclose(two, 2 * one, rtol=1e-12, atol=1e-12)

    f = CPFactors(lam[:1], [m[:, :1] for m in mats])
    g = CPFactors([1.5], [rng.normal(size=(J, 1)) for J in (3, 2, 4)])
    lhs = inner_product(cp_reconstruct(f), cp_reconstruct(g))
    rhs = np.prod([fa[:, 0] @ ga[:, 0] for fa, ga in zip(f.factors, g.factors)]) * lam[0] * 1.5
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)
