"""Dense tensors, CP factor containers and block partitioning.

All tensors are stored in C order (last index fastest); this is also the
order used by the binary ``.tprm`` file format.  When a tensor stacks
subjects, the subject mode is the last mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import ShapeError

MAGIC = b"TPRM"
FORMAT_VERSION = 1


class DenseTensor:
    """Immutable order-D real array.

    Parameters
    ----------
    data : array_like
        Nested sequence or array holding the entries, or a flat buffer when
        ``dims`` is given.
    dims : sequence of int, optional
        Mode sizes.  ``data`` is reshaped (C order) to these dims.
    """

    __slots__ = ("_array",)

    def __init__(self, data, dims=None):
        arr = np.array(data, dtype=np.float64)
        if dims is not None:
            dims = tuple(int(d) for d in dims)
            if any(d < 1 for d in dims):
                raise ShapeError(f"dims must be positive, got {dims}")
            if arr.size != prod(dims):
                raise ShapeError(f"buffer of length {arr.size} does not fit dims {dims}")
            arr = arr.reshape(dims)
        if arr.ndim == 0 or arr.size == 0:
            raise ShapeError("a tensor needs at least one mode and one entry")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.setflags(write=False)
        self._array = arr

    @property
    def dims(self):
        return self._array.shape

    @property
    def order(self):
        return self._array.ndim

    @property
    def size(self):
        return self._array.size

    @property
    def data(self):
        """Flat read-only view in last-index-fastest order."""
        return self._array.reshape(-1)

    @property
    def array(self):
        return self._array

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self._array, other._array)

    def __hash__(self):
        return hash((self.dims, self._array.tobytes()))

    def __repr__(self):
        return f"DenseTensor(dims={self.dims})"


def as_array(x):
    if isinstance(x, DenseTensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def inner_product(x, y):
    """Sum of entrywise products of two tensors with equal dims."""
    x, y = as_array(x), as_array(y)
    if x.shape != y.shape:
        raise ShapeError(f"dims differ: {x.shape} vs {y.shape}")
    return float(np.dot(x.ravel(), y.ravel()))


def outer_product(vectors):
    """Outer product of two or more vectors as a DenseTensor."""
    vectors = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if len(vectors) < 2:
        raise ShapeError("outer product needs at least two vectors")
    if any(v.size == 0 for v in vectors):
        raise ShapeError("outer product of an empty vector")
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return DenseTensor(out)


@dataclass
class CPFactors:
    """Weights and factor matrices of a CP model.

    ``factors`` holds A(1)..A(D), each J_d x R.  ``subject`` is the optional
    N x R subject-mode matrix, treated as mode D+1.
    """

    weights: np.ndarray
    factors: list
    subject: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.factors = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in self.factors]
        if self.subject is not None:
            self.subject = np.atleast_2d(np.asarray(self.subject, dtype=np.float64))
        R = self.weights.size
        for a in self.all_factors():
            if a.ndim != 2 or a.shape[1] != R:
                raise ShapeError(f"factor of shape {a.shape} does not have R={R} columns")

    @property
    def rank(self):
        return self.weights.size

    @property
    def dims(self):
        return tuple(a.shape[0] for a in self.all_factors())

    def all_factors(self):
        if self.subject is None:
            return list(self.factors)
        return list(self.factors) + [self.subject]

    def copy(self):
        return CPFactors(
            self.weights.copy(),
            [a.copy() for a in self.factors],
            None if self.subject is None else self.subject.copy(),
        )


def khatri_rao(mats):
    """Column-wise Kronecker product, rows ordered with the last matrix fastest."""
    mats = list(mats)
    R = mats[0].shape[1]
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, R)
    return out


def reconstruct_array(weights, mats):
    """Plain-array CP reconstruction: sum_r w_r a_r(1) o ... o a_r(M)."""
    dims = tuple(m.shape[0] for m in mats)
    if len(mats) == 1:
        return mats[0] @ weights
    head = mats[0] * weights
    return (head @ khatri_rao(mats[1:]).T).reshape(dims)


def cp_reconstruct(f):
    """Full tensor represented by a CPFactors object."""
    mats = f.all_factors()
    R = f.rank
    if any(m.shape[1] != R for m in mats):
        raise ShapeError("inconsistent rank across factor matrices")
    return DenseTensor(reconstruct_array(f.weights, mats))


@dataclass(frozen=True)
class PartitionGrid:
    """Equal-block partition of a tensor index set.

    ``padded_dims`` equals ``parent_dims`` unless the grid was built with
    padding, in which case each mode is rounded up to a multiple of its block
    size and the tensor is zero-padded before partitioning.
    """

    parent_dims: tuple
    block_dims: tuple
    padded_dims: tuple

    @classmethod
    def create(cls, parent_dims, block_dims, pad=False):
        parent_dims = tuple(int(j) for j in parent_dims)
        block_dims = tuple(int(p) for p in block_dims)
        if len(parent_dims) != len(block_dims):
            raise ShapeError(f"grid order mismatch: {parent_dims} vs {block_dims}")
        if any(p < 1 for p in block_dims) or any(j < 1 for j in parent_dims):
            raise ShapeError("dims and block dims must be positive")
        if any(p > j for p, j in zip(block_dims, parent_dims)):
            raise ShapeError(f"block {block_dims} larger than tensor {parent_dims}")
        padded = tuple(-(-j // p) * p for j, p in zip(parent_dims, block_dims))
        if padded != parent_dims and not pad:
            raise ShapeError(
                f"block dims {block_dims} do not divide {parent_dims}; pass pad=True to zero-pad"
            )
        return cls(parent_dims, block_dims, padded)

    @property
    def grid_shape(self):
        return tuple(j // p for j, p in zip(self.padded_dims, self.block_dims))

    @property
    def block_count(self):
        return prod(self.grid_shape)

    def block_index(self, s):
        """Block multi-index of block id ``s`` (lexicographic, last fastest)."""
        return tuple(int(i) for i in np.unravel_index(s, self.grid_shape))

    def block_id(self, index):
        return int(np.ravel_multi_index(tuple(index), self.grid_shape))

    def offset(self, s):
        return tuple(i * p for i, p in zip(self.block_index(s), self.block_dims))

    def block_slices(self, s):
        return tuple(slice(o, o + p) for o, p in zip(self.offset(s), self.block_dims))


def _check_grid(shape, grid):
    if tuple(shape) != grid.parent_dims:
        raise ShapeError(f"tensor dims {tuple(shape)} do not match grid {grid.parent_dims}")


def partition_array(x, grid):
    """Split an array into an (S, p_1, ..., p_D) stack of blocks."""
    x = np.asarray(x, dtype=np.float64)
    _check_grid(x.shape, grid)
    if grid.padded_dims != grid.parent_dims:
        padded = np.zeros(grid.padded_dims)
        padded[tuple(slice(0, j) for j in grid.parent_dims)] = x
        x = padded
    D = x.ndim
    split = []
    for g, p in zip(grid.grid_shape, grid.block_dims):
        split += [g, p]
    perm = list(range(0, 2 * D, 2)) + list(range(1, 2 * D, 2))
    return x.reshape(split).transpose(perm).reshape((grid.block_count,) + grid.block_dims)


def unpartition_array(blocks, grid):
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.shape != (grid.block_count,) + grid.block_dims:
        raise ShapeError(
            f"expected {grid.block_count} blocks of {grid.block_dims}, got {blocks.shape}"
        )
    D = len(grid.block_dims)
    inv = np.empty(2 * D, dtype=int)
    inv[list(range(0, 2 * D, 2)) + list(range(1, 2 * D, 2))] = np.arange(2 * D)
    full = blocks.reshape(grid.grid_shape + grid.block_dims).transpose(inv).reshape(grid.padded_dims)
    return full[tuple(slice(0, j) for j in grid.parent_dims)]


def partition(x, grid):
    """Disjoint blocks of ``x`` in lexicographic block order."""
    return [DenseTensor(b) for b in partition_array(as_array(x), grid)]


def unpartition(blocks, grid):
    """Reassemble blocks produced by :func:`partition`."""
    if len(blocks) != grid.block_count:
        raise ShapeError(f"expected {grid.block_count} blocks, got {len(blocks)}")
    arrs = [as_array(b) for b in blocks]
    for b in arrs:
        if b.shape != grid.block_dims:
            raise ShapeError(f"block of dims {b.shape}, grid expects {grid.block_dims}")
    return DenseTensor(unpartition_array(np.stack(arrs), grid))


def write_tensor(path, x):
    arr = np.ascontiguousarray(as_array(x), dtype="<f8")
    header = MAGIC + struct.pack("<BB", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Read a ``.tprm`` file.  Raises ValueError on malformed input."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a TPRM tensor file")
    version, order = struct.unpack_from("<BB", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported TPRM version {version}")
    if order < 1:
        raise ValueError(f"{path}: tensor order must be positive")
    off = 6 + 8 * order
    if len(raw) < off:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{order}Q", raw, 6)
    n = prod(dims)
    if len(raw) != off + 8 * n:
        raise ValueError(f"{path}: expected {n} values, file holds {(len(raw) - off) / 8:g}")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    return DenseTensor(data, dims)
