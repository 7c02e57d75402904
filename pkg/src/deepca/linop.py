"""Linear operators with exact adjoints.

A layer dictionary ``B`` maps the coefficients of its own layer back into
the space of the layer below: ``B @ w_j`` approximates ``w_{j-1}``. Both
operator kinds accept arrays whose trailing dimensions match the operator
shape; any leading dimensions are treated as a batch.
"""

import copy

import numpy as np
import scipy.sparse as sp

from .tensor import DimensionError, as_tensor

__all__ = ["LinearOperator", "DenseOperator", "Conv2dOperator", "apply_forward", "apply_adjoint"]


def _split_batch(a, shape):
    nd = len(shape)
    if a.ndim < nd or tuple(a.shape[a.ndim - nd:]) != tuple(shape):
        raise DimensionError(f"expected trailing shape {tuple(shape)}, got {a.shape}")
    return a.shape[: a.ndim - nd]


class LinearOperator:
    """Base class. ``in_shape`` is the shape of ``w_{j-1}`` (the space
    ``forward`` maps into); ``out_shape`` is the shape of ``w_j``."""

    kind = None
    in_shape = ()
    out_shape = ()
    weight = None

    def forward(self, w, weight=None):
        raise NotImplementedError

    def adjoint(self, v, weight=None):
        raise NotImplementedError

    def weight_grad(self, w, g):
        """Gradient of ``<forward(w), g>`` with respect to the weight,
        summed over batch dimensions."""
        raise NotImplementedError

    def with_weight(self, weight):
        raise NotImplementedError

    @property
    def in_size(self):
        return int(np.prod(self.in_shape))

    @property
    def out_size(self):
        return int(np.prod(self.out_shape))

    def to_dense(self):
        """Materialize as an ``in_size x out_size`` matrix."""
        eye = np.eye(self.out_size).reshape((self.out_size,) + tuple(self.out_shape))
        cols = self.forward(eye).reshape(self.out_size, self.in_size)
        return np.ascontiguousarray(cols.T)

    def operator_norm(self, iters=100, seed=0):
        """Spectral norm estimate by power iteration on ``B^T B``."""
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(self.out_shape)
        u /= np.linalg.norm(u)
        s = 0.0
        for _ in range(iters):
            v = self.adjoint(self.forward(u))
            s = np.linalg.norm(v)
            if s == 0.0:
                return 0.0
            u = v / s
        return float(np.sqrt(s))


class DenseOperator(LinearOperator):
    """Matrix ``B`` of shape ``(p_{j-1}, p_j)``."""

    kind = "dense"

    def __init__(self, matrix):
        matrix = as_tensor(matrix)
        if matrix.ndim != 2:
            raise DimensionError("dense operator needs a 2-D matrix")
        self.weight = matrix
        self.in_shape = (matrix.shape[0],)
        self.out_shape = (matrix.shape[1],)

    def forward(self, w, weight=None):
        B = self.weight if weight is None else weight
        w = np.asarray(w, dtype=np.float64)
        _split_batch(w, self.out_shape)
        return w @ B.T

    def adjoint(self, v, weight=None):
        B = self.weight if weight is None else weight
        v = np.asarray(v, dtype=np.float64)
        _split_batch(v, self.in_shape)
        return v @ B

    def weight_grad(self, w, g):
        w2 = np.asarray(w).reshape(-1, self.out_shape[0])
        g2 = np.asarray(g).reshape(-1, self.in_shape[0])
        return g2.T @ w2

    def with_weight(self, weight):
        return DenseOperator(weight)

    def to_dense(self):
        return self.weight.copy()

    def __repr__(self):
        return f"DenseOperator({self.in_shape[0]}x{self.out_shape[0]})"


class Conv2dOperator(LinearOperator):
    """2-D convolution dictionary.

    ``kernel`` has shape ``(out_channels, in_channels, kH, kW)`` and
    ``in_shape = (in_channels, H, W)``. The adjoint is the ordinary strided,
    zero-padded cross-correlation producing ``(out_channels, H', W')``; the
    forward map is its transpose (a transposed convolution, i.e. the
    upsampling direction). Both are built from one sparse im2col matrix so
    the adjoint identity holds by construction.
    """

    kind = "conv2d"

    def __init__(self, kernel, in_shape, stride=1, pad=0):
        kernel = as_tensor(kernel)
        if kernel.ndim != 4:
            raise DimensionError("conv kernel must be (out, in, kH, kW)")
        c_out, c_in, kh, kw = kernel.shape
        in_shape = tuple(int(s) for s in in_shape)
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise DimensionError(f"in_shape {in_shape} does not match kernel {kernel.shape}")
        if stride < 1 or pad < 0:
            raise ValueError("stride must be >= 1 and pad >= 0")
        _, H, W = in_shape
        Ho = (H + 2 * pad - kh) // stride + 1
        Wo = (W + 2 * pad - kw) // stride + 1
        if Ho < 1 or Wo < 1:
            raise DimensionError("kernel larger than padded input")
        self.weight = kernel
        self.stride = int(stride)
        self.pad = int(pad)
        self.in_shape = in_shape
        self.out_shape = (c_out, Ho, Wo)
        self._cols = self._im2col_matrix()
        self._cols_t = self._cols.T.tocsr()

    def _im2col_matrix(self):
        # rows: (c, a, b, i, j) patch entries; cols: unpadded input pixels
        c_in, H, W = self.in_shape
        _, _, kh, kw = self.weight.shape
        _, Ho, Wo = self.out_shape
        s, p = self.stride, self.pad
        c, a, b, i, j = np.meshgrid(
            np.arange(c_in), np.arange(kh), np.arange(kw), np.arange(Ho), np.arange(Wo), indexing="ij"
        )
        r = i * s + a - p
        q = j * s + b - p
        rows = np.arange(c.size).reshape(c.shape)
        inside = (r >= 0) & (r < H) & (q >= 0) & (q < W)
        src = (c * H + r) * W + q
        n_rows = c_in * kh * kw * Ho * Wo
        return sp.csr_matrix(
            (np.ones(int(inside.sum())), (rows[inside], src[inside])), shape=(n_rows, c_in * H * W)
        )

    def _patch_dims(self):
        c_out, c_in, kh, kw = self.weight.shape
        _, Ho, Wo = self.out_shape
        return c_out, c_in * kh * kw, Ho * Wo

    def _gather(self, v):
        # (..., C_in, H, W) -> patches laid out (K, L * n), batch index fastest
        batch = _split_batch(v, self.in_shape)
        n = int(np.prod(batch))
        _, K, L = self._patch_dims()
        flat = np.asarray(v, dtype=np.float64).reshape(n, -1)
        return (self._cols @ flat.T).reshape(K, L * n), batch, n

    def _scatter(self, cols, batch, n):
        out = self._cols_t @ cols.reshape(-1, n)
        return np.ascontiguousarray(out.T).reshape(tuple(batch) + self.in_shape)

    def _to_lanes(self, w):
        # (..., C_out, H', W') -> (C_out, L * n)
        batch = _split_batch(w, self.out_shape)
        n = int(np.prod(batch))
        c_out, _, L = self._patch_dims()
        w2 = np.asarray(w, dtype=np.float64).reshape(n, c_out * L)
        return w2.T.reshape(c_out, L * n), batch, n

    def im2col(self, v):
        """``(..., C_in, H, W)`` -> ``(N, C_in*kH*kW, H'*W')`` with flattened batch."""
        cols, batch, n = self._gather(v)
        _, K, L = self._patch_dims()
        return cols.reshape(K, L, n).transpose(2, 0, 1), batch

    def col2im(self, cols, batch):
        n = cols.shape[0]
        return self._scatter(np.ascontiguousarray(cols.transpose(1, 2, 0)), batch, n)

    def adjoint(self, v, weight=None):
        K = self.weight if weight is None else weight
        c_out, k, L = self._patch_dims()
        cols, batch, n = self._gather(v)
        out = np.asarray(K).reshape(c_out, k) @ cols
        out = np.ascontiguousarray(out.reshape(c_out * L, n).T)
        return out.reshape(tuple(batch) + self.out_shape)

    def forward(self, w, weight=None):
        K = self.weight if weight is None else weight
        c_out, k, _ = self._patch_dims()
        w2, batch, n = self._to_lanes(w)
        cols = np.asarray(K).reshape(c_out, k).T @ w2
        return self._scatter(cols, batch, n)

    def weight_grad(self, w, g):
        gcols, _, _ = self._gather(g)
        w2, _, _ = self._to_lanes(w)
        return (w2 @ gcols.T).reshape(self.weight.shape)

    def with_weight(self, weight):
        weight = as_tensor(weight)
        if weight.shape != self.weight.shape:
            raise DimensionError(f"kernel shape {weight.shape} != {self.weight.shape}")
        new = copy.copy(self)
        new.weight = weight
        return new

    def __repr__(self):
        return (
            f"Conv2dOperator(kernel={self.weight.shape}, in={self.in_shape}, "
            f"out={self.out_shape}, stride={self.stride}, pad={self.pad})"
        )


def apply_forward(op, w):
    """``B w``; dimension errors on shape mismatch."""
    return op.forward(w)


def apply_adjoint(op, v):
    """``B^T v``."""
    return op.adjoint(v)
