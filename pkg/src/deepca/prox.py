"""Penalty functions and their proximal operators.

Each :class:`PenaltySpec` pairs a penalty ``Phi`` with its proximal map
``prox(v) = argmin_u 0.5 * ||v - u||^2 + Phi(u)``. Activation functions of
a feed-forward network are recovered as special cases: the nonnegative
l1 penalty gives a biased ReLU, the nonnegativity indicator a plain ReLU
and the simplex indicator sparsemax.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import DimensionError, as_tensor

__all__ = [
    "KINDS",
    "PenaltySpec",
    "prox",
    "prox_vjp",
    "penalty_value",
    "project_simplex",
    "kink_distance",
]

KINDS = ("nonneg_l1", "nonneg", "simplex", "equality", "none")


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """Tagged penalty description.

    Parameters
    ----------
    kind : str
        One of ``KINDS``.
    bias : ndarray, optional
        Nonnegative l1 weights for ``nonneg_l1``. Must broadcast against
        the layer shape (per-coordinate, or ``(C, 1, 1)`` per channel).
    learnable : bool
        Whether training updates ``bias``.
    mask, values : ndarray, optional
        For ``equality``: boolean selector of constrained coordinates and
        the target values at those coordinates. Either may carry leading
        batch dimensions so that every example gets its own constraint.
    shape : tuple, optional
        Layer shape. The simplex projection acts jointly over these
        trailing dimensions (over the last axis when unset).
    """

    kind: str
    bias: np.ndarray = None
    learnable: bool = False
    mask: np.ndarray = None
    values: np.ndarray = None
    shape: tuple = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "nonneg_l1":
            if self.bias is None:
                raise ValueError("nonneg_l1 needs a bias")
            b = as_tensor(self.bias)
            if np.any(b < 0):
                raise ValueError("nonneg_l1 bias must be elementwise >= 0")
            object.__setattr__(self, "bias", b)
        if self.kind == "equality":
            if self.mask is None or self.values is None:
                raise ValueError("equality penalty needs mask and values")
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
            object.__setattr__(self, "values", as_tensor(self.values))
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    # -- constructors --------------------------------------------------------

    @classmethod
    def nonneg_l1(cls, bias, learnable=False, shape=None):
        return cls("nonneg_l1", bias=bias, learnable=learnable, shape=shape)

    @classmethod
    def nonneg(cls, shape=None):
        return cls("nonneg", shape=shape)

    @classmethod
    def simplex(cls, shape=None):
        return cls("simplex", shape=shape)

    @classmethod
    def none(cls, shape=None):
        return cls("none", shape=shape)

    @classmethod
    def equality(cls, indices, values, size):
        """Constrain flat positions ``indices`` (strictly increasing) of a
        length-``size`` vector to ``values``."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1 or np.any(np.diff(indices) <= 0):
            raise ValueError("equality indices must be strictly increasing")
        if indices.size and (indices[0] < 0 or indices[-1] >= size):
            raise ValueError("equality index outside layer dimension")
        values = as_tensor(values).ravel()
        if values.size != indices.size:
            raise DimensionError("one value per constrained index required")
        mask = np.zeros(size, dtype=bool)
        mask[indices] = True
        full = np.zeros(size)
        full[indices] = values
        return cls("equality", mask=mask, values=full, shape=(size,))

    @classmethod
    def equality_from_mask(cls, mask, values, shape=None):
        mask = np.asarray(mask, dtype=bool)
        values = np.where(mask, as_tensor(values), 0.0)
        return cls("equality", mask=mask, values=values, shape=shape)

    def with_bias(self, bias):
        return replace(self, bias=bias)

    def with_shape(self, shape):
        return replace(self, shape=shape)

    @property
    def indices(self):
        """Flat constrained positions (unbatched equality specs only)."""
        return np.flatnonzero(self.mask)


def _bias(spec, bias):
    return spec.bias if bias is None else bias


def _event_ndim(spec, v):
    if spec.shape is None:
        return 1 if v.ndim else 0
    return len(spec.shape)


def project_simplex(v, event_ndim=1):
    """Euclidean projection onto ``{u >= 0, sum(u) = 1}`` over the trailing
    ``event_ndim`` axes (sort-and-threshold)."""
    v = as_tensor(v)
    if event_ndim == 0:
        return np.ones_like(v)
    flat, theta = _simplex_threshold(v, event_ndim)
    out = np.maximum(flat - theta[:, None], 0.0)
    # v - theta cancels badly for large |v|; spread the leftover mass over the support
    supp = out > 0
    fix = (1.0 - out.sum(axis=1)) / np.maximum(supp.sum(axis=1), 1)
    out = np.where(supp, np.maximum(out + fix[:, None], 0.0), 0.0)
    # rows already on the simplex are their own projection; rounding in the
    # cumulative sum would otherwise leak ~1e-16 onto zero coordinates
    n = flat.shape[1]
    inside = (flat.min(axis=1) >= 0) & (np.abs(flat.sum(axis=1) - 1.0) <= 8 * n * np.finfo(float).eps)
    out[inside] = flat[inside]
    return out.reshape(v.shape)


def _simplex_threshold(v, event_ndim):
    n = int(np.prod(v.shape[v.ndim - event_ndim:]))
    flat = v.reshape(-1, n)
    srt = -np.sort(-flat, axis=1, kind="stable")
    css = np.cumsum(srt, axis=1) - 1.0
    cond = srt - css / np.arange(1, n + 1) > 0
    r = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    return flat, css[np.arange(flat.shape[0]), r] / (r + 1)


def prox(spec, v, bias=None):
    """Proximal operator of ``spec`` evaluated at ``v``.

    ``bias`` overrides ``spec.bias`` (used when the bias is a training
    parameter).
    """
    v = np.asarray(v, dtype=np.float64)
    kind = spec.kind
    if kind == "nonneg_l1":
        return np.maximum(v - _bias(spec, bias), 0.0)
    if kind == "nonneg":
        return np.maximum(v, 0.0)
    if kind == "simplex":
        return project_simplex(v, _event_ndim(spec, v))
    if kind == "equality":
        mask = np.broadcast_to(spec.mask, v.shape) if spec.mask.ndim <= v.ndim else None
        if mask is None:
            raise DimensionError(f"equality mask {spec.mask.shape} does not fit {v.shape}")
        return np.where(mask, np.broadcast_to(spec.values, v.shape), v)
    return v.copy()


def prox_vjp(spec, v, out, g):
    """Vector-Jacobian product of ``prox`` at ``v`` (with output ``out``).

    Returns the cotangent for ``v``; the bias cotangent of ``nonneg_l1``
    is its negation. Kinks get the zero subgradient.
    """
    kind = spec.kind
    if kind in ("nonneg_l1", "nonneg"):
        return np.where(out > 0, g, 0.0)
    if kind == "simplex":
        nd = _event_ndim(spec, v)
        n = int(np.prod(v.shape[v.ndim - nd:]))
        active = (out > 0).reshape(-1, n)
        gf = np.asarray(g, dtype=np.float64).reshape(-1, n)
        cnt = np.maximum(active.sum(axis=1, keepdims=True), 1)
        mean = np.where(active, gf, 0.0).sum(axis=1, keepdims=True) / cnt
        return np.where(active, gf - mean, 0.0).reshape(v.shape)
    if kind == "equality":
        return np.where(np.broadcast_to(spec.mask, v.shape), 0.0, g)
    return np.asarray(g, dtype=np.float64)


def penalty_value(spec, w, bias=None, tol=1e-12):
    """``Phi(w)``; ``inf`` when an indicator is violated beyond ``tol``.

    Leading batch dimensions are summed over.
    """
    w = np.asarray(w, dtype=np.float64)
    kind = spec.kind
    if kind == "none":
        return 0.0
    if kind in ("nonneg_l1", "nonneg"):
        if np.any(w < -tol):
            return np.inf
        if kind == "nonneg":
            return 0.0
        b = np.broadcast_to(_bias(spec, bias), w.shape)
        return float(np.sum(b * np.abs(w)))
    if kind == "simplex":
        nd = _event_ndim(spec, w)
        n = int(np.prod(w.shape[w.ndim - nd:]))
        flat = w.reshape(-1, n)
        if np.any(flat < -tol) or np.any(np.abs(flat.sum(axis=1) - 1.0) > max(tol, 1e-12 * n)):
            return np.inf
        return 0.0
    mask = np.broadcast_to(spec.mask, w.shape)
    vals = np.broadcast_to(spec.values, w.shape)
    if np.any(np.abs(w[mask] - vals[mask]) > tol):
        return np.inf
    return 0.0


def kink_distance(spec, v, bias=None):
    """Smallest distance from a prox input to a point of non-differentiability.

    Used to keep finite-difference checks away from kinks.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return np.inf
    kind = spec.kind
    if kind == "nonneg_l1":
        return float(np.min(np.abs(v - _bias(spec, bias))))
    if kind == "nonneg":
        return float(np.min(np.abs(v)))
    if kind == "simplex":
        nd = _event_ndim(spec, v)
        flat, theta = _simplex_threshold(v, nd)
        return float(np.min(np.abs(flat - theta[:, None])))
    return np.inf
