"""ADMM inference unrolled into a trainable network.

Inference starts from a feed-forward pass (pre-activation ``w_j = B_j^T
z_{j-1}``, activation ``z_j = prox_j(w_j)``) and then runs ``T - 1`` sweeps
over the layers, each performing a dual step, a pre-activation step and an
activation step. With ``T = 1`` the result is exactly the feed-forward
network output.

All updates go through :mod:`deepca.autodiff`, so passing parameter nodes
via ``params`` records a differentiable graph of the whole unrolled
computation while plain arrays run eagerly.

Layer indices in this module are 0-based.
"""

import csv

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .model import InferenceState, objective
from .tensor import DimensionError

__all__ = [
    "bind",
    "encode",
    "feed_forward_init",
    "w_update_exact",
    "w_update_parseval",
    "z_update",
    "dual_update",
    "infer",
    "residuals",
    "TRACE_FIELDS",
    "write_trace_csv",
]

TRACE_FIELDS = ("t", "layer", "primal_residual", "recon_residual", "objective")


class _Bound:
    """A layer with its (possibly recorded) parameters attached."""

    __slots__ = ("op", "weight", "bias", "penalty")

    def __init__(self, op, weight, bias, penalty):
        self.op = op
        self.weight = weight
        self.bias = bias
        self.penalty = penalty

    def B(self, w):
        return ad.linear_forward(self.op, w, self.weight)

    def Bt(self, v):
        return ad.linear_adjoint(self.op, v, self.weight)

    def prox(self, v, kink_log=None):
        bias = self.bias if self.penalty.kind == "nonneg_l1" else None
        return ad.prox(self.penalty, v, bias=bias, kink_log=kink_log)


def bind(model, params=None, penalties=None):
    """Attach parameters to every stage of ``model``.

    Returns ``(encoder_stages, layer_stages)``. ``params`` follows the order
    of :meth:`Model.parameters`; ``penalties`` maps 0-based layer indices to
    replacement :class:`PenaltySpec` objects (e.g. per-example equality
    constraints supplied at run time).
    """
    it = iter(params) if params is not None else None
    groups = []
    for stages, overrides in ((model.encoder, None), (model.layers, penalties)):
        bound = []
        for j, layer in enumerate(stages):
            pen = layer.penalty
            if overrides and j in overrides:
                pen = overrides[j]
            weight = next(it) if it is not None else layer.op.weight
            bias = None
            if layer.penalty.kind == "nonneg_l1":
                bias = next(it) if it is not None else layer.penalty.bias
            if pen.kind == "nonneg_l1" and bias is None:
                bias = pen.bias
            bound.append(_Bound(layer.op, weight, bias, pen))
        groups.append(bound)
    return groups[0], groups[1]


def encode(model, inputs, params=None):
    """Run the feed-forward encoder stages (identity when there are none)."""
    enc, _ = bind(model, params)
    x = inputs
    for stage in enc:
        x = stage.prox(stage.Bt(x))
    return x


def _check_input(model, x):
    shape = np.shape(ad.value_of(x))
    nd = len(model.input_shape)
    if tuple(shape[len(shape) - nd:]) != model.input_shape:
        raise DimensionError(f"input shape {shape} does not end with {model.input_shape}")


def _bound_layers(model, params, penalties, bound):
    if bound is not None:
        return bound
    return bind(model, params, penalties)[1]


def feed_forward_init(model, x, params=None, penalties=None, kink_log=None, _bound=None):
    """Feed-forward initialization: ``w_j = B_j^T z_{j-1}``, ``z_j = prox_j(w_j)``,
    all duals zero."""
    _check_input(model, x)
    layers = _bound_layers(model, params, penalties, _bound)
    state = InferenceState(x)
    prev = x
    for layer in layers:
        w = layer.Bt(prev)
        z = layer.prox(w, kink_log)
        state.w.append(w)
        state.z.append(z)
        state.lam.append(np.zeros(np.shape(ad.value_of(w))))
        prev = z
    return state


def _z_prev(state, j):
    return state.x if j == 0 else state.z[j - 1]


def w_update_exact(model, state, j, rho=None, params=None, penalties=None, factor=None, _bound=None):
    """Exact pre-activation step ``(B^T B + rho I)^{-1} (B^T z_{j-1} + rho z_j - lam_j)``
    for a dense layer."""
    rho = model.rho if rho is None else rho
    layer = _bound_layers(model, params, penalties, _bound)[j]
    if layer.op.kind != "dense":
        raise ValueError("exact update needs a dense layer")
    rhs = layer.Bt(_z_prev(state, j)) + rho * state.z[j] - state.lam[j]
    return ad.gram_solve(layer.weight, rhs, rho, factor=factor)


def w_update_parseval(model, state, j, rho=None, params=None, penalties=None, _bound=None):
    """Pre-activation step simplified for tight frames (``B B^T = I``):
    ``zt + B^T (z_{j-1} - B zt) / (rho + 1)`` with ``zt = z_j - lam_j / rho``."""
    rho = model.rho if rho is None else rho
    layer = _bound_layers(model, params, penalties, _bound)[j]
    zt = state.z[j] - state.lam[j] * (1.0 / rho)
    return zt + layer.Bt(_z_prev(state, j) - layer.B(zt)) * (1.0 / (rho + 1.0))


def z_update(model, state, j, rho=None, params=None, penalties=None, kink_log=None, _bound=None):
    """Activation step.

    Inner layers combine top-down feedback from ``w_{j+1}`` with the
    current pre-activation; the last layer applies its prox to
    ``w_l + lam_l / rho``.
    """
    rho = model.rho if rho is None else rho
    layers = _bound_layers(model, params, penalties, _bound)
    own = state.w[j] + state.lam[j] * (1.0 / rho)
    if j == len(layers) - 1:
        return layers[j].prox(own, kink_log)
    feedback = layers[j + 1].B(state.w[j + 1])
    arg = feedback * (1.0 / (rho + 1.0)) + own * (rho / (rho + 1.0))
    return layers[j].prox(arg, kink_log)


def dual_update(model, state, j, rho=None):
    """``lam_j + rho (w_j - z_j)``."""
    rho = model.rho if rho is None else rho
    return state.lam[j] + (state.w[j] - state.z[j]) * rho


def _factor(layer, rho):
    B = ad.value_of(layer.weight)
    return sla.cho_factor(B.T @ B + rho * np.eye(B.shape[1]))


def infer(
    model,
    x,
    T=None,
    *,
    params=None,
    penalties=None,
    w_update=None,
    rho=None,
    trace=None,
    tol=None,
    kink_log=None,
    encoded=False,
):
    """Approximate inference ``f^[T](x)``.

    Parameters
    ----------
    model : Model
    x : array or Node
        Input (raw input when the model has an encoder, unless
        ``encoded``). Leading batch dimensions are allowed.
    T : int, optional
        Unrolled iterations; defaults to ``model.T``.
    params : list, optional
        Parameter arrays or nodes in :meth:`Model.parameters` order.
    penalties : dict, optional
        0-based layer index -> replacement penalty for this call.
    w_update : {"exact", "parseval"}, optional
        Force one pre-activation rule for every layer.
    trace : list, optional
        Receives ``(t, layer, primal_residual, recon_residual, objective)``
        rows after the initial pass and after every sweep.
    tol : float, optional
        Stop early once every primal residual is below ``tol`` (eager
        mode only).
    kink_log : list, optional
        Receives the distance to the nearest kink of every prox input.

    Returns
    -------
    InferenceState
        ``state.output`` is the last-layer activation ``z_l``.
    """
    T = model.T if T is None else int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    rho = model.rho if rho is None else float(rho)
    if not encoded and model.encoder:
        x = encode(model, x, params)
    layers = bind(model, params, penalties)[1]
    state = feed_forward_init(model, x, kink_log=kink_log, _bound=layers)
    recording = any(ad.is_node(v) for v in [x] + state.w)
    rules = []
    for j, layer in enumerate(layers):
        rule = w_update or model.update_rule(j)
        if rule == "exact" and layer.op.kind != "dense":
            rule = "parseval"
        rules.append(rule)
    factors = [_factor(l, rho) if r == "exact" and T > 1 else None for l, r in zip(layers, rules)]

    if trace is not None:
        _trace(model, state, 1, trace, penalties)
    for t in range(1, T):
        for j in range(len(layers)):
            state.lam[j] = dual_update(model, state, j, rho)
            if rules[j] == "exact":
                state.w[j] = w_update_exact(model, state, j, rho, factor=factors[j], _bound=layers)
            else:
                state.w[j] = w_update_parseval(model, state, j, rho, _bound=layers)
            state.z[j] = z_update(model, state, j, rho, kink_log=kink_log, _bound=layers)
        if trace is not None:
            _trace(model, state, t + 1, trace, penalties)
        if tol is not None and not recording:
            if max(r[0] for r in residuals(model, state)) < tol:
                break
    return state


def residuals(model, state):
    """Per-layer ``(||w_j - z_j||, ||z_{j-1} - B_j w_j||)`` pairs."""
    out = []
    prev = ad.value_of(state.x)
    for layer, w, z in zip(model.layers, state.w, state.z):
        w, z = ad.value_of(w), ad.value_of(z)
        primal = float(np.linalg.norm(np.ravel(w - z)))
        recon = float(np.linalg.norm(np.ravel(prev - layer.op.forward(w))))
        out.append((primal, recon))
        prev = z
    return out


def _trace(model, state, t, rows, penalties):
    zs = [ad.value_of(z) for z in state.z]
    obj = objective(model, ad.value_of(state.x), zs, penalties)
    for j, (primal, recon) in enumerate(residuals(model, state), start=1):
        rows.append((t, j, primal, recon, obj))


def write_trace_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_FIELDS)
        for t, j, primal, recon, obj in rows:
            writer.writerow([t, j, repr(primal), repr(recon), repr(obj)])
