"""Multilayer component analysis models.

A :class:`Model` is an ordered list of layers, each holding a dictionary
operator ``B_j`` and a penalty ``Phi_j``. Inference seeks coefficients
``w_1..w_l`` minimizing

    sum_j 0.5 * ||w_{j-1} - B_j w_j||^2 + Phi_j(w_j),    w_0 = x.

Optional encoder layers are plain feed-forward stages that map raw inputs
to ``x`` before inference; they are never iterated.
"""

from dataclasses import dataclass, field

import numpy as np

from .linop import Conv2dOperator, DenseOperator, LinearOperator
from .prox import PenaltySpec, penalty_value
from .tensor import DimensionError, as_tensor

__all__ = [
    "CapacityError",
    "Layer",
    "Model",
    "InferenceState",
    "StackedSystem",
    "objective",
    "augmented_lagrangian",
    "build_stacked_system",
    "init_dense_weight",
    "init_conv_kernel",
    "model_from_config",
    "model_to_config",
]

W_UPDATES = ("auto", "exact", "parseval")


class CapacityError(RuntimeError):
    """A dense materialization would exceed its size cap."""


@dataclass
class Layer:
    op: LinearOperator
    penalty: PenaltySpec

    def __post_init__(self):
        if self.penalty.shape is None:
            self.penalty = self.penalty.with_shape(self.op.out_shape)
        elif tuple(self.penalty.shape) != tuple(self.op.out_shape):
            raise DimensionError(
                f"penalty shape {self.penalty.shape} != layer shape {self.op.out_shape}"
            )

    @property
    def weight(self):
        return self.op.weight

    @property
    def bias(self):
        return self.penalty.bias

    @property
    def shape(self):
        return tuple(self.op.out_shape)


class Model:
    """Ordered DeepCA layers plus inference hyperparameters.

    Parameters
    ----------
    layers : list of Layer
        ``layers[j].op`` maps layer ``j+1`` coefficients into the space of
        layer ``j`` (``layers[0]`` reconstructs the input).
    T : int
        Number of unrolled iterations (1 = feed-forward pass).
    rho : float
        Augmented Lagrangian penalty parameter.
    w_update : {"auto", "exact", "parseval"}
        Pre-activation update rule. ``auto`` solves exactly for dense
        layers and uses the tight-frame simplification for convolutions.
    encoder : list of Layer, optional
        Feed-forward stages applied to raw inputs first.
    """

    def __init__(self, layers, T=1, rho=1.0, w_update="auto", encoder=()):
        self.layers = list(layers)
        self.encoder = list(encoder)
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if int(T) < 1:
            raise ValueError("T must be >= 1")
        if not rho > 0:
            raise ValueError("rho must be > 0")
        if w_update not in W_UPDATES:
            raise ValueError(f"w_update must be one of {W_UPDATES}")
        self.T = int(T)
        self.rho = float(rho)
        self.w_update = w_update
        stages = self.encoder + self.layers
        for a, b in zip(stages[:-1], stages[1:]):
            if tuple(a.op.out_shape) != tuple(b.op.in_shape):
                raise DimensionError(
                    f"layer shapes do not chain: {a.op.out_shape} -> {b.op.in_shape}"
                )

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return (
            f"Model(layers={[l.op for l in self.layers]}, T={self.T}, rho={self.rho}, "
            f"encoder={len(self.encoder)})"
        )

    @property
    def input_shape(self):
        """Shape of ``x = w_0`` (after any encoder)."""
        return tuple(self.layers[0].op.in_shape)

    @property
    def raw_input_shape(self):
        stages = self.encoder or self.layers
        return tuple(stages[0].op.in_shape)

    @property
    def output_shape(self):
        return tuple(self.layers[-1].op.out_shape)

    def all_layers(self):
        return self.encoder + self.layers

    def parameters(self):
        """``(name, array, trainable)`` triples in declaration order.

        Encoder stages come first; each stage contributes its weight and,
        for ``nonneg_l1`` penalties, its bias.
        """
        out = []
        for prefix, stages in (("enc", self.encoder), ("layer", self.layers)):
            for i, layer in enumerate(stages, start=1):
                out.append((f"{prefix}{i}.weight", layer.op.weight, True))
                if layer.penalty.kind == "nonneg_l1":
                    out.append((f"{prefix}{i}.bias", layer.penalty.bias, layer.penalty.learnable))
        return out

    def with_parameters(self, arrays, T=None):
        """Copy of the model with parameters replaced (same order as
        :meth:`parameters`)."""
        it = iter(arrays)
        new = {}
        for key, stages in (("encoder", self.encoder), ("layers", self.layers)):
            built = []
            for layer in stages:
                op = layer.op.with_weight(next(it))
                pen = layer.penalty
                if pen.kind == "nonneg_l1":
                    pen = pen.with_bias(np.maximum(as_tensor(next(it)), 0.0))
                built.append(Layer(op, pen))
            new[key] = built
        rest = list(it)
        if rest:
            raise ValueError("too many parameter arrays")
        return Model(new["layers"], T=self.T if T is None else T, rho=self.rho,
                     w_update=self.w_update, encoder=new["encoder"])

    def with_T(self, T):
        return Model(self.layers, T=T, rho=self.rho, w_update=self.w_update, encoder=self.encoder)

    def update_rule(self, j):
        """``"exact"`` or ``"parseval"`` for layer index ``j`` (0-based)."""
        if self.w_update != "auto":
            if self.w_update == "exact" and self.layers[j].op.kind != "dense":
                return "parseval"
            return self.w_update
        return "exact" if self.layers[j].op.kind == "dense" else "parseval"


@dataclass
class InferenceState:
    """Per-layer pre-activations ``w``, auxiliaries ``z`` and duals ``lam``
    (lists indexed from layer 1) plus the input ``x``."""

    x: object
    w: list = field(default_factory=list)
    z: list = field(default_factory=list)
    lam: list = field(default_factory=list)

    @property
    def output(self):
        return self.z[-1]

    def copy(self):
        return InferenceState(self.x, list(self.w), list(self.z), list(self.lam))


def _penalties(model, penalties):
    pens = [l.penalty for l in model.layers]
    if penalties:
        for j, spec in penalties.items():
            pens[j] = spec
    return pens


def objective(model, x, ws, penalties=None):
    """Multilayer reconstruction objective (summed over any batch)."""
    if len(ws) != len(model.layers):
        raise DimensionError("one coefficient tensor per layer required")
    pens = _penalties(model, penalties)
    prev = np.asarray(x, dtype=np.float64)
    total = 0.0
    for layer, spec, w in zip(model.layers, pens, ws):
        r = prev - layer.op.forward(w)
        total += 0.5 * float(np.dot(r.ravel(), r.ravel()))
        total += penalty_value(spec, w)
        prev = np.asarray(w, dtype=np.float64)
    return total


def augmented_lagrangian(model, state, penalties=None, rho=None):
    """Augmented Lagrangian of the split problem at ``state``."""
    rho = model.rho if rho is None else rho
    pens = _penalties(model, penalties)
    prev = np.asarray(state.x, dtype=np.float64)
    total = 0.0
    for layer, spec, w, z, lam in zip(model.layers, pens, state.w, state.z, state.lam):
        r = prev - layer.op.forward(w)
        d = (w - z).ravel()
        total += 0.5 * float(np.dot(r.ravel(), r.ravel()))
        total += penalty_value(spec, z)
        total += float(np.dot(np.ravel(lam), d)) + 0.5 * rho * float(np.dot(d, d))
        prev = np.asarray(z, dtype=np.float64)
    return total


class StackedSystem:
    """Equivalent shallow problem ``0.5 * ||t - A w||^2 + sum_j Phi_j(w_j)``.

    ``A`` is block lower-bidiagonal with ``B_j`` on the diagonal and ``-I``
    below it; the target is ``t = [x; 0; ...; 0]``.
    """

    def __init__(self, matrix, row_sizes, col_sizes, shapes, penalties):
        self.matrix = matrix
        self.row_sizes = list(row_sizes)
        self.col_sizes = list(col_sizes)
        self.shapes = list(shapes)
        self.penalties = list(penalties)

    @property
    def shape(self):
        return self.matrix.shape

    def target(self, x):
        t = np.zeros(self.matrix.shape[0])
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.row_sizes[0]:
            raise DimensionError(f"input size {x.size} != {self.row_sizes[0]}")
        t[: x.size] = x
        return t

    def split(self, flat):
        out, pos = [], 0
        for size, shape in zip(self.col_sizes, self.shapes):
            out.append(np.asarray(flat[pos:pos + size]).reshape(shape))
            pos += size
        return out

    def stack(self, ws):
        return np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in ws])

    def objective(self, x, flat):
        r = self.target(x) - self.matrix @ flat
        val = 0.5 * float(r @ r)
        for spec, w in zip(self.penalties, self.split(flat)):
            val += penalty_value(spec, w)
        return val


def build_stacked_system(model, max_entries=10_000, penalties=None):
    """Materialize the block-structured shallow form of ``model``.

    Convolutional layers are converted to dense matrices; a
    :class:`CapacityError` is raised when the stacked matrix would hold
    more than ``max_entries`` entries.
    """
    rows = [l.op.in_size for l in model.layers]
    cols = [l.op.out_size for l in model.layers]
    n_entries = sum(rows) * sum(cols)
    if n_entries > max_entries:
        raise CapacityError(f"stacked system needs {n_entries} entries (cap {max_entries})")
    A = np.zeros((sum(rows), sum(cols)))
    r0 = c0 = 0
    for j, layer in enumerate(model.layers):
        A[r0:r0 + rows[j], c0:c0 + cols[j]] = layer.op.to_dense()
        if j > 0:
            A[r0:r0 + rows[j], c0 - cols[j - 1]:c0] = -np.eye(rows[j])
        r0 += rows[j]
        c0 += cols[j]
    shapes = [l.shape for l in model.layers]
    return StackedSystem(A, rows, cols, shapes, _penalties(model, penalties))


# -- initialization ------------------------------------------------------------


def init_dense_weight(p_in, p_out, rng):
    """Gaussian ``(p_in, p_out)`` dictionary scaled by ``1/sqrt(p_in)``.

    Overcomplete dictionaries (``p_out >= p_in``) get orthonormal rows so
    they start as Parseval tight frames.
    """
    B = rng.standard_normal((p_in, p_out)) / np.sqrt(p_in)
    if p_out >= p_in:
        q, r = np.linalg.qr(B.T)
        B = (q * np.sign(np.diag(r))).T
    return B


def init_conv_kernel(c_out, c_in, k, in_shape, stride, pad, rng):
    """Gaussian kernel rescaled to unit operator norm."""
    K = rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(c_in * k * k)
    op = Conv2dOperator(K, in_shape, stride=stride, pad=pad)
    nrm = op.operator_norm(iters=50, seed=0)
    return K / nrm if nrm > 0 else K


def dense_layer(B, penalty):
    return Layer(DenseOperator(B), penalty)


# -- architecture records ------------------------------------------------------


def _penalty_from_config(cfg, shape):
    kind = cfg["kind"]
    if kind == "nonneg_l1":
        per_channel = cfg.get("per_channel", len(shape) == 3)
        bshape = (shape[0], 1, 1) if per_channel and len(shape) == 3 else shape
        return PenaltySpec.nonneg_l1(
            np.full(bshape, float(cfg.get("bias", 0.0))), learnable=bool(cfg.get("learnable", False)),
            shape=shape,
        )
    if kind == "equality":
        size = int(np.prod(shape))
        if "indices" in cfg:
            spec = PenaltySpec.equality(cfg["indices"], cfg["values"], size)
            return PenaltySpec.equality_from_mask(
                spec.mask.reshape(shape), spec.values.reshape(shape), shape=shape
            )
        # a slot: constraints are supplied per call
        return PenaltySpec.equality_from_mask(np.zeros(shape, bool), np.zeros(shape), shape=shape)
    return PenaltySpec(kind, shape=shape)


def _stage_from_config(cfg, in_shape, rng):
    kind = cfg["kind"]
    if kind == "dense":
        if len(in_shape) != 1:
            raise DimensionError(f"dense layer needs a 1-D input, got {in_shape}")
        op = DenseOperator(init_dense_weight(in_shape[0], int(cfg["units"]), rng))
    elif kind == "conv2d":
        if len(in_shape) != 3:
            raise DimensionError(f"conv2d layer needs a (C, H, W) input, got {in_shape}")
        k, s, p = int(cfg.get("kernel", 3)), int(cfg.get("stride", 1)), int(cfg.get("pad", 0))
        K = init_conv_kernel(int(cfg["channels"]), in_shape[0], k, in_shape, s, p, rng)
        op = Conv2dOperator(K, in_shape, stride=s, pad=p)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    pen_cfg = cfg.get("penalty", {"kind": "none"})
    return Layer(op, _penalty_from_config(pen_cfg, tuple(op.out_shape)))


def model_from_config(cfg, seed=0):
    """Build a randomly initialized model from an architecture record.

    ``cfg`` keys: ``input_shape``, ``layers``, optional ``encoder``, ``T``,
    ``rho`` and ``w_update``. Each layer is ``{"kind": "dense", "units": p}``
    or ``{"kind": "conv2d", "channels": c, "kernel": k, "stride": s,
    "pad": p}`` plus a ``penalty`` record.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in cfg["input_shape"])
    built = {}
    for key in ("encoder", "layers"):
        stages = []
        for layer_cfg in cfg.get(key, []):
            layer = _stage_from_config(layer_cfg, shape, rng)
            stages.append(layer)
            shape = tuple(layer.op.out_shape)
        built[key] = stages
    return Model(built["layers"], T=cfg.get("T", 1), rho=cfg.get("rho", 1.0),
                 w_update=cfg.get("w_update", "auto"), encoder=built["encoder"])


def _penalty_to_config(spec):
    out = {"kind": spec.kind}
    if spec.kind == "nonneg_l1":
        b = np.asarray(spec.bias)
        out["bias"] = float(b.flat[0]) if b.size else 0.0
        out["learnable"] = bool(spec.learnable)
        out["per_channel"] = bool(b.ndim == 3 and b.shape[1:] == (1, 1))
    elif spec.kind == "equality" and np.asarray(spec.mask).shape == tuple(spec.shape) and spec.mask.any():
        idx = np.flatnonzero(spec.mask)
        out["indices"] = idx.tolist()
        out["values"] = np.ravel(spec.values)[idx].tolist()
    return out


def model_to_config(model):
    """Architecture record of ``model`` (weights excluded)."""

    def stage(layer):
        op = layer.op
        if op.kind == "dense":
            cfg = {"kind": "dense", "units": int(op.out_shape[0])}
        else:
            cfg = {"kind": "conv2d", "channels": int(op.out_shape[0]), "kernel": int(op.weight.shape[2]),
                   "stride": op.stride, "pad": op.pad}
        cfg["penalty"] = _penalty_to_config(layer.penalty)
        return cfg

    return {
        "input_shape": list(model.raw_input_shape),
        "encoder": [stage(l) for l in model.encoder],
        "layers": [stage(l) for l in model.layers],
        "T": model.T,
        "rho": model.rho,
        "w_update": model.w_update,
    }
