"""Parameter learning by backpropagation through unrolled inference.

Training minimizes the average of ``L(f^[T](x_i), y_i)`` over minibatches
with SGD plus momentum. Gradients come from :mod:`deepca.autodiff`
applied to the whole unrolled ADMM graph, dual updates included.
"""

import csv
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import admm
from . import autodiff as ad
from .model import Model, model_from_config, model_to_config
from .prox import PenaltySpec
from .tensor import FormatError, as_tensor, encode_dcat, read_dcat_from

__all__ = [
    "LOSS_KINDS",
    "READOUTS",
    "TrainingDiverged",
    "TrainConfig",
    "Dataset",
    "SGD",
    "TrainResult",
    "Checkpoint",
    "loss",
    "forward",
    "train",
    "evaluate",
    "metrics_header",
    "write_metrics_csv",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_layout",
]

LOSS_KINDS = ("squared_error", "softmax_cross_entropy")
READOUTS = ("output", "preactivation", "reconstruction")

CKPT_MAGIC = b"DCAC"
CKPT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``readout`` selects what the loss sees: the last-layer activation
    (``output``), its pre-activation (``preactivation``, e.g. class scores)
    or the linear reconstruction ``B_1 ... B_l z_l`` compared against the
    input (``reconstruction``, unsupervised). ``learn_bias`` overrides the
    per-layer learnable flags when not None. ``clip_norm`` rescales the
    gradient when its global norm exceeds it.
    """

    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    T: int = 1
    loss: str = "squared_error"
    readout: str = "output"
    learn_bias: bool = None
    clip_norm: float = None
    aux_loss: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")

    def to_dict(self):
        d = asdict(self)
        d.pop("aux_loss")
        return d


@dataclass
class Dataset:
    """Inputs with optional targets and per-example output constraints.

    ``mask``/``observed`` (shaped like the model output, with a leading
    example axis) fill the last layer's equality penalty at run time.
    """

    inputs: np.ndarray
    targets: np.ndarray = None
    mask: np.ndarray = None
    observed: np.ndarray = None

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs)
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.inputs[idx], pick(self.targets), pick(self.mask), pick(self.observed))

    def penalties(self, model):
        if self.mask is None:
            return None
        j = len(model.layers) - 1
        return {j: PenaltySpec.equality_from_mask(self.mask, self.observed, shape=model.output_shape)}


def loss(kind, prediction, target):
    """``squared_error``: ``0.5 ||pred - y||^2``; ``softmax_cross_entropy``:
    ``-log softmax(pred)[y]``. Sums over a leading batch axis."""
    if kind == "squared_error":
        return ad.squared_error(prediction, target)
    if kind == "softmax_cross_entropy":
        return ad.softmax_cross_entropy(prediction, target)
    raise ValueError(f"unknown loss {kind!r}")


def forward(model, batch, T, params=None, readout="output", kink_log=None):
    """Unrolled inference on a batch; returns ``(prediction, target, state)``."""
    x = admm.encode(model, batch.inputs, params) if model.encoder else batch.inputs
    state = admm.infer(model, x, T, params=params, penalties=batch.penalties(model),
                       kink_log=kink_log, encoded=True)
    if readout == "output":
        return state.z[-1], batch.targets, state
    if readout == "preactivation":
        return state.w[-1], batch.targets, state
    _, layers = admm.bind(model, params)
    rec = state.z[-1]
    for layer in reversed(layers):
        rec = layer.B(rec)
    return rec, ad.value_of(x), state


class SGD:
    """Heavy-ball SGD: ``v <- momentum * v + g``, ``p <- p - lr * v``."""

    def __init__(self, shapes, lr, momentum=0.9):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros(s) for s in shapes]

    def step(self, params, grads, trainable):
        out = []
        for i, (p, g, tr) in enumerate(zip(params, grads, trainable)):
            if not tr:
                out.append(p)
                continue
            self.velocity[i] = self.momentum * self.velocity[i] + g
            out.append(p - self.lr * self.velocity[i])
        return out


def clip_gradients(grads, max_norm):
    """Scale ``grads`` jointly so their global 2-norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


@dataclass
class TrainResult:
    model: Model
    metrics: list
    optimizer: SGD
    epoch: int
    rng: np.random.Generator
    step_losses: list


def _trainable(model, config):
    flags = []
    for name, _, tr in model.parameters():
        if name.endswith(".bias") and config.learn_bias is not None:
            tr = bool(config.learn_bias)
        flags.append(tr)
    return flags


def _clamp_biases(model, params):
    names = [n for n, _, _ in model.parameters()]
    return [np.maximum(p, 0.0) if n.endswith(".bias") else p for n, p in zip(names, params)]


def train(model, dataset, config, test=None, resume=None, on_epoch=None):
    """Train ``model`` on ``dataset``.

    Parameters
    ----------
    model : Model
    dataset, test : Dataset
        ``test`` is only evaluated for the metrics.
    config : TrainConfig
    resume : Checkpoint, optional
        Continue from a saved epoch, optimizer state and RNG state.
    on_epoch : callable, optional
        ``on_epoch(epoch, result)`` after every epoch.

    Returns
    -------
    TrainResult
    """
    params = [np.array(p) for _, p, _ in model.parameters()]
    trainable = _trainable(model, config)
    opt = SGD([p.shape for p in params], config.lr, config.momentum)
    rng = np.random.default_rng(config.seed)
    start = 0
    metrics = []
    if resume is not None:
        params = [np.array(p) for _, p, _ in resume.model.parameters()]
        opt.velocity = [np.array(v) for v in resume.velocity]
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
        metrics = list(resume.metrics)
    current = model.with_parameters(params, T=config.T)
    n = len(dataset)
    step_losses = []
    result = TrainResult(current, metrics, opt, start, rng, step_losses)
    for epoch in range(start + 1, config.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            batch = dataset.subset(order[s:s + config.batch_size])
            leaves = [ad.leaf(p) for p in params]
            try:
                pred, target, state = forward(current, batch, config.T, leaves, config.readout)
            except np.linalg.LinAlgError as exc:
                raise TrainingDiverged(f"inference failed at epoch {epoch}: {exc}") from exc
            total = loss(config.loss, pred, target)
            if config.aux_loss is not None:
                total = total + config.aux_loss(state, batch)
            batch_loss = ad.scale(total, 1.0 / len(batch))
            value = float(ad.value_of(batch_loss))
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, batch starting {s}; "
                    f"try a smaller learning rate (lr={config.lr})"
                )
            step_losses.append(value)
            ad.backward(batch_loss)
            grads = [leaf.grad for leaf in leaves]
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            params = opt.step(params, grads, trainable)
            params = _clamp_biases(current, params)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDiverged(
                    f"parameters became non-finite at epoch {epoch}, batch starting {s}; "
                    f"try a smaller learning rate (lr={config.lr})"
                )
            current = current.with_parameters(params)
        for split, data in (("train", dataset), ("test", test)):
            if data is not None:
                try:
                    ev = evaluate(current, data, config.T, config.loss, config.readout)
                except np.linalg.LinAlgError as exc:
                    raise TrainingDiverged(f"evaluation failed after epoch {epoch}: {exc}") from exc
                metrics.append({"epoch": epoch, "split": split, **ev})
        result = TrainResult(current, metrics, opt, epoch, rng, step_losses)
        if on_epoch is not None:
            on_epoch(epoch, result)
    return result


def evaluate(model, dataset, T=None, loss_kind="squared_error", readout="output", batch_size=256):
    """Mean loss per example, mean activation density per layer, mean
    absolute error of the prediction and maximum output-constraint
    violation."""
    T = model.T if T is None else T
    n = len(dataset)
    tot_loss, abs_err, count = 0.0, 0.0, 0
    density = np.zeros(len(model.layers))
    violation = 0.0
    for s in range(0, n, batch_size):
        batch = dataset.subset(np.arange(s, min(n, s + batch_size)))
        pred, target, state = forward(model, batch, T, None, readout)
        if target is not None:
            tot_loss += float(loss(loss_kind, pred, target))
            if loss_kind == "squared_error":
                abs_err += float(np.abs(pred - target).sum())
                count += int(np.size(pred))
        for j, z in enumerate(state.z):
            density[j] += np.count_nonzero(np.abs(z) > 1e-12) / z[0].size
        if batch.mask is not None:
            z = state.z[-1]
            violation = max(violation, float(np.max(np.abs(z - batch.observed)[batch.mask], initial=0.0)))
    out = {"loss": tot_loss / n}
    for j, d in enumerate(density, start=1):
        out[f"avg_sparsity_layer{j}"] = float(d / n)
    out["mae"] = abs_err / count if count else float("nan")
    out["max_violation"] = violation
    return out


def metrics_header(n_layers):
    return ["epoch", "split", "loss"] + [f"avg_sparsity_layer{j}" for j in range(1, n_layers + 1)]


def _cell(v):
    if isinstance(v, str):
        return v
    return repr(v.item() if isinstance(v, np.generic) else v)


def write_metrics_csv(rows, path, n_layers, seed=None):
    """Per-epoch metrics; ``seed`` goes into a leading ``#`` comment line."""
    header = metrics_header(n_layers)
    with open(path, "w", newline="") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(row[k]) for k in header])


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    velocity: list
    epoch: int
    rng_state: dict
    train_config: dict
    metrics: list = field(default_factory=list)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def save_checkpoint(path, model, velocity=None, epoch=0, rng_state=None, train_config=None, metrics=()):
    """Write a DCAC checkpoint.

    Layout: ``b"DCAC"``, version byte, u32 little-endian record length, a
    UTF-8 JSON architecture record, then DCAT tensors: every parameter in
    declaration order followed by the optimizer velocities.
    """
    params = model.parameters()
    if velocity is None:
        velocity = [np.zeros_like(p) for _, p, _ in params]
    record = {
        "architecture": model_to_config(model),
        "parameters": [n for n, _, _ in params],
        "n_optimizer": len(velocity),
        "epoch": int(epoch),
        "rng_state": _jsonable(rng_state),
        "train": _jsonable(train_config or {}),
        "metrics": _jsonable(list(metrics)),
    }
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(blob)), blob]
    parts += [encode_dcat(p) for _, p, _ in params]
    parts += [encode_dcat(v) for v in velocity]
    data = b"".join(parts)
    with open(path, "wb") as f:
        f.write(data)
    return data


def _parse(data):
    if data[:4] != CKPT_MAGIC:
        raise FormatError("bad DCAC magic")
    if len(data) < 9:
        raise FormatError("truncated DCAC header")
    if data[4] != CKPT_VERSION:
        raise FormatError(f"unsupported DCAC version {data[4]}")
    (n,) = struct.unpack_from("<I", data, 5)
    try:
        record = json.loads(data[9:9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt architecture record: {exc}") from exc
    pos = 9 + n
    sections = {"header": pos, "parameters": 0, "optimizer": 0}
    params, velocity = [], []
    for _ in record["parameters"]:
        t, end = read_dcat_from(data, pos)
        sections["parameters"] += end - pos
        params.append(t)
        pos = end
    for _ in range(record["n_optimizer"]):
        t, end = read_dcat_from(data, pos)
        sections["optimizer"] += end - pos
        velocity.append(t)
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    return record, params, velocity, sections


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    record, params, velocity, _ = _parse(data)
    arch = record["architecture"]
    model = model_from_config(arch, seed=0).with_parameters(params)
    return Checkpoint(model, velocity, record["epoch"], record["rng_state"], record["train"],
                      record.get("metrics", []))


def checkpoint_layout(path):
    """Byte sizes of the header, parameter and optimizer sections."""
    with open(path, "rb") as f:
        data = f.read()
    return _parse(data)[3]
