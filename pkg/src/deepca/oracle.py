"""Slow but independent reference computations.

Nothing here calls into :mod:`deepca.admm`, :mod:`deepca.autodiff` or the
im2col convolution path; the checks in the test-suite compare those
modules against the routines below.
"""

from dataclasses import dataclass

import numpy as np

from .model import build_stacked_system
from .tensor import DimensionError

__all__ = [
    "OracleResult",
    "proximal_gradient_solve",
    "reference_ls_solve",
    "prox_grid_oracle",
    "finite_difference_grad",
    "naive_conv2d",
    "naive_conv2d_transpose",
    "feedforward_eval",
    "train_feedforward",
    "nonneg_lasso",
    "explaining_away_stats",
]


# -- penalties and proxes, written out independently -------------------------------


def _penalty(kind, u, bias=None, mask=None, values=None, tol=1e-12):
    u = np.asarray(u, dtype=np.float64)
    if kind == "none":
        return 0.0
    if kind in ("nonneg", "nonneg_l1"):
        if (u < -tol).any():
            return np.inf
        return float((np.broadcast_to(bias, u.shape) * u).sum()) if kind == "nonneg_l1" else 0.0
    if kind == "simplex":
        if (u < -tol).any() or abs(u.sum() - 1.0) > 1e-9:
            return np.inf
        return 0.0
    if kind == "equality":
        m = np.broadcast_to(mask, u.shape)
        return np.inf if np.abs(u[m] - np.broadcast_to(values, u.shape)[m]).max(initial=0) > tol else 0.0
    raise ValueError(kind)


def _activation(spec, v, bias=None):
    """Proximal activations for the feed-forward evaluator."""
    kind = spec.kind
    if kind == "nonneg_l1":
        b = spec.bias if bias is None else bias
        out = v - b
        return out * (out > 0)
    if kind == "nonneg":
        return v * (v > 0)
    if kind == "none":
        return v.copy()
    if kind == "equality":
        m = np.broadcast_to(spec.mask, v.shape)
        out = v.copy()
        out[m] = np.broadcast_to(spec.values, v.shape)[m]
        return out
    if kind == "simplex":
        # bisection on the threshold of sum(max(v - tau, 0)) = 1
        nd = len(spec.shape) if spec.shape is not None else 1
        n = int(np.prod(v.shape[v.ndim - nd:]))
        flat = v.reshape(-1, n)
        lo = flat.min(axis=1) - 1.0
        hi = flat.max(axis=1)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            s = np.maximum(flat - mid[:, None], 0).sum(axis=1)
            lo = np.where(s > 1, mid, lo)
            hi = np.where(s > 1, hi, mid)
        tau = 0.5 * (lo + hi)
        u = np.maximum(flat - tau[:, None], 0)
        # polish on the support
        supp = u > 0
        tau = (np.where(supp, flat, 0).sum(axis=1) - 1) / np.maximum(supp.sum(axis=1), 1)
        return np.maximum(flat - tau[:, None], 0).reshape(v.shape)
    raise ValueError(kind)


# -- solvers -------------------------------------------------------------------


@dataclass
class OracleResult:
    ws: list
    objective: float
    history: list
    steps: int


def _power_lipschitz(A, iters=500, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(A.shape[1])
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(iters):
        v = A.T @ (A @ u)
        lam = np.linalg.norm(v)
        if lam == 0:
            return 0.0
        u = v / lam
    return float(lam)


def _block_prox(system, flat, step):
    out = []
    for spec, w in zip(system.penalties, system.split(flat)):
        if spec.kind == "nonneg_l1":
            b = np.broadcast_to(spec.bias, w.shape)
            out.append(np.maximum(w - step * b, 0.0))
        else:
            out.append(_activation(spec, w))
    return system.stack(out)


def proximal_gradient_solve(model, x, steps=5000, step_size=None, accelerate=True, tol=0.0,
                            penalties=None, max_entries=10_000):
    """Minimize the stacked shallow form of the model objective.

    Proximal gradient descent with step ``1/L`` (``L`` from power iteration,
    padded by 10%). With ``accelerate`` the monotone variant of FISTA is
    used, which keeps the objective sequence nonincreasing. With ``tol > 0``
    iteration stops once the norm of the proximal gradient mapping drops
    below ``tol``.
    """
    system = build_stacked_system(model, max_entries=max_entries, penalties=penalties)
    A = system.matrix
    t_vec = system.target(x)
    if step_size is None:
        step_size = 1.0 / (1.1 * _power_lipschitz(A))

    def F(u):
        r = t_vec - A @ u
        val = 0.5 * float(r @ r)
        for spec, w in zip(system.penalties, system.split(u)):
            val += _penalty(spec.kind, w, spec.bias, spec.mask, spec.values, tol=1e-9)
        return val

    def step(u):
        grad = A.T @ (A @ u - t_vec)
        return _block_prox(system, u - step_size * grad, step_size)

    u = _block_prox(system, np.zeros(A.shape[1]), step_size)
    fu = F(u)
    history = [fu]
    y, tk = u.copy(), 1.0
    k = 0
    for k in range(1, steps + 1):
        if accelerate:
            zk = step(y)
            fz = F(zk)
            u_new, f_new = (zk, fz) if fz <= fu else (u, fu)
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
            y = u_new + (tk / t_new) * (zk - u_new) + ((tk - 1) / t_new) * (u_new - u)
            tk = t_new
        else:
            u_new = step(u)
            f_new = F(u_new)
        u, fu = u_new, f_new
        history.append(fu)
        if tol and k % 25 == 0 and np.linalg.norm(u - step(u)) / step_size <= tol:
            break
    return OracleResult(system.split(u), fu, history, k)


def reference_ls_solve(A, b):
    """Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError("square system required")
    M = np.concatenate([A, b.reshape(n, -1)], axis=1)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        if M[piv, col] == 0.0:
            raise np.linalg.LinAlgError("singular matrix")
        if piv != col:
            M[[col, piv]] = M[[piv, col]]
        for row in range(col + 1, n):
            f = M[row, col] / M[col, col]
            M[row, col:] -= f * M[col, col:]
    X = np.zeros_like(M[:, n:])
    for row in range(n - 1, -1, -1):
        X[row] = (M[row, n:] - M[row, row + 1:n] @ X[row + 1:]) / M[row, row]
    return X.reshape(b.shape)


def prox_grid_oracle(spec, v, grid_step=1e-3, bias=None, margin=0.5):
    """Minimize ``0.5 * ||v - u||^2 + Phi(u)`` over a grid.

    Separable penalties are searched coordinate by coordinate (the product
    grid minimum of a separable sum is the sum of per-coordinate minima);
    the simplex is searched over its first ``n - 1`` coordinates with the
    last one fixed by the sum constraint.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    n = v.size
    if n > 3 and spec.kind == "simplex":
        raise ValueError("grid oracle supports dimension <= 3 for the simplex")
    if n > 4:
        raise ValueError("grid oracle supports dimension <= 4")
    b = None if spec.kind != "nonneg_l1" else np.broadcast_to(spec.bias if bias is None else bias, v.shape)

    if spec.kind == "simplex":
        if n == 1:
            return np.ones(1)
        g = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
        mesh = np.stack(np.meshgrid(*([g] * (n - 1)), indexing="ij"), axis=-1).reshape(-1, n - 1)
        last = 1.0 - mesh.sum(axis=1)
        ok = last >= -1e-12
        cand = np.concatenate([mesh[ok], np.maximum(last[ok], 0)[:, None]], axis=1)
        vals = 0.5 * ((cand - v) ** 2).sum(axis=1)
        return cand[int(np.argmin(vals))]

    out = np.empty(n)
    for i in range(n):
        if spec.kind == "equality" and np.ravel(spec.mask)[i]:
            out[i] = np.ravel(spec.values)[i]
            continue
        lo = min(v[i], 0.0) - margin
        hi = max(v[i], 0.0) + margin
        g = np.arange(lo, hi + grid_step / 2, grid_step)
        g = np.concatenate([g, [0.0]])
        f = 0.5 * (g - v[i]) ** 2
        if spec.kind in ("nonneg", "nonneg_l1"):
            f = np.where(g < 0, np.inf, f)
            if spec.kind == "nonneg_l1":
                f = f + b[i] * np.abs(g)
        out[i] = g[int(np.argmin(f))]
    return out


def finite_difference_grad(f, theta, h=1e-5):
    """Central differences ``(f(theta + h e_i) - f(theta - h e_i)) / 2h``."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


# -- direct convolution ---------------------------------------------------------


def naive_conv2d(kernel, v, stride=1, pad=0):
    """Strided zero-padded cross-correlation by explicit loops over kernel
    taps. ``v`` is ``(..., C_in, H, W)``."""
    c_out, c_in, kh, kw = kernel.shape
    v = np.asarray(v, dtype=np.float64)
    H, W = v.shape[-2:]
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    vp = np.zeros(v.shape[:-2] + (H + 2 * pad, W + 2 * pad))
    vp[..., pad:pad + H, pad:pad + W] = v
    out = np.zeros(v.shape[:-3] + (c_out, Ho, Wo))
    for o in range(c_out):
        for c in range(c_in):
            for a in range(kh):
                for b in range(kw):
                    patch = vp[..., c, a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride]
                    out[..., o, :, :] += kernel[o, c, a, b] * patch
    return out


def naive_conv2d_transpose(kernel, w, in_shape, stride=1, pad=0):
    """Transposed convolution by scattering each kernel tap."""
    c_out, c_in, kh, kw = kernel.shape
    w = np.asarray(w, dtype=np.float64)
    _, H, W = in_shape
    Ho, Wo = w.shape[-2:]
    full = np.zeros(w.shape[:-3] + (c_in, H + 2 * pad, W + 2 * pad))
    for o in range(c_out):
        for c in range(c_in):
            for a in range(kh):
                for b in range(kw):
                    full[..., c, a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride] += (
                        kernel[o, c, a, b] * w[..., o, :, :]
                    )
    return full[..., pad:pad + H, pad:pad + W]


def _adjoint_apply(op, weight, v):
    if op.kind == "dense":
        return v @ weight
    return naive_conv2d(weight, v, op.stride, op.pad)


def _forward_apply(op, weight, w):
    if op.kind == "dense":
        return w @ weight.T
    return naive_conv2d_transpose(weight, w, op.in_shape, op.stride, op.pad)


def feedforward_eval(model, x, penalties=None):
    """Plain feed-forward network ``a_j = act_j(B_j^T a_{j-1})``.

    Returns the list of activations (encoder stages excluded from the list
    but applied first).
    """
    a = np.asarray(x, dtype=np.float64)
    for stage in model.encoder:
        a = _activation(stage.penalty, _adjoint_apply(stage.op, stage.op.weight, a))
    acts = []
    for j, layer in enumerate(model.layers):
        spec = penalties[j] if penalties and j in penalties else layer.penalty
        a = _activation(spec, _adjoint_apply(layer.op, layer.op.weight, a))
        acts.append(a)
    return acts


def train_feedforward(model, inputs, targets, epochs, batch_size, lr, momentum, seed, readout="output"):
    """Minibatch SGD with momentum on a dense feed-forward network with
    hand-written backpropagation (squared error loss).

    Returns the trained parameter list (in ``model.parameters()`` order)
    and the per-step minibatch losses.
    """
    if model.encoder or any(l.op.kind != "dense" for l in model.layers):
        raise ValueError("reference trainer supports dense layers without encoder")
    Bs = [l.op.weight.copy() for l in model.layers]
    bs = [None if l.penalty.kind != "nonneg_l1" else l.penalty.bias.copy() for l in model.layers]
    learn_b = [l.penalty.kind == "nonneg_l1" and l.penalty.learnable for l in model.layers]
    vB = [np.zeros_like(B) for B in Bs]
    vb = [None if b is None else np.zeros_like(b) for b in bs]
    rng = np.random.default_rng(seed)
    n = inputs.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = inputs[idx]
            yb = xb if readout == "reconstruction" else targets[idx]
            m = len(idx)
            # forward
            zs, ws = [xb], []
            for B, b, layer in zip(Bs, bs, model.layers):
                w = zs[-1] @ B
                ws.append(w)
                zs.append(_activation(layer.penalty, w, b))
            if readout == "reconstruction":
                recs = [zs[-1]]
                for B in reversed(Bs):
                    recs.append(recs[-1] @ B.T)
                pred = recs[-1]
            else:
                pred = zs[-1]
            r = pred - yb
            losses.append(0.5 * float(np.dot(r.ravel(), r.ravel())) * (1.0 / m))
            # backward
            g = (1.0 / m) * r
            gB = [None] * len(Bs)
            if readout == "reconstruction":
                # pred = B_1 (B_2 (... B_l z_l)); recs[k] = B_{l-k+1} recs[k-1]
                for k in range(len(Bs), 0, -1):
                    B = Bs[len(Bs) - k]
                    gB[len(Bs) - k] = g.T @ recs[k - 1]
                    g = g @ B
            gb = [None] * len(Bs)
            for j in range(len(Bs) - 1, -1, -1):
                spec = model.layers[j].penalty
                if spec.kind in ("nonneg", "nonneg_l1"):
                    gw = np.where(zs[j + 1] > 0, g, 0.0)
                elif spec.kind == "none":
                    gw = g
                else:
                    raise ValueError("reference trainer supports relu-type activations")
                if spec.kind == "nonneg_l1":
                    gb[j] = -gw.sum(axis=0)
                term = zs[j].T @ gw
                gB[j] = term if gB[j] is None else gB[j] + term
                g = gw @ Bs[j].T
            for j in range(len(Bs)):
                vB[j] = momentum * vB[j] + gB[j]
                Bs[j] = Bs[j] - lr * vB[j]
                if learn_b[j]:
                    vb[j] = momentum * vb[j] + gb[j]
                    bs[j] = np.maximum(bs[j] - lr * vb[j], 0.0)
    params = []
    for B, b in zip(Bs, bs):
        params.append(B)
        if b is not None:
            params.append(b)
    return params, losses


# -- explaining away ------------------------------------------------------------


def nonneg_lasso(D, X, bias, steps=3000):
    """Columnwise ``argmin_{w >= 0} 0.5 ||x - D w||^2 + bias * sum(w)`` by
    monotone FISTA. ``X`` is ``(d, n)``."""
    D = np.asarray(D, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    L = 1.1 * _power_lipschitz(D)
    s = 1.0 / L
    G = D.T @ D
    DtX = D.T @ X

    def F(W):
        R = X - D @ W
        return 0.5 * (R * R).sum(axis=0) + bias * W.sum(axis=0)

    W = np.zeros((D.shape[1], X.shape[1]))
    fW = F(W)
    Y, tk = W.copy(), 1.0
    for _ in range(steps):
        Z = np.maximum(Y - s * (G @ Y - DtX) - s * bias, 0.0)
        fZ = F(Z)
        keep = fZ <= fW
        W_new = np.where(keep, Z, W)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        Y = W_new + (tk / t_new) * (Z - W_new) + ((tk - 1) / t_new) * (W_new - W)
        W, fW, tk = W_new, np.where(keep, fZ, fW), t_new
    return W


def explaining_away_stats(dictionary, images, b, steps=3000, eps=1e-8):
    """Compare feed-forward thresholded codes with l1-optimal codes.

    Feed-forward codes are ``max(D^T x - b, 0)``; optimized codes solve the
    nonnegative l1-penalized least-squares problem with the same ``b``.
    ``images`` is ``(n, d)``. Returns per-image nonzero counts and
    reconstruction errors ``||x - D w||``.
    """
    D = np.asarray(dictionary, dtype=np.float64)
    X = np.atleast_2d(np.asarray(images, dtype=np.float64)).T
    ff = np.maximum(D.T @ X - b, 0.0)
    opt = nonneg_lasso(D, X, b, steps=steps)
    return {
        "ff_sparsity": (np.abs(ff) > eps).sum(axis=0),
        "opt_sparsity": (np.abs(opt) > eps).sum(axis=0),
        "ff_error": np.linalg.norm(X - D @ ff, axis=0),
        "opt_error": np.linalg.norm(X - D @ opt, axis=0),
        "ff_codes": ff.T,
        "opt_codes": opt.T,
    }
