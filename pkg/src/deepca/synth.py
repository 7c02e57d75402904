"""Synthetic data: coherent dictionaries, sparse codes and depth fields."""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "dictionary_gen",
    "sparse_code_gen",
    "DepthTask",
    "depth_field_gen",
    "depth_dataset",
]


def dictionary_gen(d, k, coherence=0.0, seed=0):
    """Random dictionary with unit-norm columns, shape ``(d, k)``.

    The first ``min(d, k)`` atoms form an orthonormal set. Every further atom
    is a partner of one of them: ``c q_i + sqrt(1 - c^2) u`` with ``u`` a
    random unit vector orthogonal to ``q_i``, so the pair has inner product
    ``c = coherence``.
    """
    if d < 1 or k < 1:
        raise ValueError("dictionary sizes must be positive")
    if not 0.0 <= coherence < 1.0:
        raise ValueError("coherence must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cols = [Q[:, i] for i in range(min(d, k))]
    for i in range(k - d):
        q = Q[:, i % d]
        u = rng.standard_normal(d)
        u -= q * (q @ u)
        u /= np.linalg.norm(u)
        cols.append(coherence * q + np.sqrt(1.0 - coherence**2) * u)
    D = np.stack(cols, axis=1)
    return D / np.linalg.norm(D, axis=0)


def sparse_code_gen(k, density, seed=0, n=None):
    """Nonnegative code(s) with ``round(density * k)`` active entries.

    Active magnitudes are uniform on ``[0.5, 1.5]``. ``n`` draws a batch of
    shape ``(n, k)``.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    rng = np.random.default_rng(seed)
    nnz = int(round(density * k))
    rows = 1 if n is None else n
    out = np.zeros((rows, k))
    for r in range(rows):
        idx = rng.choice(k, size=nnz, replace=False)
        out[r, idx] = rng.uniform(0.5, 1.5, size=nnz)
    return out[0] if n is None else out


@dataclass
class DepthTask:
    """A depth field with sparse observations.

    ``observed`` holds the measured values at ``mask`` and zero elsewhere.
    """

    field: np.ndarray
    mask: np.ndarray
    observed: np.ndarray


def depth_field_gen(h, w, patches=4, mask_density=0.1, noise=0.0, seed=0):
    """Piecewise-planar field on an ``h x w`` grid with a random mask.

    The field is a constant offset plus ``patches`` planes, each restricted
    to a random axis-aligned rectangle, and lies roughly in ``[0, 1]``.
    ``floor(mask_density * h * w)`` distinct pixels are observed, with
    Gaussian noise of standard deviation ``noise``.
    """
    if h < 1 or w < 1:
        raise ValueError("field sizes must be positive")
    if not 0.0 < mask_density < 1.0:
        raise ValueError(f"mask density must lie in (0, 1), got {mask_density}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    field = np.full((h, w), rng.uniform(0.3, 0.5))
    for _ in range(patches):
        r0, r1 = np.sort(rng.integers(0, h + 1, size=2))
        c0, c1 = np.sort(rng.integers(0, w + 1, size=2))
        a, gy, gx = rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)
        region = np.zeros((h, w), dtype=bool)
        region[r0:r1 + 1, c0:c1 + 1] = True
        field = field + np.where(region, a + gy * (yy - 0.5) + gx * (xx - 0.5), 0.0)
    count = int(np.floor(mask_density * h * w))
    flat = rng.choice(h * w, size=count, replace=False)
    mask = np.zeros(h * w, dtype=bool)
    mask[flat] = True
    mask = mask.reshape(h, w)
    observed = np.where(mask, field, 0.0)
    if noise > 0:
        observed = observed + np.where(mask, noise * rng.standard_normal((h, w)), 0.0)
    return DepthTask(field, mask, observed)


def depth_dataset(n, h, w, patches=4, mask_density=0.1, noise=0.0, seed=0):
    """``n`` independent depth tasks stacked on a leading axis.

    Returns ``(inputs, targets, mask, observed)`` where ``inputs`` has two
    channels (observed sparse depth, mask indicator) and the rest carry a
    singleton channel axis: shapes ``(n, 2, h, w)`` and ``(n, 1, h, w)``.
    """
    seeds = np.random.SeedSequence(seed).generate_state(n)
    tasks = [depth_field_gen(h, w, patches, mask_density, noise, int(s)) for s in seeds]
    field = np.stack([t.field for t in tasks])[:, None]
    mask = np.stack([t.mask for t in tasks])[:, None]
    observed = np.stack([t.observed for t in tasks])[:, None]
    inputs = np.concatenate([observed, mask.astype(float)], axis=1)
    return inputs, field, mask, observed
