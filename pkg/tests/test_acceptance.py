"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they happen; they are also collected in the terminal summary.
"""

import time

import numpy as np
import pytest

from deepca import admm, oracle
from deepca import experiments as ex
from deepca import learning as L
from deepca.config import load_config
from deepca.linop import Conv2dOperator
from deepca.model import Layer, Model, dense_layer, init_dense_weight, model_from_config, objective
from deepca.prox import PenaltySpec, penalty_value, prox
from deepca.tensor import decode_dcat, encode_dcat

pytestmark = pytest.mark.acceptance


def _random_ff_model(rng):
    depth = int(rng.integers(1, 4))
    layers = []
    if rng.random() < 0.5:
        dims = rng.integers(1, 13, size=depth + 1)
        for j in range(depth):
            bias = rng.uniform(0, 0.5, dims[j + 1])
            layers.append(dense_layer(rng.standard_normal((dims[j], dims[j + 1])), PenaltySpec.nonneg_l1(bias)))
        x = rng.standard_normal((int(rng.integers(1, 5)), dims[0]))
    else:
        shape = (int(rng.integers(1, 4)), int(rng.integers(4, 10)), int(rng.integers(4, 10)))
        x = rng.standard_normal((int(rng.integers(1, 4)),) + shape)
        for _ in range(depth):
            pad = int(rng.integers(0, 2))
            k = int(rng.integers(1, min(4, min(shape[1:]) + 2 * pad + 1)))
            op = Conv2dOperator(rng.standard_normal((int(rng.integers(1, 5)), shape[0], k, k)), shape,
                                stride=int(rng.integers(1, 3)), pad=pad)
            c = op.out_shape[0]
            bshape = (c, 1, 1) if rng.random() < 0.5 else op.out_shape
            layers.append(Layer(op, PenaltySpec.nonneg_l1(rng.uniform(0, 0.5, bshape))))
            shape = op.out_shape
    return Model(layers), x


def test_criterion_1_one_iteration_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        model, x = _random_ff_model(rng)
        got = admm.infer(model, x, 1).z
        ref = oracle.feedforward_eval(model, x)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(got, ref)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    criterion(1, "one-iteration equivalence", ok, f"max error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_admm_matches_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        d, k = int(rng.integers(2, 33)), int(rng.integers(2, 65))
        B = rng.standard_normal((d, k))
        B /= np.linalg.norm(B, axis=0)
        model = Model([dense_layer(B, PenaltySpec.nonneg_l1(rng.uniform(0.05, 0.5, k)))])
        x = rng.standard_normal(d)
        st = admm.infer(model, x, 500)
        ref = oracle.proximal_gradient_solve(model, x, steps=50_000, tol=1e-12)
        worst = max(worst, abs(objective(model, x, st.z) - ref.objective))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60
    criterion(2, "ADMM vs proximal-gradient oracle", ok, f"max objective gap {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_tight_frame_update(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        p, k = int(rng.integers(1, 16)), int(rng.integers(1, 24))
        p, k = min(p, k), max(p, k)
        model = Model([dense_layer(init_dense_weight(p, k, rng), PenaltySpec.none())],
                      rho=float(rng.uniform(0.1, 5)))
        n = int(rng.integers(1, 4))
        st = admm.feed_forward_init(model, rng.standard_normal((n, p)))
        st.z[0] = rng.standard_normal((n, k))
        st.lam[0] = rng.standard_normal((n, k))
        diff = admm.w_update_parseval(model, st, 0) - admm.w_update_exact(model, st, 0)
        worst = max(worst, float(np.max(np.abs(diff))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5
    criterion(3, "tight-frame update equals exact update", ok, f"max difference {worst:.2e}, {elapsed:.2f}s")
    assert ok


def _random_spec(kind, n, rng):
    if kind == "nonneg_l1":
        return PenaltySpec.nonneg_l1(rng.uniform(0, 1, size=n))
    if kind == "equality":
        idx = np.sort(rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False))
        return PenaltySpec.equality(idx, rng.standard_normal(idx.size), n)
    return PenaltySpec(kind)


def test_criterion_4_prox_operators(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    failures = []
    for kind in ("nonneg_l1", "nonneg", "simplex", "equality", "none"):
        for _ in range(100):
            n = int(rng.integers(1, 4 if kind == "simplex" else 5))
            spec = _random_spec(kind, n, rng)
            v = rng.standard_normal(n) * 1.5
            u = prox(spec, v)
            g = oracle.prox_grid_oracle(spec, v, grid_step=1e-3)
            f = lambda w: 0.5 * float(np.sum((v - w) ** 2)) + penalty_value(spec, w, tol=1e-9)
            if not f(u) <= f(g) + 1e-6:
                failures.append((kind, "grid"))
            a, b = rng.standard_normal((2, n)) * 2
            if np.linalg.norm(prox(spec, a) - prox(spec, b)) > np.linalg.norm(a - b) + 1e-12:
                failures.append((kind, "nonexpansive"))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    criterion(4, "prox minimizer and nonexpansiveness", ok, f"{len(failures)} failures in 500 trials, {elapsed:.1f}s")
    assert ok


def test_criterion_5_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    cfg = load_config(None, "gradcheck")
    model = model_from_config(cfg["model"], seed=0)
    assert len(model.layers) == 2
    rows = ex.gradcheck_report(model, [1, 2, 3], tol=1e-4, kink_margin=1e-4)
    worst = max(r[2] for r in rows)
    elapsed = time.perf_counter() - t0
    ok = all(r[3] for r in rows) and len(rows) == 3 * len(model.parameters()) and elapsed < 60
    criterion(5, "unrolled gradients vs finite differences", ok,
              f"{len(rows)} tensors, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_6_explaining_away(criterion):
    t0 = time.perf_counter()
    cfg = load_config(None, "demo-explaining-away")
    assert cfg["data"]["k"] == 2 * cfg["data"]["d"] and cfg["data"]["trials"] == 100
    rep = ex.cmd_demo_explaining_away(cfg)
    elapsed = time.perf_counter() - t0
    ok = rep["opt_sparser"] >= 95 and elapsed < 120
    criterion(6, "explaining away", ok, f"optimized codes sparser in {rep['opt_sparser']}/100 trials, {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_constrained_inpainting(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(None, "demo-inpaint")
    assert cfg["data"]["h"] == cfg["data"]["w"] == 28 and cfg["data"]["mask_density"] == 0.1
    Ts = [1, 2, 5, 20]
    seeds = [0, 1, 2, 3, 4]
    cfg["run"]["T_list"] = Ts
    cfg["run"]["seeds"] = seeds
    rep = ex.cmd_demo_inpaint(cfg, tmp_path / "inpaint")
    elapsed = time.perf_counter() - t0
    mae = {(r["seed"], r["T"]): r["test_mae"] for r in rep["rows"]}
    viol = max(r["max_violation"] for r in rep["rows"] if r["T"] == 20)
    a = viol <= 1e-12
    b = all(mae[(s, 20)] < mae[(s, 1)] for s in seeds)
    means = [float(np.mean([mae[(s, T)] for s in seeds])) for T in Ts]
    c = all(later <= earlier for earlier, later in zip(means, means[1:]))
    ok = a and b and c and elapsed < 900
    detail = (f"(a) violation {viol:.1e} {a}; (b) {sum(mae[(s, 20)] < mae[(s, 1)] for s in seeds)}/5 seeds {b}; "
              f"(c) mean test MAE over T={Ts}: {[round(m, 4) for m in means]} {c}; {elapsed:.0f}s")
    criterion(7, "constrained inpainting", ok, detail)
    assert ok


def test_criterion_8_sparsity_control(criterion):
    t0 = time.perf_counter()
    cfg = load_config(None, "demo-sparsity")
    assert len(cfg["run"]["seeds"]) == 5
    rep = ex.cmd_demo_sparsity(cfg)
    elapsed = time.perf_counter() - t0
    rows = rep["rows"]
    parts = []
    err_ok, bias_ok = True, True
    for T in cfg["run"]["T_list"]:
        fixed = np.mean([r["recon_error"] for r in rows if r["T"] == T and r["bias_mode"] == "fixed"])
        learn = [r for r in rows if r["T"] == T and r["bias_mode"] == "learnable"]
        learned = np.mean([r["recon_error"] for r in learn])
        b0 = np.mean([r["initial_mean_bias"] for r in learn])
        b1 = np.mean([r["final_mean_bias"] for r in learn])
        err_ok &= bool(learned <= fixed)
        bias_ok &= bool(b1 < b0)
        parts.append(f"T={T}: error {learned:.4f} vs {fixed:.4f}, bias {b0:.3f}->{b1:.3f}")
    ok = err_ok and bias_ok and elapsed < 600
    criterion(8, "sparsity control", ok, "; ".join(parts) + f"; {elapsed:.0f}s")
    assert ok


def test_criterion_9_parameter_count_invariance(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(None, "demo-inpaint")
    sizes, payload = {}, {}
    for T in (1, 20):
        model = model_from_config(dict(cfg["model"], T=T), seed=0)
        path = tmp_path / f"T{T}.dcac"
        L.save_checkpoint(path, model)
        sizes[T] = L.checkpoint_layout(path)["parameters"]
        payload[T] = [p.tobytes() for _, p, _ in L.load_checkpoint(path).model.parameters()]
    elapsed = time.perf_counter() - t0
    ok = sizes[1] == sizes[20] and payload[1] == payload[20] and elapsed < 5
    criterion(9, "parameter count independent of T", ok,
              f"parameter section {sizes[1]} vs {sizes[20]} bytes, {elapsed:.2f}s")
    assert ok


def test_criterion_10_determinism_and_formats(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(None, "train", seed=11)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        ex.cmd_train(cfg, out)
    same_csv = (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()

    rng = np.random.default_rng(10)
    dcat_ok = True
    for shape in [(), (1,), (3,), (2, 5), (2, 1, 3, 4)]:
        a = rng.standard_normal(shape) * 10.0 ** rng.integers(-300, 300)
        dcat_ok &= decode_dcat(encode_dcat(a)).tobytes() == a.tobytes()

    ck_path = outs[0] / "model.dcac"
    ck = L.load_checkpoint(ck_path)
    again = tmp_path / "again.dcac"
    L.save_checkpoint(again, ck.model, ck.velocity, ck.epoch, ck.rng_state, ck.train_config, ck.metrics)
    dcac_ok = again.read_bytes() == ck_path.read_bytes()
    elapsed = time.perf_counter() - t0
    ok = same_csv and dcat_ok and dcac_ok and elapsed < 10
    criterion(10, "determinism and formats", ok,
              f"metrics identical {same_csv}, DCAT {dcat_ok}, DCAC {dcac_ok}, {elapsed:.1f}s")
    assert ok
