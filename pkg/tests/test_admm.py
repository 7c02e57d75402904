import csv

import numpy as np
import pytest

from deepca import admm, oracle
from deepca.linop import Conv2dOperator
from deepca.model import InferenceState, Layer, Model, augmented_lagrangian, dense_layer, init_dense_weight, objective
from deepca.prox import PenaltySpec


def _scalar_model(*penalties, rho=1.0):
    return Model([dense_layer(np.eye(1), p) for p in penalties], rho=rho)


def _state(x, ws, zs, lams):
    f = lambda v: np.array(v, dtype=float)
    return InferenceState(f(x), [f(w) for w in ws], [f(z) for z in zs], [f(l) for l in lams])


def test_feed_forward_examples():
    m = Model([dense_layer(np.eye(2), PenaltySpec.none())])
    st = admm.feed_forward_init(m, np.array([2.0, 3.0]))
    np.testing.assert_array_equal(st.w[0], [2.0, 3.0])
    np.testing.assert_array_equal(st.z[0], [2.0, 3.0])
    np.testing.assert_array_equal(st.lam[0], [0.0, 0.0])
    m = Model([dense_layer(np.eye(2), PenaltySpec.nonneg_l1(np.ones(2)))])
    st = admm.feed_forward_init(m, np.array([2.0, -3.0]))
    np.testing.assert_array_equal(st.w[0], [2.0, -3.0])
    np.testing.assert_array_equal(st.z[0], [1.0, 0.0])


def test_w_update_scalar_examples():
    m = _scalar_model(PenaltySpec.none())
    st = _state([2.0], [[0.0]], [[1.0]], [[0.0]])
    assert admm.w_update_exact(m, st, 0)[0] == pytest.approx(1.5, abs=1e-15)
    assert admm.w_update_parseval(m, st, 0)[0] == 1.5
    st = _state([2.0], [[0.0]], [[1.0]], [[0.5]])
    assert admm.w_update_parseval(m, st, 0)[0] == 1.25


def test_z_update_scalar_examples():
    m = _scalar_model(PenaltySpec.none(), PenaltySpec.none())
    st = _state([0.0], [[0.0], [2.0]], [[0.0], [0.0]], [[0.0], [0.0]])
    assert admm.z_update(m, st, 0)[0] == 1.0
    st = _state([0.0], [[0.0], [2.0]], [[0.0], [0.0]], [[0.0], [0.5]])
    assert admm.z_update(m, st, 1)[0] == 2.5


def test_dual_update_examples():
    m = _scalar_model(PenaltySpec.none())
    st = _state([0.0], [[2.0]], [[1.5]], [[0.0]])
    assert admm.dual_update(m, st, 0)[0] == 0.5
    st = _state([0.0], [[1.0]], [[1.0]], [[0.3]])
    assert admm.dual_update(m, st, 0)[0] == 0.3
    m = _scalar_model(PenaltySpec.none(), rho=2.0)
    st = _state([0.0], [[1.75]], [[1.0]], [[0.1]])
    st.lam[0] = admm.dual_update(m, st, 0)
    st.lam[0] = admm.dual_update(m, st, 0)
    assert st.lam[0][0] == pytest.approx(0.1 + 2 * 2.0 * 0.75, abs=1e-15)


def test_last_layer_equality_is_exact():
    spec = PenaltySpec.equality([0, 2], [0.25, -7.0], 3)
    m = Model([dense_layer(np.eye(3), spec)])
    st = _state(np.zeros(3), [[1.0, 2.0, 3.0]], [[0, 0, 0]], [[0.1, 0.2, 0.3]])
    z = admm.z_update(m, st, 0)
    assert z[0] == 0.25 and z[2] == -7.0


def test_exact_update_matches_reference_solver():
    rng = np.random.default_rng(0)
    for _ in range(20):
        B = rng.standard_normal((4, 6))
        m = Model([dense_layer(B, PenaltySpec.nonneg())], rho=0.7)
        st = _state(rng.standard_normal(4), [np.zeros(6)], [rng.standard_normal(6)], [rng.standard_normal(6)])
        got = admm.w_update_exact(m, st, 0)
        ref = oracle.reference_ls_solve(B.T @ B + 0.7 * np.eye(6), B.T @ st.x + 0.7 * st.z[0] - st.lam[0])
        np.testing.assert_allclose(got, ref, atol=1e-9)


def test_exact_update_large_rho_limit():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((4, 6))
    m = Model([dense_layer(B, PenaltySpec.none())], rho=1e6)
    st = _state(rng.standard_normal(4), [np.zeros(6)], [rng.standard_normal(6)], [rng.standard_normal(6)])
    np.testing.assert_allclose(admm.w_update_exact(m, st, 0), st.z[0] - st.lam[0] / 1e6, atol=1e-4)


def test_parseval_equals_exact_for_tight_frames():
    rng = np.random.default_rng(2)
    for _ in range(20):
        B = init_dense_weight(4, 7, rng)
        m = Model([dense_layer(B, PenaltySpec.none())], rho=float(rng.uniform(0.2, 3)))
        st = _state(rng.standard_normal((3, 4)), [np.zeros((3, 7))], [rng.standard_normal((3, 7))],
                    [rng.standard_normal((3, 7))])
        np.testing.assert_allclose(admm.w_update_parseval(m, st, 0), admm.w_update_exact(m, st, 0), atol=1e-9)


def _two_layer(rng, b1=0.1, b2=0.05):
    return Model([
        dense_layer(rng.standard_normal((6, 8)) / 3, PenaltySpec.nonneg_l1(np.full(8, b1))),
        dense_layer(rng.standard_normal((8, 5)) / 3, PenaltySpec.nonneg_l1(np.full(5, b2))),
    ])


def test_one_iteration_equals_feed_forward_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = _two_layer(rng)
        x = rng.standard_normal((4, 6))
        st = admm.infer(m, x, 1)
        for a, b in zip(st.z, oracle.feedforward_eval(m, x)):
            np.testing.assert_array_equal(a, b)
    conv = Layer(Conv2dOperator(rng.standard_normal((3, 2, 3, 3)), (2, 6, 6), pad=1),
                 PenaltySpec.nonneg_l1(np.full((3, 1, 1), 0.1)))
    m = Model([conv])
    x = rng.standard_normal((2, 2, 6, 6))
    np.testing.assert_allclose(admm.infer(m, x, 1).z[0], oracle.feedforward_eval(m, x)[0], atol=1e-12)


def test_equality_output_holds_after_inference():
    rng = np.random.default_rng(4)
    m = _two_layer(rng)
    spec = PenaltySpec.equality([0, 3], [2.0, -1.0], 5)
    st = admm.infer(m, rng.standard_normal(6), 20, penalties={1: spec})
    assert abs(st.z[1][0] - 2.0) <= 1e-12 and abs(st.z[1][3] + 1.0) <= 1e-12


def _single_layer(rng, b=0.1, d=6, k=10):
    B = init_dense_weight(d, k, rng)
    return Model([dense_layer(B, PenaltySpec.nonneg_l1(np.full(k, b)))])


def test_single_layer_converges_to_oracle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        m = _single_layer(rng, b=0.3)
        x = rng.standard_normal(6)
        st = admm.infer(m, x, 100)
        ref = oracle.proximal_gradient_solve(m, x, steps=20000, tol=1e-13)
        np.testing.assert_allclose(st.w[0], ref.ws[0], atol=1e-5)


def test_single_layer_primal_residual_and_optimality():
    rng = np.random.default_rng(6)
    for _ in range(5):
        m = _single_layer(rng)
        x = rng.standard_normal(6)
        st = admm.infer(m, x, 500)
        assert admm.residuals(m, st)[0][0] < 1e-6
        ref = oracle.proximal_gradient_solve(m, x, steps=20000, tol=1e-13)
        assert abs(objective(m, x, st.z) - ref.objective) <= 1e-8


def test_single_layer_residual_trend():
    rng = np.random.default_rng(7)
    m = _single_layer(rng)
    rows = []
    admm.infer(m, rng.standard_normal(6), 50, trace=rows)
    r = np.array([row[2] for row in rows])
    for t in range(len(r) - 5):
        assert r[t + 5] <= r[t] + 1e-8


def test_augmented_lagrangian_drops_after_sweep():
    rng = np.random.default_rng(8)
    m = _single_layer(rng)
    x = rng.standard_normal(6)
    st0 = admm.infer(m, x, 1)
    st1 = admm.infer(m, x, 2)
    assert augmented_lagrangian(m, st1) < augmented_lagrangian(m, st0)


def test_residuals_examples():
    rng = np.random.default_rng(9)
    m = Model([dense_layer(init_dense_weight(3, 6, rng), PenaltySpec.none())])
    st = admm.feed_forward_init(m, rng.standard_normal(3))
    assert admm.residuals(m, st)[0][0] == 0.0


def test_batch_matches_single():
    rng = np.random.default_rng(10)
    m = _two_layer(rng)
    x = rng.standard_normal((5, 6))
    batch = admm.infer(m, x, 6)
    for i in range(5):
        np.testing.assert_allclose(batch.z[1][i], admm.infer(m, x[i], 6).z[1], atol=1e-12)


def test_tolerance_stops_early():
    rng = np.random.default_rng(11)
    m = _single_layer(rng)
    rows = []
    admm.infer(m, rng.standard_normal(6), 5000, tol=1e-4, trace=rows)
    assert rows[-1][0] < 5000


def test_trace_csv(tmp_path):
    rng = np.random.default_rng(12)
    m = _two_layer(rng)
    rows = []
    admm.infer(m, rng.standard_normal(6), 4, trace=rows)
    assert len(rows) == 4 * 2
    p = tmp_path / "trace.csv"
    admm.write_trace_csv(rows, p)
    with open(p) as f:
        data = list(csv.reader(f))
    assert tuple(data[0]) == admm.TRACE_FIELDS
    assert len(data) == 1 + len(rows)


def test_invalid_iterations():
    m = _scalar_model(PenaltySpec.none())
    with pytest.raises(ValueError):
        admm.infer(m, np.ones(1), 0)


def test_multilayer_fixed_point_solves_rescaled_problem():
    # the unscaled activation step makes inner l1 weights act (1 + rho) times larger
    # and the top one rho times larger
    rng = np.random.default_rng(13)
    for rho in (1.0, 2.0):
        B1, B2 = init_dense_weight(8, 16, rng), init_dense_weight(16, 24, rng)
        b1, b2 = np.full(16, 0.1), np.full(24, 0.05)
        m = Model([dense_layer(B1, PenaltySpec.nonneg_l1(b1)), dense_layer(B2, PenaltySpec.nonneg_l1(b2))], rho=rho)
        x = rng.standard_normal(8)
        st = admm.infer(m, x, 3000)
        scaled = Model([dense_layer(B1, PenaltySpec.nonneg_l1((1 + rho) * b1)),
                        dense_layer(B2, PenaltySpec.nonneg_l1(rho * b2))])
        ref = oracle.proximal_gradient_solve(scaled, x, steps=200000, tol=1e-14)
        for z, w in zip(st.z, ref.ws):
            np.testing.assert_allclose(z, w, atol=1e-8)
