import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmkt import interpret as I
from ssmkt import tensor as T
from ssmkt.model import ModelConfig, build_model
from ssmkt.nn import make_rng
from ssmkt.ssm import S6, S6Config
from ssmkt.tensor import Tensor


def brute_alpha(Abar, Bbar, C):
    # direct product per entry, no suffix sharing
    n, M, _ = Abar.shape
    out = np.zeros((M, n, n))
    for m in range(M):
        for i in range(n):
            for j in range(i + 1):
                prod = np.prod(Abar[j + 1:i + 1, m], axis=0) if i > j else np.ones(Abar.shape[2])
                out[m, i, j] = C[i] @ (prod * Bbar[j, m])
    return out


def layer_trace(seed, n_steps=9, d=5, n=3, use_skip=False):
    layer = S6(S6Config(d_inner=d, n_state=n, use_skip=use_skip), make_rng(seed))
    x = np.random.default_rng(seed).normal(size=(n_steps, d))
    trace = []
    with T.no_grad():
        layer(Tensor(x), trace=trace)
    return trace[0]


def test_alpha_matches_direct_products():
    tr = layer_trace(0)
    alpha = I.materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"])
    assert np.allclose(alpha, brute_alpha(tr["Abar"], tr["Bbar"], tr["C"]), rtol=1e-12, atol=1e-15)


def test_alpha_diagonal_and_upper_triangle():
    tr = layer_trace(1)
    alpha = I.materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"])
    diag = np.einsum("tmn,tn->mt", tr["Bbar"], tr["C"])
    assert np.allclose(np.diagonal(alpha, axis1=1, axis2=2), diag, rtol=0, atol=1e-15)
    assert not np.any(np.triu(alpha, k=1))


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_reproduces_layer_output(seed):
    tr = layer_trace(seed, n_steps=16)
    alpha = I.materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"])
    y = I.reconstruct(alpha, tr["x"])
    assert np.max(np.abs(y - tr["y"])) / np.max(np.abs(tr["y"])) < 1e-12


def test_reconstruction_with_skip_on_diagonal():
    tr = layer_trace(2, use_skip=True)
    alpha = I.materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"], skip=tr["D"])
    assert np.allclose(I.reconstruct(alpha, tr["x"]), tr["y"], rtol=1e-12, atol=1e-15)


def test_memory_guard():
    Abar = np.zeros((1025, 256, 1))
    C = np.zeros((1025, 1))
    with pytest.raises(MemoryError, match="force"):
        I.materialize_alpha(Abar, Abar, C)


def test_trace_shape_mismatch():
    with pytest.raises(I.TraceError):
        I.materialize_alpha(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), np.zeros((4, 2)))


# -- sequence level -----------------------------------------------------------


def test_equal_row_gives_equal_weights():
    alpha = np.array([[[1.0, 0, 0], [3.0, 1.0, 0], [2.0, 2.0, 5.0]]])
    w = I.sequence_weights(alpha)
    assert np.array_equal(w.gamma[0, 2, :2], [0.5, 0.5])
    assert np.array_equal(w.gamma[0, 1, :1], [1.0])
    assert not w.defined[0, 0]
    assert np.array_equal(w.self_influence[0], [1.0, 1.0, 5.0])


def test_near_zero_denominator_is_flagged_not_nan():
    alpha = np.zeros((1, 3, 3))
    alpha[0, 2, :2] = [1.0, -1.0 + 1e-14]
    w = I.sequence_weights(alpha)
    assert not w.defined[0, 2]
    assert np.all(np.isfinite(w.gamma))


def test_defined_rows_sum_to_one_on_model_trace():
    tr = layer_trace(3, n_steps=20)
    w = I.sequence_weights(I.materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"]))
    sums = w.gamma.sum(axis=-1)[w.defined]
    assert w.defined.sum() > 0
    assert np.max(np.abs(sums - 1.0)) < 1e-9


# -- exercise level -----------------------------------------------------------


def test_constant_beta_gives_uniform_weights():
    alpha = np.zeros((3, 5, 5))
    alpha[:, 4, :4] = 0.7
    w = I.exercise_weights(alpha, 4)
    assert np.allclose(w.gamma, 0.25, rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(-50, 50), st.integers(0, 1000))
def test_exercise_weights_sum_and_shift_invariance(i, shift, seed):
    rng = np.random.default_rng(seed)
    alpha = np.tril(rng.normal(size=(4, 13, 13)))
    w = I.exercise_weights(alpha, i)
    assert abs(w.gamma.sum() - 1.0) < 1e-9
    shifted = alpha.copy()
    shifted[0, i, :i] += shift  # beta_j = sum over channels, so this shifts every beta_j
    assert np.max(np.abs(I.exercise_weights(shifted, i).gamma - w.gamma)) < 1e-12


def test_exercise_target_must_have_a_past():
    with pytest.raises(ValueError):
        I.exercise_weights(np.zeros((1, 4, 4)), 0)


def test_top_k_sorted_by_weight():
    alpha = np.zeros((1, 5, 5))
    alpha[0, 4, :4] = [0.1, 2.0, -1.0, 1.0]
    top = I.exercise_weights(alpha, 4).top_k(2)
    assert [j for j, _ in top] == [1, 3]


# -- export -------------------------------------------------------------------


def test_two_by_two_grid_has_one_defined_row(tmp_path):
    alpha = np.array([[[1.0, 0.0], [2.0, 3.0]]])
    path = I.write_grid_csv(I.sequence_weights(alpha), 0, tmp_path / "g.csv")
    lines = path.read_text().splitlines()
    assert lines == ["j0,j1", ",", "1,"]
    back = I.read_grid_csv(path)
    assert np.isnan(back[0]).all() and back[1, 0] == 1.0 and np.isnan(back[1, 1])


def test_grid_uses_six_significant_digits(tmp_path):
    alpha = np.array([[[1.0, 0, 0], [1.0, 1.0, 0], [1.0, 2.0, 1.0]]])
    lines = I.write_grid_csv(I.sequence_weights(alpha), 0, tmp_path / "g.csv").read_text().splitlines()
    assert lines[3] == "0.333333,0.666667,"


def test_svg_exports_are_self_contained(tmp_path):
    alpha = np.tril(np.random.default_rng(0).normal(size=(1, 4, 4)))
    w = I.sequence_weights(alpha)
    labels = I.exercise_labels([59, 3, 3, 7], [1, 0, 1, 1])
    assert labels[0] == "59(1)"
    grid = np.where(np.tri(4, k=-1, dtype=bool), w.gamma[0], np.nan)
    svg = I.write_heatmap_svg(grid, labels, tmp_path / "h.svg").read_text()
    assert svg.startswith("<svg") and "59(1)" in svg and "href" not in svg
    ew = I.exercise_weights(alpha, 3)
    I.write_exercise_svg(ew, labels, tmp_path / "e.svg")
    table = I.write_exercise_table(ew, labels, tmp_path / "e.csv", k=2).read_text().splitlines()
    assert table[0] == "rank,step,label,beta,gamma" and len(table) == 3


def test_layer_trace_from_model():
    cfg = ModelConfig(n_questions=5, n_concepts=2, d_model=4, n_layers=2, n_state=3)
    m = build_model(cfg)
    q = np.array([0, 1, 2, 3, 4, 0])
    tr = I.layer_trace(m, q, q % 2, np.array([1, 0, 1, 1, 0, 0]), layer=1)
    assert tr["Abar"].shape == (6, 8, 3) and tr["C"].shape == (6, 3)
    alpha = I.materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"])
    assert np.allclose(I.reconstruct(alpha, tr["x"]), tr["y"], rtol=1e-12, atol=1e-15)
