import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodforge.data import BoxSpec
from oodforge.detect import (
    ODIN_EPS_GRID,
    ODIN_T_GRID,
    DetectorConfig,
    ScoreRecord,
    baseline_score,
    confidence_grid,
    density_proxy,
    detect,
    grid_centers,
    kplus1_score,
    odin_perturb,
    odin_score,
    score,
    tune_odin,
    write_grid_csv,
    write_pgm,
)
from oodforge.nets import MlpSpec, ParamSet, classifier_logits, init_params, input_gradient


def const_logits(logits, d=2) -> ParamSet:
    logits = np.asarray(logits, float)
    return ParamSet(MlpSpec((d, len(logits))), "classifier", [np.zeros((d, len(logits)))], [logits])


X = np.random.default_rng(0).normal(size=(3, 2))


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig("odin", T=0.0)
    with pytest.raises(ValueError):
        DetectorConfig("odin", eps=-1e-3)
    with pytest.raises(ValueError):
        DetectorConfig("mahalanobis")
    with pytest.raises(ValueError):
        ScoreRecord(float("nan"), "in")
    with pytest.raises(ValueError):
        ScoreRecord(0.3, "test")
    assert ODIN_T_GRID == (1.0, 10.0, 100.0, 500.0, 1000.0)
    assert ODIN_EPS_GRID == (0.0, 0.0001, 0.001, 0.01)


def test_baseline_examples():
    np.testing.assert_allclose(baseline_score(const_logits(np.full(10, 2.5)), X), 0.1, atol=1e-15)
    np.testing.assert_allclose(baseline_score(const_logits([50.0, 0.0]), X), 1.0, atol=1e-12)
    np.testing.assert_allclose(baseline_score(const_logits([1.0, 0.0]), X), np.e / (np.e + 1), atol=1e-15)
    assert baseline_score(const_logits([1.0, 0.0]), X)[0] == pytest.approx(0.731059, abs=1e-6)


def test_odin_examples():
    theta = init_params(MlpSpec((2, 8, 3)), 0)
    x = np.random.default_rng(1).normal(size=(20, 2))
    np.testing.assert_allclose(odin_score(theta, x, 1.0, 0.0), baseline_score(theta, x), atol=1e-12)
    for T in (1.0, 10.0, 1000.0):
        np.testing.assert_allclose(odin_score(const_logits([0.3] * 4), X, T, 0.01), 0.25, atol=1e-15)
    assert odin_score(const_logits([1.0, 0.0]), X, 10.0, 0.0)[0] == pytest.approx(0.524979, abs=1e-6)


def test_odin_perturbation_formula():
    theta = init_params(MlpSpec((2, 8, 3)), 4)
    x = np.random.default_rng(2).normal(size=(6, 2))
    T, eps = 10.0, 0.01
    y_hat = np.argmax(classifier_logits(theta, x), axis=1)
    grad = input_gradient(theta, x, "log_prob_of_label", labels=y_hat, temperature=T)
    expected = x - eps * np.sign(-grad)
    np.testing.assert_array_equal(odin_perturb(theta, x, T, eps), expected)
    np.testing.assert_array_equal(odin_perturb(theta, x, T, eps, clip=(0.0, 0.5)), np.clip(expected, 0, 0.5))
    # the perturbation increases the predicted-class log-probability to first order
    assert np.all(odin_score(theta, x, T, 1e-4) >= odin_score(theta, x, T, 0.0) - 1e-12)


def test_kplus1_examples():
    np.testing.assert_allclose(kplus1_score(const_logits([-800.0, -800.0, 0.0]), X), 0.0, atol=1e-15)
    np.testing.assert_allclose(kplus1_score(const_logits(np.zeros(11)), X), 1 - 1 / 11, atol=1e-15)
    assert kplus1_score(const_logits(np.zeros(11)), X)[0] == pytest.approx(0.909091, abs=1e-6)
    with pytest.raises(ValueError):
        kplus1_score(const_logits([0.0]), X)


def test_density_proxy_examples():
    np.testing.assert_allclose(density_proxy(const_logits([0.2, 0.2]), X), 1.0, atol=1e-15)
    # exp(KL) = 1 / (K * geometric mean of p) = 1 / (2 * 0.3)
    assert density_proxy(const_logits(np.log([0.9, 0.1])), X)[0] == pytest.approx(5 / 3, abs=1e-12)
    assert np.log(5 / 3) == pytest.approx(0.510826, abs=1e-6)
    p = np.linspace(0.51, 0.999, 50)
    vals = [density_proxy(const_logits(np.log([q, 1 - q])), X[:1])[0] for q in p]
    assert np.all(np.diff(vals) > 0)


def test_detect_rule():
    assert detect(0.9, 0.5) == 1
    assert detect(0.3, 0.5) == 0
    assert detect(0.5, 0.5) == 1
    np.testing.assert_array_equal(detect(np.array([0.1, 0.5, 0.7]), 0.5), [0, 1, 1])
    with pytest.raises(ValueError):
        detect(np.nan, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-10, 10), st.floats(0, 5))
def test_detect_monotone_in_threshold(scores, d, gap):
    s = np.array(scores)
    assert np.all(detect(s, d + gap) <= detect(s, d))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(ODIN_T_GRID), st.sampled_from(ODIN_EPS_GRID))
def test_score_ranges_and_argmax(seed, T, eps):
    theta = init_params(MlpSpec((2, 6, 4)), seed)
    x = np.random.default_rng(seed).normal(size=(5, 2)) * 4
    b = baseline_score(theta, x)
    assert np.all((b >= 0.25 - 1e-12) & (b <= 1))
    o = odin_score(theta, x, T, eps)
    assert np.all((o >= 0.25 - 1e-12) & (o <= 1))
    k = kplus1_score(theta, x)
    assert np.all((k >= 0) & (k <= 1))
    assert np.all(density_proxy(theta, x) >= 1 - 1e-12)
    logits = classifier_logits(theta, x)
    np.testing.assert_array_equal(np.argmax(logits / T, axis=1), np.argmax(logits, axis=1))


def test_score_dispatch():
    theta = init_params(MlpSpec((2, 6, 3)), 1)
    np.testing.assert_array_equal(score(theta, X, DetectorConfig()), baseline_score(theta, X))
    np.testing.assert_array_equal(score(theta, X, DetectorConfig("odin", 10.0, 0.001)),
                                  odin_score(theta, X, 10.0, 0.001))
    np.testing.assert_array_equal(score(theta, X, DetectorConfig("kplus1")), kplus1_score(theta, X))


def test_confidence_grid_and_exports(tmp_path):
    box = BoxSpec.square(50.0)
    flat = const_logits([0.0, 0.0, 0.0])
    grid = confidence_grid(flat, box, 10)
    np.testing.assert_allclose(grid, 1 / 3, atol=1e-15)
    with pytest.raises(ValueError):
        confidence_grid(flat, box, 1)
    xs, ys = grid_centers(box, (4, 2))
    np.testing.assert_array_equal(xs, [-37.5, -12.5, 12.5, 37.5])
    np.testing.assert_array_equal(ys, [-25.0, 25.0])
    write_pgm(tmp_path / "flat.pgm", grid, 3)
    lines = (tmp_path / "flat.pgm").read_text().split("\n")
    assert lines[:3] == ["P2", "10 10", "255"]
    assert set(" ".join(lines[3:]).split()) == {"0"}
    theta = init_params(MlpSpec((2, 16, 2)), 3)
    g = confidence_grid(theta, box, (5, 4))
    assert g.shape == (4, 5) and np.all((g >= 0.5) & (g <= 1))
    # grid[i, j] sits at (xs[j], ys[i])
    xs, ys = grid_centers(box, (5, 4))
    assert g[1, 3] == pytest.approx(baseline_score(theta, [[xs[3], ys[1]]])[0], abs=1e-14)
    write_grid_csv(tmp_path / "g.csv", g, box)
    rows = (tmp_path / "g.csv").read_text().strip().split("\n")
    assert rows[0] == "x,y,score" and len(rows) == 21
    x, y, s = map(float, rows[1 + 5 * 1 + 3].split(","))
    assert (x, y, s) == (xs[3], ys[1], g[1, 3])
    write_pgm(tmp_path / "g.pgm", g, 2)
    body = (tmp_path / "g.pgm").read_text().split("\n")[3:7]
    top = [int(v) for v in body[0].split()]
    expected = np.clip(np.rint((g[-1] - 0.5) / 0.5 * 255), 0, 255).astype(int)
    assert top == expected.tolist()


def test_tune_odin_grid_and_ties():
    theta = init_params(MlpSpec((2, 8, 3)), 6)
    rng = np.random.default_rng(6)
    v_in, v_out = rng.normal(size=(30, 2)), rng.normal(size=(30, 2)) * 10
    cfg, table = tune_odin(theta, v_in, v_out)
    assert [(t, e) for t, e, _ in table] == [(t, e) for t in ODIN_T_GRID for e in ODIN_EPS_GRID]
    best = min(err for _, _, err in table)
    assert (cfg.kind, cfg.T, cfg.eps) == ("odin", *next((t, e) for t, e, err in table if err == best))
    # a flat classifier ties everywhere, so the first grid point wins
    cfg, table = tune_odin(const_logits([0.0, 0.0]), v_in, v_out)
    assert (cfg.T, cfg.eps) == (1.0, 0.0) and {err for *_, err in table} == {0.5}
