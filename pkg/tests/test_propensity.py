"""Logistic propensity fitting against an independent Newton oracle.

The oracle works on the raw (unstandardized) scale with plain Newton steps
and no line search; it is only run on tame designs where that converges.
The product solver standardizes internally and guards the step, so agreement
checks both the optimizer and the back-transformation.
"""
import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from ettkit import propensity as prop
from ettkit.errors import (
    ConvergenceFailure,
    ManifestMismatch,
    OneClass,
    Separation,
    SingularDesign,
)


def newton_oracle(X, t, tol=1e-13, max_iter=200):
    """Raw-scale Newton-Raphson for the logistic MLE, intercept first."""
    A = np.hstack([np.ones((X.shape[0], 1)), X])
    beta = np.zeros(A.shape[1])
    for _ in range(max_iter):
        p = expit(A @ beta)
        grad = A.T @ (t - p)
        if np.linalg.norm(grad) < tol * len(t):
            return beta
        H = (A * (p * (1 - p))[:, None]).T @ A
        beta = beta + np.linalg.solve(H, grad)
    raise RuntimeError("oracle did not converge")


def tame_design(seed, n=400, p=3):
    """Well-scaled design with a moderate signal; separation-free."""
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(n, p))
    beta = gen.uniform(-0.8, 0.8, size=p)
    eta = -0.3 + X @ beta
    t = (gen.uniform(size=n) < expit(eta)).astype(float)
    if t.sum() in (0, n):  # pragma: no cover - probability ~0 at n=400
        return tame_design(seed + 1000, n, p)
    return X, t


@pytest.mark.parametrize("seed", range(20))
def test_fit_matches_newton_oracle(seed):
    X, t = tame_design(seed)
    oracle = newton_oracle(X, t)
    model = prop.fit_logistic(X, t, [f"c{i}" for i in range(X.shape[1])])
    fitted = np.concatenate([[model.intercept],
                             [model.coefficients[f"c{i}"] for i in range(X.shape[1])]])
    assert np.allclose(fitted, oracle, atol=1e-8)


@pytest.mark.parametrize("seed", range(0, 20, 4))
def test_score_equations_hold(seed):
    X, t = tame_design(seed, n=500, p=4)
    cols = [f"c{i}" for i in range(4)]
    model = prop.fit_logistic(X, t, cols)
    p = model.prob_score(X, cols)
    A = np.hstack([np.ones((len(t), 1)), X])
    score = A.T @ (t - p)
    assert np.max(np.abs(score)) < 1e-6 * len(t)
    assert model.convergence.grad_norm_scaled < 1e-8


def test_fit_is_row_permutation_invariant():
    X, t = tame_design(33)
    cols = ["a", "b", "c"]
    gen = np.random.default_rng(0)
    perm = gen.permutation(len(t))
    base = prop.fit_logistic(X, t, cols)
    shuffled = prop.fit_logistic(X[perm], t[perm], cols)
    assert shuffled.intercept == pytest.approx(base.intercept, abs=1e-10)
    for c in cols:
        assert shuffled.coefficients[c] == pytest.approx(base.coefficients[c], abs=1e-10)


def test_fit_accepts_dataframe_and_records_manifest():
    X, t = tame_design(5)
    frame = pd.DataFrame(X, columns=["speed", "angle", "rate"])
    model = prop.fit_logistic(frame, t)
    assert model.manifest == ("speed", "angle", "rate")
    # scoring a frame with reordered columns must still follow the manifest
    scores = model.prob_score(frame[["rate", "speed", "angle"]])
    assert np.allclose(scores, model.prob_score(frame), atol=0)


def test_scoring_wrong_columns_raises():
    X, t = tame_design(6)
    model = prop.fit_logistic(X, t, ["a", "b", "c"])
    with pytest.raises(ManifestMismatch):
        model.prob_score(X, ["a", "c", "b"])
    with pytest.raises(ManifestMismatch):
        model.prob_score(pd.DataFrame(X, columns=["a", "b", "zzz"]))


def test_one_class_raises():
    X, _ = tame_design(7)
    with pytest.raises(OneClass):
        prop.fit_logistic(X, np.ones(len(X)), ["a", "b", "c"])
    with pytest.raises(OneClass):
        prop.fit_logistic(X, np.zeros(len(X)), ["a", "b", "c"])


def test_duplicate_column_raises_singular_with_name():
    X, t = tame_design(8)
    X2 = np.hstack([X, X[:, [0]]])
    with pytest.raises(SingularDesign) as exc:
        prop.fit_logistic(X2, t, ["a", "b", "c", "a_copy"])
    assert "a_copy" in str(exc.value)


def test_constant_column_raises_singular():
    X, t = tame_design(9)
    X2 = np.hstack([X, np.full((len(X), 1), 3.7)])
    with pytest.raises(SingularDesign):
        prop.fit_logistic(X2, t, ["a", "b", "c", "const"])


def test_separation_detected():
    gen = np.random.default_rng(10)
    x = np.concatenate([gen.uniform(-2, -0.5, 80), gen.uniform(0.5, 2, 80)])
    t = (x > 0).astype(float)
    with pytest.raises(Separation):
        prop.fit_logistic(x[:, None], t, ["x"])


def test_ridge_shrinks_toward_zero():
    X, t = tame_design(11)
    cols = ["a", "b", "c"]
    free = prop.fit_logistic(X, t, cols)
    ridged = prop.fit_logistic(X, t, cols, ridge=5.0)
    free_norm = np.linalg.norm([free.coefficients[c] for c in cols])
    ridge_norm = np.linalg.norm([ridged.coefficients[c] for c in cols])
    assert ridge_norm < free_norm


def test_json_round_trip():
    X, t = tame_design(12)
    model = prop.fit_logistic(X, t, ["a", "b", "c"])
    again = prop.PropensityModel.from_json(model.to_json())
    assert again.intercept == model.intercept
    assert again.coefficients == dict(model.coefficients)
    assert again.manifest == model.manifest
    assert np.array_equal(again.prob_score(X, ["a", "b", "c"]),
                          model.prob_score(X, ["a", "b", "c"]))


def test_warm_start_matches_cold_fit():
    X, t = tame_design(13, n=600)
    cols = ["a", "b", "c"]
    cold = prop.fit_logistic(X, t, cols)
    # warm start from a fit on the first half; optimum must be the same
    half = prop.fit_logistic(X[:300], t[:300], cols)
    warm = prop.fit_logistic(X, t, cols, init=half)
    assert warm.intercept == pytest.approx(cold.intercept, abs=1e-9)
    for c in cols:
        assert warm.coefficients[c] == pytest.approx(cold.coefficients[c], abs=1e-9)


def test_newton_counts_equals_gathered_fit():
    """Counts-weighted refit equals fitting on the repeated rows."""
    X, t = tame_design(14, n=300)
    cols = ["a", "b", "c"]
    model = prop.fit_logistic(X, t, cols)
    Xs, mu, sd = prop.standardized_design(X)
    beta0 = prop.standardized_beta(model, mu, sd)
    gen = np.random.default_rng(15)
    idx = gen.integers(0, len(t), len(t))
    c = np.bincount(idx, minlength=len(t)).astype(float)
    beta = prop.newton_counts(Xs, t, c, beta0)
    gathered = prop.fit_logistic(X[idx], t[idx], cols)
    g_beta = prop.standardized_beta(gathered, mu, sd)
    assert np.allclose(beta, g_beta, atol=1e-6)
    # and the refit satisfies the resample score equations
    p = expit(Xs @ beta)
    assert np.linalg.norm(Xs.T @ (c * (t - p))) < 1e-8 * c.sum()


def test_newton_counts_one_class():
    X, t = tame_design(16, n=120)
    Xs, mu, sd = prop.standardized_design(X)
    model = prop.fit_logistic(X, t, ["a", "b", "c"])
    beta0 = prop.standardized_beta(model, mu, sd)
    counts = np.where(t > 0, 1.0, 0.0)
    with pytest.raises(OneClass):
        prop.newton_counts(Xs, t, counts, beta0)


def test_positivity_report_shape():
    X, t = tame_design(17, n=500)
    frame = pd.DataFrame(X, columns=["a", "b", "c"])
    frame["game_year"] = np.where(np.arange(500) % 2 == 0, 2020, 2021)
    model = prop.fit_logistic(frame[["a", "b", "c"]], t)
    probs = model.prob_score(frame[["a", "b", "c"]])
    report = prop.positivity_report(probs, t, frame["game_year"].to_numpy())
    assert set(report["years"]) == {"2020", "2021"}
    overall = report["overall"]
    assert overall["treated"]["q0.5"] >= overall["control"]["q0.5"]
    lo, hi = overall["common_support"]
    assert lo < hi
    assert overall["outside_support"]["treated"] >= 0
