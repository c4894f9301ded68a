import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import plain_lasso
from spdyn import _backend, lasso2
from spdyn.errors import AlignmentError, ContractError, DomainError, ShapeError


def orthonormal(n, p, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(n, p)))
    return q


# --------------------------------------------------------------------------
# soft threshold

@pytest.mark.parametrize("z, g, out", [(3, 1, 2), (-0.5, 1, 0), (-3, 1, -2), (0.0, 0.0, 0.0)])
def test_soft_threshold_examples(z, g, out):
    assert lasso2.soft_threshold(z, g) == out


def test_soft_threshold_negative_gamma():
    with pytest.raises(DomainError):
        lasso2.soft_threshold(1.0, -0.1)


@given(st.floats(-10, 10), st.floats(0, 5))
def test_soft_threshold_shrinks(z, g):
    s = lasso2.soft_threshold(z, g)
    assert abs(s) <= abs(z) and s * z >= 0


# --------------------------------------------------------------------------
# weighted lasso

def test_full_shrinkage():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(30, 6)), rng.normal(size=30)
    w = rng.uniform(0.5, 2.0, 6)
    lam = np.max(np.abs(X.T @ y) / w) * 1.0001
    assert np.array_equal(lasso2.weighted_lasso(X, y, lam, w), np.zeros(6))


@pytest.mark.parametrize("seed", range(5))
def test_orthonormal_closed_form(seed):
    X = orthonormal(40, 5, seed)
    rng = np.random.default_rng(100 + seed)
    y = rng.normal(size=40)
    w = rng.uniform(0.2, 2.0, 5)
    lam = 0.5
    expect = [lasso2.soft_threshold(z, lam * wj) for z, wj in zip(X.T @ y, w)]
    np.testing.assert_allclose(lasso2.weighted_lasso(X, y, lam, w), expect, rtol=0, atol=1e-8)


def test_zero_weight_column_unshrunk():
    X = orthonormal(20, 4, 3)
    y = np.random.default_rng(3).normal(size=20)
    beta = lasso2.weighted_lasso(X, y, 1e3, np.array([0.0, 1.0, 1.0, 1.0]))
    assert beta[0] == pytest.approx(X[:, 0] @ y, abs=1e-10)
    assert np.all(beta[1:] == 0)


@pytest.mark.parametrize("seed", range(10))
def test_kkt_holds(seed):
    rng = np.random.default_rng(seed)
    n, p = rng.integers(10, 40), rng.integers(3, 60)
    X = rng.normal(size=(n, p))
    y = X[:, 0] - 2 * X[:, 1 % p] + rng.normal(size=n)
    w = rng.uniform(0, 3, p)
    w[rng.random(p) < 0.1] = 0.0
    lam = rng.uniform(0.05, 0.8) * np.max(np.abs(X.T @ y))
    beta = lasso2.weighted_lasso(X, y, lam, w)
    assert lasso2.kkt_violation(X, y, beta, lam, w) <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_matches_plain_coordinate_descent(seed):
    rng = np.random.default_rng(1000 + seed)
    n, p = 50, 12
    X = rng.normal(size=(n, p))
    y = X @ (rng.normal(size=p) * (rng.random(p) < 0.4)) + rng.normal(size=n)
    lam = 0.2 * np.max(np.abs(X.T @ y))
    np.testing.assert_allclose(lasso2.weighted_lasso(X, y, lam), plain_lasso(X, y, lam),
                               rtol=0, atol=1e-8)


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_penalty_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(25, 5)), rng.normal(size=25)
    w = rng.uniform(0.1, 2.0, 5)
    lam = 0.3 * np.max(np.abs(X.T @ y) / w)
    a = lasso2.weighted_lasso(X, y, lam, w)
    b = lasso2.weighted_lasso(X, y, lam / c, w * c)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)


def test_lasso_input_errors():
    X, y = np.ones((4, 2)), np.ones(4)
    with pytest.raises(ShapeError):
        lasso2.weighted_lasso(X, np.ones(3), 1.0)
    with pytest.raises(DomainError):
        lasso2.weighted_lasso(X, y, -1.0)
    with pytest.raises(DomainError):
        lasso2.weighted_lasso(X, y, 1.0, np.array([1.0, -1.0]))
    with pytest.raises(ShapeError):
        lasso2.weighted_lasso(X, y, 1.0, np.ones(3))


@pytest.mark.skipif(len(_backend.available()) < 2, reason="compiled kernels not built")
def test_backends_agree():
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(40, 15)), rng.normal(size=40)
    w = rng.uniform(0, 2, 15)
    lam = 0.1 * np.max(np.abs(X.T @ y))
    a, b = (lasso2.weighted_lasso(X, y, lam, w, backend=name) for name in _backend.available())
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# --------------------------------------------------------------------------
# standardization and lambda grid

def test_standardize_constant_column_maps_to_zero():
    X = np.c_[np.arange(5.0), np.full(5, 3.0)]
    Z, mean, sd = lasso2.standardize(X)
    assert np.all(Z[:, 1] == 0)
    np.testing.assert_allclose(Z[:, 0].std(), 1.0)


def test_lambda_grid_shape():
    g = lasso2.lambda_grid(10.0)
    assert g.size == 100 and g[0] == 10.0 and g[-1] == pytest.approx(1e-2)
    assert np.all(np.diff(g) < 0)


def test_lambda_max_zeroes_penalized_columns():
    rng = np.random.default_rng(2)
    Z, _, _ = lasso2.standardize(rng.normal(size=(30, 5)))
    yc = rng.normal(size=30)
    yc -= yc.mean()
    w = np.array([0.0, 1.0, 2.0, 1.0, 0.5])
    lam = lasso2.lambda_max(Z, yc, w)
    beta = lasso2.weighted_lasso(Z, yc, lam * 1.0001, w)
    assert np.all(beta[1:] == 0) and beta[0] != 0
    beta = lasso2.weighted_lasso(Z, yc, lam * 0.95, w)
    assert np.any(beta[1:] != 0)


# --------------------------------------------------------------------------
# cross-validation

def test_cv_needs_enough_rows():
    with pytest.raises(ContractError):
        lasso2.cv_lambda(np.ones((5, 2)), np.ones(5), np.ones(2), folds=6)


def test_cv_deterministic():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(40, 6)), rng.normal(size=40)
    assert lasso2.cv_lambda(X, y, np.ones(6), seed=3) == lasso2.cv_lambda(X, y, np.ones(6), seed=3)


def test_cv_pure_noise_prefers_sparse_model():
    # min-MSE CV admits a few noise columns in roughly a quarter of null draws,
    # so the sparse fraction is checked at the simulated level, not at 90%
    sparse, ratios = 0, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X, y = rng.normal(size=(100, 10)), rng.normal(size=100)
        lam, curve = lasso2.cv_lambda(X, y, np.ones(10), seed=seed, return_curve=True)
        beta, *_ = lasso2._fit_rows(X, y, np.arange(100), lam, np.ones(10))
        sparse += np.count_nonzero(beta) <= 1
        ratios.append(lam / curve.lambdas[0])
    assert np.median(ratios) >= 0.8
    assert sparse >= 14


def test_cv_selects_dominant_predictor():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 10))
    y = 10 * X[:, 3] + rng.normal(size=60)
    lam, curve = lasso2.cv_lambda(X, y, np.ones(10), return_curve=True)
    beta, *_ = lasso2._fit_rows(X, y, np.arange(60), lam, np.ones(10))
    assert beta[3] != 0
    assert curve.mse.shape == (6, 100) and curve.best == lam


def test_every_internal_fit_satisfies_kkt(monkeypatch):
    worst = []
    original = lasso2.weighted_lasso

    def checked(X, y, lam, w=None, **kw):
        beta = original(X, y, lam, w, **kw)
        worst.append(lasso2.kkt_violation(X, y, beta, lam, np.ones(X.shape[1]) if w is None else w))
        return beta

    monkeypatch.setattr(lasso2, "weighted_lasso", checked)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 8))
    y = X[:, 0] + rng.normal(size=40)
    lam = lasso2.cv_lambda(X, y, np.ones(8))
    lasso2.vif_resample(X, y, np.ones(8), lam, R=20)
    assert len(worst) == 620 and max(worst) <= 1e-6


# --------------------------------------------------------------------------
# resampled inclusion frequencies

def test_zero_column_never_selected():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4))
    X[:, 2] = 0.0
    y = X @ np.array([1.0, 1.0, 5.0, 1.0]) + rng.normal(size=50)
    vif = lasso2.vif_resample(X, y, np.ones(4), 0.1, R=50)
    assert vif[2] == 0.0


def test_exact_column_always_selected():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 10))
    y = (X[:, 4] - X[:, 4].mean()) / X[:, 4].std()
    lam = lasso2.cv_lambda(X, y, np.ones(10))
    vif = lasso2.vif_resample(X, y, np.ones(10), lam, R=200)
    assert vif[4] == 1.0


def test_single_resample_is_binary():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(30, 6)), rng.normal(size=30)
    vif = lasso2.vif_resample(X, y, np.ones(6), 2.0, R=1)
    assert set(vif.tolist()) <= {0.0, 1.0}


def test_vif_contract():
    with pytest.raises(ContractError):
        lasso2.vif_resample(np.ones((5, 2)), np.ones(5), np.ones(2), 1.0, m=0.0)
    with pytest.raises(ContractError):
        lasso2.vif_resample(np.ones((5, 2)), np.ones(5), np.ones(2), 1.0, R=0)


def test_vif_monotone_in_signal():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(60, 10))
    noise = rng.normal(size=60)
    vifs = []
    for b in (0.05, 0.1, 0.2, 0.4, 0.8):
        y = b * X[:, 0] + noise
        vifs.append(lasso2.vif_resample(X, y, np.ones(10), 8.0, R=200, seed=1)[0])
    assert all(a <= b for a, b in zip(vifs, vifs[1:]))
    assert vifs[0] < vifs[-1]


# --------------------------------------------------------------------------
# stage-2 weights and the two-stage protocol

def test_stage2_weights_examples():
    w = lasso2.stage2_weights([1.0, np.exp(-1.0), 0.0], 2)
    assert w[0] == 0.0 and not np.signbit(w[0])
    assert w[1] == pytest.approx(1.0)
    assert w[2] == pytest.approx(-np.log(1e-3)) and w[2] == pytest.approx(6.908, abs=1e-3)
    assert list(w[3:]) == [1.0, 1.0]


def test_stage2_weights_domain():
    with pytest.raises(DomainError):
        lasso2.stage2_weights([1.2], 1)
    with pytest.raises(DomainError):
        lasso2.stage2_weights([-0.1], 1)


def planted(n=80, v=12, seed=0, b1_driver=True):
    rng = np.random.default_rng(seed)
    b0 = rng.normal(size=(n, v))
    b1 = 0.7 * b0 + np.sqrt(0.51) * rng.normal(size=(n, v))
    y1 = 0.5 * b0[:, 0] - 0.5 * b0[:, 1] + 0.3 * rng.normal(size=n)
    y2 = y1 + (0.6 * (b1[:, 5] - 0.7 * b0[:, 5]) / np.sqrt(0.51) if b1_driver else 0.0)
    return b0, b1, y1, y2


def test_alignment_error():
    b0 = {i: np.zeros(3) for i in range(10)}
    y = {i: 0.0 for i in range(9)}
    with pytest.raises(AlignmentError):
        lasso2.two_stage_select(b0, b0, y, y, R=5)
    with pytest.raises(AlignmentError):
        lasso2.two_stage_select(np.zeros((10, 3)), np.zeros((10, 3)), np.zeros(9), np.zeros(10), R=5)


def test_two_stage_finds_b1_driver():
    b0, b1, y1, y2 = planted()
    rep1, rep2 = lasso2.two_stage_select(b0, b1, y1, y2, R=200, seed=1)
    assert rep1.vif_of("B0:c00") > 0.9 and rep1.vif_of("B0:c01") > 0.9
    assert rep2.vif_of("B1:c05") > 0.9
    assert rep2.stage == "sp2" and len(rep2.columns) == 24
    w = dict(zip(rep2.columns, rep2.weights))
    assert w["B0:c00"] == (0.0 if rep1.vif_of("B0:c00") == 1.0 else w["B0:c00"])


def test_degenerate_repeat_battery_prefers_b0():
    b0, _, y1, _ = planted()
    rep1, rep2 = lasso2.two_stage_select(b0, b0, y1, y1, R=100, seed=2)
    for j in (0, 1):
        assert rep1.vif[j] == 1.0
        assert rep2.vif_of(f"B0:c{j:02d}") == 1.0
        assert rep2.vif_of(f"B1:c{j:02d}") < rep2.vif_of(f"B0:c{j:02d}")


def test_autoregressive_column():
    b0, b1, y1, _ = planted(b1_driver=False)
    _, plain = lasso2.two_stage_select(b0, b1, y1, y1, R=100, seed=3)
    _, ar = lasso2.two_stage_select(b0, b1, y1, y1, autoregressive=True, R=100, seed=3)
    assert ar.stage == "sp2-ar" and ar.columns[-1] == "ar:eta2_sp1" and ar.tags[-1] == "AR"
    assert ar.vif[-1] == 1.0
    assert np.all(ar.vif[12:24] <= plain.vif[12:24] + 0.05)


def test_mapping_inputs_report_respondents():
    b0, b1, y1, y2 = planted(n=40)
    ids = list(range(100, 140))
    B0 = dict(zip(ids, b0))
    B1 = {i: b1[k] for k, i in enumerate(ids) if k % 2 == 0}
    Y1 = dict(zip(ids, y1))
    Y2 = dict(zip(ids, y2))
    rep1, rep2 = lasso2.two_stage_select(B0, B1, Y1, Y2, R=10)
    assert rep1.respondents == ids and rep2.respondents == ids[::2]
    assert len(rep1.rows()) == 12
