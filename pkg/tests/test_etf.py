import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eianet.errors import ContractError, DimensionError
from eianet.etf import EtfClassifier, build_etf, logits, predict, simplex_etf_matrix, validate_etf
from eianet.tensor import Tensor


def etf_with_rotation(U, scale=1.0):
    E = Tensor(simplex_etf_matrix(U))
    return EtfClassifier(E=E, K=U.shape[1], d=U.shape[0], seed=-1, logit_scale=scale)


def test_k2_identity_rotation_by_hand():
    c = etf_with_rotation(np.eye(2))
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(c.E.data, [[h, -h], [-h, h]], atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(c.E.data, axis=0), 1.0, atol=1e-15)
    assert abs(c.E.data[:, 0] @ c.E.data[:, 1] + 1.0) < 1e-15


def test_k2_analytic_deviations_below_1e15():
    report = validate_etf(etf_with_rotation(np.eye(2)), tolerance=0.0)
    assert report.max_norm_deviation < 1e-15
    assert report.max_offdiag_deviation < 1e-15
    assert report.passed == (report.max_norm_deviation == 0 and report.max_offdiag_deviation == 0)


def test_k3_offdiagonal_is_minus_half():
    E = build_etf(3, 8, seed=1).E.data
    G = E.T @ E
    off = G[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, -0.5, atol=1e-12)


def test_office_home_sized_build_validates():
    assert validate_etf(build_etf(65, 256, seed=0)).passed


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 24), st.integers(0, 2**31 - 1))
def test_gram_identity(K, extra, seed):
    d = K + extra
    E = build_etf(K, d, seed).E.data
    expected = K / (K - 1) * (np.eye(K) - np.ones((K, K)) / K)
    assert np.max(np.abs(E.T @ E - expected)) <= 1e-9


def test_fresh_build_passes():
    assert validate_etf(build_etf(10, 64, seed=3)).passed


def test_scaled_column_fails_with_norm_deviation_one():
    c = build_etf(4, 6, seed=2)
    E = c.E.data.copy()
    E[:, 1] *= 2.0
    report = validate_etf(EtfClassifier(Tensor(E), 4, 6, 2))
    assert not report.passed
    assert abs(report.max_norm_deviation - 1.0) < 1e-12


def test_deterministic_per_seed():
    assert build_etf(5, 9, 4).E.data.tobytes() == build_etf(5, 9, 4).E.data.tobytes()
    assert build_etf(5, 9, 4).E.data.tobytes() != build_etf(5, 9, 5).E.data.tobytes()


def test_build_rejects_bad_sizes():
    with pytest.raises(DimensionError):
        build_etf(10, 8, 0)
    with pytest.raises(ContractError):
        build_etf(1, 8, 0)


def test_classifier_is_frozen():
    c = build_etf(3, 4, 0)
    assert not c.E.requires_grad
    with pytest.raises(ValueError):
        c.E.data[0, 0] = 1.0


# -- logits / predict --------------------------------------------------------------------
def test_logits_at_prototype():
    c = build_etf(5, 7, seed=0, logit_scale=1.0)
    f = c.E.data.T  # row i is prototype i
    L = logits(c, f).data
    np.testing.assert_allclose(np.diag(L), 1.0, atol=1e-12)
    np.testing.assert_allclose(L[~np.eye(5, dtype=bool)], -1 / 4, atol=1e-12)


def test_logits_negated_prototype_k2():
    c = build_etf(2, 3, seed=0, logit_scale=1.0)
    L = logits(c, -c.E.data[:, :1].T).data
    np.testing.assert_allclose(L, [[-1.0, 1.0]], atol=1e-12)


def test_logit_scale_is_linear():
    base = build_etf(4, 6, seed=1, logit_scale=1.0)
    scaled = build_etf(4, 6, seed=1, logit_scale=16.0)
    f = np.random.default_rng(0).standard_normal((3, 6))
    np.testing.assert_array_equal(logits(scaled, f).data, 16.0 * logits(base, f).data)


def test_zero_feature_gives_zero_logits():
    c = build_etf(3, 4, seed=0)
    assert not logits(c, np.zeros((1, 4))).data.any()


def test_logits_gradient_flows_only_to_features():
    c = build_etf(3, 4, seed=0)
    f = Tensor(np.random.default_rng(1).standard_normal((2, 4)), requires_grad=True)
    logits(c, f).sum().backward()
    assert f.grad is not None and c.E.grad is None


def test_predict_prototype_returns_its_index():
    c = build_etf(6, 8, seed=3)
    np.testing.assert_array_equal(predict(c, c.E.data.T), np.arange(6))


def test_predict_third_prototype():
    c = build_etf(4, 4, seed=0)
    assert predict(c, c.E.data[:, 2][None])[0] == 2


def test_predict_tie_goes_to_lowest_index():
    c = build_etf(3, 5, seed=0)
    E = c.E.data
    # project a random vector onto the orthogonal complement of span(E)
    v = np.random.default_rng(0).standard_normal(5)
    Q, _ = np.linalg.qr(E)
    v = v - Q @ (Q.T @ v)
    assert np.max(np.abs(v @ E)) < 1e-12
    assert predict(c, v[None])[0] == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_predict_scale_invariant(scale, seed):
    c = build_etf(7, 9, seed=11)
    f = np.random.default_rng(seed).standard_normal((5, 9))
    np.testing.assert_array_equal(predict(c, f), predict(c, scale * f))
    np.testing.assert_array_equal(predict(c, f), predict(build_etf(7, 9, 11, logit_scale=3.0), f))
