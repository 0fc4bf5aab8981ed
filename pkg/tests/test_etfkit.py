import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nctrojan import numkit as nk
from nctrojan.errors import DimensionError
from nctrojan.etfkit import (construct_etf, etf_from_frame, etf_gram, ideal_gram, install_and_freeze,
                             random_partial_orthogonal)
from nctrojan.model import HEAD_B, HEAD_W, Model, mlp_layers
from nctrojan.rng import RngStream


def assert_etf(W, K, tol=1e-6):
    W = np.asarray(W, np.float64)
    norms = np.linalg.norm(W, axis=1)
    assert np.abs(norms - 1).max() <= tol
    cos = (W @ W.T) / np.outer(norms, norms)
    assert np.abs(cos[~np.eye(K, dtype=bool)] + 1 / (K - 1)).max() <= tol
    assert np.abs(etf_gram(W) - ideal_gram(K)).max() <= tol


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(0, 48), st.integers(0, 2**32))
def test_invariants(K, extra, seed):
    m = K + extra
    head = construct_etf(K, m, RngStream(seed, "etf"))
    assert head.W_etf.shape == (K, m)
    assert np.abs(head.P.T @ head.P - np.eye(K)).max() <= 1e-6
    assert_etf(head.W_etf, K)


def test_one_by_one_frame():
    P = random_partial_orthogonal(1, 1, RngStream(0, "etf"))
    assert P.tolist() == [[1.0]]


def test_orthonormal_32_by_4():
    P = random_partial_orthogonal(32, 4, RngStream(9, "etf"))
    assert np.abs(P.T @ P - np.eye(4)).max() <= 1e-6


def test_seed_behaviour():
    same = random_partial_orthogonal(16, 4, RngStream(1, "etf"))
    assert np.array_equal(same, random_partial_orthogonal(16, 4, RngStream(1, "etf")))
    far = sum(np.linalg.norm(random_partial_orthogonal(16, 4, RngStream(s, "etf"))
                             - random_partial_orthogonal(16, 4, RngStream(s + 1000, "etf"))) > 0.1
              for s in range(100))
    assert far >= 99


def test_two_class_identity_frame():
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(etf_from_frame(np.eye(2)), [[h, -h], [-h, h]], atol=1e-15)


def test_ten_class_off_diagonal():
    W = construct_etf(10, 32, RngStream(0, "etf")).W_etf
    g = etf_gram(W)
    assert np.abs(g[~np.eye(10, dtype=bool)] + 1 / 9).max() <= 1e-6


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        construct_etf(4, 3, RngStream(0, "etf"))
    with pytest.raises(ValueError):
        construct_etf(1, 4, RngStream(0, "etf"))


def small_model(K=4, m=8):
    return Model.build(mlp_layers((1, 4, 4), 16, m), (1, 4, 4), K, RngStream(0, "init"))


class TestInstall:
    def test_frozen_head_survives_sgd(self):
        model = small_model()
        install_and_freeze(model, construct_etf(4, 8, RngStream(0, "etf")))
        before = model.state()
        x = np.random.default_rng(0).random((6, 1, 4, 4)).astype(np.float32)
        nk.softmax_cross_entropy(model.forward(x), [0, 1, 2, 3, 0, 1]).backward()
        nk.sgd_step(model.params, 0.1, 0.9, 5e-4)
        after = model.state()
        assert np.array_equal(before[HEAD_W], after[HEAD_W])
        assert np.array_equal(before[HEAD_B], after[HEAD_B])
        assert not np.array_equal(before["feat.1.weight"], after["feat.1.weight"])

    def test_extractor_untouched(self):
        model = small_model()
        before = model.state()
        install_and_freeze(model, construct_etf(4, 8, RngStream(0, "etf")))
        after = model.state()
        for name in before:
            if not name.startswith("head."):
                assert np.array_equal(before[name], after[name])

    def test_logits_are_etf_times_features(self):
        model = small_model()
        head = construct_etf(4, 8, RngStream(0, "etf"))
        install_and_freeze(model, head)
        x = np.random.default_rng(1).random((5, 1, 4, 4)).astype(np.float32)
        feats = model.embed(x).astype(np.float64)
        want = feats @ head.W_etf.astype(np.float64).T
        assert np.array_equal(model.logits(x), want)

    def test_idempotent(self):
        model = small_model()
        head = construct_etf(4, 8, RngStream(0, "etf"))
        install_and_freeze(model, head)
        once = model.state()
        install_and_freeze(model, head)
        assert all(np.array_equal(once[k], v) for k, v in model.state().items())
        assert model.params.is_frozen(HEAD_W) and model.params.is_frozen(HEAD_B)
        assert model.etf_seed == {"master_seed": 0, "label": "etf"}

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            install_and_freeze(small_model(), construct_etf(3, 8, RngStream(0, "etf")))
