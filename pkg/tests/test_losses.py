import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convse.errors import ConfigError, DegenerateRowError, NoNegativesError, ShapeError
from convse.losses import (LossConfig, LossKind, batch_loss, compute_loss, hardest_negatives, loss_cmn,
                           loss_cmn_tilde, loss_csn, loss_mh, loss_mvn, loss_sh, similarity_matrix)
from convse.model import NetworkConfig, init_network
from convse.numerics import make_rng
from gradcheck import ALL_KINDS, ALPHAS, TAUS, check_embedding_grads, random_instance
from oracles import naive_loss

S2 = np.array([[0.9, 0.5], [0.8, 0.9]])
S3 = np.array([[0.9, 0.5, 0.8], [0.2, 0.9, 0.1], [0.3, 0.4, 0.9]])


def cfg(kind, alpha=0.2, tau=0.1, **kw):
    return LossConfig(kind, alpha, tau, **kw)


# -- similarity and mining ---------------------------------------------------

def test_similarity_examples():
    q, _ = np.linalg.qr(make_rng(0).standard_normal((4, 4)))
    np.testing.assert_allclose(similarity_matrix(q, q).S, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(similarity_matrix(np.array([[3.0, 4.0]]), np.array([[4.0, 3.0]])).S,
                               [[0.96]], rtol=0, atol=1e-15)


def test_similarity_scale_invariance():
    rng = make_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    np.testing.assert_allclose(similarity_matrix(3.7 * a, b).S, similarity_matrix(a, b).S, atol=1e-14)


def test_similarity_zero_row_names_modality():
    with pytest.raises(DegenerateRowError, match="caption row 1"):
        similarity_matrix(np.ones((2, 3)), np.array([[1.0, 0, 0], [0, 0, 0]]))
    with pytest.raises(ShapeError):
        similarity_matrix(np.ones((2, 3)), np.ones((3, 3)))


def test_hardest_negatives_examples():
    hard = hardest_negatives(S3)
    assert hard.c_star.tolist() == [2, 0, 1]
    # column 1 is [.5, .9, .4]: excluding the diagonal, row 0 wins
    assert hard.i_star.tolist() == [2, 0, 0]
    hard = hardest_negatives(np.eye(4))
    assert hard.c_star.tolist() == [1, 0, 0, 0]
    assert hard.i_star.tolist() == [1, 0, 0, 0]
    hard = hardest_negatives(make_rng(2).random((2, 2)))
    assert hard.c_star.tolist() == [1, 0] and hard.i_star.tolist() == [1, 0]


def test_hardest_negatives_needs_two():
    with pytest.raises(NoNegativesError):
        hardest_negatives(np.ones((1, 1)))


def test_mining_scale_invariance():
    rng = make_rng(3)
    for _ in range(100):
        n, d = rng.integers(2, 10), rng.integers(2, 10)
        a, b = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        c = float(rng.uniform(0.01, 100.0))
        h1 = hardest_negatives(similarity_matrix(a, b))
        h2 = hardest_negatives(similarity_matrix(c * a, b))
        assert h1.c_star.tolist() == h2.c_star.tolist()
        assert h1.i_star.tolist() == h2.i_star.tolist()


# -- worked values -------------------------------------------------------------

def test_sh_examples():
    assert loss_sh(np.eye(5), cfg("SH")).value == 0.0
    assert loss_sh(S2, cfg("SH")).value == pytest.approx(0.1, abs=1e-12)
    dominated = np.array([[0.5, 0.1, 0.2], [0.3, 0.6, 0.0], [0.1, 0.2, 0.7]])
    assert loss_sh(dominated, cfg("SH", alpha=0.0)).value == 0.0


def test_mh_examples():
    assert loss_mh(S2, cfg("MH")).value == pytest.approx(0.1, abs=1e-12)
    assert loss_mh(np.eye(4), cfg("MH")).value == 0.0


def test_csn_examples():
    assert loss_csn(np.array([[0.3]]), cfg("CSN")).value == 0.0
    expected = 2 * math.log(1 + math.exp(-1))
    assert loss_csn(np.eye(2), cfg("CSN", tau=1.0)).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.6265, abs=1e-4)


def test_cmn_tilde_examples():
    assert loss_cmn_tilde(S2, cfg("CMN_TILDE")).value == pytest.approx(-5.0, abs=1e-12)
    assert loss_cmn_tilde(np.full((3, 3), 0.4), cfg("CMN_TILDE")).value == 0.0
    half = loss_cmn_tilde(S2, cfg("CMN_TILDE", tau=0.05)).value
    assert half == pytest.approx(-10.0, abs=1e-12)


def test_cmn_examples():
    out = loss_cmn(S2, cfg("CMN"))
    assert out.value == pytest.approx(1.0, abs=1e-12)
    assert loss_cmn(np.eye(3), cfg("CMN")).value == 0.0


def test_mvn_examples():
    assert loss_mvn(np.ones((1, 3)), np.ones((1, 3)), cfg("MVN")).value == 0.0
    # every pairwise cosine is zero: each anchor sees three equal logits
    z = np.eye(4)
    out = loss_mvn(z[:2], z[2:], cfg("MVN"))
    assert out.value == pytest.approx(2 * math.log(3), abs=1e-12)


def test_kind_mismatch_and_n1_rejected():
    with pytest.raises(ConfigError):
        loss_mh(S2, cfg("SH"))
    for fn, kind in [(loss_sh, "SH"), (loss_mh, "MH"), (loss_cmn, "CMN"), (loss_cmn_tilde, "CMN_TILDE")]:
        with pytest.raises(NoNegativesError):
            fn(np.ones((1, 1)), cfg(kind))


def test_config_validation_and_aliases():
    assert LossConfig("VSE++").kind is LossKind.MH
    assert LossConfig("convse++").kind is LossKind.CMN
    assert LossConfig("ConVSE").kind is LossKind.CSN
    with pytest.raises(ConfigError):
        LossConfig("triplet")
    with pytest.raises(ConfigError):
        LossConfig("CMN", margin=-0.1)
    with pytest.raises(ConfigError):
        LossConfig("CSN", temperature=0.0)


# -- properties ----------------------------------------------------------------

similarity_matrices = st.integers(2, 8).flatmap(
    lambda n: st.lists(st.lists(st.floats(-1, 1, allow_nan=False), min_size=n, max_size=n),
                       min_size=n, max_size=n)).map(np.array)


@settings(max_examples=200, deadline=None)
@given(similarity_matrices, st.sampled_from(ALPHAS), st.sampled_from(TAUS))
def test_nonnegative_kinds(S, alpha, tau):
    for fn, kind in [(loss_sh, "SH"), (loss_mh, "MH"), (loss_csn, "CSN"), (loss_cmn, "CMN")]:
        assert fn(S, cfg(kind, alpha, tau)).value >= 0.0


def test_mvn_nonnegative():
    rng = make_rng(4)
    for _ in range(200):
        n, d = rng.integers(1, 9), rng.integers(2, 9)
        out = loss_mvn(rng.standard_normal((n, d)), rng.standard_normal((n, d)),
                       cfg("MVN", tau=float(rng.choice(TAUS))))
        assert out.value >= 0.0


@settings(max_examples=200, deadline=None)
@given(similarity_matrices, st.sampled_from(ALPHAS), st.sampled_from(TAUS))
def test_cmn_times_tau_is_mh(S, alpha, tau):
    mh = loss_mh(S, cfg("MH", alpha, tau)).value
    cmn = loss_cmn(S, cfg("CMN", alpha, tau)).value
    assert abs(cmn * tau - mh) <= 1e-12 * max(1.0, abs(mh))


def test_mh_at_most_sh():
    rng = make_rng(5)
    for _ in range(300):
        n = rng.integers(2, 10)
        S = rng.uniform(-1, 1, (n, n))
        assert loss_mh(S, cfg("MH")).value <= loss_sh(S, cfg("SH")).value + 1e-15


@settings(max_examples=200, deadline=None)
@given(similarity_matrices, st.sampled_from(["SH", "MH", "CSN", "CMN", "CMN_TILDE"]))
def test_transpose_symmetry(S, kind):
    fn = {"SH": loss_sh, "MH": loss_mh, "CSN": loss_csn, "CMN": loss_cmn, "CMN_TILDE": loss_cmn_tilde}[kind]
    c = cfg(kind)
    assert fn(S.T, c).value == pytest.approx(fn(S, c).value, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(similarity_matrices, st.floats(-50, 50), st.sampled_from(TAUS))
def test_csn_shift_invariance(S, shift, tau):
    c = cfg("CSN", tau=tau)
    assert loss_csn(S + shift, c).value == pytest.approx(loss_csn(S, c).value, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_batched_matches_naive_loop(kind):
    rng = make_rng(6)
    for trial in range(60):
        n = int(rng.integers(1 if kind in ("CSN", "MVN") else 2, 9))
        d = int(rng.integers(2, 10))
        alpha, tau = float(rng.choice(ALPHAS)), float(rng.choice(TAUS))
        z_img, z_txt = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        got = compute_loss(z_img, z_txt, cfg(kind, alpha, tau)).value
        want = naive_loss(z_img, z_txt, kind, alpha, tau)
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want)), (trial, got, want)


def test_value_only_path_agrees():
    rng = make_rng(7)
    for kind in ALL_KINDS:
        z_img, z_txt = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        full = compute_loss(z_img, z_txt, cfg(kind))
        fast = compute_loss(z_img, z_txt, cfg(kind), need_grad=False)
        assert full.value == fast.value
        assert fast.grad_ZI is None


# -- gradients -------------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_KINDS)
def test_embedding_gradients_match_finite_differences(kind):
    rng = make_rng(200 + ALL_KINDS.index(kind))
    for trial in range(12):
        tau, alpha = TAUS[trial % 4], ALPHAS[trial % 2]
        z_img, z_txt, c = random_instance(rng, kind, tau, alpha, n=int(rng.integers(2, 9)))
        assert check_embedding_grads(z_img, z_txt, c) <= 1.0, (trial, tau, alpha)


def test_inactive_hinges_give_zero_gradient():
    S = np.eye(3)
    for kind in ("SH", "MH", "CMN"):
        out = {"SH": loss_sh, "MH": loss_mh, "CMN": loss_cmn}[kind](S, cfg(kind))
        assert np.all(out.grad_S == 0.0)


# -- masking of same-image captions --------------------------------------------

def test_mask_same_image_removes_sibling_negatives():
    # captions 0 and 1 belong to the same image; unmasked they are each other's hardest negative
    S = np.array([[0.9, 0.85, 0.1], [0.85, 0.9, 0.1], [0.1, 0.1, 0.9]])
    groups = np.array([0, 0, 1])
    plain = loss_mh(S, cfg("MH"), groups)
    masked = loss_mh(S, cfg("MH", mask_same_image=True), groups)
    assert plain.value > 0.0
    assert masked.value == 0.0


def test_mask_same_image_naive_check():
    S = np.array([[0.9, 0.85, 0.3], [0.85, 0.9, 0.1], [0.2, 0.1, 0.9]])
    groups = [0, 0, 1]
    c = cfg("SH", mask_same_image=True)
    # only pairs with different groups contribute
    want = 0.0
    for i in range(3):
        for k in range(3):
            if groups[i] != groups[k]:
                want += max(0.0, 0.2 + S[i, k] - S[i, i]) + max(0.0, 0.2 + S[k, i] - S[i, i])
    assert loss_sh(S, c, groups).value == pytest.approx(want / 3, abs=1e-12)


# -- end-to-end batch loss -------------------------------------------------------

def test_batch_loss_is_deterministic_and_zero_when_separated():
    rng = make_rng(8)
    net = init_network(NetworkConfig(4, 4, base_dim=4), rng)
    net.image_base.W[:] = np.eye(4)
    net.text_base.W[:] = np.eye(4)
    x = np.eye(4)
    value, grads = batch_loss(net, x, x, cfg("CMN"))
    assert value == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())

    x_img, x_txt = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    v1, g1 = batch_loss(net, x_img, x_txt, cfg("CSN"))
    v2, g2 = batch_loss(net, x_img, x_txt, cfg("CSN"))
    assert v1 == v2
    for name in g1:
        assert g1[name].tobytes() == g2[name].tobytes()
