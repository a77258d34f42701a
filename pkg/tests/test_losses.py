import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpgan import oracles
from cpgan import tensor as T
from cpgan.gradcheck import grad_check
from cpgan.losses import (
    DamsmGammas, damsm_loss, discriminator_hinge, generator_hinge, image_text_score,
    matching_loss, pair_scores, posteriors, region_context, sentence_scores, tiscl,
)
from cpgan.tensor import Tensor

from damsm_instances import random_instance, unpadded
import e2e_cases
from kinks import smooth_seed


def test_damsm_matches_scalar_oracle(f64):
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(200):
        inst = random_instance(rng)
        lw, ls, total = damsm_loss(Tensor(inst["W"]), Tensor(inst["s"]), Tensor(inst["V"]), Tensor(inst["f"]),
                                   word_mask=inst["word_mask"])
        want = oracles.damsm_loss(*unpadded(inst))
        worst = max(worst, abs(lw.item() - want[0]), abs(ls.item() - want[1]))
        assert total.item() == lw.item() + ls.item()
    assert worst <= 1e-10


def test_region_context_and_score_match_oracle(f64, rng):
    for _ in range(50):
        T_, R = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        W, V = rng.standard_normal((4, T_)), rng.standard_normal((4, R))
        c = region_context(Tensor(W), Tensor(V), 4.0).data
        ref = oracles.region_context(W.tolist(), V.tolist(), 4.0)
        np.testing.assert_allclose(c, ref, atol=1e-10, rtol=0)
        score = image_text_score(Tensor(c), Tensor(W), 5.0).item()
        assert abs(score - oracles.image_text_score(ref, W.tolist(), 5.0)) <= 1e-10


def test_masked_regions_are_ignored(f64, rng):
    W, V = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    mask = np.array([True, False, True, True, False])
    c = region_context(Tensor(W), Tensor(V), 4.0, region_mask=mask).data
    ref = oracles.region_context(W.tolist(), V[:, mask].tolist(), 4.0)
    np.testing.assert_allclose(c, ref, atol=1e-12)


def test_score_matrix_orientation(f64, rng):
    inst = random_instance(np.random.default_rng(3), m_max=3)
    while len(inst["lens"]) < 3:
        inst = random_instance(rng, m_max=3)
    S = pair_scores(Tensor(inst["W"]), Tensor(inst["V"]), DamsmGammas(), inst["word_mask"]).data
    Ws, _, Vs, _ = unpadded(inst)
    for i in range(3):
        for j in range(3):
            assert abs(S[i, j] - oracles.pair_score(Ws[j], Vs[i], 4.0, 5.0)) <= 1e-10


def test_single_pair_loss_is_zero(f64, rng):
    inst = random_instance(rng, m_max=1)
    _, _, total = damsm_loss(Tensor(inst["W"]), Tensor(inst["s"]), Tensor(inst["V"]), Tensor(inst["f"]),
                             word_mask=inst["word_mask"])
    assert total.item() == 0.0


@pytest.mark.parametrize("M", [1, 2, 3, 7])
def test_equal_scores_give_uniform_loss(f64, M):
    loss = matching_loss(Tensor(np.full((M, M), 0.3)), 10.0).item()
    assert loss == pytest.approx(2 * M * math.log(M), abs=1e-12)


def test_identical_pairs_give_uniform_loss(f64, rng):
    # every caption and image the same: all scores equal
    W = np.repeat(rng.standard_normal((1, 4, 2)), 3, axis=0)
    V = np.repeat(rng.standard_normal((1, 4, 5)), 3, axis=0)
    s = np.repeat(rng.standard_normal((1, 4)), 3, axis=0)
    lw, ls, _ = damsm_loss(Tensor(W), Tensor(s), Tensor(V), Tensor(s))
    assert lw.item() == pytest.approx(6 * math.log(3), abs=1e-9)
    assert ls.item() == pytest.approx(6 * math.log(3), abs=1e-9)


def test_posterior_groups_sum_to_one(f64, rng):
    p_d, p_i = posteriors(Tensor(rng.standard_normal((5, 5))), 10.0)
    np.testing.assert_allclose(p_d.data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p_i.data.sum(axis=0), 1.0, atol=1e-12)


def test_sentence_scores_are_cosines(f64, rng):
    f, s = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    S = sentence_scores(Tensor(f), Tensor(s)).data
    ref = f @ s.T / np.outer(np.linalg.norm(f, axis=1), np.linalg.norm(s, axis=1))
    np.testing.assert_allclose(S, ref, atol=1e-12)


def test_zero_norm_word_scores_as_cosine_zero(f64):
    W = np.zeros((3, 2))
    W[:, 0] = [1.0, 0.0, 0.0]
    c = np.ones((3, 2))
    score = image_text_score(Tensor(c), Tensor(W), 5.0).item()
    want = math.log(math.exp(5 / math.sqrt(3)) + 1.0) / 5
    assert score == pytest.approx(want, abs=1e-12)


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        DamsmGammas(gamma1=0.0)
    with pytest.raises(ValueError):
        region_context(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))), 4.0)
    with pytest.raises(ValueError):
        damsm_loss(Tensor(np.ones((0, 3, 2))), Tensor(np.ones((0, 3))), Tensor(np.ones((0, 3, 2))), Tensor(np.ones((0, 3))))
    with pytest.raises(ValueError):
        generator_hinge([Tensor(np.ones(2))], [])


def test_hinge_exact_values(f64):
    z = Tensor(np.zeros(5))
    assert discriminator_hinge(z, z, z, z, z).item() == 2.0
    hi, lo = Tensor(np.array([1.0, 3.0])), Tensor(np.array([-1.0, -7.0]))
    assert discriminator_hinge(hi, lo, hi, lo, lo).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=5, max_size=5))
def test_hinge_matches_oracle(vals):
    with T.precision("float64"):
        xs = [Tensor(np.array([v, -v * 0.5])) for v in vals]
        got = discriminator_hinge(*xs).item()
    want = oracles.discriminator_hinge(*[x.data.tolist() for x in xs])
    assert got == pytest.approx(want, abs=1e-14)


def test_generator_hinge_linear_form(f64, rng):
    uc = [Tensor(rng.standard_normal(4)) for _ in range(3)]
    c = [Tensor(rng.standard_normal(4)) for _ in range(3)]
    got = generator_hinge(uc, c).item()
    want = sum(-0.5 * a.data.mean() - 0.5 * b.data.mean() for a, b in zip(uc, c))
    assert got == pytest.approx(want, abs=1e-14)
    twice = generator_hinge([a * 2.0 for a in uc], [b * 2.0 for b in c]).item()
    assert twice == pytest.approx(2 * got, abs=1e-13)


def test_damsm_pipeline_gradcheck(f64):
    _, f, params = smooth_seed(e2e_cases.damsm)
    rep = grad_check(f, params)
    assert rep.passed, rep


def test_damsm_gradcheck(f64, rng):
    inst = random_instance(rng, m_max=3, r_max=4)
    W = Tensor(inst["W"], requires_grad=True)
    s, V, f = (Tensor(inst[k], requires_grad=True) for k in ("s", "V", "f"))
    mask = inst["word_mask"]
    rep = grad_check(lambda: damsm_loss(W, s, V, f, word_mask=mask)[2], [s, V, f])
    assert rep.passed, rep


def test_tiscl_gradcheck_reaches_pixels(f64):
    _, f, params = smooth_seed(e2e_cases.tiscl_loss)
    rep = grad_check(f, params)
    assert rep.passed, rep
    assert np.abs(params[0].grad).sum() > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_region_context_in_hull_of_regions(seed):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        V = rng.standard_normal((4, int(rng.integers(1, 6))))
        c = region_context(Tensor(rng.standard_normal((4, 3))), Tensor(V), 4.0).data
    assert (c >= V.min(axis=1, keepdims=True) - 1e-12).all()
    assert (c <= V.max(axis=1, keepdims=True) + 1e-12).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_posteriors_open_interval_and_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        inst = random_instance(rng, m_max=4)
        lw, ls, _ = damsm_loss(Tensor(inst["W"]), Tensor(inst["s"]), Tensor(inst["V"]), Tensor(inst["f"]),
                               word_mask=inst["word_mask"])
        p_d, p_i = posteriors(Tensor(rng.uniform(-1, 1, (3, 3))), 10.0)
    assert lw.item() >= 0 and ls.item() >= 0
    for p in (p_d.data, p_i.data):
        assert (p > 0).all() and (p < 1).all()


def test_loss_shrinks_towards_zero_with_a_dominant_diagonal(f64):
    losses = [matching_loss(Tensor(np.eye(3) * sep), 10.0).item() for sep in (0.0, 1.0, 3.0, 50.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] >= 0 and losses[-1] < 1e-100


def test_image_text_score_is_monotone(f64, rng):
    W, c = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    base = image_text_score(Tensor(c), Tensor(W), 5.0).item()
    c2 = c.copy()
    c2[:, 1] = 0.5 * c2[:, 1] + 0.5 * W[:, 1] * np.linalg.norm(c[:, 1]) / np.linalg.norm(W[:, 1])
    assert np.dot(c2[:, 1], W[:, 1]) / np.linalg.norm(c2[:, 1]) > np.dot(c[:, 1], W[:, 1]) / np.linalg.norm(c[:, 1])
    assert image_text_score(Tensor(c2), Tensor(W), 5.0).item() > base


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=5, max_size=5))
def test_hinge_terms_nonnegative(vals):
    with T.precision("float64"):
        xs = [Tensor(np.array([v])) for v in vals]
        assert discriminator_hinge(*xs).item() >= 0
        for x in xs:
            assert T.relu(1.0 - x).item() >= 0 and T.relu(x + 1.0).item() >= 0
