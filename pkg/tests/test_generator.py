import hashlib

import numpy as np
import pytest

from cpgan import oracles
from cpgan import tensor as T
from cpgan.generator import Generator, ResBlock, word_attention
from cpgan.gradcheck import grad_check
from cpgan.tensor import Tensor

import e2e_cases
from kinks import smooth_seed


def test_word_attention_matches_oracle(f64, rng):
    W, C, Mp = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((4, 5))
    mask = np.array([[True, True, True], [True, True, False]])
    H, a = word_attention(Tensor(W), Tensor(C), Tensor(Mp), mask, return_weights=True)
    for b, t in ((0, 3), (1, 2)):
        w_hat = (Mp @ W[b, :, :t]).tolist()
        for y in range(3):
            for x in range(3):
                ctx, weights = oracles.attend(C[b, :, y, x].tolist(), w_hat)
                np.testing.assert_allclose(H.data[b, :, y, x], ctx, atol=1e-12)
                np.testing.assert_allclose(a.data[b, y * 3 + x, :t], weights, atol=1e-12)
    assert a.data[1, :, 2].max() == 0.0


def test_single_word_attention_copies_it(f64, rng):
    W, Mp = rng.standard_normal((1, 5, 1)), rng.standard_normal((4, 5))
    H = word_attention(Tensor(W), Tensor(rng.standard_normal((1, 4, 2, 2))), Tensor(Mp)).data
    np.testing.assert_allclose(H[0], np.broadcast_to((Mp @ W[0])[:, :, None], (4, 2, 2)), atol=1e-12)


def test_identical_words_give_uniform_weights(f64, rng):
    W = np.repeat(rng.standard_normal((1, 5, 1)), 4, axis=2)
    _, a = word_attention(Tensor(W), Tensor(rng.standard_normal((1, 3, 2, 2))), Tensor(rng.standard_normal((3, 5))),
                          return_weights=True)
    np.testing.assert_allclose(a.data, 0.25, atol=1e-12)


def test_word_attention_shape_mismatch(rng):
    with pytest.raises(ValueError):
        word_attention(Tensor(np.ones((1, 5, 2))), Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((4, 6))))


def _small(rng, n_stages=3):
    return Generator(4, 6, 5, 8, 2, rng, n_stages=n_stages)


def test_stage_shapes_and_tanh_range(f64, rng):
    g = _small(rng)
    z = Tensor(rng.standard_normal((2, 4)) * 3)
    out = g(z, Tensor(rng.standard_normal((2, 6))), Tensor(rng.standard_normal((2, 6, 3))),
            np.array([[True] * 3, [True, False, False]]))
    assert [im.shape for im in out.images] == [(2, 3, 8, 8), (2, 3, 16, 16), (2, 3, 32, 32)]
    assert [c.shape for c in out.features] == [(2, 5, 8, 8), (2, 5, 16, 16), (2, 5, 32, 32)]
    assert [a.shape for a in out.attention] == [(2, 64, 3), (2, 256, 3)]
    for im in out.images:
        assert np.abs(im.data).max() <= 1.0
    for a in out.attention:
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_weights_give_mid_gray(f64, rng):
    g = _small(rng)
    for p in g.parameters():
        p.data[...] = 0.0
    out = g(Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((1, 6))), Tensor(rng.standard_normal((1, 6, 2))))
    for im in out.images:
        np.testing.assert_array_equal(im.data, 0.0)


def test_zero_residual_branch_is_identity(f64, rng):
    block = ResBlock(3, rng)
    block.conv2.weight.data[...] = 0.0
    block.conv2.bias.data[...] = 0.0
    x = rng.standard_normal((1, 3, 4, 4))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_stage_index_checked(rng):
    g = _small(rng)
    with pytest.raises(ValueError):
        g.stage(0, Tensor(np.zeros((1, 5, 8, 8))), Tensor(np.zeros((1, 6, 2))), Tensor(np.zeros((1, 5, 8, 8))))
    with pytest.raises(ValueError):
        Generator(4, 6, 5, 12, 3, rng)


def test_golden_output_hash(f64):
    g = Generator(4, 6, 5, 8, 2, np.random.default_rng(42))
    rng = np.random.default_rng(43)
    out = g(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((2, 6))),
            Tensor(rng.standard_normal((2, 6, 3))))
    digest = hashlib.sha256(np.round(out.images[2].data, 6).tobytes()).hexdigest()[:16]
    assert digest == GOLDEN


GOLDEN = "8dfef693965f584b"  # frozen from the first run of this build


def test_generator_gradcheck_from_hinge(f64):
    _, f, params = smooth_seed(e2e_cases.generator)
    rep = grad_check(f, params)
    assert rep.passed, rep
