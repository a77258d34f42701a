import numpy as np
import pytest

from cpgan import oracles
from cpgan import tensor as T
from cpgan.gradcheck import grad_check
from cpgan.tensor import Tensor
from cpgan.text_encoder import MemoryBank, TextEncoder, build_memory

import memory_cases


@pytest.mark.parametrize("case", memory_cases.cases(), ids=lambda c: c[0])
def test_memory_hand_cases(case):
    _, samples, top_k, word, expect, count = case
    bank = build_memory(samples, memory_cases.feature_fn, memory_cases.salience_fn, top_k, 4, 2)
    assert bank.vectors[word].tolist() == expect
    assert bank.counts[word] == count


def test_memory_matches_scalar_oracle(rng):
    samples = []
    for n in range(12):
        toks = list(rng.integers(0, 5, size=rng.integers(1, 5)))
        nreg = int(rng.integers(1, 4))
        sal = {w: list(rng.dirichlet(np.ones(nreg))) for w in set(toks)}
        samples.append(memory_cases.FakeSample(toks, sal, rng.standard_normal((nreg, 3)).tolist()))
    bank = build_memory(samples, memory_cases.feature_fn, memory_cases.salience_fn, 4, 5, 3)
    for w in range(5):
        entries = [(n, s.salience[w], s.features) for n, s in enumerate(samples) if w in s.tokens]
        if entries:
            np.testing.assert_allclose(bank.vectors[w], oracles.memory_vector(entries, 4), rtol=1e-12)


def test_memory_empty_dataset_rejected():
    with pytest.raises(ValueError):
        build_memory([], memory_cases.feature_fn, memory_cases.salience_fn, 1, 3, 2)


def test_memory_file_round_trip(tmp_path, rng):
    bank = MemoryBank(rng.standard_normal((5, 3)).astype(np.float32), np.array([0, 1, 2, 3, 4]), 8)
    bank.save(tmp_path / "m.bin")
    back = MemoryBank.load(tmp_path / "m.bin")
    assert back.vectors.tobytes() == bank.vectors.tobytes()
    assert back.counts.tolist() == [0, 1, 2, 3, 4] and back.top_k == 8
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        MemoryBank.load(tmp_path / "bad.bin")
    (tmp_path / "ver.bin").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ValueError, match="version"):
        MemoryBank.load(tmp_path / "ver.bin")
    (tmp_path / "cut.bin").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        MemoryBank.load(tmp_path / "cut.bin")


def _encoder(rng, vocab=6, embed=3, mem=4, d=6):
    enc = TextEncoder(vocab, embed, mem, d, rng)
    enc.set_memory(MemoryBank(rng.standard_normal((vocab, mem)), np.ones(vocab), 2))
    return enc


def test_encoder_shapes_and_sentence_vector(f64, rng):
    enc = _encoder(rng)
    W, s, mask = enc([[1, 2, 3], [4, 5]])
    assert W.shape == (2, 6, 3) and s.shape == (2, 6)
    assert mask.tolist() == [[True, True, True], [True, True, False]]
    np.testing.assert_array_equal(W.data[1, :, 2], 0.0)
    np.testing.assert_array_equal(s.data[0], W.data[0, :, 2])
    np.testing.assert_array_equal(s.data[1], W.data[1, :, 1])


def test_padding_does_not_change_encoding(f64, rng):
    enc = _encoder(rng)
    W, s, _ = enc([[1, 2, 3, 0], [4, 5]])
    W1, s1 = enc.encode_text([4, 5])
    np.testing.assert_allclose(W.data[1, :, :2], W1.data, atol=1e-12)
    np.testing.assert_allclose(s.data[1], s1.data, atol=1e-12)


def test_fuse_concatenates_embedding_and_memory(f64, rng):
    enc = _encoder(rng)
    f = enc.fuse([2, 2, 5])
    assert f.shape == (3, 6)
    np.testing.assert_array_equal(f.data[:, :3], enc.E.data[:, [2, 2, 5]].T)
    np.testing.assert_allclose(f.data[:, 3:], enc.project_memory(enc.memory).data[[2, 2, 5]])


def test_gradient_reaches_embedding_and_projection_not_memory(f64, rng):
    enc = _encoder(rng)
    W, s, _ = enc([[1, 2]])
    T.sum_(s).backward()
    assert enc.E.grad is not None and np.abs(enc.E.grad[:, [1, 2]]).sum() > 0
    assert enc.p1.weight.grad is not None
    assert enc.memory.grad is None


def test_encoder_errors(rng):
    enc = _encoder(rng)
    with pytest.raises(ValueError):
        enc([[]])
    with pytest.raises(IndexError):
        enc([[6]])
    bare = TextEncoder(6, 3, 4, 6, rng)
    with pytest.raises(RuntimeError):
        bare([[1]])
    with pytest.raises(ValueError):
        bare.set_memory(MemoryBank(np.zeros((5, 4)), np.zeros(5), 1))


def test_encoder_gradcheck(f64, rng):
    enc = _encoder(rng, vocab=5, embed=2, mem=3, d=4)
    proj = Tensor(rng.standard_normal((2, 4, 3)))
    proj_s = Tensor(rng.standard_normal((2, 4)))

    def f():
        W, s, _ = enc([[1, 2, 3], [4, 0]])
        return T.sum_(W * proj) + T.sum_(s * proj_s)

    rep = grad_check(f, enc.parameters())
    assert rep.passed, rep


def _random_memory_samples(rng, n=10, vocab=4):
    samples = []
    for _ in range(n):
        toks = list(rng.integers(0, vocab, size=3))
        nreg = int(rng.integers(1, 4))
        sal = {w: list(rng.dirichlet(np.ones(nreg))) for w in set(toks)}
        samples.append(memory_cases.FakeSample(toks, sal, rng.standard_normal((nreg, 3)).tolist()))
    return samples


def test_memory_permutation_invariant_with_distinct_weights(rng):
    samples = _random_memory_samples(rng)
    a = build_memory(samples, memory_cases.feature_fn, memory_cases.salience_fn, 3, 4, 3)
    perm = rng.permutation(len(samples))
    b = build_memory([samples[k] for k in perm], memory_cases.feature_fn, memory_cases.salience_fn, 3, 4, 3)
    np.testing.assert_allclose(a.vectors, b.vectors, atol=1e-12)
    assert a.counts.tolist() == b.counts.tolist()


def test_memory_vectors_are_convex_combinations(rng):
    samples = _random_memory_samples(rng, n=15)
    bank = build_memory(samples, memory_cases.feature_fn, memory_cases.salience_fn, 4, 4, 3)
    allf = np.concatenate([np.asarray(s.features) for s in samples])
    for w in range(4):
        if bank.counts[w]:
            assert (bank.vectors[w] >= allf.min(axis=0) - 1e-12).all()
            assert (bank.vectors[w] <= allf.max(axis=0) + 1e-12).all()
