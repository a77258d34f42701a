"""Quick built-in checks behind ``cpgan selftest``: a small slice of the test
suite that needs nothing beyond the installed package."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import oracles
from . import tensor as T
from .gradcheck import grad_check
from .losses import DamsmGammas, damsm_loss, discriminator_hinge, region_context
from .tensor import Tensor


def _grad_ops():
    rng = np.random.default_rng(0)
    worst = 0.0
    with T.precision("float64"):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        proj = Tensor(rng.standard_normal((2, 4, 3, 3)))
        cases = [
            (lambda: T.sum_(T.conv2d(x, w, stride=2, padding=1) * proj), [x, w]),
            (lambda: T.sum_(T.softmax(T.reshape(x, (6, 25)), axis=1) * T.reshape(T.tanh(x), (6, 25))), [x]),
            (lambda: T.sum_(T.logsumexp(T.reshape(x, (6, 25)), axis=1)), [x]),
        ]
        for f, params in cases:
            rep = grad_check(f, params)
            if not rep.passed:
                return False, str(rep)
            worst = max(worst, max(rep.max_rel_error))
    return True, f"max rel err {worst:.1e}"


def _damsm_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    with T.precision("float64"):
        for _ in range(20):
            M, d, R = rng.integers(1, 4), 4, rng.integers(1, 6)
            lens = rng.integers(1, 4, size=M)
            t_max = int(lens.max())
            W = rng.standard_normal((M, d, t_max))
            mask = np.arange(t_max)[None, :] < lens[:, None]
            W *= mask[:, None, :]
            s, V, f = rng.standard_normal((M, d)), rng.standard_normal((M, d, R)), rng.standard_normal((M, d))
            got = damsm_loss(Tensor(W), Tensor(s), Tensor(V), Tensor(f), DamsmGammas(), mask)
            want = oracles.damsm_loss([W[m, :, : lens[m]].tolist() for m in range(M)], s.tolist(),
                                      [v.tolist() for v in V], f.tolist())
            worst = max(worst, abs(got[0].item() - want[0]), abs(got[1].item() - want[1]))
            c = region_context(Tensor(W[0, :, : lens[0]]), Tensor(V[0]), 4.0).data
            ref = np.array(oracles.region_context(W[0, :, : lens[0]].tolist(), V[0].tolist(), 4.0))
            worst = max(worst, float(np.abs(c - ref).max()))
    return worst <= 1e-10, f"max abs diff {worst:.1e}"


def _hinge():
    with T.precision("float64"):
        z = Tensor(np.zeros(4))
        zero = discriminator_hinge(z, z, z, z, z).item()
        ok = Tensor(np.full(4, 2.0))
        bad = Tensor(np.full(4, -2.0))
        sat = discriminator_hinge(ok, bad, ok, bad, bad).item()
    return zero == 2.0 and sat == 0.0, f"zero logits -> {zero!r}, separated -> {sat!r}"


def _softmax_sums():
    rng = np.random.default_rng(2)
    worst = 0.0
    for mode in ("float32", "float64"):
        with T.precision(mode):
            x = Tensor(rng.standard_normal((500, 7)) * 10)
            mask = rng.random((500, 7)) < 0.7
            mask[:, 0] = True
            for m in (None, mask):
                worst = max(worst, float(np.abs(T.softmax(x, axis=1, mask=m).data.sum(axis=1) - 1).max()))
    return worst <= 1e-6, f"max |sum - 1| {worst:.1e}"


def _detector():
    from .evaluate import BlobDetector, calibrate

    cal = calibrate(BlobDetector(), n_scenes=200)
    return cal.passed, f"min recall {min(cal.recall.values()):.3f}, precision {cal.precision:.3f}"


def _checkpoint():
    from .train import load_checkpoint, save_checkpoint

    rng = np.random.default_rng(3)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": np.zeros(0, np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.cpgc"
        save_checkpoint(path, tensors, b"meta")
        back, blob = load_checkpoint(path)
    same = blob == b"meta" and all(np.array_equal(tensors[k], back[k]) and tensors[k].shape == back[k].shape for k in tensors)
    return same, "bitwise round trip" if same else "mismatch"


CHECKS = (
    ("grad_check primitives", _grad_ops),
    ("matching loss vs scalar oracle", _damsm_oracle),
    ("hinge algebra", _hinge),
    ("softmax normalisation", _softmax_sums),
    ("blob detector calibration", _detector),
    ("checkpoint round trip", _checkpoint),
)


def run_all() -> list:
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            ok, detail = False, f"error: {exc}"
        out.append((name, bool(ok), detail))
    return out
