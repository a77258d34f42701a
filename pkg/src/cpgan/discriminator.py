"""Per-stage discriminators: an unconditional CNN and a patch-grid conditional
discriminator whose patches attend over the caption's words."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


def _log2(n: int) -> int:
    k = int(round(math.log2(n)))
    if 2**k != n:
        raise ValueError(f"{n} is not a power of two")
    return k


class UncondDiscriminator(Module):
    """``n_down`` stride-2 convs, flatten, FC to one raw logit."""

    def __init__(self, resolution: int, rng: np.random.Generator, widths: Sequence[int] = (16, 32, 64),
                 n_down: Optional[int] = None, slope: float = 0.2):
        n_down = _log2(resolution) if n_down is None else n_down
        if resolution % 2**n_down:
            raise ValueError(f"{n_down} downsamples do not divide resolution {resolution}")
        self.resolution = resolution
        chans = [3] + [widths[min(i, len(widths) - 1)] for i in range(n_down)]
        self.convs = [Conv2d(chans[i], chans[i + 1], 4, rng, stride=2, padding=1) for i in range(n_down)]
        side = resolution // 2**n_down
        self.fc = Linear(chans[-1] * side * side, 1, rng)
        self.slope = slope

    def __call__(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[2:] != (self.resolution, self.resolution):
            raise ValueError(f"expected (B, 3, {self.resolution}, {self.resolution}) images, got {images.shape}")
        h = images
        for conv in self.convs:
            h = T.leaky_relu(conv(h), self.slope)
        return T.reshape(self.fc(T.reshape(h, (h.shape[0], -1))), (h.shape[0],))


def patch_context(q: Tensor, W: Tensor, word_mask: Optional[np.ndarray] = None, return_weights: bool = False):
    """p_ij = sum_k a_k w_k with a = softmax_k(q_ijᵀ w_k).

    q is (B, d, N, N), W is (B, d, T); returns p with q's shape.
    """
    B, d, n, _ = q.shape
    if W.shape[:2] != (B, d):
        raise ValueError(f"patch_context: q {q.shape} and W {W.shape} disagree")
    qf = T.reshape(q, (B, d, n * n))
    logits = T.matmul(T.transpose(qf, (0, 2, 1)), W)  # (B, N², T)
    mask = None if word_mask is None else np.asarray(word_mask, bool)[:, None, :]
    a = T.softmax(logits, axis=-1, mask=mask)
    p = T.reshape(T.matmul(W, T.transpose(a, (0, 2, 1))), (B, d, n, n))
    return (p, a) if return_weights else p


class FineGrainedDiscriminator(Module):
    """Strided-conv trunk to a d x N x N grid, word attention per patch, an MLP
    scoring [p_ij; q_ij; s] per patch, and the mean patch score as the logit."""

    def __init__(self, resolution: int, d: int, grid: int, rng: np.random.Generator,
                 widths: Sequence[int] = (16, 32), hidden: int = 64, slope: float = 0.2):
        n_down = _log2(resolution // grid) if resolution > grid else 0
        if grid * 2**n_down != resolution:
            raise ValueError(f"grid {grid} does not divide resolution {resolution} by a power of two")
        self.resolution, self.d, self.grid = resolution, d, grid
        chans = [3] + [widths[min(i, len(widths) - 1)] for i in range(max(n_down - 1, 0))] + [d]
        if n_down == 0:
            self.trunk = [Conv2d(3, d, 3, rng)]
        else:
            self.trunk = [Conv2d(chans[i], chans[i + 1], 4, rng, stride=2, padding=1) for i in range(n_down)]
        self.head1 = Linear(3 * d, hidden, rng)
        self.head2 = Linear(hidden, 1, rng)
        self.slope = slope

    def features(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[2:] != (self.resolution, self.resolution):
            raise ValueError(f"expected (B, 3, {self.resolution}, {self.resolution}) images, got {images.shape}")
        h = images
        for i, conv in enumerate(self.trunk):
            h = conv(h)
            if i < len(self.trunk) - 1:
                h = T.leaky_relu(h, self.slope)
        return h

    def patch_scores(self, q: Tensor, W: Tensor, s: Tensor, word_mask=None) -> Tensor:
        """(B, N*N) per-patch scores from the trunk grid q."""
        B, d, n, _ = q.shape
        p = patch_context(q, W, word_mask)
        pf = T.transpose(T.reshape(p, (B, d, n * n)), (0, 2, 1))
        qf = T.transpose(T.reshape(q, (B, d, n * n)), (0, 2, 1))
        sf = T.expand(T.reshape(s, (B, 1, d)), (B, n * n, d))
        h = T.leaky_relu(self.head1(T.concat([pf, qf, sf], axis=2)), self.slope)
        return T.reshape(self.head2(h), (B, n * n))

    def score_features(self, q: Tensor, W: Tensor, s: Tensor, word_mask=None) -> Tensor:
        return T.mean(self.patch_scores(q, W, s, word_mask), axis=1)

    def __call__(self, images: Tensor, W: Tensor, s: Tensor, word_mask=None) -> Tensor:
        return self.score_features(self.features(images), W, s, word_mask)


class StageDiscriminators(Module):
    def __init__(self, resolutions: Sequence[int], d: int, grid: int, rng: np.random.Generator,
                 uc_widths=(16, 32, 64), fg_widths=(16, 32), hidden: int = 64):
        self.uncond = [UncondDiscriminator(r, rng, uc_widths) for r in resolutions]
        self.cond = [FineGrainedDiscriminator(r, d, min(grid, r), rng, fg_widths, hidden) for r in resolutions]
