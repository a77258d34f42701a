"""Coarse-to-fine generator chain.

G0 maps (z, s) to a low-resolution feature map C0; each refinement stage
attends from every pixel of the previous map to the projected word vectors,
concatenates the attended words H with the features, runs three residual
blocks, upsamples, and adds an upsampled 1x1 projection of C0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


def word_attention(W: Tensor, C: Tensor, M_p: Tensor, word_mask: Optional[np.ndarray] = None,
                   return_weights: bool = False):
    """Attend from each pixel of C (B, d̂, N, N) over words ŵ_k = M_p w_k.

    W is (B, d, T) and M_p is (d̂, d). Returns H (B, d̂, N, N), plus the
    (B, N*N, T) attention weights when ``return_weights``.
    """
    B, d, t_max = W.shape
    if M_p.shape[1] != d or C.shape[1] != M_p.shape[0] or C.shape[0] != B:
        raise ValueError(f"word_attention: W {W.shape}, C {C.shape}, M_p {M_p.shape}")
    d_hat, n = C.shape[1], C.shape[2]
    w_hat = T.transpose(T.linear(T.transpose(W, (0, 2, 1)), M_p), (0, 2, 1))  # (B, d̂, T)
    c_flat = T.reshape(C, (B, d_hat, n * n))
    logits = T.matmul(T.transpose(c_flat, (0, 2, 1)), w_hat)  # (B, N², T)
    mask = None if word_mask is None else np.asarray(word_mask, bool)[:, None, :]
    weights = T.softmax(logits, axis=-1, mask=mask)
    H = T.reshape(T.matmul(w_hat, T.transpose(weights, (0, 2, 1))), (B, d_hat, n, n))
    return (H, weights) if return_weights else H


class ResBlock(Module):
    """conv3x3 -> leaky-relu -> conv3x3, plus identity."""

    def __init__(self, ch: int, rng: np.random.Generator, slope: float = 0.2):
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.conv2 = Conv2d(ch, ch, 3, rng)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.leaky_relu(self.conv1(x), self.slope))


class UpBlock(Module):
    """Nearest 2x upsample -> conv3x3 -> leaky-relu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, slope: float = 0.2):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.conv(T.upsample2x(x)), self.slope)


class ImageHead(Module):
    def __init__(self, ch: int, rng: np.random.Generator):
        self.conv = Conv2d(ch, 3, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.tanh(self.conv(x))


class G0(Module):
    """FC -> reshape to (d̂, seed, seed) -> ``n_up`` upsample blocks -> C0."""

    def __init__(self, n_z: int, d: int, d_hat: int, seed_size: int, n_up: int, rng: np.random.Generator,
                 slope: float = 0.2):
        self.d_hat, self.seed_size = d_hat, seed_size
        self.fc = Linear(n_z + d, d_hat * seed_size * seed_size, rng)
        self.ups = [UpBlock(d_hat, d_hat, rng, slope) for _ in range(n_up)]
        self.head = ImageHead(d_hat, rng)
        self.slope = slope

    def __call__(self, z: Tensor, s: Tensor) -> tuple:
        B = z.shape[0]
        h = T.leaky_relu(self.fc(T.concat([z, s], axis=1)), self.slope)
        h = T.reshape(h, (B, self.d_hat, self.seed_size, self.seed_size))
        for up in self.ups:
            h = up(h)
        return self.head(h), h


class GStage(Module):
    """Refinement stage: [C_prev; H_prev] -> 3 residual blocks -> upsample -> + skip(C0)."""

    def __init__(self, d_hat: int, rng: np.random.Generator, n_res: int = 3, slope: float = 0.2):
        self.res = [ResBlock(2 * d_hat, rng, slope) for _ in range(n_res)]
        self.up = UpBlock(2 * d_hat, d_hat, rng, slope)
        self.skip = Conv2d(d_hat, d_hat, 1, rng)
        self.head = ImageHead(d_hat, rng)

    def __call__(self, c_prev: Tensor, h_prev: Tensor, c0: Tensor) -> tuple:
        x = T.concat([c_prev, h_prev], axis=1)
        for block in self.res:
            x = block(x)
        main = self.up(x)
        skip = c0
        while skip.shape[2] < main.shape[2]:
            skip = T.upsample2x(skip)
        c = main + self.skip(skip)
        return self.head(c), c


@dataclass
class GeneratorOutput:
    images: list  # stage 0..2 images
    features: list  # C_0..C_2
    attention: list  # per-pixel word weights for stages 1, 2


class Generator(Module):
    def __init__(self, n_z: int, d: int, d_hat: int, base_size: int, g0_upsamples: int, rng: np.random.Generator,
                 n_stages: int = 3, slope: float = 0.2):
        seed = base_size // 2**g0_upsamples
        if seed < 1 or seed * 2**g0_upsamples != base_size:
            raise ValueError(f"base size {base_size} not reachable with {g0_upsamples} upsamples")
        self.n_z, self.d, self.d_hat = n_z, d, d_hat
        self.g0 = G0(n_z, d, d_hat, seed, g0_upsamples, rng, slope)
        self.stages = [GStage(d_hat, rng, slope=slope) for _ in range(n_stages - 1)]
        self.M_p = [Linear(d, d_hat, rng, bias=False) for _ in range(n_stages - 1)]

    def stage(self, i: int, c_prev: Tensor, W: Tensor, c0: Tensor, word_mask=None) -> tuple:
        if not 1 <= i <= len(self.stages):
            raise ValueError(f"stage index {i} outside 1..{len(self.stages)}")
        H, weights = word_attention(W, c_prev, self.M_p[i - 1].weight, word_mask, return_weights=True)
        img, c = self.stages[i - 1](c_prev, H, c0)
        return img, c, weights

    def __call__(self, z: Tensor, s: Tensor, W: Tensor, word_mask=None) -> GeneratorOutput:
        img, c0 = self.g0(z, s)
        images, feats, atts = [img], [c0], []
        c = c0
        for i in range(1, len(self.stages) + 1):
            img, c, weights = self.stage(i, c, W, c0, word_mask)
            images.append(img)
            feats.append(c)
            atts.append(weights)
        return GeneratorOutput(images, feats, atts)
