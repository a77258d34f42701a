"""Image-text matching (DAMSM), its use on generated images, and hinge losses.

Matrices follow the column convention: word matrices are (..., d, T), region
matrices (..., d, R). Leading axes batch independent pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DamsmGammas:
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ValueError(f"gammas must be strictly positive: {self}")


def _swap(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(x, axes)


def region_context(W: Tensor, V: Tensor, gamma1: float, word_mask: Optional[np.ndarray] = None,
                   region_mask: Optional[np.ndarray] = None) -> Tensor:
    """Region-context vector c_i for every word; returns (..., d, T).

    Sim = Wᵀ V is normalised over words for each region, sharpened by gamma1
    and normalised over regions for each word; c_i mixes V's columns.
    """
    if W.shape[:-2] != V.shape[:-2] or W.shape[-2] != V.shape[-2]:
        raise ValueError(f"region_context: W {W.shape} and V {V.shape} disagree")
    if W.shape[-1] < 1 or V.shape[-1] < 1:
        raise ValueError("region_context needs T >= 1 and R >= 1")
    sim = T.matmul(_swap(W), V)  # (..., T, R)
    wm = None if word_mask is None else np.asarray(word_mask, bool)[..., :, None]
    rm = None if region_mask is None else np.asarray(region_mask, bool)[..., None, :]
    sim_bar = T.softmax(sim, axis=-2, mask=wm)
    alpha = T.softmax(sim_bar * gamma1, axis=-1, mask=rm)
    return T.matmul(V, _swap(alpha))


def image_text_score(contexts: Tensor, W: Tensor, gamma2: float, word_mask: Optional[np.ndarray] = None) -> Tensor:
    """R(I, D) = (1/gamma2) log sum_i exp(gamma2 cos(c_i, w_i))."""
    if contexts.shape != W.shape:
        raise ValueError(f"image_text_score: contexts {contexts.shape} vs W {W.shape}")
    _warn_zero_norm(contexts, W, word_mask)
    r = T.cosine(contexts, W, axis=-2)  # (..., T)
    return T.logsumexp(r * gamma2, axis=-1, mask=word_mask) * (1.0 / gamma2)


def _warn_zero_norm(c: Tensor, w: Tensor, word_mask) -> None:
    zero = (np.linalg.norm(c.data, axis=-2) == 0) | (np.linalg.norm(w.data, axis=-2) == 0)
    if word_mask is not None:
        zero &= np.asarray(word_mask, bool)
    if zero.any():
        logger.info("image_text_score: %d zero-norm word/context pairs scored as cosine 0", int(zero.sum()))


def pair_scores(W: Tensor, V: Tensor, gammas: DamsmGammas, word_mask: Optional[np.ndarray] = None,
                region_mask: Optional[np.ndarray] = None) -> Tensor:
    """Word-level score matrix S[i, j] = R(I_i, D_j) for a batch; (M, M)."""
    M, d, t_max = W.shape
    R = V.shape[2]
    if V.shape[:2] != (M, d):
        raise ValueError(f"pair_scores: W {W.shape} and V {V.shape} disagree")
    Wp = T.expand(T.reshape(W, (1, M, d, t_max)), (M, M, d, t_max))
    Vp = T.expand(T.reshape(V, (M, 1, d, R)), (M, M, d, R))
    wm = None if word_mask is None else np.broadcast_to(np.asarray(word_mask, bool)[None], (M, M, t_max))
    rm = None if region_mask is None else np.broadcast_to(np.asarray(region_mask, bool)[:, None], (M, M, R))
    ctx = region_context(Wp, Vp, gammas.gamma1, wm, rm)
    return image_text_score(ctx, Wp, gammas.gamma2, wm)


def sentence_scores(f: Tensor, s: Tensor) -> Tensor:
    """R̂[i, j] = cos(f_i, s_j); (M, M)."""
    M, d = f.shape
    fp = T.expand(T.reshape(f, (M, 1, d)), (M, M, d))
    sp = T.expand(T.reshape(s, (1, M, d)), (M, M, d))
    return T.cosine(fp, sp, axis=-1)


def matching_loss(scores: Tensor, gamma3: float) -> Tensor:
    """-sum_i [log P(D_i | I_i) + log P(I_i | D_i)] for an (M, M) score matrix
    whose rows are images and columns captions."""
    M = scores.shape[0]
    logits = scores * gamma3
    idx = np.arange(M)
    log_p_d = T.log_softmax(logits, axis=1)[idx, idx]
    log_p_i = T.log_softmax(logits, axis=0)[idx, idx]
    return -T.sum_(log_p_d + log_p_i)


def posteriors(scores: Tensor, gamma3: float) -> tuple:
    """(P(D_j | I_i) normalised over captions, P(I_i | D_j) normalised over images)."""
    logits = scores * gamma3
    return T.softmax(logits, axis=1), T.softmax(logits, axis=0)


def damsm_loss(W: Tensor, s: Tensor, V: Tensor, f: Tensor, gammas: DamsmGammas = DamsmGammas(),
               word_mask: Optional[np.ndarray] = None, region_mask: Optional[np.ndarray] = None) -> tuple:
    """(L_w, L_s, L_w + L_s) for an index-aligned batch of M pairs.

    W (M, d, T), s (M, d), V (M, d, R), f (M, d).
    """
    if W.ndim != 3 or W.shape[0] == 0:
        raise ValueError(f"damsm_loss needs a nonempty batch, got W {W.shape}")
    l_w = matching_loss(pair_scores(W, V, gammas, word_mask, region_mask), gammas.gamma3)
    l_s = matching_loss(sentence_scores(f, s), gammas.gamma3)
    return l_w, l_s, l_w + l_s


def tiscl(images: Tensor, text: tuple, image_encoder, detections: Sequence, gammas: DamsmGammas = DamsmGammas()) -> Tensor:
    """DAMSM between generated final-stage images and their captions.

    ``text`` is the encoder output ``(W, s, word_mask)``; ``detections`` gives
    the object boxes used by the image encoder's object branch.
    """
    W, s, word_mask = text
    v_c, region_mask, f = image_encoder(images, detections)
    return damsm_loss(W, s, v_c, f, gammas, word_mask, region_mask)[2]


def generator_hinge(uncond_logits: Sequence[Tensor], cond_logits: Sequence[Tensor]) -> Tensor:
    """sum over stages of -1/2 E[D_uc(fake)] - 1/2 E[D_c(fake, X)]."""
    if len(uncond_logits) != len(cond_logits):
        raise ValueError("need paired unconditional/conditional logits per stage")
    total = None
    for uc, c in zip(uncond_logits, cond_logits):
        term = (T.mean(uc) + T.mean(c)) * -0.5
        total = term if total is None else total + term
    return total


def discriminator_hinge(real_uc: Tensor, fake_uc: Tensor, real_c: Tensor, fake_c: Tensor, mismatch_c: Tensor) -> Tensor:
    """1/2 E[max(0, 1 - real)] terms for the two real sets, 1/3 E[max(0, 1 + x)]
    for fake (both discriminators) and mismatched-caption logits."""
    real = T.mean(T.relu(1.0 - real_uc)) + T.mean(T.relu(1.0 - real_c))
    fake = T.mean(T.relu(fake_uc + 1.0)) + T.mean(T.relu(fake_c + 1.0)) + T.mean(T.relu(mismatch_c + 1.0))
    return real * 0.5 + fake / 3.0
