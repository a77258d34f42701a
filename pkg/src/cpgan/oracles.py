"""Brute-force scalar-loop references for the matching losses, attention
pooling, memory averaging and object recall.

Nothing here touches the tensor engine: inputs are nested Python lists (or
anything indexable), arithmetic is plain floats, so these serve as independent
checks of the vectorised implementations.
"""

from __future__ import annotations

import math


def _softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    t = sum(e)
    return [v / t for v in e]


def _logsumexp(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def _col(M, j):
    return [M[i][j] for i in range(len(M))]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _cos(a, b):
    na = math.sqrt(_dot(a, a))
    nb = math.sqrt(_dot(b, b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return _dot(a, b) / (na * nb)


def region_context(W, V, gamma1):
    """W: d x T, V: d x R (lists of rows). Returns c as d x T."""
    d, T, R = len(W), len(W[0]), len(V[0])
    sim = [[_dot(_col(W, i), _col(V, j)) for j in range(R)] for i in range(T)]
    # normalise over words for each region
    bar = [[0.0] * R for _ in range(T)]
    for j in range(R):
        col = _softmax([sim[i][j] for i in range(T)])
        for i in range(T):
            bar[i][j] = col[i]
    c = [[0.0] * T for _ in range(d)]
    for i in range(T):
        alpha = _softmax([gamma1 * bar[i][j] for j in range(R)])
        for k in range(d):
            c[k][i] = sum(alpha[j] * V[k][j] for j in range(R))
    return c


def image_text_score(c, W, gamma2):
    T = len(W[0])
    return _logsumexp([gamma2 * _cos(_col(c, i), _col(W, i)) for i in range(T)]) / gamma2


def pair_score(W, V, gamma1, gamma2):
    return image_text_score(region_context(W, V, gamma1), W, gamma2)


def matching_loss(S, gamma3):
    """S[i][j] = score(image i, caption j)."""
    M = len(S)
    total = 0.0
    for i in range(M):
        row = [gamma3 * S[i][j] for j in range(M)]
        col = [gamma3 * S[j][i] for j in range(M)]
        total -= gamma3 * S[i][i] - _logsumexp(row)
        total -= gamma3 * S[i][i] - _logsumexp(col)
    return total


def damsm_loss(Ws, ss, Vs, fs, gamma1=4.0, gamma2=5.0, gamma3=10.0):
    """Lists of per-pair W (d x T_i), s (d), V (d x R), f (d). Returns (L_w, L_s)."""
    M = len(Ws)
    S = [[pair_score(Ws[j], Vs[i], gamma1, gamma2) for j in range(M)] for i in range(M)]
    Sh = [[_cos(fs[i], ss[j]) for j in range(M)] for i in range(M)]
    return matching_loss(S, gamma3), matching_loss(Sh, gamma3)


def attend(query, keys):
    """softmax_k(query . key_k) weighted sum of keys; keys given as columns d x T."""
    T = len(keys[0])
    a = _softmax([_dot(query, _col(keys, k)) for k in range(T)])
    return [sum(a[k] * keys[r][k] for k in range(T)) for r in range(len(keys))], a


def discriminator_hinge(real_uc, fake_uc, real_c, fake_c, mismatch_c):
    mean = lambda xs: sum(xs) / len(xs)
    pos = lambda xs: mean([max(0.0, 1.0 - x) for x in xs])
    neg = lambda xs: mean([max(0.0, 1.0 + x) for x in xs])
    return 0.5 * (pos(real_uc) + pos(real_c)) + (neg(fake_uc) + neg(fake_c) + neg(mismatch_c)) / 3.0


def memory_vector(entries, top_k):
    """entries: list of (image_index, salience list, feature list per region).

    Picks the argmax region per image (first wins), keeps the top_k images by
    that weight (lower index wins ties) and averages their features.
    """
    picks = []
    for n, sal, feats in entries:
        q = 0
        for i in range(1, len(sal)):
            if sal[i] > sal[q]:
                q = i
        picks.append((sal[q], n, feats[q]))
    picks.sort(key=lambda p: (-p[0], p[1]))
    kept = picks[:top_k]
    total = sum(w for w, _, _ in kept)
    dim = len(kept[0][2])
    return [sum(w * f[k] for w, _, f in kept) / total for k in range(dim)]


def soa(pairs):
    """pairs: list of (class, detected 0/1). Returns (SOA-C, SOA-I)."""
    by = {}
    for c, hit in pairs:
        by.setdefault(c, []).append(hit)
    soa_c = sum(sum(v) / len(v) for v in by.values()) / len(by)
    soa_i = sum(h for _, h in pairs) / len(pairs)
    return soa_c, soa_i
