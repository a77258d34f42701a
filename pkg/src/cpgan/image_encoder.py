"""Two-branch image encoding: object crops and a uniform grid.

Object boxes are cropped and bilinearly resized with fixed interpolation
matrices (``patch = Ry @ image @ Rx.T``), so gradients reach the pixels of a
generated image exactly as they do through any other linear op.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

PATCH = 8


def resize_matrix(lo: int, hi: int, size: int, out: int = PATCH) -> np.ndarray:
    """(out x size) bilinear sampling matrix for the pixel span [lo, hi).

    Output sample u reads source coordinate lo + (u + 0.5) * (hi - lo) / out - 0.5,
    clamped to the span (half-pixel centres, edge replication).
    """
    m = np.zeros((out, size))
    scale = (hi - lo) / out
    for u in range(out):
        x = lo + (u + 0.5) * scale - 0.5
        x = min(max(x, lo), hi - 1)
        x0 = int(math.floor(x))
        x1 = min(x0 + 1, hi - 1)
        t = x - x0
        m[u, x0] += 1.0 - t
        m[u, x1] += t
    return m


def _crop_matrices(detections_per_image: Sequence, n_regions: int, resolution: int):
    B = len(detections_per_image)
    ry = np.zeros((B, n_regions, PATCH, resolution))
    rx = np.zeros((B, n_regions, PATCH, resolution))
    valid = np.zeros((B, n_regions), dtype=bool)
    for b, dets in enumerate(detections_per_image):
        for k, det in enumerate(list(dets)[:n_regions]):
            box = det.box if hasattr(det, "box") else det
            x0, y0, x1, y1 = (int(v) for v in box)
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, resolution), min(y1, resolution)
            if x1 <= x0 or y1 <= y0:
                continue
            ry[b, k] = resize_matrix(y0, y1, resolution)
            rx[b, k] = resize_matrix(x0, x1, resolution)
            valid[b, k] = True
    return ry, rx, valid


def crop_resize(images: Tensor, detections_per_image: Sequence, n_regions: int) -> tuple:
    """Crops as a (B, n_regions, C, 8, 8) tensor plus a validity mask (B, n_regions).

    Invalid (missing or degenerate) boxes yield all-zero patches.
    """
    B, C, H, W = images.shape
    if H != W:
        raise ValueError(f"square images expected, got {H}x{W}")
    ry, rx, valid = _crop_matrices(detections_per_image, n_regions, H)
    ry_t = Tensor(np.broadcast_to(ry[:, :, None], (B, n_regions, C, PATCH, H)))
    rxt_t = Tensor(np.broadcast_to(np.swapaxes(rx, -1, -2)[:, :, None], (B, n_regions, C, W, PATCH)))
    img = T.expand(T.reshape(images, (B, 1, C, H, W)), (B, n_regions, C, H, W))
    return T.matmul(T.matmul(ry_t, img), rxt_t), valid


class ImageEncoder(Module):
    """Grid branch V_e, object branch V_o, projections to d, global feature f."""

    def __init__(self, resolution: int, d: int, d_o: int, d_e: int, r_o: int, r_e: int, rng: np.random.Generator,
                 widths: Sequence[int] = (16, 32), slope: float = 0.2):
        grid = int(round(math.sqrt(r_e)))
        if grid * grid != r_e or resolution % grid:
            raise ValueError(f"R_e={r_e} must be a square grid dividing resolution {resolution}")
        n_down = int(round(math.log2(resolution // grid)))
        if 2**n_down * grid != resolution:
            raise ValueError(f"resolution {resolution} / grid {grid} is not a power of two")
        self.resolution, self.d, self.d_o, self.d_e = resolution, d, d_o, d_e
        self.r_o, self.r_e = r_o, r_e
        self.slope = slope
        chans = [3] + [widths[min(i, len(widths) - 1)] for i in range(n_down - 1)] + [d_e]
        self.grid_convs = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2) for i in range(n_down)]
        # object head: 8x8 patch -> 4x4 -> 2x2 -> dense
        self.obj_conv1 = Conv2d(3, widths[0], 3, rng, stride=2)
        self.obj_conv2 = Conv2d(widths[0], widths[-1], 3, rng, stride=2)
        self.obj_fc = Linear(widths[-1] * 4, d_o, rng)
        self.proj_o = Linear(d_o, d, rng)  # M_o, b_o
        self.proj_e = Linear(d_e, d, rng)  # M_e, b_e
        self.glob = Linear(d_e, d, rng)

    def grid_branch(self, images: Tensor) -> Tensor:
        """(B, 3, H, H) -> V_e of shape (B, d_e, R_e), columns row-major over cells."""
        if images.ndim != 4 or images.shape[2] != self.resolution or images.shape[3] != self.resolution:
            raise ValueError(f"grid branch expects (B, 3, {self.resolution}, {self.resolution}), got {images.shape}")
        h = images
        for i, conv in enumerate(self.grid_convs):
            h = conv(h)
            if i < len(self.grid_convs) - 1:
                h = T.leaky_relu(h, self.slope)
        B = h.shape[0]
        return T.reshape(h, (B, self.d_e, self.r_e))

    def object_branch(self, images: Tensor, detections_per_image: Sequence) -> tuple:
        """V_o of shape (B, d_o, R_o) and the (B, R_o) validity mask."""
        if images.shape[2] != self.resolution:
            raise ValueError(f"object branch expects resolution {self.resolution}, got {images.shape}")
        if any(len(d) > self.r_o for d in detections_per_image):
            raise ValueError(f"more than R_o={self.r_o} detections for an image")
        B = images.shape[0]
        patches, valid = crop_resize(images, detections_per_image, self.r_o)
        x = T.reshape(patches, (B * self.r_o, 3, PATCH, PATCH))
        x = T.leaky_relu(self.obj_conv1(x), self.slope)
        x = T.leaky_relu(self.obj_conv2(x), self.slope)
        feats = self.obj_fc(T.reshape(x, (B * self.r_o, -1)))
        feats = T.reshape(feats, (B, self.r_o, self.d_o))
        m = valid.astype(T.get_dtype())
        feats = feats * Tensor(np.broadcast_to(m[:, :, None], feats.shape))
        return T.transpose(feats, (0, 2, 1)), valid

    def combine(self, v_o: Tensor, v_e: Tensor) -> Tensor:
        return combine(v_o, v_e, self.proj_o.weight, self.proj_o.bias, self.proj_e.weight, self.proj_e.bias)

    def global_feature(self, v_e: Tensor) -> Tensor:
        return global_feature(v_e, self.glob.weight, self.glob.bias)

    def __call__(self, images: Tensor, detections_per_image: Sequence) -> tuple:
        """Returns (V_c of shape (B, d, R_o + R_e), region mask (B, R_o + R_e), f of shape (B, d))."""
        v_e = self.grid_branch(images)
        v_o, valid = self.object_branch(images, detections_per_image)
        v_c = self.combine(v_o, v_e)
        mask = np.concatenate([valid, np.ones((valid.shape[0], self.r_e), dtype=bool)], axis=1)
        return v_c, mask, self.global_feature(v_e)


def combine(v_o: Tensor, v_e: Tensor, m_o: Tensor, b_o: Tensor, m_e: Tensor, b_e: Tensor) -> Tensor:
    """V_c = [M_o V_o + b_o, M_e V_e + b_e] joined column-wise (objects first).

    Accepts (d_o, R_o)/(d_e, R_e) matrices or batched (B, ., .) stacks.
    """
    if v_o.shape[-2] != m_o.shape[1] or v_e.shape[-2] != m_e.shape[1] or m_o.shape[0] != m_e.shape[0]:
        raise ValueError(f"combine: V_o {v_o.shape} / M_o {m_o.shape}, V_e {v_e.shape} / M_e {m_e.shape}")
    swap = tuple(range(v_o.ndim - 2)) + (v_o.ndim - 1, v_o.ndim - 2)
    po = T.transpose(T.linear(T.transpose(v_o, swap), m_o, b_o), swap)
    pe = T.transpose(T.linear(T.transpose(v_e, swap), m_e, b_e), swap)
    return T.concat([po, pe], axis=-1)


def global_feature(v_e: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """f = W mean_columns(V_e) + b."""
    return T.linear(T.mean(v_e, axis=-1), w, b)
