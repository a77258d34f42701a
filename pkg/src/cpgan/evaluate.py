"""Desk metrics: a rule-based blob detector, object recall (per class and per
image), retrieval precision under the matching model, and image dumps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .data.io import write_ppm
from .data.synth import COLORS, PALETTE, SHAPES, VOCAB, Detection, gt_detect, render_scene, sample_scene, to_float, to_uint8

logger = logging.getLogger(__name__)

CLASSES = tuple(f"{c}_{s}" for c in COLORS for s in SHAPES)


@dataclass
class BlobDetector:
    """Nearest-palette segmentation, 4-connected components, and a shape rule.

    A pixel belongs to colour k when k is its nearest palette entry and lies
    within ``color_tol`` in every channel. A component is a triangle when less
    than ``top_fraction`` of its pixels sit in the upper half of its bounding
    box (the apex is at the top; a middle row counts half), a square when at least three bounding-box
    corners are filled, and otherwise a circle.
    """

    color_tol: float = 0.5
    min_area: int = 4
    top_fraction: float = 0.4

    def __post_init__(self):
        self._palette = np.array([PALETTE[c] for c in COLORS], dtype=np.float64)

    def color_map(self, image: np.ndarray) -> np.ndarray:
        """(3, H, W) image in [-1, 1] -> (H, W) colour index, -1 for background."""
        px = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)[..., None, :]
        dist = np.abs(px - self._palette).max(axis=-1)  # (H, W, K)
        nearest = dist.argmin(axis=-1)
        ok = np.take_along_axis(dist, nearest[..., None], -1)[..., 0] <= self.color_tol
        return np.where(ok, nearest, -1)

    def classify(self, comp: np.ndarray) -> str:
        ys, xs = np.nonzero(comp)
        y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
        mid = (y0 + y1) / 2.0
        top = (np.count_nonzero(ys < mid) + 0.5 * np.count_nonzero(ys == mid)) / ys.size
        if top < self.top_fraction:
            return "triangle"
        corners = int(comp[y0, x0]) + int(comp[y0, x1]) + int(comp[y1, x0]) + int(comp[y1, x1])
        return "square" if corners >= 3 else "circle"

    def __call__(self, image: np.ndarray) -> list:
        cmap = self.color_map(image)
        h, w = cmap.shape
        out = []
        for k, color in enumerate(COLORS):
            labels, n = ndimage.label(cmap == k)
            for j in range(1, n + 1):
                comp = labels == j
                area = int(comp.sum())
                if area < self.min_area:
                    continue
                ys, xs = np.nonzero(comp)
                box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
                out.append(Detection(box, f"{color}_{self.classify(comp)}", min(1.0, area / (h * w))))
        out.sort(key=lambda d: -d.confidence)
        return out


def match_detections(dets: Sequence, truth: Sequence) -> tuple:
    """Greedy matching: a detection claims the first unclaimed truth box with the
    same label that contains its box centre. Truth boxes are continuous extents
    rounded outward, so small shapes would fail an IoU test they really pass.

    Returns (matched truth flags, matched detection flags).
    """
    t_hit = [False] * len(truth)
    d_hit = [False] * len(dets)
    for i, d in enumerate(dets):
        cx = (d.box[0] + d.box[2]) / 2.0
        cy = (d.box[1] + d.box[3]) / 2.0
        for j, t in enumerate(truth):
            if t_hit[j] or t.label != d.label:
                continue
            if t.box[0] <= cx <= t.box[2] and t.box[1] <= cy <= t.box[3]:
                t_hit[j] = d_hit[i] = True
                break
    return t_hit, d_hit


@dataclass
class Calibration:
    recall: dict  # class -> recall
    precision: float
    n_scenes: int

    @property
    def passed(self) -> bool:
        return all(r == 1.0 for r in self.recall.values()) and self.precision >= 0.95


def calibrate(detector: BlobDetector, n_scenes: int = 1000, seed: int = 10_000, resolution: int = 32) -> Calibration:
    """Run the detector on rendered real scenes (seeds disjoint from training)."""
    hits = {c: [0, 0] for c in CLASSES}
    tp = n_det = 0
    for k in range(n_scenes):
        scene = sample_scene(seed + k, resolution)
        truth = gt_detect(scene, resolution, top_r=len(scene.objects))
        dets = detector(to_float(to_uint8(render_scene(scene, resolution))))
        t_hit, d_hit = match_detections(dets, truth)
        for t, h in zip(truth, t_hit):
            hits[t.label][0] += h
            hits[t.label][1] += 1
        tp += sum(d_hit)
        n_det += len(dets)
    recall = {c: h / n for c, (h, n) in hits.items() if n}
    return Calibration(recall, tp / n_det if n_det else 0.0, n_scenes)


def mentioned_classes(tokens: Sequence[int]) -> list:
    """Colour-shape pairs named in a caption, in order, without repeats."""
    words = [VOCAB[t] for t in tokens]
    out = []
    for a, b in zip(words, words[1:]):
        if a in COLORS and b in SHAPES and f"{a}_{b}" not in out:
            out.append(f"{a}_{b}")
    return out


def soa_from_hits(per_class: dict) -> tuple:
    """``per_class`` maps class -> list of 0/1 Det outcomes over its images.

    Returns (SOA-C, SOA-I); classes without images are dropped with a warning.
    """
    used = {c: v for c, v in per_class.items() if len(v)}
    if len(used) < len(per_class):
        logger.warning("SOA: %d classes with no images excluded", len(per_class) - len(used))
    if not used:
        raise ValueError("SOA needs at least one class with images")
    soa_c = float(np.mean([np.mean(v) for v in used.values()]))
    soa_i = sum(sum(v) for v in used.values()) / sum(len(v) for v in used.values())
    return soa_c, float(soa_i)


def soa_metrics(images: Sequence[np.ndarray], captions: Sequence[Sequence[int]], detector: BlobDetector) -> tuple:
    """(SOA-C, SOA-I, per-class hits) for images paired with their captions."""
    if len(images) != len(captions):
        raise ValueError("one caption per image required")
    per_class = {}
    for img, cap in zip(images, captions):
        labels = {d.label for d in detector(img)}
        for c in mentioned_classes(cap):
            per_class.setdefault(c, []).append(int(c in labels))
    soa_c, soa_i = soa_from_hits(per_class)
    return soa_c, soa_i, per_class


def r_precision(scorer: Callable, images: Sequence, captions: Sequence, n_candidates: int = 10,
                rng: Optional[np.random.Generator] = None) -> float:
    """Fraction of images whose own caption outscores n_candidates - 1 random
    other captions. ``scorer(image_indices, caption_indices)`` returns the
    score of each pair. Pools never repeat a caption text."""
    n = len(images)
    if n_candidates < 2:
        raise ValueError("n_candidates must be >= 2")
    if n < n_candidates:
        raise ValueError(f"eval set of {n} is smaller than n_candidates={n_candidates}")
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = [tuple(c) for c in captions]
    if len(set(keys)) < n_candidates:
        raise ValueError("not enough distinct captions to fill a candidate pool")
    hits = 0
    for i in range(n):
        pool, seen = [i], {keys[i]}
        while len(pool) < n_candidates:
            j = int(rng.integers(n))
            if keys[j] in seen:
                continue
            pool.append(j)
            seen.add(keys[j])
        scores = np.asarray(scorer(np.full(len(pool), i), np.array(pool)), dtype=np.float64)
        hits += int(scores[0] > scores[1:].max())
    return hits / n


def write_metrics(path, rows: Sequence[tuple], config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value", "n", "config_hash"))
        for name, value, n in rows:
            w.writerow((name, repr(float(value)), int(n), config_hash))


def write_stage_images(out_dir, index: int, stages: Sequence[np.ndarray]) -> list:
    """Write one image per stage as ``{index}_s{stage}.ppm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(stages):
        p = out / f"{index}_s{k}.ppm"
        write_ppm(p, to_uint8(img))
        paths.append(p)
    return paths


def generate_images(models, captions: Sequence[Sequence[int]], seed: int, noise_threshold: float = 2.0,
                    batch: int = 32) -> list:
    """Per caption, the list of stage images (coarse to fine) as (3, N, N) arrays.

    Noise for caption k is drawn from a generator seeded by (seed, k), so the
    output for a caption does not depend on batching.
    """
    from . import tensor as T
    from .train import sample_truncated_noise

    out = []
    with T.no_grad():
        for start in range(0, len(captions), batch):
            caps = [list(c) for c in captions[start : start + batch]]
            z = np.stack([sample_truncated_noise(models.gen.n_z, noise_threshold, np.random.default_rng([seed, start + k]))
                          for k in range(len(caps))])
            W, s, mask = models.text(caps)
            res = models.gen(T.Tensor(z), s, W, mask)
            for k in range(len(caps)):
                out.append([img.data[k].astype(np.float64) for img in res.images])
    return out


def sentence_scorer(models, images: Sequence[np.ndarray], captions: Sequence[Sequence[int]], batch: int = 64) -> Callable:
    """cos(f(image_i), s(caption_j)) under the trained encoders, precomputed."""
    from . import tensor as T

    fs, ss = [], []
    with T.no_grad():
        for start in range(0, len(images), batch):
            x = T.Tensor(np.stack(images[start : start + batch]))
            fs.append(models.image.global_feature(models.image.grid_branch(x)).data.astype(np.float64))
            _, s, _ = models.text([list(c) for c in captions[start : start + batch]])
            ss.append(s.data.astype(np.float64))
    f = np.concatenate(fs)
    s = np.concatenate(ss)
    f /= np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    s /= np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-12)
    return lambda i, j: np.sum(f[np.asarray(i)] * s[np.asarray(j)], axis=1)


EVAL_SEED_OFFSET = 1 << 20  # keeps held-out scene seeds clear of training indices


def evaluate_models(models, samples: Sequence, n_candidates: int = 10, noise_seed: int = 0,
                    noise_threshold: float = 2.0, detector: Optional[BlobDetector] = None) -> dict:
    """R-precision and SOA of final-stage images generated from the captions of ``samples``."""
    detector = detector or BlobDetector()
    captions = [s.tokens for s in samples]
    final = [stages[-1] for stages in generate_images(models, captions, noise_seed, noise_threshold)]
    scorer = sentence_scorer(models, final, captions)
    rp = r_precision(scorer, final, captions, n_candidates, np.random.default_rng([noise_seed, 1]))
    soa_c, soa_i, per_class = soa_metrics(final, captions, detector)
    return {"r_precision": rp, "soa_c": soa_c, "soa_i": soa_i, "n": len(samples),
            "n_objects": sum(len(v) for v in per_class.values())}
