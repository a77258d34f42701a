"""Two-phase training: matching-model pretraining, then alternating D/G updates.

Randomness is counter-based: the batch order of epoch e and the noise of step
t are drawn from generators seeded by (seed, e) and (seed, t), so a run can be
resumed from any step given only the parameters, optimiser moments and the
step counters stored in a checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data.synth import VOCAB, salience_weights, to_float
from .discriminator import StageDiscriminators
from .generator import Generator
from .image_encoder import ImageEncoder, resize_matrix
from .losses import DamsmGammas, damsm_loss, discriminator_hinge, generator_hinge, tiscl
from .nn import Module
from .optim import Adam
from .tensor import Tensor
from .text_encoder import MemoryBank, TextEncoder, build_memory

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CPGC"
CKPT_VERSION = 1
LOG_FIELDS = ("step", "phase", "L_D0", "L_D1", "L_D2", "L_G", "L_TISCL", "L_w", "L_s")


class TrainingDiverged(RuntimeError):
    def __init__(self, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss at step {diagnostics.get('step')}: {diagnostics.get('losses')}")


def sample_truncated_noise(n_z, threshold: float, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal draws, each redrawn until |z| <= threshold."""
    if not threshold > 0:
        raise ValueError("truncation threshold must be positive")
    z = rng.standard_normal(n_z)
    bad = np.abs(z) > threshold
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > threshold
    return z


# -- memory construction --------------------------------------------------

class CropProjector:
    """Fixed random projection of a bilinearly resized 8x8 box crop; the region
    feature used to build the word memory before any encoder is trained."""

    def __init__(self, dim: int, seed: int, patch: int = 8):
        self.patch = patch
        self.proj = np.random.default_rng([seed, 11]).standard_normal((dim, 3 * patch * patch)) / math.sqrt(3 * patch * patch)

    def __call__(self, sample, region: int) -> np.ndarray:
        img = to_float(sample.image)  # (3, H, W)
        x0, y0, x1, y1 = sample.detections[region].box
        ry = resize_matrix(int(y0), int(y1), img.shape[1], self.patch)
        rx = resize_matrix(int(x0), int(x1), img.shape[2], self.patch)
        crop = np.einsum("uh,chw,vw->cuv", ry, img, rx)
        return self.proj @ crop.reshape(-1)


def box_salience(word: int, sample) -> np.ndarray:
    if not sample.detections:
        return np.zeros(0)
    return salience_weights(word, sample.detections, [d.box for d in sample.detections])


def build_word_memory(samples: Sequence, cfg: RunConfig) -> MemoryBank:
    return build_memory(samples, CropProjector(cfg.d_o, cfg.seed), box_salience, cfg.k_mem, len(VOCAB), cfg.d_o)


# -- models ---------------------------------------------------------------

class Models(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.text = TextEncoder(len(VOCAB), cfg.embed_dim, cfg.d_o, cfg.d, rng)
        self.image = ImageEncoder(cfg.resolution, cfg.d, cfg.d_o, cfg.d_e, cfg.r_o, cfg.r_e, rng, cfg.enc_widths)
        self.gen = Generator(cfg.n_z, cfg.d, cfg.d_hat, cfg.base_size, cfg.g0_upsamples, rng)
        self.disc = StageDiscriminators(cfg.stage_resolutions, cfg.d, cfg.grid, rng, cfg.duc_widths,
                                        cfg.fgcd_widths, cfg.fgcd_hidden)


@dataclass
class Batch:
    indices: np.ndarray
    images: list  # real images per stage, coarse to fine, (B, 3, N_i, N_i)
    captions: list
    detections: list


def _roll(x, k: int = 1):
    if isinstance(x, Tensor):
        idx = (np.arange(x.shape[0]) - k) % x.shape[0]
        return T.take(x, idx, axis=0)
    return np.roll(x, k, axis=0)


def _finite(values: dict) -> bool:
    return all(math.isfinite(v) for v in values.values())


class Trainer:
    def __init__(self, cfg: RunConfig, samples: Sequence, memory: Optional[MemoryBank] = None, log_path=None):
        if len(samples) < cfg.batch_size:
            raise ValueError(f"{len(samples)} samples cannot fill a batch of {cfg.batch_size}")
        self.cfg = cfg
        self.samples = list(samples)
        self.gammas = DamsmGammas(cfg.gamma1, cfg.gamma2, cfg.gamma3)
        self.models = Models(cfg, np.random.default_rng([cfg.seed, 1]))
        self.models.text.set_memory(memory if memory is not None else build_word_memory(self.samples, cfg))
        m = self.models
        betas = (cfg.beta1, cfg.beta2)
        enc = list(m.text.named_parameters("text.")) + list(m.image.named_parameters("image."))
        self.opt_enc = Adam(enc, cfg.lr_enc, betas)
        self.opt_g = Adam(m.gen.named_parameters("gen."), cfg.lr_g, betas)
        self.opt_d = Adam(m.disc.named_parameters("disc."), cfg.lr_d, betas)
        self.step = {"damsm": 0, "gan": 0}
        self._stack_images()
        self.log_path = Path(log_path) if log_path is not None else None
        if self.log_path is not None and not self.log_path.exists():
            with open(self.log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def _stack_images(self):
        full = np.stack([to_float(s.image) for s in self.samples]).astype(T.get_dtype())
        pyramid = [full]
        for _ in range(2):
            x = pyramid[0]
            n, c, h, w = x.shape
            pyramid.insert(0, x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))
        self.pyramid = pyramid

    # -- batching ----------------------------------------------------------
    @property
    def batches_per_epoch(self) -> int:
        return len(self.samples) // self.cfg.batch_size

    def batch(self, phase: str, step: int) -> Batch:
        nb = self.batches_per_epoch
        epoch, k = divmod(step, nb)
        order = np.random.default_rng([self.cfg.seed, 2, 0 if phase == "damsm" else 1, epoch]).permutation(len(self.samples))
        idx = order[k * self.cfg.batch_size : (k + 1) * self.cfg.batch_size]
        return Batch(idx, [p[idx] for p in self.pyramid], [self.samples[i].tokens for i in idx],
                     [self.samples[i].detections for i in idx])

    def noise(self, step: int, count: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 3, step])
        return np.stack([sample_truncated_noise(self.cfg.n_z, self.cfg.noise_threshold, rng) for _ in range(count)])

    # -- phase 1 -----------------------------------------------------------
    def damsm_step(self, batch: Batch) -> dict:
        m = self.models
        self.opt_enc.zero_grad()
        W, s, wmask = m.text(batch.captions)
        V, rmask, f = m.image(Tensor(batch.images[-1]), batch.detections)
        l_w, l_s, total = damsm_loss(W, s, V, f, self.gammas, wmask, rmask)
        losses = {"L_w": l_w.item(), "L_s": l_s.item()}
        self._guard("damsm", losses, self.opt_enc)
        total.backward()
        self._guard_grads("damsm", self.opt_enc)
        self.opt_enc.step()
        self.step["damsm"] += 1
        self._log("damsm", losses)
        return losses

    def pretrain_epoch(self) -> float:
        """One pass of phase 1; returns the epoch mean of L_w + L_s."""
        vals = []
        for _ in range(self.batches_per_epoch):
            out = self.damsm_step(self.batch("damsm", self.step["damsm"]))
            vals.append(out["L_w"] + out["L_s"])
        return float(np.mean(vals))

    # -- phase 2 -----------------------------------------------------------
    def _text(self, captions):
        with T.no_grad():
            W, s, mask = self.models.text(captions)
        return W.detach(), s.detach(), mask

    def _generate(self, z: np.ndarray, text) -> list:
        W, s, mask = text
        return self.models.gen(Tensor(z), s, W, mask)

    def train_step_d(self, batch: Batch, text=None, z=None) -> dict:
        text = text if text is not None else self._text(batch.captions)
        z = z if z is not None else self.noise(self.step["gan"], len(batch.indices))
        W, s, mask = text
        with T.no_grad():
            fakes = [img.detach() for img in self._generate(z, text).images]
        disc = self.models.disc
        self.opt_d.zero_grad()
        W_mis, s_mis, mask_mis = _roll(W), _roll(s), _roll(mask)
        total, losses = None, {}
        for i, (real_np, fake) in enumerate(zip(batch.images, fakes)):
            real = Tensor(real_np)
            q_real = disc.cond[i].features(real)
            loss = discriminator_hinge(
                disc.uncond[i](real), disc.uncond[i](fake),
                disc.cond[i].score_features(q_real, W, s, mask),
                disc.cond[i](fake, W, s, mask),
                disc.cond[i].score_features(q_real, W_mis, s_mis, mask_mis),
            )
            losses[f"L_D{i}"] = loss.item()
            total = loss if total is None else total + loss
        self._guard("gan", losses, self.opt_d)
        total.backward()
        self._guard_grads("gan", self.opt_d)
        self.opt_d.step()
        return losses

    def train_step_g(self, batch: Batch, text=None, z=None) -> dict:
        text = text if text is not None else self._text(batch.captions)
        z = z if z is not None else self.noise(self.step["gan"], len(batch.indices))
        W, s, mask = text
        m = self.models
        m.disc.freeze()
        m.image.freeze()
        try:
            self.opt_g.zero_grad()
            out = self._generate(z, text)
            uc = [m.disc.uncond[i](img) for i, img in enumerate(out.images)]
            cond = [m.disc.cond[i](img, W, s, mask) for i, img in enumerate(out.images)]
            l_g = generator_hinge(uc, cond)
            objective = l_g
            l_t = None
            if self.cfg.lambda_tiscl > 0:
                l_t = tiscl(out.images[-1], text, m.image, batch.detections, self.gammas)
                objective = l_g + l_t * self.cfg.lambda_tiscl
            losses = {"L_G": l_g.item(), "L_TISCL": l_t.item() if l_t is not None else 0.0}
            self._guard("gan", losses, self.opt_g)
            objective.backward()
            self._guard_grads("gan", self.opt_g)
            self.opt_g.step()
        finally:
            m.disc.unfreeze()
            m.image.unfreeze()
        return losses

    def gan_step(self) -> dict:
        step = self.step["gan"]
        batch = self.batch("gan", step)
        text = self._text(batch.captions)
        z = self.noise(step, len(batch.indices))
        losses = self.train_step_d(batch, text, z)
        losses.update(self.train_step_g(batch, text, z))
        self.step["gan"] += 1
        self._log("gan", losses)
        return losses

    def gan_epoch(self) -> dict:
        rows = [self.gan_step() for _ in range(self.batches_per_epoch)]
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}

    # -- guards and logging ------------------------------------------------
    def _guard(self, phase: str, losses: dict, opt: Adam) -> None:
        if _finite(losses):
            return
        diag = {"phase": phase, "step": self.step[phase], "losses": losses, "grad_norms": opt.grad_norms()}
        if self.log_path is not None:
            self.log_path.with_name("diverged.json").write_text(json.dumps(diag, indent=1, default=str))
        raise TrainingDiverged(diag)

    def _guard_grads(self, phase: str, opt: Adam) -> None:
        norms = opt.grad_norms()
        bad = sorted(k for k, v in norms.items() if not math.isfinite(v))
        if bad:
            self._guard(phase, {"grad:" + k: math.nan for k in bad}, opt)

    def _log(self, phase: str, losses: dict) -> None:
        if self.log_path is None:
            return
        row = {"step": self.step[phase], "phase": phase, **{k: repr(v) for k, v in losses.items()}}
        with open(self.log_path, "a", newline="") as fh:
            csv.DictWriter(fh, LOG_FIELDS, restval="").writerow(row)

    # -- persistence -------------------------------------------------------
    def checkpoint_tensors(self) -> dict:
        out = {name: p.data for name, p in self.models.named_parameters()}
        bank = self.models.text.memory
        out["memory.vectors"] = bank.data
        for tag, opt in (("opt_enc", self.opt_enc), ("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for k, v in opt.state().items():
                out[f"{tag}/{k}"] = v
        return out

    def save(self, path) -> None:
        meta = {"step": self.step, "seed": self.cfg.seed, "config_hash": self.cfg.hash(), "k_mem": self.cfg.k_mem}
        save_checkpoint(path, self.checkpoint_tensors(), json.dumps(meta, sort_keys=True).encode())

    def load(self, path) -> None:
        tensors, blob = load_checkpoint(path)
        meta = json.loads(blob.decode())
        if meta.get("seed") != self.cfg.seed:
            logger.warning("checkpoint seed %s differs from config seed %s", meta.get("seed"), self.cfg.seed)
        self.models.load_state_dict(tensors)
        self.models.text.memory = Tensor(tensors["memory.vectors"])
        for tag, opt in (("opt_enc", self.opt_enc), ("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            prefix = tag + "/"
            opt.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        self.step = {k: int(v) for k, v in meta["step"].items()}


def save_checkpoint(path, tensors: dict, blob: bytes = b"") -> None:
    """Named little-endian float32 tensors followed by a length-prefixed blob."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{rank}I", raw, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
        (blen,) = struct.unpack_from("<I", raw, off)
        blob = raw[off + 4 : off + 4 + blen]
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint at byte {off}: {exc}") from None
    if len(blob) != blen or off + 4 + blen != len(raw):
        raise ValueError(f"{path}: checkpoint length mismatch")
    return tensors, blob
