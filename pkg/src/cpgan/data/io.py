"""On-disk dataset layout.

::

    manifest.txt      key=value lines (vocab, count, resolution, seed, ...)
    images/NNNNNN.ppm binary P6, 8-bit
    captions.tsv      index <TAB> space-separated token ids
    detections.tsv    index <TAB> x0 y0 x1 y1 label conf [<TAB> ...]
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .synth import VOCAB, Detection, Sample


class DatasetFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def write_ppm(path, img8: np.ndarray) -> None:
    h, w, c = img8.shape
    if c != 3 or img8.dtype != np.uint8:
        raise ValueError(f"PPM needs uint8 H x W x 3, got {img8.dtype} {img8.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(path, start, "truncated PPM header")
        fields.append((start, raw[start:pos]))
    if fields[0][1] != b"P6":
        raise DatasetFormatError(path, fields[0][0], f"bad magic {fields[0][1]!r}, expected P6")
    try:
        w, h, maxval = (int(v) for _, v in fields[1:])
    except ValueError:
        raise DatasetFormatError(path, fields[1][0], "non-integer PPM header field") from None
    if maxval != 255:
        raise DatasetFormatError(path, fields[3][0], f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    if len(raw) - pos != need:
        raise DatasetFormatError(path, pos, f"expected {need} pixel bytes, found {len(raw) - pos}")
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w, 3).copy()


def _fmt_conf(x: float) -> str:
    return repr(float(x))


def write_dataset(path, samples, *, seed: int = 0, resolution: Optional[int] = None, extra: Optional[dict] = None) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if resolution is None:
        resolution = samples[0].image.shape[0] if samples else 32
    cap_lines, det_lines = [], []
    for s in samples:
        if any(t < 0 or t >= len(VOCAB) for t in s.tokens):
            raise ValueError(f"sample {s.index}: token outside the vocabulary")
        write_ppm(root / "images" / f"{s.index:06d}.ppm", s.image)
        cap_lines.append(f"{s.index}\t{' '.join(str(t) for t in s.tokens)}\n")
        boxes = "".join(
            f"\t{d.box[0]} {d.box[1]} {d.box[2]} {d.box[3]} {d.label} {_fmt_conf(d.confidence)}" for d in s.detections
        )
        det_lines.append(f"{s.index}{boxes}\n")
    (root / "captions.tsv").write_text("".join(cap_lines), encoding="utf-8")
    (root / "detections.tsv").write_text("".join(det_lines), encoding="utf-8")
    manifest = {
        "format": "1",
        "vocab": ",".join(VOCAB),
        "count": str(len(samples)),
        "resolution": str(resolution),
        "seed": str(seed),
    }
    manifest.update({k: str(v) for k, v in (extra or {}).items()})
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.txt"
    out = {}
    offset = 0
    for line in p.read_bytes().splitlines(keepends=True):
        text = line.decode("utf-8").rstrip("\n")
        if text:
            if "=" not in text:
                raise DatasetFormatError(p, offset, f"expected key=value, got {text!r}")
            k, v = text.split("=", 1)
            out[k] = v
        offset += len(line)
    return out


def _tsv_lines(path):
    offset = 0
    for line in Path(path).read_bytes().splitlines(keepends=True):
        yield offset, line.decode("utf-8").rstrip("\n")
        offset += len(line)


def read_dataset(path) -> list:
    root = Path(path)
    manifest = read_manifest(root)
    vocab = manifest.get("vocab", "").split(",") if manifest.get("vocab") else []
    if tuple(vocab) != VOCAB:
        raise DatasetFormatError(root / "manifest.txt", 0, "vocabulary differs from this build's frozen vocabulary")
    count = int(manifest["count"])

    captions = {}
    cap_path = root / "captions.tsv"
    for offset, text in _tsv_lines(cap_path):
        parts = text.split("\t")
        try:
            idx = int(parts[0])
            toks = [int(t) for t in parts[1].split()] if len(parts) > 1 and parts[1] else []
        except (ValueError, IndexError):
            raise DatasetFormatError(cap_path, offset, f"malformed caption record {text!r}") from None
        if len(parts) != 2 or not toks or any(t < 0 or t >= len(VOCAB) for t in toks):
            raise DatasetFormatError(cap_path, offset, f"malformed caption record {text!r}")
        captions[idx] = toks

    detections = {}
    det_path = root / "detections.tsv"
    for offset, text in _tsv_lines(det_path):
        parts = text.split("\t")
        try:
            idx = int(parts[0])
            dets = []
            for rec in parts[1:]:
                x0, y0, x1, y1, label, conf = rec.split(" ")
                dets.append(Detection((int(x0), int(y0), int(x1), int(y1)), label, float(conf)))
        except ValueError as exc:
            raise DatasetFormatError(det_path, offset, f"malformed detection record: {exc}") from None
        detections[idx] = dets

    if len(captions) != count or len(detections) != count:
        raise DatasetFormatError(root / "manifest.txt", 0, f"count={count} but {len(captions)} captions / {len(detections)} detection rows")
    samples = []
    for idx in sorted(captions):
        if idx not in detections:
            raise DatasetFormatError(det_path, 0, f"no detection row for sample {idx}")
        img = read_ppm(root / "images" / f"{idx:06d}.ppm")
        samples.append(Sample(idx, img, captions[idx], detections[idx]))
    return samples


def dataset_hash(path) -> str:
    """SHA-256 over every file of the dataset directory, in sorted path order."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).replace(os.sep, "/").encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
