"""Persistence and ingestion: synthetic data, PGM images, manifests,
checkpoints, embedding export.

The checkpoint is a versioned binary container: magic ``SPCL``, a u32
format version, a JSON metadata block (configs, step counter, root seed),
then a named tensor table of raw little-endian float32 payloads, each with
its shape and a CRC32.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .patching import ImageGray
from .probes import LabeledEmbeddings
from .rng import Streams

MAGIC = b"SPCL"
FORMAT_VERSION = 1

# Synthetic image composition (normalized coordinates in [0, 1)).
_LUNGS = (  # (center_y, center_x, semi_y, semi_x)
    (0.46, 0.30, 0.27, 0.15),
    (0.46, 0.70, 0.27, 0.15),
)
_LUNG_AMP = 0.22
_BLOB_AMP = 0.45
_BLOB_BASE_RADIUS = 6.0  # pixels at a 64-wide image; scales with width
_QUADRANTS = ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75))
_JITTER = 0.09  # uniform jitter of the blob center, fraction of the side


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    path: str
    label: int
    split: str = ""


def save_manifest(records: list[ManifestRecord], path) -> None:
    lines = ["path\tlabel\tsplit"]
    lines += [f"{r.path}\t{r.label}\t{r.split}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> list[ManifestRecord]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != "path\tlabel\tsplit":
        raise DataFormatError(f"{path}: missing manifest header 'path\\tlabel\\tsplit'")
    records = []
    seen = set()
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise DataFormatError(f"{path}: expected 3 tab-separated fields, got {ln!r}")
        rel, label_s, split = parts
        if rel in seen:
            raise DataFormatError(f"{path}: duplicate path {rel!r}")
        seen.add(rel)
        try:
            label = int(label_s)
        except ValueError:
            raise DataFormatError(f"{path}: non-integer label {label_s!r}") from None
        if label < 0:
            raise DataFormatError(f"{path}: negative label {label}")
        records.append(ManifestRecord(path=rel, label=label, split=split))
    return records


# ---------------------------------------------------------------------------
# synthetic dataset


def _soft_disk(dist: np.ndarray, radius: float, edge: float = 1.2) -> np.ndarray:
    return 1.0 / (1.0 + np.exp((dist - radius) / edge))


def synth_image(
    label: int, height: int, width: int, rng: np.random.Generator,
    noise_std: float = 0.05,
) -> ImageGray:
    """One synthetic frame: shared smooth background and 'lung fields' plus a
    class-coded local blob (quadrant = label % 4, radius grows with label // 4)
    whose center jitters inside its quadrant, then clamped Gaussian noise."""
    yy, xx = np.meshgrid(
        (np.arange(height) + 0.5) / height,
        (np.arange(width) + 0.5) / width,
        indexing="ij",
    )
    img = 0.22 + 0.14 * np.sin(math.pi * yy) * np.sin(math.pi * xx)
    for cy, cx, sy, sx in _LUNGS:
        d = np.sqrt(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2)
        img += _LUNG_AMP * np.clip(1.6 * (1.0 - d), 0.0, 1.0)

    qy, qx = _QUADRANTS[label % 4]
    jy, jx = rng.uniform(-_JITTER, _JITTER, size=2)
    cy, cx = (qy + jy) * height, (qx + jx) * width
    radius = (_BLOB_BASE_RADIUS + 3.0 * (label // 4)) * width / 64.0
    d_px = np.sqrt((yy * height - cy) ** 2 + (xx * width - cx) ** 2)
    img += _BLOB_AMP * _soft_disk(d_px, radius)

    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return ImageGray(np.clip(img, 0.0, 1.0).astype(np.float32))


def blob_quadrant_bounds(label: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Pixel box (y0, y1, x0, x1) of the quadrant holding the label's blob."""
    qy, qx = _QUADRANTS[label % 4]
    y0 = 0 if qy < 0.5 else height // 2
    x0 = 0 if qx < 0.5 else width // 2
    return y0, y0 + height // 2, x0, x0 + width // 2


def gen_synthetic(
    count: int,
    classes: int,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
    noise_std: float = 0.05,
    test_frac: float = 0.2,
) -> tuple[list[ImageGray], list[ManifestRecord]]:
    """Deterministic labeled dataset; image i depends only on (seed, i).

    Labels cycle round-robin so classes stay balanced; the trailing
    ``test_frac`` of the indices is tagged as the test split.
    """
    if classes < 2:
        raise DataFormatError(f"need at least 2 classes, got {classes}")
    streams = Streams(seed)
    images, records = [], []
    cut = count - int(round(count * test_frac))
    for i in range(count):
        label = i % classes
        rng = streams.generator("synth", i)
        images.append(synth_image(label, height, width, rng, noise_std))
        records.append(
            ManifestRecord(
                path=f"img_{i:05d}.pgm",
                label=label,
                split="train" if i < cut else "test",
            )
        )
    return images, records


# ---------------------------------------------------------------------------
# PGM (binary, 8-bit)


def save_pgm(img: ImageGray, path) -> None:
    payload = np.round(img.pixels * 255.0).astype(np.uint8).tobytes()
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + payload)


def _read_pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace/comment-separated header tokens; returns (tokens, offset)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataFormatError("truncated header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i


def load_pgm(path) -> ImageGray:
    """Read a binary 8-bit PGM ("P5", maxval 255) into [0, 1] pixels."""
    data = Path(path).read_bytes()
    try:
        tokens, i = _read_pnm_tokens(data, 4)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    magic, w_s, h_s, maxval_s = tokens
    if magic != b"P5":
        raise DataFormatError(f"{path}: magic {magic!r} is not binary PGM 'P5'")
    try:
        width, height, maxval = int(w_s), int(h_s), int(maxval_s)
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric header fields") from None
    if maxval != 255:
        raise DataFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width <= 0 or height <= 0:
        raise DataFormatError(f"{path}: bad dimensions {width}x{height}")
    i += 1  # single whitespace byte after maxval
    payload = data[i : i + width * height]
    if len(payload) < width * height:
        raise DataFormatError(
            f"{path}: payload holds {len(payload)} bytes, need {width * height}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return ImageGray((pixels / 255.0).astype(np.float32))


def load_dataset(data_dir, split: str | None = None) -> tuple[list[ImageGray], list[int]]:
    """Load (images, labels) listed in ``data_dir``/manifest.tsv."""
    data_dir = Path(data_dir)
    records = load_manifest(data_dir / "manifest.tsv")
    if split is not None:
        records = [r for r in records if r.split == split]
    images = [load_pgm(data_dir / r.path) for r in records]
    return images, [r.label for r in records]


def write_dataset(images, records, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img, rec in zip(images, records):
        save_pgm(img, out_dir / rec.path)
    save_manifest(records, out_dir / "manifest.tsv")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Serializable snapshot: configs as plain dicts, tensors by name."""

    encoder_cfg: dict
    train_cfg: dict
    loss_cfg: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_seed: int = 0
    extras: dict = field(default_factory=dict)


def _meta_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "encoder": ckpt.encoder_cfg,
        "train": ckpt.train_cfg,
        "loss": ckpt.loss_cfg,
        "step": ckpt.step,
        "rng_seed": ckpt.rng_seed,
        "extras": ckpt.extras,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += FORMAT_VERSION.to_bytes(4, "little")
    meta = _meta_bytes(ckpt)
    blob += len(meta).to_bytes(4, "little")
    blob += meta
    blob += len(ckpt.tensors).to_bytes(4, "little")
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        name_b = name.encode("utf-8")
        blob += len(name_b).to_bytes(2, "little")
        blob += name_b
        blob += arr.ndim.to_bytes(1, "little")
        for d in arr.shape:
            blob += int(d).to_bytes(4, "little")
        payload = arr.tobytes()
        blob += len(payload).to_bytes(4, "little")
        blob += payload
        blob += zlib.crc32(payload).to_bytes(4, "little")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data = data
        self.i = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.i + n > len(self.data):
            raise DataFormatError(
                f"{self.origin}: truncated at byte {self.i} (need {n} more)"
            )
        out = self.data[self.i : self.i + n]
        self.i += n
        return out

    def u(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint file")
    version = r.u(4)
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported format version {version} (supported: {FORMAT_VERSION})"
        )
    try:
        meta = json.loads(r.take(r.u(4)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt metadata block: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u(4)):
        name = r.take(r.u(2)).decode("utf-8")
        ndim = r.u(1)
        shape = tuple(r.u(4) for _ in range(ndim))
        nbytes = r.u(4)
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
        if nbytes != expected:
            raise DataFormatError(
                f"{path}: tensor {name!r} payload is {nbytes} bytes, "
                f"shape {shape} needs {expected}"
            )
        payload = r.take(nbytes)
        crc = r.u(4)
        if zlib.crc32(payload) != crc:
            raise DataFormatError(f"{path}: tensor {name!r} failed its integrity check")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return Checkpoint(
        encoder_cfg=meta["encoder"],
        train_cfg=meta["train"],
        loss_cfg=meta["loss"],
        tensors=tensors,
        step=meta["step"],
        rng_seed=meta["rng_seed"],
        extras=meta.get("extras", {}),
    )


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(emb: LabeledEmbeddings, path) -> None:
    """Text matrix: header 'label\\td0\\t...', one row per embedding, 9 digits."""
    if emb.count == 0:
        raise DataFormatError("refusing to export an empty embedding set")
    header = "label\t" + "\t".join(f"d{i}" for i in range(emb.dim))
    lines = [header]
    for lbl, vec in zip(emb.labels, emb.embeddings):
        lines.append(str(int(lbl)) + "\t" + "\t".join(f"{v:.9g}" for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path) -> LabeledEmbeddings:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    if not lines or not lines[0].startswith("label\t"):
        raise DataFormatError(f"{path}: missing embedding header")
    dim = len(lines[0].split("\t")) - 1
    labels, rows = [], []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != dim + 1:
            raise DataFormatError(
                f"{path}: row has {len(parts) - 1} values, header promises {dim}"
            )
        try:
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise DataFormatError(f"{path}: non-numeric entry in row {ln!r}") from None
    return LabeledEmbeddings(
        embeddings=np.asarray(rows, dtype=np.float32),
        labels=np.asarray(labels, dtype=np.int64),
    )
