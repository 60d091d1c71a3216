"""Procedural fine-grained benchmark with ground-truth part masks.

Every image shares the same composition: noisy background, one common body at
a jittered position, the class-specific micro-pattern patch stamped on the
body, and decoy patches (drawn from the same pattern pool, label-independent)
stamped off the body.  Class identity is carried only by which pattern sits on
the body, so telling classes apart requires localizing the body patch.  The
patch footprint is recorded as a binary mask for localization scoring.

Pixel values are quantized to 8-bit levels at generation time, which makes the
uint8 file container lossless.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor
from . import pnm

__all__ = [
    "DatasetSpec",
    "Sample",
    "Dataset",
    "DatasetFormatError",
    "DatasetChecksumError",
    "generate",
    "save",
    "load",
    "batches",
    "export_sample_ppm",
]

FILE_MAGIC = b"GGDS"
FILE_VERSION = 1


class DatasetFormatError(Exception):
    """File is not a dataset container or has an incompatible layout."""


class DatasetChecksumError(DatasetFormatError):
    """Container checksum does not match (truncated or corrupted file)."""


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    train_per_class: int = 32
    test_per_class: int = 16
    channels: int = 3
    size: int = 64
    body_axes: tuple = (22, 15)  # ellipse semi-axes in pixels
    body_jitter: int = 6  # max |offset| of the body center
    patch_size: int = 8
    clutter_count: int = 3
    noise_level: float = 0.12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "body_axes", tuple(int(v) for v in self.body_axes))
        if self.num_classes < 2:
            raise ValueError(f"spec: need at least 2 classes, got {self.num_classes}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("spec: per-class sample counts must be >= 1")
        if self.channels != 3:
            raise ValueError("spec: only 3-channel images are supported")
        ax, ay = self.body_axes
        half = self.patch_size / 2.0
        # largest axis-aligned square inscribed in the ellipse must hold the patch
        inscribed_half = (ax * ay) / np.hypot(ax, ay)
        if half > inscribed_half:
            raise ValueError(
                f"spec: patch {self.patch_size}px does not fit inside body axes {self.body_axes}"
            )
        margin = max(self.body_jitter + ax, self.body_jitter + ay)
        if margin + 1 >= self.size // 2:
            raise ValueError("spec: body (with jitter) does not fit inside the image")

    @property
    def train_count(self) -> int:
        return self.num_classes * self.train_per_class

    @property
    def test_count(self) -> int:
        return self.num_classes * self.test_per_class


@dataclass
class Sample:
    image: Tensor  # (3, size, size) float64 in [0, 1], 8-bit quantized
    label: int
    part_mask: np.ndarray  # (size, size) uint8, exactly the patch footprint


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list
    test: list


def _class_patterns(spec: DatasetSpec) -> np.ndarray:
    """Per-class binary micro-patterns, pairwise well separated."""
    p = spec.patch_size
    for attempt in range(64):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(0, attempt)))
        )
        patterns = rng.random((spec.num_classes, p, p)) < 0.5
        flat = patterns.reshape(spec.num_classes, -1)
        dists = [
            np.sum(flat[i] != flat[j])
            for i in range(spec.num_classes)
            for j in range(i + 1, spec.num_classes)
        ]
        if min(dists) >= max(4, p * p // 8):
            return patterns
    raise ValueError("spec: could not draw well-separated class patterns")


def _sample_rng(spec: DatasetSpec, split_id: int, index: int):
    seq = np.random.SeedSequence(spec.seed, spawn_key=(1, split_id, index))
    return np.random.Generator(np.random.PCG64(seq))


def _stamp(img, pattern, x, y, rng, noise):
    p = pattern.shape[0]
    tile = np.where(pattern, 0.92, 0.08)[None, :, :] + noise * (rng.random((3, p, p)) - 0.5)
    img[:, x : x + p, y : y + p] = tile


def _render(spec: DatasetSpec, patterns, label, rng):
    s, p = spec.size, spec.patch_size
    ax, ay = spec.body_axes
    img = 0.25 + spec.noise_level * (rng.random((3, s, s)) - 0.5)

    cx, cy = s // 2 + rng.integers(-spec.body_jitter, spec.body_jitter + 1, size=2)
    xs, ys = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    body = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    img[:, body] = 0.55 + 0.06 * (rng.random((3, int(body.sum()))) - 0.5)

    # patch center stays inside the square inscribed in the body ellipse
    inscribed_half = (ax * ay) / np.hypot(ax, ay)
    reach = max(int(inscribed_half - p / 2.0), 0)
    px = cx - p // 2 + int(rng.integers(-reach, reach + 1))
    py = cy - p // 2 + int(rng.integers(-reach, reach + 1))
    _stamp(img, patterns[label], px, py, rng, 0.04)
    mask = np.zeros((s, s), dtype=np.uint8)
    mask[px : px + p, py : py + p] = 1

    # decoys: label-independent patterns placed clear of the body
    for _ in range(spec.clutter_count):
        decoy = int(rng.integers(0, spec.num_classes))
        for _try in range(200):
            qx, qy = (int(v) for v in rng.integers(0, s - p + 1, size=2))
            corners_x = np.array([qx, qx + p - 1, qx, qx + p - 1, qx + p // 2])
            corners_y = np.array([qy, qy, qy + p - 1, qy + p - 1, qy + p // 2])
            if np.all(((corners_x - cx) / (ax + p)) ** 2 + ((corners_y - cy) / (ay + p)) ** 2 > 1.0):
                break
        else:
            raise ValueError("spec: could not place a clutter patch off the body")
        _stamp(img, patterns[decoy], qx, qy, rng, 0.04)

    img = np.clip(np.round(img * 255.0), 0, 255) / 255.0
    return Sample(image=Tensor(img), label=int(label), part_mask=mask)


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministically generate the train and test splits."""
    patterns = _class_patterns(spec)
    splits = []
    for split_id, per_class in ((0, spec.train_per_class), (1, spec.test_per_class)):
        samples = []
        for i in range(spec.num_classes * per_class):
            label = i % spec.num_classes
            samples.append(_render(spec, patterns, label, _sample_rng(spec, split_id, i)))
        splits.append(samples)
    return Dataset(spec=spec, train=splits[0], test=splits[1])


# ---------------------------------------------------------------------------
# container: magic, version, spec JSON, samples (uint8 image + label + RLE mask),
# sha256 over everything before it


def _spec_json(spec: DatasetSpec) -> bytes:
    d = asdict(spec)
    d["body_axes"] = list(d["body_axes"])
    return json.dumps(d, sort_keys=True).encode()


def _encode_mask(mask: np.ndarray) -> bytes:
    flat = mask.reshape(-1).astype(bool)
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[0::2], edges[1::2]
    out = len(starts).to_bytes(4, "little")
    for s, e in zip(starts, ends):
        out += int(s).to_bytes(4, "little") + int(e - s).to_bytes(4, "little")
    return out


def _decode_mask(buf, offset, size):
    n_runs = int.from_bytes(buf[offset : offset + 4], "little")
    offset += 4
    flat = np.zeros(size * size, dtype=np.uint8)
    for _ in range(n_runs):
        start = int.from_bytes(buf[offset : offset + 4], "little")
        length = int.from_bytes(buf[offset + 4 : offset + 8], "little")
        offset += 8
        flat[start : start + length] = 1
    return flat.reshape(size, size), offset


def save(dataset: Dataset, path) -> None:
    spec = dataset.spec
    spec_bytes = _spec_json(spec)
    body = bytearray()
    body += FILE_MAGIC
    body += FILE_VERSION.to_bytes(4, "little")
    body += len(spec_bytes).to_bytes(4, "little")
    body += spec_bytes
    body += hashlib.sha256(spec_bytes).digest()
    body += len(dataset.train).to_bytes(4, "little")
    body += len(dataset.test).to_bytes(4, "little")
    for sample in dataset.train + dataset.test:
        body += int(sample.label).to_bytes(4, "little")
        body += pnm.to_bytes_rgb(sample.image.data).tobytes()
        body += _encode_mask(sample.part_mask)
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as f:
        f.write(bytes(body) + digest)


def load(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != FILE_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset container (bad magic)")
    if len(blob) < 44:
        raise DatasetChecksumError(f"{path}: file shorter than its checksum")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DatasetChecksumError(f"{path}: checksum mismatch (corrupted or truncated)")
    version = int.from_bytes(body[4:8], "little")
    if version != FILE_VERSION:
        raise DatasetFormatError(f"{path}: unsupported container version {version}")
    spec_len = int.from_bytes(body[8:12], "little")
    offset = 12
    spec_bytes = body[offset : offset + spec_len]
    offset += spec_len
    if body[offset : offset + 32] != hashlib.sha256(spec_bytes).digest():
        raise DatasetFormatError(f"{path}: spec hash mismatch")
    offset += 32
    d = json.loads(spec_bytes.decode())
    spec = DatasetSpec(**d)
    n_train = int.from_bytes(body[offset : offset + 4], "little")
    n_test = int.from_bytes(body[offset + 4 : offset + 8], "little")
    offset += 8
    s = spec.size
    img_bytes = 3 * s * s
    splits = []
    for count in (n_train, n_test):
        samples = []
        for _ in range(count):
            label = int.from_bytes(body[offset : offset + 4], "little")
            offset += 4
            raw = np.frombuffer(body[offset : offset + img_bytes], dtype=np.uint8)
            offset += img_bytes
            image = raw.reshape(3, s, s).astype(np.float64) / 255.0
            mask, offset = _decode_mask(body, offset, s)
            samples.append(Sample(image=Tensor(image), label=label, part_mask=mask))
        splits.append(samples)
    if offset != len(body):
        raise DatasetFormatError(f"{path}: trailing bytes after samples")
    return Dataset(spec=spec, train=splits[0], test=splits[1])


def batches(samples, batch_size, epoch_seed):
    """Seeded shuffle of a split into batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batches: batch size must be >= 1, got {batch_size}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(epoch_seed)))
    order = rng.permutation(len(samples))
    for lo in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[lo : lo + batch_size]]


def export_sample_ppm(sample: Sample, path) -> None:
    """Dump one sample as a portable pixmap for eyeballing."""
    pnm.write_ppm(path, sample.image.data)
