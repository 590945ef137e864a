"""Procedural real/fake images, preprocessing, perturbations and file I/O.

"Real" images are band-limited colour noise fields. Fakes are the same kind
of field generated at half resolution and upsampled x2, which leaves the
resampling traces a detector can key on:

* ``FAKE_A``: nearest-neighbour upsampling (2x2 blocks).
* ``FAKE_B``: bilinear upsampling (held out from training).

Everything is a pure function of its seed.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from gff import kernels
from gff.errors import ContractError, FormatError

REAL, FAKE_A, FAKE_B = "REAL", "FAKE_A", "FAKE_B"
FAMILIES = (REAL, FAKE_A, FAKE_B)

FIELD_KERNEL_SIGMA = 1.0
FIELD_KERNEL_SIZE = 5
RESIZE_RATIO = 8 / 7  # 256 / 224
# Per-channel offset/gain ranges of the smooth colour field. Fixed by default:
# random global colour shifts swamp the weak frequency cue at toy scale.
COLOUR_OFFSET = (0.5, 0.5)
COLOUR_GAIN = (0.12, 0.12)

# IJG standard luminance quantisation table.
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    label: int
    family: str
    seed: int
    path: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class PerturbationConfig:
    blur_sigma: float = 1.0
    crop_fraction: float = 0.875
    jpeg_quality: int = 75
    noise_sigma: float = 0.02
    apply_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ContractError("apply_probability must lie in [0, 1]")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ContractError("crop_fraction must lie in (0, 1]")
        if not 1 <= self.jpeg_quality <= 100:
            raise ContractError("jpeg_quality must lie in 1..100")
        if self.blur_sigma <= 0 or self.noise_sigma < 0:
            raise ContractError("blur_sigma must be positive and noise_sigma non-negative")


# ---------------------------------------------------------------------------
# generation


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalised 1-D Gaussian; radius defaults to ceil(3 sigma)."""
    if radius is None:
        radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def separable_blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.convolve1d(img, kernel, axis=0, mode="reflect")
    return ndimage.convolve1d(out, kernel, axis=1, mode="reflect")


def _colour_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kernel = gaussian_kernel1d(FIELD_KERNEL_SIGMA, FIELD_KERNEL_SIZE // 2)
    # std of the smoothed unit-variance noise, ignoring boundaries
    field_std = float(np.sum(kernel**2))
    noise = rng.standard_normal((h, w, 3))
    smooth = separable_blur(noise, kernel) / field_std
    offset = rng.uniform(*COLOUR_OFFSET, size=3)
    gain = rng.uniform(*COLOUR_GAIN, size=3)
    return offset + gain * smooth


def _check_size(h: int, w: int) -> None:
    if h < 16 or w < 16:
        raise ContractError(f"images must be at least 16x16, got {h}x{w}")


def gen_real(seed: int, h: int, w: int) -> LabeledImage:
    _check_size(h, w)
    rng = np.random.default_rng(seed)
    return LabeledImage(np.clip(_colour_field(rng, h, w), 0.0, 1.0), 0, REAL, int(seed))


def gen_fake_unclamped(seed: int, h: int, w: int, family: str) -> np.ndarray:
    if family not in (FAKE_A, FAKE_B):
        raise ContractError(f"fake family must be FAKE_A or FAKE_B, got {family!r}")
    _check_size(h, w)
    if h % 2 or w % 2:
        raise ContractError("fake images need even dimensions")
    rng = np.random.default_rng(seed)
    half = _colour_field(rng, h // 2, w // 2)
    if family == FAKE_A:
        return np.repeat(np.repeat(half, 2, axis=0), 2, axis=1)
    return kernels.bilinear_resize(half, h, w)


def gen_fake(seed: int, h: int, w: int, family: str) -> LabeledImage:
    return LabeledImage(np.clip(gen_fake_unclamped(seed, h, w, family), 0.0, 1.0), 1, family, int(seed))


def generate(family: str, seed: int, h: int, w: int) -> LabeledImage:
    return gen_real(seed, h, w) if family == REAL else gen_fake(seed, h, w, family)


def mean_abs_laplacian(img: np.ndarray) -> float:
    """High-frequency energy: mean |discrete Laplacian| over interior pixels."""
    lap = (
        img[1:-1, :-2] + img[1:-1, 2:] + img[:-2, 1:-1] + img[2:, 1:-1] - 4.0 * img[1:-1, 1:-1]
    )
    return float(np.mean(np.abs(lap)))


# ---------------------------------------------------------------------------
# corpus

SPLITS = ("train", "val", "test-seen", "test-unseen")
SPLIT_FAKE_FAMILY = {"train": FAKE_A, "val": FAKE_A, "test-seen": FAKE_A, "test-unseen": FAKE_B}


def derive_seed(*parts: int) -> int:
    """Stable u64 from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    image_size: int = 64
    train_real: int = 1000
    train_fake: int = 1000
    val_real: int = 100
    val_fake: int = 100
    test_real: int = 250
    test_fake: int = 250

    def counts(self, split: str) -> tuple[int, int]:
        key = {"train": "train", "val": "val", "test-seen": "test", "test-unseen": "test"}[split]
        return getattr(self, f"{key}_real"), getattr(self, f"{key}_fake")


def generate_split(spec: CorpusSpec, split: str) -> list[LabeledImage]:
    """Reals first, then fakes of the split's family; counts exactly as requested."""
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    n_real, n_fake = spec.counts(split)
    sid = SPLITS.index(split)
    fam = SPLIT_FAKE_FAMILY[split]
    s = spec.image_size
    out = [gen_real(derive_seed(spec.seed, sid, 0, i), s, s) for i in range(n_real)]
    out += [gen_fake(derive_seed(spec.seed, sid, 1, i), s, s, fam) for i in range(n_fake)]
    return out


def generate_corpus(spec: CorpusSpec, splits: Iterable[str] = SPLITS) -> dict[str, list[LabeledImage]]:
    return {name: generate_split(spec, name) for name in splits}


# ---------------------------------------------------------------------------
# preprocessing


def crop_size_for(resize: int) -> int:
    return int(round(resize / RESIZE_RATIO))


def resize_size_for(crop: int) -> int:
    return int(round(crop * RESIZE_RATIO))


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1, :].copy()


def center_offset(size: int, crop: int) -> int:
    return (size - crop) // 2


def crop_array(pixels: np.ndarray, crop: int, train: bool, rng: np.random.Generator | None) -> np.ndarray:
    """Crop a resized square image: random crop + 50% flip (train) or center crop."""
    s = pixels.shape[0]
    if crop > s or crop > pixels.shape[1]:
        raise ContractError(f"crop {crop} larger than image {pixels.shape[:2]}")
    if train:
        top = int(rng.integers(0, s - crop + 1))
        left = int(rng.integers(0, pixels.shape[1] - crop + 1))
        out = pixels[top : top + crop, left : left + crop]
        if rng.random() < 0.5:
            out = out[:, ::-1]
        return np.ascontiguousarray(out)
    top = center_offset(s, crop)
    left = center_offset(pixels.shape[1], crop)
    return np.ascontiguousarray(pixels[top : top + crop, left : left + crop])


def resize(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels.copy()
    return kernels.bilinear_resize(pixels, size, size)


def resize_and_crop(img: LabeledImage, train: bool, seed: int | None = None, crop: int | None = None) -> LabeledImage:
    """Resize to round(8/7 * crop) then crop to ``crop`` (default: the input height).

    224 -> resize 256, center offset 16.
    """
    crop = img.pixels.shape[0] if crop is None else crop
    resized = resize(img.pixels, resize_size_for(crop))
    rng = np.random.default_rng(seed) if train else None
    return replace(img, pixels=crop_array(resized, crop, train, rng))


# ---------------------------------------------------------------------------
# perturbations


def jpeg_quant_table(quality: int) -> np.ndarray:
    q = int(np.clip(quality, 1, 100))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((JPEG_LUMA * scale + 50.0) / 100.0), 1.0, 255.0)


def jpeg_approx(pixels: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block DCT, quantise with the scaled luma table, inverse DCT."""
    h, w, c = pixels.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(pixels * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    bh, bw = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(bh, 8, bw, 8, c).transpose(0, 2, 4, 1, 3)
    table = jpeg_quant_table(quality)
    coef = sfft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.round(coef / table) * table
    rec = sfft.idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(bh * 8, bw * 8, c)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


def random_crop_resize(pixels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    h, w = pixels.shape[:2]
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    sub = np.ascontiguousarray(pixels[top : top + ch, left : left + cw])
    return kernels.bilinear_resize(sub, h, w)


def perturb(img: LabeledImage, cfg: PerturbationConfig, seed: int) -> LabeledImage:
    """Crop, blur, JPEG and noise, each applied independently with ``apply_probability``."""
    rng = np.random.default_rng(seed)
    draws = rng.random(4)
    p = cfg.apply_probability
    x = img.pixels
    if draws[0] < p:
        x = random_crop_resize(x, cfg.crop_fraction, rng)
    if draws[1] < p:
        x = separable_blur(x, gaussian_kernel1d(cfg.blur_sigma))
    if draws[2] < p:
        x = jpeg_approx(x, cfg.jpeg_quality)
    if draws[3] < p:
        x = x + rng.normal(0.0, cfg.noise_sigma, size=x.shape)
    x = np.clip(x, 0.0, 1.0) if x is not img.pixels else x.copy()
    return replace(img, pixels=x)


# ---------------------------------------------------------------------------
# files


def write_image(pixels: np.ndarray | LabeledImage, path: str | os.PathLike) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    if isinstance(pixels, LabeledImage):
        pixels = pixels.pixels
    h, w = pixels.shape[:2]
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} magic")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = fields
    if w < 1 or h < 1 or maxval != 255:
        raise FormatError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    n = w * h * channels
    body = raw[pos : pos + n]
    if len(body) != n:
        raise FormatError(f"{path}: truncated raster ({len(body)} of {n} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_image(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_pgm(gray: np.ndarray, path: str | os.PathLike) -> None:
    h, w = gray.shape
    data = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


MANIFEST_FIELDS = ("path", "label", "family", "seed")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    family: str
    seed: int


def write_manifest(entries: Sequence[ManifestEntry], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        for e in entries:
            wr.writerow((e.path, e.label, e.family, e.seed))


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != MANIFEST_FIELDS:
        raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            label, seed = int(row[1]), int(row[3])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: label and seed must be integers") from None
        if label not in (0, 1) or row[2] not in FAMILIES:
            raise FormatError(f"{path}:{lineno}: bad label/family {row[1]}/{row[2]}")
        out.append(ManifestEntry(row[0], label, row[2], seed))
    return out


def write_split(images: Sequence[LabeledImage], root: str | os.PathLike, split: str) -> Path:
    """Write PPMs under ``root/split/`` and the manifest ``root/split.csv``."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        rel = f"{split}/{i:05d}_{img.family.lower()}.ppm"
        write_image(img.pixels, root / rel)
        entries.append(ManifestEntry(rel, img.label, img.family, img.seed))
    manifest = root / f"{split}.csv"
    write_manifest(entries, manifest)
    return manifest


def load_manifest(path: str | os.PathLike) -> list[LabeledImage]:
    """Read every image listed in a manifest; paths are relative to its directory."""
    base = Path(path).parent
    return [
        LabeledImage(read_image(base / e.path), e.label, e.family, e.seed, path=e.path)
        for e in read_manifest(path)
    ]
