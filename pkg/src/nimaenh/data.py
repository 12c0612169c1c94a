"""Image I/O and hermetic synthetic datasets.

Base images are seeded procedural textures (multi-frequency gradients,
soft shapes, fine noise). Rated images pair a degraded copy with a
severity-derived rating distribution; enhancement pairs apply an analytic
tone curve or the standard haze model. Everything is a pure function of
the seed. Binary PPM (P6) is the native file format; PNG works behind the
same interface.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .quality import RatingDistribution

RATING_STD = 1.4  # spread of the synthetic per-image rating mass


class ImageParseError(ValueError):
    pass


class UnsupportedFormatError(ValueError):
    pass


def validate_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected an [H,W,3] image, got shape {x.shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return x


@dataclass
class DatasetPair:
    input: np.ndarray
    reference: np.ndarray
    tag: str


@dataclass
class RatedImage:
    image: np.ndarray
    rating: RatingDistribution
    severity: float


@dataclass
class Split:
    train: list
    test: list


# ---------------------------------------------------------------------------
# file I/O

def write_image(path, image):
    """Clamp to [0,1], quantize to 8 bits, write PPM (P6) or PNG by extension."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an [H,W,3] image, got shape {image.shape}")
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = str(path)
    if path.endswith(".ppm"):
        h, w = quantized.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(quantized.tobytes())
    elif path.endswith(".png"):
        from PIL import Image as PILImage

        PILImage.fromarray(quantized, mode="RGB").save(path, format="PNG")
    else:
        raise UnsupportedFormatError(f"unsupported image extension: {path}")


def read_image(path) -> np.ndarray:
    """Read a PPM/PNG file into float64 pixels scaled to [0, 1]."""
    path = str(path)
    if path.endswith(".ppm"):
        return _read_ppm(path)
    if path.endswith(".png"):
        from PIL import Image as PILImage

        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
        return arr / 255.0
    raise UnsupportedFormatError(f"unsupported image extension: {path}")


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def _token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageParseError(f"{path}: unexpected end of header at byte {start}")
        return raw[start:pos]

    magic = _token()
    if magic != b"P6":
        raise ImageParseError(f"{path}: bad magic {magic!r} at byte 0 (want P6)")
    try:
        w, h, maxval = int(_token()), int(_token()), int(_token())
    except ValueError:
        raise ImageParseError(f"{path}: non-integer header field near byte {pos}") from None
    if maxval != 255:
        raise ImageParseError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    pixels = raw[pos:pos + need]
    if len(pixels) < need:
        raise ImageParseError(
            f"{path}: truncated pixel data at byte {pos + len(pixels)} "
            f"(have {len(pixels)}, need {need})"
        )
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# analytic reference operators

def _smoothstep(x):
    return x * x * (3.0 - 2.0 * x)


def tone_operator(x, gamma_lift: float, s_curve_strength: float) -> np.ndarray:
    """Blend of a gamma lift and a smoothstep S-curve; monotone per channel."""
    if gamma_lift <= 0:
        raise ValueError("gamma_lift must be positive")
    if not 0 <= s_curve_strength <= 1:
        raise ValueError("s_curve_strength must lie in [0, 1]")
    x = validate_image(x)
    y = (1.0 - s_curve_strength) * np.power(x, gamma_lift) + s_curve_strength * _smoothstep(x)
    return np.clip(y, 0.0, 1.0)


def haze_pair(clean, transmission: float, airlight: float):
    """Standard haze model: hazy = clean*t + A*(1-t); the clean image is the
    exact dehazing reference."""
    if not 0 < transmission <= 1:
        raise ValueError("transmission must lie in (0, 1]")
    if not 0 <= airlight <= 1:
        raise ValueError("airlight must lie in [0, 1]")
    clean = validate_image(clean)
    hazy = clean * transmission + airlight * (1.0 - transmission)
    return hazy, clean


# blur kernel sigma is affine in severity with an onset offset, because the
# filter response is flat below ~0.4 px and the rating signal would vanish
BLUR_SIGMA_OFFSET = 0.3
BLUR_SIGMA_SLOPE = 1.2
NOISE_STD_MAX = 0.25
CONTRAST_COMPRESSION_MAX = 0.8

DEGRADE_KINDS = ("blur", "noise", "contrast-loss")


def degrade(x, severity: float, kind: str, seed: int = 0) -> np.ndarray:
    """Apply blur / noise / contrast compression with strength affine in severity."""
    if not 0 <= severity <= 1:
        raise ValueError("severity must lie in [0, 1]")
    if kind not in DEGRADE_KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}")
    x = validate_image(x)
    if severity == 0:
        return x.copy()
    if kind == "blur":
        sigma = BLUR_SIGMA_OFFSET + BLUR_SIGMA_SLOPE * severity
        out = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")
        return np.clip(out, 0.0, 1.0)
    if kind == "noise":
        rng = np.random.default_rng(seed)
        out = x + rng.normal(0.0, NOISE_STD_MAX * severity, size=x.shape)
        return np.clip(out, 0.0, 1.0)
    scale = 1.0 - CONTRAST_COMPRESSION_MAX * severity
    return 0.5 + (x - 0.5) * scale


# ---------------------------------------------------------------------------
# synthetic ratings

def synth_rating(severity: float) -> RatingDistribution:
    """Gaussian rating mass centred at 9 - 7*severity, integrated per bucket.

    Interior bucket i (scores 1..10) receives the normal mass between
    i-0.5 and i+0.5; the edge buckets absorb the tails (ratings saturate
    at 1 and 10), which keeps the discretized mean within 0.3 of the
    target across the whole severity range.
    """
    if not 0 <= severity <= 1:
        raise ValueError("severity must lie in [0, 1]")
    mean = 9.0 - 7.0 * severity
    edges = np.concatenate([[-np.inf], np.arange(1.5, 10.0), [np.inf]])
    cdf = ndtr((edges - mean) / RATING_STD)
    mass = np.diff(cdf)
    return RatingDistribution(mass / mass.sum())


# ---------------------------------------------------------------------------
# procedural base images

BASE_CONTRAST = 0.16
BASE_TEXTURE = 0.035


def synth_base_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Procedural base image: gradients + blobs, fixed contrast and texture.

    Pixel standard deviation and fine-texture amplitude are held constant
    across images so that blur, noise, and contrast degradations remain
    identifiable from image statistics alone.
    """
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    img = np.zeros((height, width, 3))
    # low-frequency directional gradients, per-channel phase
    for _ in range(3):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(0.5, 3.0)
        field = np.cos(theta) * xx + np.sin(theta) * yy
        for c in range(3):
            amp = rng.uniform(0.1, 0.35)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            img[:, :, c] += amp * np.sin(2.0 * np.pi * freq * field + phase)
    # a few soft elliptical blobs
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        blob = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
        color = rng.uniform(-0.4, 0.4, size=3)
        img += blob[:, :, None] * color[None, None, :]
    img -= img.mean()
    img *= BASE_CONTRAST / max(img.std(), 1e-9)
    # fixed-amplitude luminance texture at three scales, so progressive
    # blurring stays observable across the whole severity range
    tex = rng.standard_normal((height, width, 1))
    for cell in (2, 4):
        coarse = rng.standard_normal((-(-height // cell), -(-width // cell), 1))
        tex += np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:height, :width]
    img += BASE_TEXTURE * tex / np.sqrt(3.0)
    img += 0.5 + rng.uniform(-0.08, 0.08)
    return np.clip(img, 0.0, 1.0)


TONE_GAMMA_RANGE = (0.7, 0.9)
TONE_STRENGTH_RANGE = (0.5, 0.7)
HAZE_T_RANGE = (0.55, 0.75)
HAZE_A_RANGE = (0.8, 0.95)


def make_datasets(seed: int, n_images: int, size, operators=("tone", "haze")):
    """Build the rated set (80/20 split) and the enhancement-pair set (50/50).

    ``size`` is (height, width). Each base image yields one degraded rated
    image and one enhancement pair; operator parameters are drawn per image
    from the declared uniform ranges and recorded on the pair tag.
    """
    if n_images < 10:
        raise ValueError("need at least 10 images")
    height, width = size
    if height < 1 or width < 1:
        raise ValueError(f"invalid image size {size}")
    rng = np.random.default_rng(seed)
    rated, pairs = [], []
    for i in range(n_images):
        base = synth_base_image(rng, height, width)
        severity = rng.uniform(0.0, 1.0)
        kind = DEGRADE_KINDS[i % len(DEGRADE_KINDS)]
        noise_seed = int(rng.integers(0, 2 ** 31))
        degraded = degrade(base, severity, kind, seed=noise_seed)
        rated.append(RatedImage(degraded, synth_rating(severity), severity))

        op = operators[i % len(operators)]
        if op == "tone":
            g = rng.uniform(*TONE_GAMMA_RANGE)
            s = rng.uniform(*TONE_STRENGTH_RANGE)
            pairs.append(DatasetPair(base, tone_operator(base, g, s), f"tone:{g:.4f}:{s:.4f}"))
        elif op == "haze":
            t = rng.uniform(*HAZE_T_RANGE)
            a = rng.uniform(*HAZE_A_RANGE)
            hazy, ref = haze_pair(base, t, a)
            pairs.append(DatasetPair(hazy, ref, f"haze:{t:.4f}:{a:.4f}"))
        else:
            raise ValueError(f"unknown operator {op!r}")
    n_train = (n_images * 8) // 10
    rated_split = Split(rated[:n_train], rated[n_train:])
    half = n_images // 2
    pair_split = Split(pairs[:half], pairs[half:])
    return rated_split, pair_split


def content_hash(image) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# on-disk layout

MANIFEST_FIELDS = ["path", "role", "operator", "sigma", "split"]


def write_datasets(out_dir, rated: Split, pairs: Split):
    """Write all images as PPM plus a manifest CSV describing each file."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []

    def _emit(image, name, role, operator, sigma, split):
        path = os.path.join(out_dir, name)
        write_image(path, image)
        rows.append({"path": name, "role": role, "operator": operator,
                     "sigma": f"{sigma:.6f}" if sigma is not None else "",
                     "split": split})

    for split_name, items in (("train", rated.train), ("test", rated.test)):
        base = 0 if split_name == "train" else len(rated.train)
        for j, item in enumerate(items):
            _emit(item.image, f"rated_{base + j:05d}.ppm", "rated", "", item.severity, split_name)
    for split_name, items in (("train", pairs.train), ("test", pairs.test)):
        base = 0 if split_name == "train" else len(pairs.train)
        for j, pair in enumerate(items):
            _emit(pair.input, f"pair_{base + j:05d}_input.ppm", "pair_input", pair.tag, None, split_name)
            _emit(pair.reference, f"pair_{base + j:05d}_reference.ppm", "pair_reference", pair.tag, None, split_name)

    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def load_rated_split(data_dir, split: str):
    """Rated images for one split, ratings rebuilt from the manifest severity."""
    items = []
    with open(os.path.join(data_dir, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            if row["role"] == "rated" and row["split"] == split:
                sigma = float(row["sigma"])
                image = read_image(os.path.join(data_dir, row["path"]))
                items.append(RatedImage(image, synth_rating(sigma), sigma))
    return items


def load_pair_split(data_dir, split: str):
    inputs, references = {}, {}
    tags = {}
    with open(os.path.join(data_dir, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split or not row["role"].startswith("pair_"):
                continue
            stem = row["path"].rsplit("_", 1)[0]
            tags[stem] = row["operator"]
            target = inputs if row["role"] == "pair_input" else references
            target[stem] = read_image(os.path.join(data_dir, row["path"]))
    pairs = []
    for stem in sorted(inputs):
        if stem not in references:
            raise ValueError(f"pair {stem} is missing its reference image")
        pairs.append(DatasetPair(inputs[stem], references[stem], tags[stem]))
    return pairs
