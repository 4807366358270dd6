"""Synthetic face sketches with multi-task labels, annotation files, batching.

Every label is a deterministic function of a :class:`FaceLatent`, and every
latent is visible in the rendered image (mouth arc, eye opening, brow
height and inward angle), so the tasks are learnable from pixels.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .losses import AU_INVALID, EXPR_INVALID, VA_INVALID

N_AUS = 12
MIN_SIZE = 32
NOISE_AMPLITUDE = 0.02
SUPERSAMPLE = 4
MASK_RATE = 0.1

LSD_CLASSES = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
MTL_CLASSES = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise", "other")

# (valence, arousal, brow_raise, brow_knit) per expression
PROTOTYPES = {
    "neutral": (0.0, 0.0, 0.0, 0.0),
    "anger": (-0.6, 0.5, -0.6, 0.9),
    "disgust": (-0.7, -0.3, -0.4, 0.5),
    "fear": (-0.5, 0.7, 0.7, 0.7),
    "happiness": (0.8, 0.5, 0.1, 0.0),
    "sadness": (-0.6, -0.6, 0.5, 0.6),
    "surprise": (0.3, 0.8, 0.8, 0.1),
    "other": (0.6, -0.6, -0.5, 0.3),
}

# AU index -> (name, rule on the latent)
AU_RULES = (
    ("AU1 inner brow raiser", lambda z: z.brow_raise > 0.3),
    ("AU2 outer brow raiser", lambda z: z.brow_raise > 0.6),
    ("AU4 brow lowerer", lambda z: z.brow_knit > 0.5),
    ("AU6 cheek raiser", lambda z: z.mouth_curve > 0.5),
    ("AU7 lid tightener", lambda z: z.eye_open < 0.3),
    ("AU10 upper lip raiser", lambda z: z.mouth_curve < -0.4 and z.brow_knit > 0.4),
    ("AU12 lip corner puller", lambda z: z.mouth_curve > 0.3),
    ("AU15 lip corner depressor", lambda z: z.mouth_curve < -0.3),
    ("AU23 lip tightener", lambda z: z.brow_knit > 0.7),
    ("AU24 lip pressor", lambda z: z.mouth_curve < -0.6),
    ("AU25 lips part", lambda z: z.eye_open > 0.6),
    ("AU26 jaw drop", lambda z: z.eye_open > 0.8 and z.brow_raise > 0.0),
)


class ImageFormatError(ValueError):
    """Unreadable or malformed pixmap."""


class AnnotationError(ValueError):
    """Malformed or out-of-range annotation row."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def classes_for_mode(mode: str) -> tuple[str, ...]:
    if mode == "MTL":
        return MTL_CLASSES
    if mode == "LSD":
        return LSD_CLASSES
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class FaceLatent:
    mouth_curve: float = 0.0
    eye_open: float = 0.5
    brow_raise: float = 0.0
    brow_knit: float = 0.0
    jitter_seed: int = 0

    def __post_init__(self) -> None:
        if not (-1 <= self.mouth_curve <= 1 and 0 <= self.eye_open <= 1
                and -1 <= self.brow_raise <= 1 and 0 <= self.brow_knit <= 1):
            raise ValueError(f"latent out of range: {self}")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "FaceLatent":
        return cls(
            mouth_curve=float(rng.uniform(-1, 1)),
            eye_open=float(rng.uniform(0, 1)),
            brow_raise=float(rng.uniform(-1, 1)),
            brow_knit=float(rng.uniform(0, 1)),
            jitter_seed=int(rng.integers(0, 2**31 - 1)),
        )

    def geometry(self) -> np.ndarray:
        return np.array([self.mouth_curve, self.eye_open, self.brow_raise, self.brow_knit])


@dataclass
class Sample:
    """One frame.  ``image`` is [3,H,W] in [0,1] or None before loading."""

    image: np.ndarray | None
    valence: float
    arousal: float
    expr: int
    aus: np.ndarray
    path: str | None = None
    latent: FaceLatent | None = None


# ----------------------------------------------------------------- rendering

FACE_CENTER = (0.0, 0.05)
FACE_RADII = (0.72, 0.88)
EYE_CENTERS = ((-0.3, -0.12), (0.3, -0.12))
MOUTH_Y = 0.45
MOUTH_HALF_WIDTH = 0.3
MOUTH_DEPTH = 0.1
STROKE = 0.035
BACKGROUND, SKIN, INK = 0.15, 0.62, 0.08


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(c, c)  # u right, v down


def _segment_distance(u, v, p0, p1):
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((u - x0) * dx + (v - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - (x0 + t * dx), v - (y0 + t * dy))


def mouth_box(size: int) -> tuple[slice, slice]:
    """Pixel rows/cols that can contain mouth ink, for any curvature."""
    pad = STROKE + 2.0 / size
    u0, u1 = -MOUTH_HALF_WIDTH - pad, MOUTH_HALF_WIDTH + pad
    v0, v1 = MOUTH_Y - MOUTH_DEPTH - pad, MOUTH_Y + MOUTH_DEPTH + pad

    def to_px(a):
        return (a + 1.0) / 2.0 * size

    return (slice(int(math.floor(to_px(v0))), int(math.ceil(to_px(v1)))),
            slice(int(math.floor(to_px(u0))), int(math.ceil(to_px(u1)))))


def render_face(latent: FaceLatent, size: int = 64) -> np.ndarray:
    """Anti-aliased grayscale sketch replicated to [3, size, size]."""
    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")
    u, v = _grid(size)
    img = np.full(u.shape, BACKGROUND)
    (cx, cy), (rx, ry) = FACE_CENTER, FACE_RADII
    img[((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0] = SKIN

    ink = np.zeros(u.shape, dtype=bool)
    eye_ry = 0.02 + 0.1 * latent.eye_open
    for ex, ey in EYE_CENTERS:
        ink |= ((u - ex) / 0.13) ** 2 + ((v - ey) / eye_ry) ** 2 <= 1.0

    base = -0.33 - 0.1 * latent.brow_raise
    for side in (-1.0, 1.0):
        outer = (side * 0.45, base)
        inner = (side * (0.15 - 0.04 * latent.brow_knit), base + 0.12 * latent.brow_knit)
        ink |= _segment_distance(u, v, outer, inner) <= STROKE

    s = u / MOUTH_HALF_WIDTH
    arc = MOUTH_Y + latent.mouth_curve * MOUTH_DEPTH * (1.0 - 2.0 * s * s)
    ink |= (np.abs(s) <= 1.0) & (np.abs(v - arc) <= STROKE)

    img[ink] = INK
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    noise = np.random.default_rng(latent.jitter_seed).uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, img.shape)
    img = np.clip(img + noise, 0.0, 1.0)
    return np.repeat(img[None], 3, axis=0)


# -------------------------------------------------------------------- labels


def expression_from_latent(latent: FaceLatent, mode: str = "MTL") -> int:
    names = classes_for_mode(mode)
    point = np.array([latent.mouth_curve, 2 * latent.eye_open - 1, latent.brow_raise, latent.brow_knit])
    protos = np.array([PROTOTYPES[n] for n in names])
    return int(np.argmin(((protos - point) ** 2).sum(axis=1)))


def label_from_latent(latent: FaceLatent, mode: str = "MTL") -> tuple[float, float, int, np.ndarray]:
    """(valence, arousal, expression id, AU bits) implied by the latent."""
    aus = np.array([int(bool(rule(latent))) for _, rule in AU_RULES], dtype=np.int64)
    return latent.mouth_curve, 2.0 * latent.eye_open - 1.0, expression_from_latent(latent, mode), aus


def synthesize(n: int, mode: str = "MTL", seed: int = 0, size: int = 64) -> list[Sample]:
    """In-memory dataset; MTL rows are sentinel-masked on one task at 10%."""
    if n < 1:
        raise ValueError("n must be >= 1")
    classes_for_mode(mode)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        z = FaceLatent.sample(rng)
        v, a, e, aus = label_from_latent(z, mode)
        sample = Sample(render_face(z, size), v, a, e, aus, latent=z)
        if mode == "LSD":
            sample.valence = sample.arousal = VA_INVALID
            sample.aus = np.full(N_AUS, AU_INVALID, dtype=np.int64)
        elif rng.random() < MASK_RATE:
            task = int(rng.integers(0, 3))
            if task == 0:
                sample.valence = sample.arousal = VA_INVALID
            elif task == 1:
                sample.expr = EXPR_INVALID
            else:
                sample.aus = np.full(N_AUS, AU_INVALID, dtype=np.int64)
        out.append(sample)
    return out


# ----------------------------------------------------------------------- PPM


def save_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a [3,H,W] image in [0,1] as binary 8-bit PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    _, h, w = image.shape
    px = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a binary 8-bit PPM into a [3,H,W] float array in [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (bad magic)")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    if pos >= len(raw):
        raise ImageFormatError(f"{path}: truncated header")
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header field") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise ImageFormatError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    need = w * h * 3
    if len(raw) - pos < need:
        raise ImageFormatError(f"{path}: truncated raster ({len(raw) - pos} of {need} bytes)")
    px = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


# --------------------------------------------------------------- annotations


def mtl_header(n_aus: int = N_AUS) -> str:
    return ",".join(["path", "valence", "arousal", "expr"] + [f"au{i}" for i in range(n_aus)])


LSD_HEADER = "path,expr"


def _fmt(x: float) -> str:
    return "-5" if x == VA_INVALID else repr(float(x))


def format_row(sample: Sample, mode: str) -> str:
    if mode == "LSD":
        return f"{sample.path},{sample.expr}"
    aus = ",".join(str(int(b)) for b in sample.aus)
    return f"{sample.path},{_fmt(sample.valence)},{_fmt(sample.arousal)},{sample.expr},{aus}"


def write_annotations(path: str | os.PathLike, samples: Sequence[Sample], mode: str) -> None:
    header = LSD_HEADER if mode == "LSD" else mtl_header(len(samples[0].aus) if samples else N_AUS)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for s in samples:
            fh.write(format_row(s, mode) + "\n")


def _parse_va(text: str, name: str, line: int) -> float:
    try:
        x = float(text)
    except ValueError:
        raise AnnotationError(f"{name} {text!r} is not a number", line) from None
    if not math.isfinite(x) or (x != VA_INVALID and not -1.0 <= x <= 1.0):
        raise AnnotationError(f"{name} {text!r} outside [-1, 1] and not the -5 sentinel", line)
    return x


def _parse_int(text: str, name: str, line: int, allowed) -> int:
    try:
        x = int(text)
    except ValueError:
        raise AnnotationError(f"{name} {text!r} is not an integer", line) from None
    if x not in allowed:
        raise AnnotationError(f"{name} {x} out of range", line)
    return x


def parse_row(text: str, mode: str, line: int = 0, n_aus: int = N_AUS) -> Sample:
    parts = text.rstrip("\r\n").split(",")
    n_classes = len(classes_for_mode(mode))
    expr_allowed = set(range(n_classes)) | {EXPR_INVALID}
    expected = 2 if mode == "LSD" else 4 + n_aus
    if len(parts) != expected:
        raise AnnotationError(f"expected {expected} fields, found {len(parts)}", line)
    path = parts[0].strip()
    if not path:
        raise AnnotationError("empty image path", line)
    if mode == "LSD":
        expr = _parse_int(parts[1], "expr", line, set(range(n_classes)))
        return Sample(None, VA_INVALID, VA_INVALID, expr, np.full(n_aus, AU_INVALID, dtype=np.int64), path)
    v = _parse_va(parts[1], "valence", line)
    a = _parse_va(parts[2], "arousal", line)
    if (v == VA_INVALID) != (a == VA_INVALID):
        raise AnnotationError("valence and arousal must be masked together", line)
    expr = _parse_int(parts[3], "expr", line, expr_allowed)
    aus = np.array([_parse_int(p, f"au{i}", line, {0, 1, AU_INVALID}) for i, p in enumerate(parts[4:])],
                   dtype=np.int64)
    if v == VA_INVALID and expr == EXPR_INVALID and np.all(aus == AU_INVALID):
        raise AnnotationError("row carries no valid label", line)
    return Sample(None, v, a, expr, aus, path)


def parse_annotations(path: str | os.PathLike, mode: str) -> list[Sample]:
    """Parse an annotation CSV; image paths stay relative to the file."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise AnnotationError("empty annotation file", 1)
    header = lines[0].strip()
    if mode == "LSD":
        if header != LSD_HEADER:
            raise AnnotationError(f"expected header {LSD_HEADER!r}", 1)
        n_aus = N_AUS
    else:
        cols = header.split(",")
        n_aus = len(cols) - 4
        if n_aus < 1 or header != mtl_header(n_aus):
            raise AnnotationError(f"expected header {mtl_header()!r}", 1)
    out = []
    for i, text in enumerate(lines[1:], start=2):
        if text.strip():
            out.append(parse_row(text, mode, i, n_aus))
    return out


def load_samples(manifest: str | os.PathLike, mode: str) -> list[Sample]:
    """Parse ``manifest`` and load every referenced image."""
    root = Path(manifest).parent
    samples = parse_annotations(manifest, mode)
    for s in samples:
        s.image = load_image(root / s.path)
    return samples


def generate_dataset(n: int, mode: str, seed: int, out_dir: str | os.PathLike, size: int = 64) -> Path:
    """Write ``n`` PPM images and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    samples = synthesize(n, mode, seed, size)
    width = max(5, len(str(n - 1)))
    for i, s in enumerate(samples):
        s.path = f"img/{i:0{width}d}.ppm"
        save_ppm(out / s.path, s.image)
    manifest = out / "manifest.csv"
    write_annotations(manifest, samples, mode)
    return manifest


def file_checksum(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    images: np.ndarray  # [B,3,H,W]
    va: np.ndarray  # [B,2], -5 where invalid
    expr: np.ndarray  # [B], -1 where invalid
    aus: np.ndarray  # [B,A], -1 where invalid
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def stack_labels(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    va = np.array([[s.valence, s.arousal] for s in samples], dtype=np.float64)
    expr = np.array([s.expr for s in samples], dtype=np.int64)
    aus = np.stack([np.asarray(s.aus, dtype=np.int64) for s in samples])
    return va, expr, aus


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    if any(s.image is None for s in samples):
        raise ValueError("samples have no loaded images")
    return np.stack([s.image for s in samples])


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment_image(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5), brightness x U[0.8, 1.2], crop >= 85% area and resize."""
    _, h, w = img.shape
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    img = np.clip(img * rng.uniform(0.8, 1.2), 0.0, 1.0)
    frac = rng.uniform(0.85, 1.0)
    ch = min(h, max(1, int(math.ceil(h * math.sqrt(frac)))))
    cw = min(w, max(1, int(math.ceil(w * math.sqrt(frac)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[:, top : top + ch, left : left + cw]
    return _resize_bilinear(crop, h, w)


def batch_iter(samples: Sequence[Sample], batch_size: int, seed: int, augment: bool = False,
               epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Batches in an order fixed by ``(seed, epoch)``; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise ValueError("no samples to batch")
    n = len(samples)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    va, expr, aus = stack_labels(samples)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        imgs = np.stack([samples[i].image for i in idx])
        if augment:
            imgs = np.stack([augment_image(im, aug_rng) for im in imgs])
        yield Batch(imgs, va[idx], expr[idx], aus[idx], idx)


def with_images(samples: Sequence[Sample], size: int) -> list[Sample]:
    """Re-render latent-bearing samples at another size."""
    return [replace(s, image=render_face(s.latent, size)) for s in samples]


def mouth_probe_features(image: np.ndarray) -> np.ndarray:
    """Row means of the mouth region, split into centre and corner columns.

    A linear read-out of these recovers the sign of the mouth curvature,
    which is what makes valence learnable from pixels.
    """
    size = image.shape[-1]
    rows, cols = mouth_box(size)
    region = image[0, rows, cols]
    q = region.shape[1] // 4
    centre = region[:, q : region.shape[1] - q].mean(axis=1)
    corners = np.concatenate([region[:, :q], region[:, region.shape[1] - q :]], axis=1).mean(axis=1)
    return np.concatenate([centre, corners])
