"""Synthetic style/semantics corpus.

Style is a parametric texture family (stripes, checker, dots, noise_palette)
with a fixed characteristic palette per family; semantics is a geometric
shape at a position. The two factors are independently controllable so
style- and semantics-oriented tests each have an exact oracle.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_rng

FAMILIES = ("stripes", "checker", "dots", "noise_palette")
SHAPES = ("circle", "square", "triangle")

# Closed caption vocabulary (every token id < V_CAP).
V_CAP = 64
L_CAP = 8
PAD = 0
SHAPE_TOKENS = {"circle": 1, "square": 2, "triangle": 3}
BUCKET_BASE = 4  # tokens 4..12 are the 3x3 position buckets
STYLE_TOKENS = {"stripes": 13, "checker": 14, "dots": 15, "noise_palette": 16}

# One fixed palette per family with a dominant hue per family, away from the
# 0.5 background gray in every color; hue identity is what Gram oracles key on.
FAMILY_PALETTES = {
    "stripes": ((0.95, 0.15, 0.05), (0.98, 0.55, 0.10), (0.60, 0.05, 0.12)),
    "checker": ((0.10, 0.25, 0.95), (0.05, 0.10, 0.55), (0.30, 0.60, 0.95)),
    "dots": ((0.10, 0.80, 0.15), (0.02, 0.45, 0.10), (0.55, 0.90, 0.25)),
    "noise_palette": ((0.80, 0.10, 0.85), (0.45, 0.05, 0.50), (0.95, 0.55, 0.90)),
}

BACKGROUND = 0.5


@dataclass(frozen=True)
class StyleSpec:
    family: str
    angle: float  # degrees, used by stripes
    period: float  # pixels, >= 2
    palette: tuple  # 3 RGB colors in [0,1]

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown style family {self.family!r}")
        if self.period < 2:
            raise ValueError("period must be >= 2 pixels")
        pal = np.asarray(self.palette)
        if pal.shape != (3, 3):
            raise ValueError("palette must be 3 RGB colors")
        for i in range(3):
            for j in range(i + 1, 3):
                if np.abs(pal[i] - pal[j]).max() < 0.1:
                    raise ValueError("palette colors must be pairwise distinct")
        return self


@dataclass(frozen=True)
class ContentSpec:
    shape: str
    center: tuple  # (x, y) in [0,1]^2
    scale: float  # fraction of image side, in (0.2, 0.6)

    def validate(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not (0.2 < self.scale < 0.6):
            raise ValueError("scale must lie in (0.2, 0.6)")
        half = self.scale / 2
        for c in self.center:
            if c - half < 0 or c + half > 1:
                raise ValueError("shape must fit fully inside the image")
        return self


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0,1]
    caption_tokens: np.ndarray  # (L_CAP,) int
    style_spec: StyleSpec
    content_spec: ContentSpec


@dataclass
class StyleReferenceSet:
    images: np.ndarray  # (n, 3, H, W)
    caption_tokens: np.ndarray  # (n, L_CAP)

    def __len__(self):
        return self.images.shape[0]


def position_bucket(center):
    bx = min(int(center[0] * 3), 2)
    by = min(int(center[1] * 3), 2)
    return by * 3 + bx


def caption_for(style, content):
    """Full caption: shape word, position word, style word, padding."""
    tokens = np.zeros(L_CAP, dtype=np.int64)
    tokens[0] = SHAPE_TOKENS[content.shape]
    tokens[1] = BUCKET_BASE + position_bucket(content.center)
    tokens[2] = STYLE_TOKENS[style.family]
    return tokens


def prompt_for(content):
    """Semantic-only prompt: what to draw and where, no style words.

    Style must reach the generator through reference images, so prompts
    never mention the texture family.
    """
    tokens = np.zeros(L_CAP, dtype=np.int64)
    tokens[0] = SHAPE_TOKENS[content.shape]
    tokens[1] = BUCKET_BASE + position_bucket(content.center)
    return tokens


# ---------------------------------------------------------------------------
# rasterization


def shape_mask(content, size):
    """Boolean (size, size) mask of the analytic shape region."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size
    cx, cy = content.center
    half = content.scale / 2
    if content.shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half**2
    if content.shape == "square":
        return np.maximum(np.abs(px - cx), np.abs(py - cy)) <= half
    # up-pointing triangle inscribed in the bounding square
    apex = (cx, cy - half)
    left = (cx - half, cy + half)
    right = (cx + half, cy + half)

    def edge(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    d1 = edge((px, py), apex, right)
    d2 = edge((px, py), right, left)
    d3 = edge((px, py), left, apex)
    return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)


def _texture(style, size, seed):
    """(3, size, size) texture image for the style, covering the full frame."""
    pal = np.asarray(style.palette)
    ys, xs = np.mgrid[0:size, 0:size]
    if style.family == "stripes":
        theta = np.deg2rad(style.angle)
        u = np.cos(theta) * (ys + 0.5) + np.sin(theta) * (xs + 0.5)
        idx = np.floor_divide(np.floor(u), style.period).astype(np.int64) % 3
    elif style.family == "checker":
        fx = np.floor((xs + 0.5) / style.period).astype(np.int64)
        fy = np.floor((ys + 0.5) / style.period).astype(np.int64)
        idx = (fx + fy) % 2
    elif style.family == "dots":
        pitch = 2.0 * style.period
        gx = np.floor((xs + 0.5) / pitch)
        gy = np.floor((ys + 0.5) / pitch)
        cx = (gx + 0.5) * pitch
        cy = (gy + 0.5) * pitch
        inside = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= (0.7 * style.period) ** 2
        parity = ((gx + gy) % 2).astype(np.int64)
        idx = np.where(inside, 1 + parity, 0)
    elif style.family == "noise_palette":
        rng = make_rng(seed, 101)
        idx = rng.integers(0, 3, size=(size, size))
    else:
        raise ValueError(style.family)
    return pal[idx].transpose(2, 0, 1)


def render(style, content, seed, size=32):
    """Deterministic sample: textured shape on neutral gray."""
    style.validate()
    content.validate()
    mask = shape_mask(content, size)
    tex = _texture(style, size, seed)
    image = np.full((3, size, size), BACKGROUND)
    image[:, mask] = tex[:, mask]
    return Sample(
        image=image,
        caption_tokens=caption_for(style, content),
        style_spec=style,
        content_spec=content,
    )


# ---------------------------------------------------------------------------
# augmentations


def _nearest_resize(image, out_size):
    in_size = image.shape[-1]
    idx = np.floor(np.arange(out_size) * in_size / out_size).astype(np.int64)
    return image[..., idx, :][..., :, idx]


def rigid_aug_explicit(image, k=0, flip=False, crop_corner=None, crop_frac=0.75):
    """Rotation by k*90deg, optional horizontal flip, optional crop+resize.

    crop_corner=None disables the crop; otherwise it is the (row, col) of a
    crop of side round(crop_frac * H), resized back with nearest neighbor
    so palette colors stay exact.
    """
    out = np.rot90(image, k=k, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    if crop_corner is not None:
        size = image.shape[-1]
        side = int(round(crop_frac * size))
        r, c = crop_corner
        if r < 0 or c < 0 or r + side > size or c + side > size:
            raise ValueError("crop window leaves the image")
        out = _nearest_resize(out[:, r : r + side, c : c + side], size)
    return np.ascontiguousarray(out)


def rigid_aug(image, seed):
    """Style-preserving augmentation with uniformly drawn components."""
    rng = make_rng(seed, 202)
    size = image.shape[-1]
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    if rng.integers(0, 2):
        side = int(round(0.75 * size))
        corner = (int(rng.integers(0, size - side + 1)), int(rng.integers(0, size - side + 1)))
    else:
        corner = None
    return rigid_aug_explicit(image, k=k, flip=flip, crop_corner=corner)


def _gaussian_kernel1d(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth2d(field, sigma=2.0):
    radius = int(3 * sigma)
    k = _gaussian_kernel1d(sigma, radius)
    padded = np.pad(field, ((radius, radius), (0, 0)), mode="reflect")
    field = np.apply_along_axis(lambda col: np.convolve(col, k, mode="valid"), 0, padded)
    padded = np.pad(field, ((0, 0), (radius, radius)), mode="reflect")
    return np.apply_along_axis(lambda row: np.convolve(row, k, mode="valid"), 1, padded)


def elastic_field(size, seed, max_disp=4.0):
    """Smooth zero-mean displacement field (2, H, W), L-inf norm = max_disp."""
    rng = make_rng(seed, 303)
    field = rng.uniform(-1, 1, size=(2, size, size))
    field = np.stack([_smooth2d(field[0]), _smooth2d(field[1])])
    field -= field.mean(axis=(1, 2), keepdims=True)
    peak = np.abs(field).max()
    if peak > 0:
        field *= max_disp / peak
    return field


def _bilinear_warp(image, field):
    """Sample image at (grid + field) with edge clamping; image is (C,H,W)."""
    c, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = np.clip(ys + field[0], 0, h - 1)
    sx = np.clip(xs + field[1], 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = sy - y0
    wx = sx - x0
    out = (
        image[:, y0, x0] * (1 - wy) * (1 - wx)
        + image[:, y1, x0] * wy * (1 - wx)
        + image[:, y0, x1] * (1 - wy) * wx
        + image[:, y1, x1] * wy * wx
    )
    return out


def warp_mask(mask, field):
    """Warp a boolean mask with the same field used for images."""
    warped = _bilinear_warp(mask[None].astype(np.float64), field)[0]
    return warped > 0.5


def style_destroy_aug_explicit(image, field=None, gain=None, bias=None, mix=None):
    """Elastic warp then color jitter; identity parameters give the identity."""
    out = image if field is None else _bilinear_warp(image, field)
    if gain is not None:
        out = out * gain[:, None, None]
    if bias is not None:
        out = out + bias[:, None, None]
    if mix is not None:
        out = np.einsum("ij,jhw->ihw", mix, out)
    return np.clip(out, 0.0, 1.0)


def _random_rotation3(rng):
    """Random 3x3 rotation (orthonormal, det +1) via QR of a Gaussian."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def style_destroy_aug(image, seed):
    """Semantics-preserving, style-destroying augmentation."""
    rng = make_rng(seed, 404)
    size = image.shape[-1]
    amp = rng.uniform(0.8, 1.6)  # capped well under the 4 px field maximum
    field = elastic_field(size, seed, max_disp=amp)
    gain = rng.uniform(0.5, 1.5, size=3)
    bias = rng.uniform(-0.2, 0.2, size=3)
    mix = _random_rotation3(rng)
    return style_destroy_aug_explicit(image, field=field, gain=gain, bias=bias, mix=mix)


def make_reference_set(sample, n, seed):
    """n rigid-augmented variants of the sample, each carrying its caption."""
    if not 1 <= n <= 10:
        raise ValueError("reference count must be in [1, 10]")
    images = np.stack([rigid_aug(sample.image, seed * 1000 + i) for i in range(n)])
    captions = np.tile(sample.caption_tokens, (n, 1))
    return StyleReferenceSet(images=images, caption_tokens=captions)


# ---------------------------------------------------------------------------
# corpus generation


def sample_style_spec(family, rng):
    if family == "stripes":
        angle = float(rng.choice([0.0, 45.0, 90.0, 135.0]))
    else:
        angle = 0.0
    period = float(rng.choice([3.0, 4.0]))  # dense enough for stable Gram statistics
    return StyleSpec(family=family, angle=angle, period=period, palette=FAMILY_PALETTES[family])


SCALE_CHOICES = (0.38, 0.42, 0.46)


def sample_content_spec(rng, scales=SCALE_CHOICES):
    """Shape at one of the 9 bucket centers with a discrete scale.

    Position/size entropy is kept low on purpose: the conditional
    distribution per (shape, bucket) prompt must be learnable within a
    desk-scale training budget. Edge-bucket centers are pulled inward just
    enough for the shape to fit.
    """
    shape = str(rng.choice(SHAPES))
    scale = float(rng.choice(scales))
    half = scale / 2 + 0.02
    bucket_centers = (1 / 6, 1 / 2, 5 / 6)
    cx = float(np.clip(bucket_centers[int(rng.integers(0, 3))], half, 1 - half))
    cy = float(np.clip(bucket_centers[int(rng.integers(0, 3))], half, 1 - half))
    return ContentSpec(shape=shape, center=(cx, cy), scale=scale)


def build_corpus(n_per_family, seed, size=32, families=FAMILIES):
    """Balanced corpus, deterministic in seed; families interleaved."""
    samples = []
    for fi, family in enumerate(families):
        rng = make_rng(seed, 505, fi)
        for i in range(n_per_family):
            style = sample_style_spec(family, rng)
            content = sample_content_spec(rng)
            samples.append(render(style, content, seed=int(rng.integers(0, 2**31)), size=size))
    return samples


# ---------------------------------------------------------------------------
# binary dataset records

_MAGIC = b"SDDS"
_REC_HEADER = struct.Struct("<BBB")  # family, shape, bucket


def _record_size(size):
    return 3 * size * size * 8 + L_CAP * 2 + _REC_HEADER.size + 8 * 14


def write_dataset(samples, out_dir):
    """Flat binary records plus a text manifest (id, family, shape, bucket)."""
    os.makedirs(out_dir, exist_ok=True)
    size = samples[0].image.shape[-1]
    data_path = os.path.join(out_dir, "data.bin")
    manifest_path = os.path.join(out_dir, "manifest.txt")
    with open(data_path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIQ", 1, size, len(samples)))
        for s in samples:
            fh.write(s.image.astype("<f8").tobytes())
            fh.write(s.caption_tokens.astype("<u2").tobytes())
            fh.write(
                _REC_HEADER.pack(
                    FAMILIES.index(s.style_spec.family),
                    SHAPES.index(s.content_spec.shape),
                    position_bucket(s.content_spec.center),
                )
            )
            pal = np.asarray(s.style_spec.palette, dtype="<f8")
            fh.write(
                struct.pack(
                    "<14d",
                    s.style_spec.angle,
                    s.style_spec.period,
                    *pal.reshape(-1),
                    s.content_spec.center[0],
                    s.content_spec.center[1],
                    s.content_spec.scale,
                )
            )
    with open(manifest_path, "w") as fh:
        fh.write(f"# dataset size={size} n={len(samples)}\n")
        for i, s in enumerate(samples):
            fh.write(
                f"{i}\t{s.style_spec.family}\t{s.content_spec.shape}\t"
                f"{position_bucket(s.content_spec.center)}\n"
            )
    return data_path, manifest_path


def read_dataset(data_dir):
    path = os.path.join(data_dir, "data.bin")
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, size, count = struct.unpack_from("<IIQ", blob, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    offset = 4 + 16
    rec = _record_size(size)
    if len(blob) - offset != rec * count:
        raise ValueError(f"{path}: truncated dataset ({len(blob) - offset} != {rec * count})")
    samples = []
    img_bytes = 3 * size * size * 8
    for _ in range(count):
        chunk = blob[offset : offset + rec]
        offset += rec
        image = np.frombuffer(chunk[:img_bytes], dtype="<f8").reshape(3, size, size).copy()
        pos = img_bytes
        caption = np.frombuffer(chunk[pos : pos + L_CAP * 2], dtype="<u2").astype(np.int64)
        pos += L_CAP * 2
        family_i, shape_i, _bucket = _REC_HEADER.unpack_from(chunk, pos)
        pos += _REC_HEADER.size
        vals = struct.unpack_from("<14d", chunk, pos)
        style = StyleSpec(
            family=FAMILIES[family_i],
            angle=vals[0],
            period=vals[1],
            palette=tuple(tuple(vals[2 + 3 * i : 5 + 3 * i]) for i in range(3)),
        )
        content = ContentSpec(shape=SHAPES[shape_i], center=(vals[11], vals[12]), scale=vals[13])
        samples.append(Sample(image=image, caption_tokens=caption, style_spec=style, content_spec=content))
    return samples
