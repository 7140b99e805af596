"""Procedural phantom radiographs and two-view augmentation.

Every phantom shares one anatomical template (body outline, two dark lung
fields, rib arcs, a spine band) under a small per-sample geometric jitter.
Sparse Gaussian "lesions" are added on top; the per-quadrant lesion flags are
the downstream labels.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
QUADRANTS = ("TL", "TR", "BL", "BR")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 32
    anatomy_jitter: float = 0.08
    lesion_count_range: tuple = (0, 3)
    lesion_radius_range: tuple = (1.2, 2.4)
    lesion_intensity_range: tuple = (0.35, 0.6)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_count_range", tuple(int(v) for v in self.lesion_count_range))
        object.__setattr__(self, "lesion_radius_range", tuple(float(v) for v in self.lesion_radius_range))
        object.__setattr__(self, "lesion_intensity_range",
                           tuple(float(v) for v in self.lesion_intensity_range))
        lo, hi = self.lesion_count_range
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.anatomy_jitter <= 0.2:
            raise ValueError("anatomy_jitter must lie in [0, 0.2]")
        if not 0 <= lo <= hi <= 3:
            raise ValueError("lesion_count_range must be within [0, 3]")
        r0, r1 = self.lesion_radius_range
        if not 0 < r0 <= r1:
            raise ValueError("bad lesion_radius_range")
        i0, i1 = self.lesion_intensity_range
        if not 0.0 <= i0 <= i1 <= 1.0:
            raise ValueError("lesion_intensity_range must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PhantomSample:
    image: np.ndarray
    labels: tuple
    lesion_centers: list


def quadrant_of(row, col, size):
    return 2 * int(row >= size / 2) + int(col >= size / 2)


def labels_from_centers(centers, size):
    flags = [0, 0, 0, 0]
    for r, c in centers:
        flags[quadrant_of(r, c, size)] = 1
    return tuple(flags)


def _anatomy(size, rng, jitter):
    # normalized coordinates in [-1, 1], perturbed by a small affine jitter
    u = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(u, u, indexing="ij")
    j = jitter
    dy, dx = rng.uniform(-j, j, 2)
    sy, sx = 1 + rng.uniform(-j, j, 2)
    rot = rng.uniform(-j, j) * 0.5
    cy, sn = math.cos(rot), math.sin(rot)
    y = ((yy - dy) * cy - (xx - dx) * sn) / sy
    x = ((yy - dy) * sn + (xx - dx) * cy) / sx

    img = np.full((size, size), 0.08)
    body = (x / 0.92) ** 2 + (y / 1.05) ** 2 < 1
    img[body] = 0.55
    lungs = np.zeros_like(body)
    for side in (-1, 1):
        lungs |= ((x - side * 0.42) / 0.3) ** 2 + ((y + 0.05) / 0.62) ** 2 < 1
    img[lungs] = 0.22
    # rib arcs: periodic bands bending downward away from the midline
    ribs = 0.5 + 0.5 * np.cos(2 * np.pi * (y - 0.25 * x ** 2) / 0.28)
    img += lungs * 0.12 * ribs ** 4
    spine = np.abs(x) < 0.09
    img[spine & body] = 0.7
    return img


def generate_sample(spec, index, centers=None):
    """Deterministic phantom for (spec, index).

    ``centers`` forces lesion positions (pixel row, col) instead of sampling them.
    """
    if index < 0:
        raise ValueError("index must be non-negative")
    size = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    img = _anatomy(size, rng, spec.anatomy_jitter)

    lo, hi = spec.lesion_count_range
    n = int(rng.integers(lo, hi + 1))
    if centers is None:
        margin = 2.0
        centers = [tuple(rng.uniform(margin, size - margin, 2)) for _ in range(n)]
    centers = [(float(r), float(c)) for r, c in centers]
    rr, cc = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    for r, c in centers:
        radius = rng.uniform(*spec.lesion_radius_range)
        amp = rng.uniform(*spec.lesion_intensity_range)
        img += amp * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * radius ** 2))
    if spec.noise_sigma > 0:
        img += rng.normal(0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return PhantomSample(image=img, labels=labels_from_centers(centers, size),
                         lesion_centers=centers)


def generate_arrays(spec, n, start=0):
    """In-memory corpus: (images (n, H, W) float32, labels (n, 4) int)."""
    samples = [generate_sample(spec, start + i) for i in range(n)]
    return (np.stack([s.image for s in samples]),
            np.array([s.labels for s in samples], dtype=np.int64))


# ------------------------------------------------------------------ corpus IO


@dataclass
class CorpusManifest:
    version: int
    count: int
    image_size: int
    spec_hash: str

    def lines(self):
        return [f"version={self.version}", f"count={self.count}",
                f"image_size={self.image_size}", f"spec_hash={self.spec_hash}"]


def generate_corpus(spec, n, out_dir):
    if n < 1:
        raise ValueError("corpus needs n >= 1")
    os.makedirs(out_dir, exist_ok=True)
    label_lines = []
    for i in range(n):
        s = generate_sample(spec, i)
        s.image.astype("<f4").tofile(os.path.join(out_dir, f"img_{i:06d}.f32"))
        label_lines.append("\t".join([str(i)] + [str(v) for v in s.labels]))
    with open(os.path.join(out_dir, "labels.tsv"), "w") as fh:
        fh.write("\n".join(label_lines) + "\n")
    manifest = CorpusManifest(FORMAT_VERSION, n, spec.image_size, spec.hash())
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(manifest.lines()) + "\n")
    return manifest


def read_manifest(corpus_dir):
    kv = {}
    with open(os.path.join(corpus_dir, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, v = line.split("=", 1)
                kv[k] = v
    m = CorpusManifest(int(kv["version"]), int(kv["count"]), int(kv["image_size"]), kv["spec_hash"])
    if m.version != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus version {m.version}")
    return m


def load_corpus(corpus_dir):
    """Returns (manifest, images (n, H, W) float32, labels (n, 4) int)."""
    m = read_manifest(corpus_dir)
    s = m.image_size
    images = np.empty((m.count, s, s), dtype=np.float32)
    for i in range(m.count):
        images[i] = np.fromfile(os.path.join(corpus_dir, f"img_{i:06d}.f32"), dtype="<f4").reshape(s, s)
    labels = np.zeros((m.count, 4), dtype=np.int64)
    with open(os.path.join(corpus_dir, "labels.tsv")) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                labels[int(parts[0])] = [int(v) for v in parts[1:5]]
    return m, images, labels


# -------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    crop_scale_range: tuple = (0.6, 1.0)
    flip_prob: float = 0.5
    blur_sigma_range: tuple = (0.1, 1.0)
    blur_prob: float = 0.5
    normalize_mean: float = 0.0
    normalize_std: float = 1.0

    def __post_init__(self):
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale_range must lie within (0, 1]")
        for p in (self.flip_prob, self.blur_prob):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.normalize_std <= 0:
            raise ValueError("normalize_std must be positive")


@dataclass
class AugmentedPair:
    x1: np.ndarray
    x2: np.ndarray


def gaussian_blur(img, sigma):
    """Separable Gaussian blur, half-width ceil(3 sigma), reflect padding."""
    half = max(1, math.ceil(3 * sigma))
    t = np.arange(-half, half + 1)
    k = np.exp(-t ** 2 / (2 * sigma ** 2))
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def crop_resize(img, top, left, side):
    """Bilinear resample of the square box (top, left, side) back to full size."""
    size = img.shape[0]
    pos = (np.arange(size) + 0.5) * side / size - 0.5
    rows = top + pos
    cols = left + pos
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def augment(image, cfg, rng, normalize=True):
    size = image.shape[0]
    scale = rng.uniform(*cfg.crop_scale_range)
    side = size * math.sqrt(scale)
    top = rng.uniform(0, size - side)
    left = rng.uniform(0, size - side)
    flip = rng.random() < cfg.flip_prob
    blur = rng.random() < cfg.blur_prob
    sigma = rng.uniform(*cfg.blur_sigma_range)

    out = image.astype(np.float64)
    if side != size or top != 0 or left != 0:
        out = crop_resize(out, top, left, side)
    if flip:
        out = out[:, ::-1]
    if blur:
        out = gaussian_blur(out, sigma)
    if normalize:
        out = (out - cfg.normalize_mean) / cfg.normalize_std
    return np.ascontiguousarray(out, dtype=image.dtype)


def make_pair(image, cfg, rng):
    """Two independently sampled augmentation chains of the same image."""
    return AugmentedPair(x1=augment(image, cfg, rng), x2=augment(image, cfg, rng))


def make_batch(images, cfg, rng):
    """Stacked views (x1, x2), each (B, H, W)."""
    pairs = [make_pair(img, cfg, rng) for img in images]
    return np.stack([p.x1 for p in pairs]), np.stack([p.x2 for p in pairs])


def normalize(images, cfg):
    return ((images - cfg.normalize_mean) / cfg.normalize_std).astype(images.dtype)
