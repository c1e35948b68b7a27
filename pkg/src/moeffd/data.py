"""Synthetic "local forgery" images and severity-graded perturbations.

Real images are smooth: per channel, four random low-frequency 2-D cosines are
summed, min-max normalised to [0, 1], then Gaussian texture (σ = 0.02) is added
and the result clipped. A fake starts from such an image and replaces one
random ellipse (semi-axes 15–35 % of min(H, W)) with a manipulated version of
itself: Gaussian blur (σ = 1.5), a global intensity shift of ±0.1 and
high-frequency noise (σ = 0.05). The ellipse boundary is alpha-blended over
the 2 pixels just inside it, so fake and source agree exactly outside the
ellipse.

Randomness comes from SplitMix64, a counter-based 64-bit generator::

    state  += 0x9E3779B97F4A7C15
    z       = state
    z       = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z       = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output  = z ^ (z >> 31)

(all arithmetic mod 2^64). Uniforms are ``(output >> 11) · 2^-53`` and normals
use Box–Muller. Every sample draws from its own stream keyed by
(seed, split, index), so samples can be generated independently and in any
order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

SPLITS = ("train", "test")
FORMAT = "moeffd-dataset"
FORMAT_VERSION = 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64; ``next_u64(n)`` equals n sequential draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    @classmethod
    def derive(cls, *keys: int) -> "SplitMix64":
        """Stream whose seed is a SplitMix fold of ``keys``."""
        acc = 0
        for k in keys:
            acc = _fold(acc, int(k))
        return cls(acc)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(GOLDEN)) & _MASK
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = ((self.next_u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = (self.next_u64(m) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]


def _fold(acc: int, key: int) -> int:
    with np.errstate(over="ignore"):
        z = np.array([(acc ^ (key & _MASK)) & _MASK], dtype=np.uint64) + GOLDEN
        return int(_mix(z)[0])


# ---------------------------------------------------------------------------
# image primitives
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a (C, H, W) image with reflect padding."""
    k = gaussian_kernel(sigma)
    r = k.size // 2
    img = np.asarray(image, dtype=np.float64)
    pad = np.pad(img, ((0, 0), (0, 0), (r, r)), mode="reflect")
    img = sum(k[i] * pad[:, :, i:i + img.shape[2]] for i in range(k.size))
    pad = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(k[i] * pad[:, i:i + img.shape[1], :] for i in range(k.size))


def _base_image(rng: SplitMix64, h: int, w: int, channels: int = 3) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.empty((channels, h, w))
    for c in range(channels):
        amp = rng.uniform(4, 0.5, 1.0)
        fy, fx = rng.uniform(4, 0.0, 3.0), rng.uniform(4, 0.0, 3.0)
        phase = rng.uniform(4, 0.0, 2 * np.pi)
        s = sum(amp[m] * np.cos(2 * np.pi * (fy[m] * yy + fx[m] * xx) + phase[m]) for m in range(4))
        lo, hi = s.min(), s.max()
        img[c] = (s - lo) / (hi - lo) if hi > lo else 0.5
    img += 0.02 * rng.normal(img.size).reshape(img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class Ellipse:
    cy: float
    cx: float
    ay: float
    ax: float
    angle: float

    def rho(self, h: int, w: int) -> np.ndarray:
        """Normalised elliptical radius; < 1 inside the ellipse."""
        yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return np.sqrt((u / self.ax) ** 2 + (v / self.ay) ** 2)

    def alpha(self, h: int, w: int, blend: float = 2.0) -> np.ndarray:
        """Blend weight: 0 outside, ramping to 1 over ``blend`` pixels inside the boundary."""
        depth = (1.0 - self.rho(h, w)) * min(self.ax, self.ay)
        return np.clip(depth / blend, 0.0, 1.0)


def _forgery(rng: SplitMix64, base: np.ndarray) -> tuple[np.ndarray, Ellipse]:
    _, h, w = base.shape
    m = min(h, w)
    cy, cx = rng.uniform(2, 0.25, 0.75) * np.array([h, w])
    ay, ax = rng.uniform(2, 0.15, 0.35) * m
    angle = float(rng.uniform(1, 0.0, np.pi)[0])
    shift = 0.1 if rng.uniform(1)[0] < 0.5 else -0.1
    ell = Ellipse(float(cy), float(cx), float(ay), float(ax), angle)
    manip = gaussian_blur(base, 1.5) + shift + 0.05 * rng.normal(base.size).reshape(base.shape)
    a = ell.alpha(h, w)[None]
    return np.clip((1.0 - a) * base + a * manip, 0.0, 1.0), ell


def _stream(seed: int, split: str, index: int) -> SplitMix64:
    return SplitMix64.derive(seed, SPLITS.index(split) if split in SPLITS else hash_key(split), index)


def hash_key(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# samples and datasets
# ---------------------------------------------------------------------------

@dataclass
class ImageSample:
    image: np.ndarray
    label: int
    sample_id: str


def render_sample(seed: int, split: str, index: int, n_real: int, h: int, w: int):
    """Deterministically render one sample; returns (image, label, source_real, ellipse or None)."""
    rng = _stream(seed, split, index)
    base = _base_image(rng, h, w)
    if index < n_real:
        return base, 0, base, None
    fake, ell = _forgery(rng, base)
    return fake, 1, base, ell


def _check_size(h: int, w: int) -> None:
    if h < 16 or w < 16:
        raise ValueError(f"images must be at least 16x16, got {h}x{w}")


def generate_dataset(n_real: int, n_fake: int, h: int, w: int, seed: int, split: str = "train") -> list[ImageSample]:
    """Reals first (labels 0), then fakes (labels 1); ids are ``<split>-<index>``."""
    _check_size(h, w)
    if n_real < 0 or n_fake < 0:
        raise ValueError("sample counts must be non-negative")
    out = []
    for i in range(n_real + n_fake):
        img, label, _, _ = render_sample(seed, split, i, n_real, h, w)
        out.append(ImageSample(img.astype(np.float32), label, f"{split}-{i:06d}"))
    return out


@dataclass
class Dataset:
    images: np.ndarray     # (n, 3, H, W) float32
    labels: np.ndarray     # (n,) int64
    ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: list[ImageSample]) -> "Dataset":
        if not samples:
            return cls(np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, np.int64), [])
        return cls(np.stack([s.image for s in samples]).astype(np.float32),
                   np.array([s.label for s in samples], dtype=np.int64), [s.sample_id for s in samples])

    @classmethod
    def synthetic(cls, n_real: int, n_fake: int, size: int, seed: int, split: str = "train") -> "Dataset":
        return cls.from_samples(generate_dataset(n_real, n_fake, size, size, seed, split))

    def map_images(self, fn) -> "Dataset":
        return Dataset(np.stack([fn(img, i) for i, img in enumerate(self.images)]).astype(np.float32)
                       if len(self) else self.images.copy(), self.labels.copy(), list(self.ids))


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

PERTURBATIONS = ("gaussian_blur", "gaussian_noise", "block_wise")
SEVERITY_TABLE = {
    "gaussian_blur": (0.5, 1.0, 1.5, 2.0, 2.5),     # blur σ in pixels
    "gaussian_noise": (0.02, 0.04, 0.06, 0.08, 0.10),  # additive noise σ
    "block_wise": (2, 4, 6, 8, 10),                 # number of 8×8 gray blocks
}
BLOCK = 8
BLOCK_GRAY = 0.5


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {self.kind!r}; expected one of {PERTURBATIONS}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def level(self):
        return SEVERITY_TABLE[self.kind][self.severity - 1] if self.severity else 0


def perturb(image: np.ndarray, spec: PerturbationSpec, seed: int) -> np.ndarray:
    """Apply one perturbation to a (C, H, W) image in [0, 1]; severity 0 is the identity.

    For a fixed seed the random field is shared across severities (noise is a
    scaled copy, blocks are a growing prefix of one block list), which makes
    the distortion monotone in severity.
    """
    if spec.severity == 0:
        return np.array(image, copy=True)
    img = np.asarray(image, dtype=np.float64)
    rng = SplitMix64.derive(seed, hash_key(spec.kind))
    if spec.kind == "gaussian_blur":
        out = gaussian_blur(img, spec.level)
    elif spec.kind == "gaussian_noise":
        out = img + spec.level * rng.normal(img.size).reshape(img.shape)
    else:
        _, h, w = img.shape
        n_max = SEVERITY_TABLE["block_wise"][-1]
        top = np.floor(rng.uniform(n_max, 0, h - BLOCK + 1)).astype(int)
        left = np.floor(rng.uniform(n_max, 0, w - BLOCK + 1)).astype(int)
        out = img.copy()
        for t, l in zip(top[:spec.level], left[:spec.level]):
            out[:, t:t + BLOCK, l:l + BLOCK] = BLOCK_GRAY
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


def perturb_dataset(ds: Dataset, spec: PerturbationSpec, seed: int) -> Dataset:
    return ds.map_images(lambda img, i: perturb(img, spec, _fold(seed, i)))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def write_dataset(out_dir, seed: int, size: int, splits: dict[str, dict[str, int]]) -> Path:
    """Render every split and write ``manifest.json`` plus one raw ``<f4`` file per sample."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for split, counts in sorted(splits.items()):
        if set(counts) - {"n_real", "n_fake"}:
            raise ConfigError(f"split {split!r}: unknown keys {sorted(set(counts) - {'n_real', 'n_fake'})}")
        for s in generate_dataset(counts.get("n_real", 0), counts.get("n_fake", 0), size, size, seed, split):
            rel = f"samples/{s.sample_id}.f32"
            (out / rel).write_bytes(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            records.append({"id": s.sample_id, "split": split, "label": s.label, "file": rel,
                            "sha256": _digest(s.image)})
    manifest = {"format": FORMAT, "version": FORMAT_VERSION, "seed": seed, "height": size, "width": size,
                "channels": 3, "dtype": "<f4", "splits": splits, "samples": records}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read dataset manifest {path}: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a {FORMAT} v{FORMAT_VERSION} manifest")
    return manifest


def load_split(root, split: str) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    shape = (manifest["channels"], manifest["height"], manifest["width"])
    recs = [r for r in manifest["samples"] if r["split"] == split]
    images = np.zeros((len(recs),) + shape, dtype=np.float32)
    for i, r in enumerate(recs):
        try:
            raw = (root / r["file"]).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read sample {root / r['file']}: {exc}") from None
        images[i] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return Dataset(images, np.array([r["label"] for r in recs], dtype=np.int64), [r["id"] for r in recs])


def regenerate(manifest_path, out_dir) -> Path:
    """Rebuild a dataset directory from its manifest alone."""
    m = read_manifest(manifest_path)
    return write_dataset(out_dir, m["seed"], m["height"], m["splits"])
