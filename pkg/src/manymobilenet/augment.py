"""Normalization profiles, per-sample augmentation, dataset I/O and the synthetic fundus generator.

Images are float32 ``(3, H, W)`` arrays in [0, 1].  Label 0 is ungradable,
label 1 gradable.  On disk a dataset is a directory holding ``labels.csv``
(header ``id,label``) and one binary PPM (P6, maxval 255) per id.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tensor_core import DTYPE, STREAM_SYNTH, Rng

LABELS_CSV = "labels.csv"


@dataclass(frozen=True)
class NormProfile:
    name: str
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError(f"profile {self.name!r} needs 3 means and 3 stds")
        if any(not s > 0 for s in self.std):
            raise ConfigError(f"profile {self.name!r} has non-positive std {self.std}")

    def to_dict(self) -> dict:
        return {"name": self.name, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormProfile":
        return cls(d["name"], tuple(d["mean"]), tuple(d["std"]))


IMAGENET = NormProfile("imagenet", (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
NORM_PROFILE_IDS = ("imagenet", "dataset")


def dataset_profile(images: np.ndarray, name: str = "dataset") -> NormProfile:
    """Per-channel mean/std of a (N,3,H,W) training split."""
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    # a constant channel would give std 0
    std = np.where(std > 1e-6, std, 1.0)
    return NormProfile(name, tuple(mean), tuple(std))


def _channel_view(profile: NormProfile, ndim: int):
    shape = (3, 1, 1) if ndim == 3 else (1, 3, 1, 1)
    return (
        np.asarray(profile.mean, dtype=np.float64).reshape(shape),
        np.asarray(profile.std, dtype=np.float64).reshape(shape),
    )


def normalize(image: np.ndarray, profile: NormProfile) -> np.ndarray:
    """``(x - mean[c]) / std[c]`` for a (3,H,W) image or (N,3,H,W) batch."""
    image = np.asarray(image)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise DataError(f"normalize needs 3 channels, got shape {image.shape}")
    mean, std = _channel_view(profile, image.ndim)
    return ((image - mean) / std).astype(DTYPE)


def denormalize(image: np.ndarray, profile: NormProfile) -> np.ndarray:
    mean, std = _channel_view(profile, np.ndim(image))
    return (np.asarray(image, dtype=np.float64) * std + mean).astype(DTYPE)


# -- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Flip -> rotate -> brightness pipeline plus the normalization profile id it trains with."""

    profile: str = "imagenet"
    hflip_prob: float = 0.5
    rotation_max_deg: float = 15.0
    brightness_delta_max: float = 0.1
    hflip: bool = True
    rotate: bool = True
    brightness: bool = True

    def __post_init__(self):
        if self.profile not in NORM_PROFILE_IDS:
            raise ConfigError(f"unknown normalization profile {self.profile!r}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must be in [0, 1]")
        if not 0.0 <= self.rotation_max_deg <= 30.0:
            raise ConfigError("rotation_max_deg must be in [0, 30]")
        if not 0.0 <= self.brightness_delta_max <= 0.5:
            raise ConfigError("brightness_delta_max must be in [0, 0.5]")

    @classmethod
    def identity(cls, profile: str = "imagenet") -> "AugmentPolicy":
        return cls(profile, hflip=False, rotate=False, brightness=False)


AUGMENT_PROFILES = {
    "imagenet": AugmentPolicy("imagenet"),
    "dataset": AugmentPolicy("dataset"),
    "imagenet_noaug": AugmentPolicy.identity("imagenet"),
    "dataset_noaug": AugmentPolicy.identity("dataset"),
}


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def rotate_nearest(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate (3,H,W) about the image center, nearest-neighbor sampling, zero fill.

    Positive angles turn the picture clockwise as displayed (rows grow downward).
    """
    _, h, w = image.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source pixel
    sy = np.rint(cy + math.cos(theta) * dy - math.sin(theta) * dx).astype(np.int64)
    sx = np.rint(cx + math.sin(theta) * dy + math.cos(theta) * dx).astype(np.int64)
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(image)
    out[:, inside] = image[:, sy[inside], sx[inside]]
    return out


def augment_sample(image: np.ndarray, policy: AugmentPolicy, rng: Rng) -> np.ndarray:
    """Apply the enabled transforms; all random draws happen up front in a fixed order."""
    flip_draw, angle, delta = rng.uniform(0.0, 1.0, 3)
    out = image
    if policy.hflip and flip_draw < policy.hflip_prob:
        out = hflip(out)
    if policy.rotate and policy.rotation_max_deg > 0:
        out = rotate_nearest(out, (2 * angle - 1) * policy.rotation_max_deg)
    if policy.brightness and policy.brightness_delta_max > 0:
        out = np.clip(out + (2 * delta - 1) * policy.brightness_delta_max, 0.0, 1.0)
    return np.asarray(out, dtype=DTYPE)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N,3,H,W) float32 in [0,1]
    labels: np.ndarray  # (N,) int64 in {0,1}
    ids: list = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be (N,3,H,W), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.ids) != len(self.images):
            raise DataError("images, labels and ids differ in length")
        if len(self.images) == 0:
            raise DataError("empty dataset")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 (ungradable) or 1 (gradable)")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("sample ids are not unique")

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def class_counts(self) -> dict[int, int]:
        return {0: int(np.sum(self.labels == 0)), 1: int(np.sum(self.labels == 1))}

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], [self.ids[i] for i in index], self.split)


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval 255 -> uint8 (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3,H,W) in [0,1] -> (H,W,3) uint8."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize (3,H,W) to (3,size,size) with half-pixel-centered bilinear sampling."""
    _, h, w = image.shape
    if h == size and w == size:
        return image.astype(DTYPE, copy=True)

    def axis(n_in):
        src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    img = image.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(DTYPE)


def _decode(image_dir: Path, sample_id: str) -> np.ndarray:
    ppm = image_dir / f"{sample_id}.ppm"
    if ppm.exists():
        return read_ppm(ppm)
    for ext in (".png", ".jpg", ".jpeg"):
        other = image_dir / f"{sample_id}{ext}"
        if other.exists():
            try:
                from PIL import Image
            except ImportError:
                raise DataError(f"{other}: decoding {ext} needs Pillow") from None
            with Image.open(other) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise DataError(f"no image file for id {sample_id!r} in {image_dir}")


def read_labels(labels_csv) -> list[tuple[str, int]]:
    text = Path(labels_csv).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["id", "label"]:
        raise DataError(f"{labels_csv}: header must be exactly 'id,label'")
    out = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{labels_csv}:{lineno}: expected 2 columns")
        sid, label = row
        if label not in ("0", "1"):
            raise DataError(f"{labels_csv}:{lineno}: label {label!r} not in {{0,1}}")
        if sid in seen:
            raise DataError(f"{labels_csv}:{lineno}: duplicate id {sid!r}")
        seen.add(sid)
        out.append((sid, int(label)))
    if not out:
        raise DataError("empty dataset")
    return out


def load_dataset(image_dir, labels_csv=None, image_size: int = 224, split: str = "train") -> Dataset:
    """Read a labels manifest and its images, resized to ``image_size`` and scaled to [0, 1]."""
    image_dir = Path(image_dir)
    labels_csv = Path(labels_csv) if labels_csv is not None else image_dir / LABELS_CSV
    if not labels_csv.exists():
        raise DataError(f"labels file {labels_csv} not found")
    rows = read_labels(labels_csv)
    images = np.empty((len(rows), 3, image_size, image_size), dtype=DTYPE)
    for i, (sid, _) in enumerate(rows):
        rgb = _decode(image_dir, sid)
        images[i] = resize_bilinear(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0, image_size)
    return Dataset(images, [r[1] for r in rows], [r[0] for r in rows], split)


def save_dataset(ds: Dataset, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["id,label"]
    for img, label, sid in zip(ds.images, ds.labels, ds.ids):
        write_ppm(out_dir / f"{sid}.ppm", to_uint8(img))
        lines.append(f"{sid},{int(label)}")
    (out_dir / LABELS_CSV).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# -- synthetic fundus-like images --------------------------------------------


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur with edge clamping."""
    if radius < 1:
        return img
    k = 2 * radius + 1
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (radius + 1, radius)
        c = np.cumsum(np.pad(img, pad, mode="edge"), axis=axis)
        n = img.shape[axis]
        img = (np.take(c, range(k, k + n), axis=axis) - np.take(c, range(0, n), axis=axis)) / k
    return img


def _fundus(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    cy, cx = 0.5 + rng.uniform(-0.04, 0.04, 2)
    ry, rx = 0.42 + rng.uniform(-0.03, 0.03, 2)
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    disc = r2 <= 1.0
    tint = np.array([0.55, 0.25, 0.12]) + rng.uniform(-0.05, 0.05, 3)
    shade = 1.0 - 0.35 * np.clip(r2, 0, 1)
    img = tint[:, None, None] * (shade * disc)[None]
    # optic disc
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    oy = cy + rng.uniform(-0.05, 0.05)
    ox = cx + side * (0.18 + rng.uniform(-0.03, 0.03))
    orad = 0.07 + rng.uniform(-0.01, 0.01)
    optic = ((yy - oy) ** 2 + (xx - ox) ** 2) <= orad**2
    img[:, optic] = np.array([0.95, 0.85, 0.6])[:, None]
    # vessels: sinusoidal arcs leaving the optic disc
    width = max(1.0 / size, 0.012)
    for _ in range(int(rng.integers(4, 7))):
        amp, freq, phase, slope = rng.uniform(0.03, 0.12), rng.uniform(2, 6), rng.uniform(0, 2 * np.pi), rng.uniform(-0.8, 0.8)
        curve = oy + slope * (xx - ox) + amp * np.sin(freq * (xx - ox) * np.pi + phase) - amp * np.sin(phase)
        vessel = (np.abs(yy - curve) < width) & disc & ~optic & ((xx - ox) * side < 0.05)
        img[:, vessel] = np.array([0.32, 0.06, 0.04])[:, None]
    return img


def _degrade(img: np.ndarray, rng: Rng, size: int) -> np.ndarray:
    kind = int(rng.integers(0, 3))
    if kind == 0:
        out = img
        for _ in range(3):
            out = _box_blur(out, max(1, size // 12))
        return out * rng.uniform(0.5, 0.8)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    if kind == 1:
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) + 0.5
        glare = rng.uniform(0.6, 0.9) * np.clip(ramp, 0, 1)
        return img + glare[None]
    start = rng.uniform(0.1, 0.5)
    frac = rng.uniform(0.3, 0.45)
    coord = yy if rng.uniform() < 0.5 else xx
    band = (coord >= start) & (coord < start + frac)
    out = img.copy()
    out[:, band] = rng.uniform(0.0, 0.1) if rng.uniform() < 0.5 else rng.uniform(0.8, 0.95)
    return out


def synth_image(label: int, rng: Rng, size: int = 224) -> np.ndarray:
    """One synthetic image: a clean fundus for label 1, a degraded one for label 0."""
    img = _fundus(rng, size)
    if label == 0:
        img = _degrade(img, rng, size)
    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def gen_synthetic(n: int, class_balance: float, seed: int, image_size: int = 224) -> Dataset:
    """``n`` images, ``round(n * class_balance)`` of them ungradable (label 0), deterministic in ``seed``."""
    if n < 2:
        raise DataError("a synthetic dataset needs n >= 2 so both classes appear")
    if not 0.0 < class_balance < 1.0:
        raise DataError("class_balance must be in (0, 1)")
    n_neg = min(max(int(math.floor(n * class_balance + 0.5)), 1), n - 1)
    root = Rng(seed).child(STREAM_SYNTH)
    labels = np.ones(n, dtype=np.int64)
    labels[root.child(0).permutation(n)[:n_neg]] = 0
    images = np.stack([synth_image(int(labels[i]), root.child(1, i), image_size) for i in range(n)])
    ids = [f"synth_{i:05d}" for i in range(n)]
    return Dataset(images, labels, ids, "synthetic")
