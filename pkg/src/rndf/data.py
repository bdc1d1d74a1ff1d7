"""Datasets: image manifests, vector CSVs, preprocessing, synthetic targets."""
import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class ManifestError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests and CSVs
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    root: str
    records: List[Tuple[str, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def resolve(self, i: int) -> str:
        return os.path.join(self.root, self.records[i][0])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r[1] for r in self.records], dtype=np.float64)


def load_manifest(path: str, root: Optional[str] = None) -> Manifest:
    """Read a ``path,label`` CSV.  ``root`` defaults to the manifest's directory."""
    root = os.path.dirname(os.path.abspath(path)) if root is None else root
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ManifestError(f"{path}:1: expected header 'path,label', got {header}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                label = float(row[1])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: label {row[1]!r} is not a number") from None
            if not np.isfinite(label):
                raise ManifestError(f"{path}:{lineno}: label is not finite")
            records.append((row[0].strip(), label))
    return Manifest(root, records)


def load_vector_csv(path: str) -> "ArrayDataset":
    """Feature columns followed by a final ``label`` column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label" or len(header) < 2:
            raise ManifestError(f"{path}:1: expected feature columns then 'label'")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{reader.line_num}: expected {len(header)} columns")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ManifestError(f"{path}:{reader.line_num}: non-numeric value") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return ArrayDataset(arr[:, :-1], arr[:, -1:])


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def _read_header(buf: bytes) -> Tuple[str, int, int, int, int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(buf[start:pos].decode("ascii"))
        if tokens[0] not in ("P5", "P6"):
            raise ImageFormatError(f"unsupported magic number {tokens[0]!r}")
    # exactly one whitespace byte separates header from raster
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def read_pnm(path: str) -> Tuple[np.ndarray, int]:
    """Raw integer raster ``(C, H, W)`` of a P5/P6 file and its maxval."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, width, height, maxval, offset = _read_header(buf)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad dimensions or maxval in {path}")
    channels = 1 if magic == "P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * channels
    if len(buf) - offset < count * dtype.itemsize:
        raise ImageFormatError(f"{path}: raster shorter than {width}x{height}x{channels}")
    raster = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return raster.reshape(height, width, channels).transpose(2, 0, 1), maxval


def load_image(path: str) -> np.ndarray:
    """Float image in ``[0, 1]``, channel-first ``(C, H, W)``."""
    raster, maxval = read_pnm(path)
    return raster.astype(np.float64) / maxval


def write_pnm(path: str, pixels: np.ndarray) -> None:
    """Write 8-bit ``(H, W)`` / ``(1, H, W)`` as P5 or ``(3, H, W)`` as P6."""
    px = np.asarray(pixels)
    if px.ndim == 2:
        px = px[None]
    if px.ndim != 3 or px.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot write array of shape {pixels.shape}")
    if px.min() < 0 or px.max() > 255:
        raise ImageFormatError("pixel values must lie in 0..255")
    c, h, w = px.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(px.transpose(1, 2, 0).astype(np.uint8).tobytes())


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    resize_to: Optional[int] = 256
    crop_to: Optional[int] = 224
    flip_prob: float = 0.5
    channel_mean: Optional[Tuple[float, ...]] = None
    channel_std: Optional[Tuple[float, ...]] = None
    train_mode: bool = True

    def __post_init__(self):
        if self.resize_to and self.crop_to and self.crop_to > self.resize_to:
            raise ValueError("crop_to must not exceed resize_to")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``(C, H, W)`` with half-pixel centers."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, height)
    x0, x1, fx = coords(w, width)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    top, left = (h - size) // 2, (w - size) // 2
    return img[:, top:top + size, left:left + size]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[:, top:top + size, left:left + size]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1]


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    if mean is None or std is None:
        return img
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (img - mean) / std


def preprocess(img: np.ndarray, cfg: PreprocessConfig, rng: Optional[np.random.Generator] = None,
               train: Optional[bool] = None, apply_normalize: bool = True) -> np.ndarray:
    """Resize -> crop (random in training, central otherwise) -> flip -> normalize."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ImageFormatError("image must be at least 1x1")
    train = cfg.train_mode if train is None else train
    if cfg.resize_to:
        img = resize_bilinear(img, cfg.resize_to, cfg.resize_to)
    if cfg.crop_to:
        if img.shape[1] < cfg.crop_to or img.shape[2] < cfg.crop_to:
            raise ImageFormatError(f"image {img.shape[1:]} smaller than crop {cfg.crop_to}")
        if train:
            if rng is None:
                raise ValueError("training-mode preprocessing needs an rng")
            img = random_crop(img, cfg.crop_to, rng)
        else:
            img = center_crop(img, cfg.crop_to)
    if train and cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        img = hflip(img)
    if apply_normalize:
        img = normalize(img, cfg.channel_mean, cfg.channel_std)
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class ArrayDataset:
    """In-memory features ``(N, ...)`` and labels ``(N, k)``."""

    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y = y.reshape(len(y), -1)
        if len(self.x) != len(self.y):
            raise ValueError("features and labels differ in length")

    def __len__(self):
        return len(self.y)

    @property
    def labels(self) -> np.ndarray:
        return self.y

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.x.shape[1:]

    def batch(self, indices, rng=None, train: bool = False):
        idx = np.asarray(indices)
        return self.x[idx], self.y[idx]

    def subset(self, indices) -> "ArrayDataset":
        idx = np.asarray(indices)
        return ArrayDataset(self.x[idx], self.y[idx])


class ImageDataset:
    """Manifest-backed images, decoded once and preprocessed per batch."""

    def __init__(self, manifest: Manifest, cfg: PreprocessConfig):
        self.manifest = manifest
        self.cfg = cfg
        self._cache: Dict[int, np.ndarray] = {}
        self.y = manifest.labels.reshape(-1, 1)

    def __len__(self):
        return len(self.manifest)

    @property
    def labels(self) -> np.ndarray:
        return self.y

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = load_image(self.manifest.resolve(i))
        return self._cache[i]

    @property
    def input_shape(self) -> Tuple[int, ...]:
        if len(self) == 0:
            raise ValueError("empty dataset has no input shape")
        return preprocess(self.image(0), self.cfg, train=False).shape

    def batch(self, indices, rng: Optional[np.random.Generator] = None, train: bool = False):
        idx = [int(i) for i in np.asarray(indices).reshape(-1)]
        if train:
            # one child generator per item keeps augmentation order-independent
            seeds = rng.integers(0, 2 ** 63 - 1, size=len(idx))
            imgs = [preprocess(self.image(i), self.cfg, np.random.default_rng(s), train=True)
                    for i, s in zip(idx, seeds)]
        else:
            imgs = [preprocess(self.image(i), self.cfg, train=False) for i in idx]
        return np.stack(imgs) if imgs else np.zeros((0,)), self.y[idx]


def compute_channel_stats(dataset: ImageDataset) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean/std of the eval-mode (resized, center-cropped) images."""
    imgs = np.stack([preprocess(dataset.image(i), dataset.cfg, train=False, apply_normalize=False)
                     for i in range(len(dataset))])
    mean = imgs.mean(axis=(0, 2, 3))
    std = imgs.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


# ---------------------------------------------------------------------------
# synthetic data and splits
# ---------------------------------------------------------------------------

def synth_target(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 20.0 + 40.0 * x.mean(axis=1) + 15.0 * np.sin(2.0 * np.pi * x[:, 0])


def synth_dataset(n: int, input_dim: int, noise_std: float = 2.0, seed: int = 0) -> ArrayDataset:
    """Uniform inputs on the unit cube with a smooth, periodic "age-like" label."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, input_dim))
    y = synth_target(x) + rng.normal(0.0, noise_std, size=n)
    return ArrayDataset(x, y[:, None])


def synth_split(n_train: int, n_test: int, input_dim: int, noise_std: float = 2.0,
                seed: int = 0) -> Tuple[ArrayDataset, ArrayDataset]:
    full = synth_dataset(n_train + n_test, input_dim, noise_std, seed)
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))


def kfold_indices(n: int, k: int, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold ``(train_idx, val_idx)`` pairs."""
    if not 2 <= k <= n:
        raise ValueError("need 2 <= k <= n")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    return [(np.concatenate(folds[:i] + folds[i + 1:]), folds[i]) for i in range(k)]
