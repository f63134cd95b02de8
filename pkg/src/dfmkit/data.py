"""Origin datasets, substitute image pools, and extracted-dataset persistence.

Origin datasets load from local files when present (MNIST/Fashion-MNIST IDX,
CIFAR-10 python batches). When files are absent, ``mnist`` and ``cifar10``
fall back to deterministic synthetic surrogates (rendered digit glyphs,
procedural textures) so the full pipeline runs on a machine with no dataset
downloads. Pass ``synth_fallback=False`` to require real files.
"""

from __future__ import annotations

import glob
import gzip
import json
import os
import pickle
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .container import ContainerError, read_tensor, write_tensor

ORIGIN_DATASETS = ("mnist", "cifar10", "synthetic-2d")
SUBSTITUTE_POOLS = ("fashion-mnist", "coco-crops", "uniform-noise", "gaussian-noise")

# synthetic-2d blob parameters; two Gaussians this far apart have Bayes error
# Phi(-||mu1-mu0|| / (2 sigma)) ~ 2.7e-5, comfortably past the 99% bar.
BLOB_MEANS = np.array([[-2.0, -2.0], [2.0, 2.0]], dtype=np.float64)
BLOB_STD = 0.7


class DatasetError(Exception):
    """Raised for unknown dataset ids or missing/corrupt data files."""


class PoolConfigError(Exception):
    """Raised when a substitute pool cannot satisfy the requested shape."""


@dataclass
class DataSplit:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]; (N, 2) for synthetic-2d
    labels: np.ndarray  # (N,) int64 in [0, K)


@dataclass
class LabeledDataset:
    name: str
    num_classes: int
    train: DataSplit
    val: DataSplit

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train.images.shape[1:])


def _check_images(images: np.ndarray, where: str) -> None:
    if images.min() < 0.0 or images.max() > 1.0:
        raise DatasetError(f"{where}: image values outside [0, 1]")


# ---------------------------------------------------------------------------
# IDX / CIFAR file readers
# ---------------------------------------------------------------------------


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find_idx(data_dir: Path, stem: str) -> Path | None:
    for suffix in ("", ".gz"):
        p = data_dir / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def read_idx_images(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != 2051:
            raise DatasetError(f"corrupt IDX image file (magic {magic}): {path}")
        data = np.frombuffer(fh.read(n * rows * cols), dtype=np.uint8)
    if data.size != n * rows * cols:
        raise DatasetError(f"truncated IDX image file: {path}")
    return (data.reshape(n, 1, rows, cols).astype(np.float32)) / 255.0


def read_idx_labels(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        if magic != 2049:
            raise DatasetError(f"corrupt IDX label file (magic {magic}): {path}")
        data = np.frombuffer(fh.read(n), dtype=np.uint8)
    if data.size != n:
        raise DatasetError(f"truncated IDX label file: {path}")
    return data.astype(np.int64)


def _load_idx_pairs(data_dir: Path, prefix_train: str, prefix_val: str):
    names = {
        "train_images": f"{prefix_train}-images-idx3-ubyte",
        "train_labels": f"{prefix_train}-labels-idx1-ubyte",
        "val_images": f"{prefix_val}-images-idx3-ubyte",
        "val_labels": f"{prefix_val}-labels-idx1-ubyte",
    }
    paths = {}
    for key, stem in names.items():
        p = _find_idx(data_dir, stem)
        if p is None:
            raise DatasetError(f"missing data file: {data_dir / stem}")
        paths[key] = p
    return (
        read_idx_images(paths["train_images"]),
        read_idx_labels(paths["train_labels"]),
        read_idx_images(paths["val_images"]),
        read_idx_labels(paths["val_labels"]),
    )


def _load_cifar10_batches(data_dir: Path):
    batch_dir = data_dir / "cifar-10-batches-py"
    train_files = sorted(batch_dir.glob("data_batch_*"))
    test_file = batch_dir / "test_batch"
    if not train_files or not test_file.exists():
        raise DatasetError(f"missing data file: {batch_dir / 'data_batch_1'}")

    def _read(path: Path):
        with open(path, "rb") as fh:
            try:
                d = pickle.load(fh, encoding="bytes")
            except Exception as exc:
                raise DatasetError(f"corrupt CIFAR batch: {path}") from exc
        images = d[b"data"].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        labels = np.asarray(d[b"labels"], dtype=np.int64)
        return images, labels

    xs, ys = zip(*(_read(p) for p in train_files))
    x_test, y_test = _read(test_file)
    return np.concatenate(xs), np.concatenate(ys), x_test, y_test


# ---------------------------------------------------------------------------
# Synthetic surrogates
# ---------------------------------------------------------------------------


def _glyph_fonts() -> list:
    fonts = []
    try:
        import matplotlib

        ttf_dir = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
        for name in sorted(glob.glob(str(ttf_dir / "DejaVu*.ttf"))):
            if "Display" in name:  # DejaVu display faces lack digit glyphs
                continue
            fonts.append(("ttf", name))
    except ImportError:
        pass
    if not fonts:
        fonts.append(("default", None))
    return fonts


_FONT_CACHE: dict = {}


def _get_font(kind: str, name: str | None, size: int):
    key = (kind, name, size)
    if key not in _FONT_CACHE:
        if kind == "ttf":
            _FONT_CACHE[key] = ImageFont.truetype(name, size)
        else:
            _FONT_CACHE[key] = ImageFont.load_default(size=size)
    return _FONT_CACHE[key]


def render_digit(digit: int, rng: np.random.Generator, fonts: list) -> np.ndarray:
    """Render one 28x28 grayscale digit with randomized font and geometry."""
    kind, name = fonts[rng.integers(len(fonts))]
    size = int(rng.integers(34, 50))
    font = _get_font(kind, name, size)
    # stroke_width thickens the glyph toward handwritten-digit stroke density
    stroke = int(rng.integers(1, 4))

    canvas = Image.new("L", (56, 56), 0)
    draw = ImageDraw.Draw(canvas)
    bbox = draw.textbbox((0, 0), str(digit), font=font, stroke_width=stroke)
    w, h = bbox[2] - bbox[0], bbox[3] - bbox[1]
    draw.text(
        (28 - w / 2 - bbox[0], 28 - h / 2 - bbox[1]), str(digit),
        fill=255, font=font, stroke_width=stroke, stroke_fill=255,
    )

    angle = float(rng.uniform(-18.0, 18.0))
    shear = float(rng.uniform(-0.25, 0.25))
    tx = float(rng.uniform(-2.5, 2.5))
    ty = float(rng.uniform(-2.5, 2.5))
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(28, 28))
    canvas = canvas.transform(
        (56, 56),
        Image.AFFINE,
        (1.0, shear, -shear * 28 + tx, 0.0, 1.0, ty),
        resample=Image.BILINEAR,
    )
    small = canvas.resize((28, 28), Image.BILINEAR)

    arr = np.asarray(small, dtype=np.float32) / 255.0
    arr *= float(rng.uniform(0.85, 1.0))
    arr += rng.normal(0.0, 0.02, size=arr.shape).astype(np.float32)
    return np.clip(arr, 0.0, 1.0)


def synth_mnist(n_train: int, n_val: int, seed: int) -> LabeledDataset:
    """Deterministic MNIST surrogate: rendered digit glyphs, shape (N,1,28,28)."""
    rng = np.random.default_rng(seed)
    fonts = _glyph_fonts()

    def _make(n: int) -> DataSplit:
        images = np.empty((n, 1, 28, 28), dtype=np.float32)
        labels = rng.integers(0, 10, size=n).astype(np.int64)
        for i in range(n):
            images[i, 0] = render_digit(int(labels[i]), rng, fonts)
        return DataSplit(images, labels)

    return LabeledDataset("mnist", 10, _make(n_train), _make(n_val))


def _texture(cls: int, rng: np.random.Generator) -> np.ndarray:
    """One 3x32x32 procedural texture; class determines hue band and pattern."""
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32) / 32.0
    pattern_kind = cls % 5
    freq = float(rng.uniform(2.0, 5.0))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    theta = float(rng.uniform(-0.4, 0.4)) + (cls % 3) * 1.05
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    if pattern_kind == 0:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
    elif pattern_kind == 1:
        base = ((np.floor(u * freq * 2) + np.floor(v * freq * 2)) % 2).astype(np.float32)
    elif pattern_kind == 2:
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * 2 * r + phase)
    elif pattern_kind == 3:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase) * np.sin(
            2 * np.pi * freq * v + phase
        )
    else:
        base = np.clip(u + 0.25 * np.sin(2 * np.pi * freq * v + phase), 0, 1)

    hue = (cls / 10.0 + rng.uniform(-0.03, 0.03)) % 1.0
    rgb_weights = np.stack(
        [
            0.5 + 0.5 * np.cos(2 * np.pi * (hue + s))
            for s in (0.0, 1.0 / 3.0, 2.0 / 3.0)
        ]
    ).astype(np.float32)
    img = base[None, :, :] * rgb_weights[:, None, None]
    img = 0.15 + 0.7 * img
    img += rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_cifar10(n_train: int, n_val: int, seed: int) -> LabeledDataset:
    """Deterministic CIFAR-10 surrogate: 10 procedural texture classes."""
    rng = np.random.default_rng(seed)

    def _make(n: int) -> DataSplit:
        images = np.empty((n, 3, 32, 32), dtype=np.float32)
        labels = rng.integers(0, 10, size=n).astype(np.int64)
        for i in range(n):
            images[i] = _texture(int(labels[i]), rng)
        return DataSplit(images, labels)

    return LabeledDataset("cifar10", 10, _make(n_train), _make(n_val))


def synth_blobs(n_train: int, n_val: int, seed: int) -> LabeledDataset:
    """Two linearly separable 2-D Gaussian blobs, K=2."""
    rng = np.random.default_rng(seed)

    def _make(n: int) -> DataSplit:
        labels = rng.integers(0, 2, size=n).astype(np.int64)
        points = BLOB_MEANS[labels] + rng.normal(0.0, BLOB_STD, size=(n, 2))
        return DataSplit(points.astype(np.float32), labels)

    return LabeledDataset("synthetic-2d", 2, _make(n_train), _make(n_val))


# ---------------------------------------------------------------------------
# Origin dataset entry point
# ---------------------------------------------------------------------------


def default_data_dir() -> Path:
    return Path(os.environ.get("DFMKIT_DATA_DIR", "data"))


def load_origin_dataset(
    name: str,
    data_dir: str | Path | None = None,
    synth_fallback: bool = True,
    n_train: int = 20000,
    n_val: int = 5000,
    seed: int = 1234,
) -> LabeledDataset:
    """Load an origin dataset by id.

    ``n_train``/``n_val``/``seed`` only apply to synthesized data; real files
    are returned in full.
    """
    if name not in ORIGIN_DATASETS:
        raise DatasetError(f"unknown dataset id: {name!r} (expected one of {ORIGIN_DATASETS})")
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()

    if name == "synthetic-2d":
        return synth_blobs(n_train, n_val, seed)

    if name == "mnist":
        try:
            xt, yt, xv, yv = _load_idx_pairs(data_dir / "mnist", "train", "t10k")
            ds = LabeledDataset("mnist", 10, DataSplit(xt, yt), DataSplit(xv, yv))
        except DatasetError:
            if not synth_fallback:
                raise
            ds = synth_mnist(n_train, n_val, seed)
    else:  # cifar10
        try:
            xt, yt, xv, yv = _load_cifar10_batches(data_dir)
            ds = LabeledDataset("cifar10", 10, DataSplit(xt, yt), DataSplit(xv, yv))
        except DatasetError:
            if not synth_fallback:
                raise
            ds = synth_cifar10(n_train, n_val, seed)

    _check_images(ds.train.images, f"{name} train")
    _check_images(ds.val.images, f"{name} val")
    return ds


# ---------------------------------------------------------------------------
# Substitute pools
# ---------------------------------------------------------------------------


def _resize_batch(images: np.ndarray, h: int, w: int) -> np.ndarray:
    if images.shape[2] == h and images.shape[3] == w:
        return images
    out = np.empty((images.shape[0], images.shape[1], h, w), dtype=np.float32)
    for i in range(images.shape[0]):
        for c in range(images.shape[1]):
            img = Image.fromarray((images[i, c] * 255).astype(np.uint8))
            out[i, c] = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
    return out


def _match_channels(images: np.ndarray, channels: int) -> np.ndarray:
    have = images.shape[1]
    if have == channels:
        return images
    if channels == 1 and have == 3:
        luma = np.array([0.299, 0.587, 0.114], dtype=np.float32)
        return np.einsum("nchw,c->nhw", images, luma)[:, None]
    if channels == 3 and have == 1:
        return np.repeat(images, 3, axis=1)
    raise PoolConfigError(f"cannot convert {have}-channel images to {channels} channels")


class SubstitutePool:
    """Seeded source of background images at a fixed target shape."""

    def __init__(self, name: str, shape: tuple[int, int, int], seed: int):
        self.name = name
        self.shape = tuple(shape)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def draw(self, n: int) -> np.ndarray:
        raise NotImplementedError


class NoisePool(SubstitutePool):
    def __init__(self, name, shape, seed, kind: str):
        super().__init__(name, shape, seed)
        self.kind = kind

    def draw(self, n: int) -> np.ndarray:
        c, h, w = self.shape
        if self.kind == "uniform":
            return self._rng.uniform(0.0, 1.0, size=(n, c, h, w)).astype(np.float32)
        samples = self._rng.normal(0.5, 0.25, size=(n, c, h, w))
        return np.clip(samples, 0.0, 1.0).astype(np.float32)


class ArrayPool(SubstitutePool):
    """Pool backed by an in-memory image array (e.g. Fashion-MNIST)."""

    def __init__(self, name, shape, seed, images: np.ndarray):
        super().__init__(name, shape, seed)
        c, h, w = self.shape
        images = _match_channels(images, c)
        self._images = _resize_batch(images, h, w)

    def draw(self, n: int) -> np.ndarray:
        idx = self._rng.integers(0, self._images.shape[0], size=n)
        return self._images[idx].copy()


class ImageDirPool(SubstitutePool):
    """Pool of natural images cropped and resized to the target shape.

    Each draw: random file, random square crop of 50-100% of the shorter
    side, bilinear resize, luma grayscale when the target is one channel.
    """

    def __init__(self, name, shape, seed, image_dir: Path):
        super().__init__(name, shape, seed)
        exts = ("*.jpg", "*.jpeg", "*.png", "*.bmp")
        self._files = sorted(p for ext in exts for p in Path(image_dir).glob(ext))
        if not self._files:
            raise DatasetError(f"missing data file: no images under {image_dir}")

    def draw(self, n: int) -> np.ndarray:
        c, h, w = self.shape
        out = np.empty((n, c, h, w), dtype=np.float32)
        for i in range(n):
            path = self._files[self._rng.integers(len(self._files))]
            with Image.open(path) as img:
                img = img.convert("RGB")
                short = min(img.size)
                crop = int(short * self._rng.uniform(0.5, 1.0))
                x0 = int(self._rng.integers(0, img.size[0] - crop + 1))
                y0 = int(self._rng.integers(0, img.size[1] - crop + 1))
                patch = img.crop((x0, y0, x0 + crop, y0 + crop)).resize((w, h), Image.BILINEAR)
            rgb = np.asarray(patch, dtype=np.float32).transpose(2, 0, 1) / 255.0
            out[i] = _match_channels(rgb[None], c)[0]
        return out


def load_substitute_pool(
    name: str,
    shape: tuple[int, int, int],
    seed: int,
    data_dir: str | Path | None = None,
) -> SubstitutePool:
    if name not in SUBSTITUTE_POOLS:
        raise PoolConfigError(
            f"unknown substitute pool: {name!r} (expected one of {SUBSTITUTE_POOLS})"
        )
    if len(shape) != 3 or any(int(d) <= 0 for d in shape) or shape[0] not in (1, 3):
        raise PoolConfigError(f"unsupported target shape {shape}: need (C,H,W) with C in (1, 3)")
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()

    if name == "uniform-noise":
        return NoisePool(name, shape, seed, "uniform")
    if name == "gaussian-noise":
        return NoisePool(name, shape, seed, "gaussian")
    if name == "fashion-mnist":
        fdir = data_dir / "fashion-mnist"
        path = _find_idx(fdir, "train-images-idx3-ubyte")
        if path is None:
            raise DatasetError(f"missing data file: {fdir / 'train-images-idx3-ubyte'}")
        return ArrayPool(name, shape, seed, read_idx_images(path))
    return ImageDirPool(name, shape, seed, data_dir / "coco-crops")


# ---------------------------------------------------------------------------
# Extracted datasets
# ---------------------------------------------------------------------------


@dataclass
class ExtractedDataset:
    """Images optimized toward virtual logits, paired with the logits the
    source model actually produced on them."""

    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    logits: np.ndarray  # (N, K) float32
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.logits.shape[0]:
            raise DatasetError(
                f"image/logit count mismatch: {self.images.shape[0]} vs {self.logits.shape[0]}"
            )


class IntegrityError(Exception):
    """Raised when a stored extracted dataset fails verification."""


def make_manifest(
    source_checkpoint_sha256: str,
    count: int,
    pgd: dict,
    vlogit: dict,
    seed: int,
) -> dict:
    return {
        "source_checkpoint_sha256": source_checkpoint_sha256,
        "count": int(count),
        "pgd": {
            "steps": int(pgd["steps"]),
            "step_size": float(pgd["step_size"]),
            "epsilon": None if pgd.get("epsilon") is None else float(pgd["epsilon"]),
        },
        "vlogit": {
            "top_mean": float(vlogit["top_mean"]),
            "top_std": float(vlogit["top_std"]),
            "lo": float(vlogit["lo"]),
            "hi": float(vlogit["hi"]),
            "others_std": float(vlogit["others_std"]),
        },
        "seed": int(seed),
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }


def save_extracted(dataset: ExtractedDataset, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "images.dfm", dataset.images)
    write_tensor(out_dir / "logits.dfm", dataset.logits)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(dataset.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def load_extracted(in_dir: str | Path) -> ExtractedDataset:
    in_dir = Path(in_dir)
    try:
        images = read_tensor(in_dir / "images.dfm")
        logits = read_tensor(in_dir / "logits.dfm")
    except ContainerError as exc:
        raise IntegrityError(str(exc)) from exc
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise IntegrityError(f"missing manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if images.shape[0] != logits.shape[0]:
        raise IntegrityError(f"image/logit count mismatch in {in_dir}")
    if manifest.get("count") != images.shape[0]:
        raise IntegrityError(f"manifest count disagrees with stored arrays in {in_dir}")
    if images.min() < 0.0 or images.max() > 1.0:
        raise IntegrityError(f"stored images outside [0, 1] in {in_dir}")
    return ExtractedDataset(images=images, logits=logits, manifest=manifest)
