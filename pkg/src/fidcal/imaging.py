"""Image decoding, dataset splitting and the train/eval preprocessing pipelines.

Images travel through the package as float32 arrays shaped ``(C, H, W)`` with
values in ``[0, 1]``. Geometry (crop, resize, flip) is kept separate from
channel normalization so degradations can be slotted in between, with noise
levels expressed in raw pixel units.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .io import atomic_write_text

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}


# -- validation helpers ------------------------------------------------------

def check_image(img, channels=3, name="image"):
    """Return ``img`` as a C×H×W float32 array after validating it."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be C×H×W, got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {arr.shape[0]}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"{name} has empty spatial extent {arr.shape[1:]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_images(X, channels=3, same_size=False):
    """Validate a batch of images.

    Accepts an N×C×H×W array or a sequence of C×H×W arrays (sizes may differ
    unless ``same_size``). Returns a 4-D array when sizes agree, else a list.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        for i in range(len(X)):
            check_image(X[i], channels, name=f"image {i}")
        return X.astype(np.float32, copy=False)
    if isinstance(X, torch.Tensor):
        return check_images(X.detach().cpu().numpy(), channels, same_size)
    items = [check_image(x, channels, name=f"image {i}") for i, x in enumerate(X)]
    if not items:
        raise ValueError("empty image collection")
    shapes = {x.shape for x in items}
    if len(shapes) == 1:
        return np.stack(items)
    if same_size:
        raise ValueError(f"images must share one size, got {sorted(shapes)[:3]}...")
    return items


def decode_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_png(img, path):
    arr = check_image(img)
    u8 = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path, format="PNG")


# -- dataset splits ----------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    root: str
    classes: tuple
    train: tuple
    val: tuple
    test: tuple

    @property
    def num_classes(self):
        return len(self.classes)

    def items(self, which):
        return getattr(self, which)

    def manifest_text(self):
        lines = []
        for which in ("train", "val", "test"):
            for rel, cid in getattr(self, which):
                lines.append(f"{rel}\t{cid}\t{which}")
        return "\n".join(lines) + "\n"

    def write_manifest(self, path):
        atomic_write_text(path, self.manifest_text())

    def load_images(self, which):
        """Decode one split into ``(list of images, label array)``."""
        items = getattr(self, which)
        imgs = [decode_image(Path(self.root) / rel) for rel, _ in items]
        return imgs, np.array([cid for _, cid in items], dtype=np.int64)


def _class_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not dirs:
        raise ValueError(f"dataset root {root} has no class subdirectories")
    return dirs


def load_split(root, seed, train_per_class=60, val_fraction=0.2):
    """Split ``root/<class>/<images>`` per class into train/val/test.

    Per class, ``min(train_per_class, n)`` images are drawn at random; a
    ``val_fraction`` share of those becomes validation and the rest of the
    class is the test set.
    """
    dirs = _class_dirs(root)
    train, val, test = [], [], []
    for cid, d in enumerate(dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class {d.name!r} has no images in {d}")
        rng = np.random.default_rng([seed, cid])
        order = rng.permutation(len(files))
        n_pool = min(train_per_class, len(files))
        n_val = int(round(val_fraction * n_pool))
        rel = [f"{d.name}/{files[i].name}" for i in order]
        val += [(r, cid) for r in rel[:n_val]]
        train += [(r, cid) for r in rel[n_val:n_pool]]
        test += [(r, cid) for r in rel[n_pool:]]
    return DatasetSplit(str(Path(root)), tuple(d.name for d in dirs),
                        tuple(train), tuple(val), tuple(test))


def read_manifest(root, path):
    buckets = {"train": [], "val": [], "test": []}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rel, cid, which = line.split("\t")
        buckets[which].append((rel, int(cid)))
    classes = tuple(d.name for d in _class_dirs(root))
    return DatasetSplit(str(Path(root)), classes, tuple(buckets["train"]),
                        tuple(buckets["val"]), tuple(buckets["test"]))


# -- preprocessing -----------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    mode: str = "train"
    crop_size: int = 224
    area_range: tuple = (0.08, 1.0)
    aspect_range: tuple = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    max_attempts: int = 10

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        lo, hi = self.area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad area_range {self.area_range}")
        lo, hi = self.aspect_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad aspect_range {self.aspect_range}")

    def with_mode(self, mode):
        return PreprocessConfig(mode, self.crop_size, self.area_range, self.aspect_range,
                                self.hflip_prob, self.mean, self.std, self.max_attempts)


def _stats(values, like):
    if isinstance(like, torch.Tensor):
        return torch.tensor(values, dtype=like.dtype, device=like.device).view(-1, 1, 1)
    return np.asarray(values, dtype=np.float32).reshape(-1, 1, 1)


def normalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per-channel ``(x - mean) / std``; works on arrays or tensors (channel at dim -3)."""
    return (img - _stats(mean, img)) / _stats(std, img)


def denormalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    return img * _stats(std, img) + _stats(mean, img)


def resize(img, height, width):
    """Bilinear resize of a C×H×W array (antialiased when shrinking)."""
    if img.shape[1:] == (height, width):
        return np.array(img, dtype=np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear",
                        align_corners=False, antialias=True)
    return out[0].clamp_(0.0, 1.0).numpy()


def sample_aspect(cfg, rng):
    lo, hi = cfg.aspect_range
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def sample_crop_box(h, w, cfg, rng):
    """Pick ``(top, left, height, width)`` for a random-resized crop."""
    area = h * w
    for _ in range(cfg.max_attempts):
        target = area * rng.uniform(*cfg.area_range)
        aspect = sample_aspect(cfg, rng)
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: largest centered box within the aspect bounds
    ratio = w / h
    lo, hi = cfg.aspect_range
    if ratio < lo:
        cw, ch = w, max(1, int(round(w / lo)))
    elif ratio > hi:
        ch, cw = h, max(1, int(round(h * hi)))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def train_geometry(img, cfg, rng):
    """Random-resized crop to ``crop_size`` plus random horizontal flip (no normalization)."""
    img = check_image(img)
    top, left, ch, cw = sample_crop_box(img.shape[1], img.shape[2], cfg, rng)
    out = resize(img[:, top:top + ch, left:left + cw], cfg.crop_size, cfg.crop_size)
    if rng.random() < cfg.hflip_prob:
        out = np.ascontiguousarray(out[:, :, ::-1])
    return out


def eval_geometry(img, cfg):
    """Resize the shorter edge to ``crop_size`` then take the centered square."""
    img = check_image(img)
    s = cfg.crop_size
    h, w = img.shape[1:]
    if h <= w:
        nh, nw = s, max(s, int(round(w * s / h)))
    else:
        nh, nw = max(s, int(round(h * s / w))), s
    out = resize(img, nh, nw)
    top = int(round((nh - s) / 2.0))
    left = int(round((nw - s) / 2.0))
    return np.ascontiguousarray(out[:, top:top + s, left:left + s])


def preprocess_train(img, cfg, rng):
    if cfg.mode != "train":
        raise ValueError("preprocess_train needs a train-mode config")
    return normalize(train_geometry(img, cfg, rng), cfg.mean, cfg.std)


def preprocess_eval(img, cfg):
    if cfg.mode != "eval":
        raise ValueError("preprocess_eval needs an eval-mode config")
    return normalize(eval_geometry(img, cfg), cfg.mean, cfg.std)
