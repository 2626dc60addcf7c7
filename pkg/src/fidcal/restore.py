"""Residual convolutional denoiser trained on patches with an l1 loss."""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .degrade import MIXTURE_SIGMAS, mixture_awgn
from .imaging import PreprocessConfig, check_image, check_images, train_geometry
from .io import load_checkpoint, save_checkpoint
from .optim import LRSchedule, lr_at, make_optimizer, set_lr

log = logging.getLogger(__name__)

NORMS = ("batch", "none")


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 8
    width: int = 64
    kernel: int = 3
    residual: bool = True
    norm: str = "batch"
    in_channels: int = 3
    out_channels: int = 3
    zero_init_last: bool = True

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("denoiser depth must be >= 3")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.residual and self.in_channels != self.out_channels:
            raise ValueError("residual denoiser needs matching in/out channels")

    @classmethod
    def dncnn17(cls):
        return cls(depth=17, width=64)


@dataclass(frozen=True)
class PatchSampler:
    patch: int = 50
    stride: int = 25

    def __post_init__(self):
        if self.patch <= 0 or not 0 < self.stride <= self.patch:
            raise ValueError(f"need patch > 0 and 0 < stride <= patch, got {self}")

    def grid(self, h, w):
        """Top-left corners of all full patches on an h×w image."""
        if h < self.patch or w < self.patch:
            return []
        rows = range(0, (h - self.patch) // self.stride * self.stride + 1, self.stride)
        cols = range(0, (w - self.patch) // self.stride * self.stride + 1, self.stride)
        return [(i, j) for i in rows for j in cols]

    def extract(self, img):
        """Stack of patches shaped ``(n, C, patch, patch)``."""
        p = self.patch
        return np.stack([img[:, i:i + p, j:j + p] for i, j in self.grid(*img.shape[1:])])


class DnCNN(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.kernel // 2
        layers = [nn.Conv2d(cfg.in_channels, cfg.width, cfg.kernel, padding=pad), nn.ReLU(inplace=True)]
        for _ in range(cfg.depth - 2):
            layers.append(nn.Conv2d(cfg.width, cfg.width, cfg.kernel, padding=pad,
                                    bias=cfg.norm == "none"))
            if cfg.norm == "batch":
                layers.append(nn.BatchNorm2d(cfg.width))
            layers.append(nn.ReLU(inplace=True))
        last = nn.Conv2d(cfg.width, cfg.out_channels, cfg.kernel, padding=pad)
        if cfg.zero_init_last:
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
        layers.append(last)
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        """Residual mode: ``x - predicted_noise`` (unclipped); else the raw map."""
        out = self.body(x)
        return x - out if self.cfg.residual else out


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def l1_loss(pred, target):
    return (pred - target).abs().mean()


@torch.no_grad()
def run_model(model, x, batch=64, clamp=(0.0, 1.0)):
    """Batched eval-mode inference on an N×C×H×W array or tensor."""
    if model is None:
        raise NotFittedError("model is not initialized")
    was_training = model.training
    model.eval()
    t = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not isinstance(x, torch.Tensor) else x
    outs = [model(t[i:i + batch]) for i in range(0, len(t), batch)]
    model.train(was_training)
    out = torch.cat(outs)
    if clamp is not None:
        out = out.clamp(*clamp)
    return out.numpy()


def denoise(model, img):
    """Restore one C×H×W image or an N×C×H×W batch; output clipped to [0, 1]."""
    if model is None:
        raise NotFittedError("denoiser is not trained")
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        return run_model(model, check_image(arr)[None])[0]
    return run_model(model, check_images(arr, same_size=True))


def fit_patch_model(model, make_epoch, epochs, lr, batch_size, warmup_epochs, seed,
                    optimizer="adam", on_epoch=None):
    """Shared patch-regression loop (l1 loss, warmup + cosine schedule).

    ``make_epoch(rng)`` returns ``(inputs, targets)`` patch arrays for one epoch.
    Returns the per-epoch mean training loss.
    """
    rng = np.random.default_rng([seed, 7])
    torch.manual_seed(seed)
    first_inputs, first_targets = make_epoch(rng)
    n = len(first_inputs)
    if n == 0:
        raise ValueError("no training patches; training set empty or images smaller than a patch")
    steps = math.ceil(n / batch_size)
    sched = LRSchedule.from_epochs(lr, epochs, warmup_epochs, steps)
    opt = make_optimizer(model.parameters(), optimizer, lr)
    history, step = [], 0
    inputs, targets = first_inputs, first_targets
    model.train()
    for epoch in range(epochs):
        if epoch > 0:
            inputs, targets = make_epoch(rng)
        order = rng.permutation(len(inputs))[: steps * batch_size]
        total, count = 0.0, 0
        for b in range(steps):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if len(idx) == 0 or step >= sched.total_steps:
                break
            set_lr(opt, lr_at(sched, step))
            x = torch.from_numpy(inputs[idx])
            y = torch.from_numpy(targets[idx])
            loss = l1_loss(model(x), y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
            step += 1
        history.append(total / max(count, 1))
        log.info("epoch %d  l1 %.5f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.eval()
    return history


def degraded_pairs(images, crop_size, sigmas, rng):
    """One augmented clean/noisy pair per image (train geometry, mixture AWGN)."""
    cfg = PreprocessConfig("train", crop_size=crop_size)
    clean, noisy = [], []
    for img in images:
        c = train_geometry(img, cfg, rng)
        n, _ = mixture_awgn(c, rng, sigmas)
        clean.append(c)
        noisy.append(n)
    return np.stack(clean), np.stack(noisy)


def train_denoiser(images, cfg=DenoiserConfig(), sampler=PatchSampler(), sigmas=MIXTURE_SIGMAS,
                   crop_size=224, epochs=30, lr=1e-4, batch_size=128, warmup_epochs=5, seed=0):
    """Train a residual denoiser on clean images degraded on the fly.

    Each epoch re-augments every clean image, draws its noise level from
    ``sigmas`` and cuts matching patch grids out of the clean/noisy pair.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    model = DnCNN(cfg)

    def make_epoch(rng):
        clean, noisy = degraded_pairs(images, crop_size, sigmas, rng)
        xs = np.concatenate([sampler.extract(n) for n in noisy])
        ys = np.concatenate([sampler.extract(c) for c in clean])
        return xs, ys

    history = fit_patch_model(model, make_epoch, epochs, lr, batch_size, warmup_epochs, seed)
    return model, history


def save_denoiser(path, model, **meta):
    save_checkpoint(path, "denoiser", asdict(model.cfg), model.state_dict(), **meta)


def load_denoiser(path):
    ckpt = load_checkpoint(path, kind="denoiser")
    model = DnCNN(DenoiserConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


class Denoiser(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on clean images, ``transform`` noisy ones."""

    def __init__(self, depth=8, width=64, kernel=3, norm="batch", patch=50, stride=25,
                 crop_size=224, sigmas=MIXTURE_SIGMAS, epochs=30, lr=1e-4, batch_size=128,
                 warmup_epochs=5, seed=0):
        self.depth = depth
        self.width = width
        self.kernel = kernel
        self.norm = norm
        self.patch = patch
        self.stride = stride
        self.crop_size = crop_size
        self.sigmas = sigmas
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X)
        cfg = DenoiserConfig(self.depth, self.width, self.kernel, norm=self.norm)
        self.model_, self.history_ = train_denoiser(
            X, cfg, PatchSampler(self.patch, self.stride), tuple(self.sigmas), self.crop_size,
            self.epochs, self.lr, self.batch_size, self.warmup_epochs, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, same_size=True)
        return run_model(self.model_, X)

    def score(self, X, y):
        """Mean PSNR of the restored ``X`` against clean ``y``."""
        out = self.transform(X)
        return float(np.mean([psnr(o, c) for o, c in zip(out, np.asarray(y))]))

    @classmethod
    def from_model(cls, model, **params):
        est = cls(depth=model.cfg.depth, width=model.cfg.width, kernel=model.cfg.kernel,
                  norm=model.cfg.norm, **params)
        est.model_ = model
        est.history_ = []
        return est
