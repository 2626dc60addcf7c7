"""Fidelity maps: per-pixel distance between a restored image and its clean
original, their mixture-noise normalization, and a learned estimator."""

import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .degrade import MIXTURE_SIGMAS
from .imaging import check_image, check_images
from .io import load_checkpoint, read_array, save_checkpoint, write_array
from .restore import DenoiserConfig, DnCNN, PatchSampler, degraded_pairs, fit_patch_model, run_model

METRICS = ("l1", "l2", "cosine")


@dataclass(frozen=True)
class NoiseMixtureStats:
    sigma_sq: float
    post_restore_sigma_sq: float
    model_sigma_sq: float
    half_normal_mean: float
    half_normal_var: float
    gamma_mean: float
    gamma_var: float

    def moments(self, metric):
        """``(mean, std)`` of the noise model for an l1 or l2 map."""
        if metric == "l1":
            return self.half_normal_mean, math.sqrt(self.half_normal_var)
        if metric == "l2":
            return self.gamma_mean, math.sqrt(self.gamma_var)
        raise ValueError(f"no normalization model for metric {metric!r}")


@dataclass(frozen=True)
class FidelityMap:
    values: np.ndarray  # 1×H×W
    metric: str = "l1"
    normalized: bool = False
    stats: dict = None

    def save(self, path):
        write_array(path, self.values, {"metric": self.metric, "normalized": self.normalized,
                                        "stats": self.stats})

    @classmethod
    def load(cls, path):
        arr, meta = read_array(path)
        return cls(arr, meta["metric"], meta["normalized"], meta.get("stats"))


def fidelity_tensor(restored, clean, metric="l1"):
    """Batched fidelity on N×C×H×W tensors, returning N×1×H×W."""
    if restored.shape != clean.shape:
        raise ValueError(f"shape mismatch {tuple(restored.shape)} vs {tuple(clean.shape)}")
    if metric == "l1":
        return (restored - clean).abs().mean(dim=1, keepdim=True)
    if metric == "l2":
        return ((restored - clean) ** 2).mean(dim=1, keepdim=True)
    if metric == "cosine":
        dot = (restored * clean).sum(dim=1, keepdim=True)
        norms = restored.norm(dim=1, keepdim=True) * clean.norm(dim=1, keepdim=True)
        safe = torch.where(norms > 0, norms, torch.ones_like(norms))
        dist = torch.where(norms > 0, 1.0 - dot / safe, torch.zeros_like(dot))
        return dist.clamp(0.0, 2.0)
    raise ValueError(f"unknown fidelity metric {metric!r}")


def compute_fidelity(restored, clean, metric="l1"):
    r = check_image(restored, name="restored")
    c = check_image(clean, name="clean")
    out = fidelity_tensor(torch.from_numpy(r)[None], torch.from_numpy(c)[None], metric)
    return FidelityMap(out[0].numpy(), metric)


def mixture_stats(sigmas=MIXTURE_SIGMAS, restore_halving=True):
    """Noise-model moments for a mixture of AWGN levels.

    The mixture variance is taken as ``sum(s**2) / n**2`` over the ``n`` levels,
    halved when the map is measured after restoration. Sums are done in exact
    rational arithmetic on the decimal levels.
    """
    sigmas = tuple(sigmas)
    if not sigmas:
        raise ValueError("need at least one noise level")
    exact = sum(Fraction(repr(float(s))) ** 2 for s in sigmas) / len(sigmas) ** 2
    sigma_sq = float(exact)
    post = float(exact / 2)
    model = post if restore_halving else sigma_sq
    return NoiseMixtureStats(
        sigma_sq=sigma_sq,
        post_restore_sigma_sq=post,
        model_sigma_sq=model,
        half_normal_mean=math.sqrt(model) * math.sqrt(2.0 / math.pi),
        half_normal_var=model * (1.0 - 2.0 / math.pi),
        gamma_mean=model,
        gamma_var=2.0 * model ** 2,
    )


def normalize_values(values, metric, stats):
    mean, std = stats.moments(metric)
    if std <= 0:
        raise ValueError("noise model has zero spread; cannot normalize")
    return (values - mean) / std


def normalize(fmap, stats):
    if fmap.metric == "cosine":
        raise ValueError("cosine fidelity maps are not normalized")
    if fmap.normalized:
        raise ValueError("fidelity map is already normalized")
    vals = normalize_values(fmap.values, fmap.metric, stats).astype(np.float32)
    return replace(fmap, values=vals, normalized=True, stats=asdict(stats))


def estimate_fidelity(model, degraded):
    """Predicted l1 map for one C×H×W degraded image (clamped non-negative)."""
    img = check_image(degraded, name="degraded")
    out = run_model(model, img[None], clamp=(0.0, None))[0]
    return FidelityMap(out, "l1")


def estimator_config(depth=8, width=64, kernel=3, norm="batch"):
    return DenoiserConfig(depth, width, kernel, residual=False, norm=norm,
                          in_channels=3, out_channels=1)


def train_estimator(images, denoiser, cfg=None, sampler=PatchSampler(), sigmas=MIXTURE_SIGMAS,
                    crop_size=224, epochs=30, lr=1e-4, batch_size=128, warmup_epochs=5, seed=0):
    """Fit a network mapping degraded patches to the oracle l1 fidelity of ``denoiser``."""
    if len(images) == 0:
        raise ValueError("empty training set")
    cfg = cfg or estimator_config()
    torch.manual_seed(seed)
    model = DnCNN(cfg)

    def make_epoch(rng):
        clean, noisy = degraded_pairs(images, crop_size, sigmas, rng)
        restored = torch.from_numpy(run_model(denoiser, noisy))
        target = fidelity_tensor(restored, torch.from_numpy(clean), "l1").numpy()
        xs = np.concatenate([sampler.extract(n) for n in noisy])
        ys = np.concatenate([sampler.extract(t) for t in target])
        return xs, ys

    history = fit_patch_model(model, make_epoch, epochs, lr, batch_size, warmup_epochs, seed + 1)
    return model, history


def save_estimator(path, model, **meta):
    save_checkpoint(path, "fidelity_estimator", asdict(model.cfg), model.state_dict(), **meta)


def load_estimator(path):
    ckpt = load_checkpoint(path, kind="fidelity_estimator")
    model = DnCNN(DenoiserConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


class FidelityEstimator(RegressorMixin, BaseEstimator):
    """Learns the oracle l1 fidelity of a fixed denoiser from degraded inputs.

    ``fit`` takes clean images and synthesizes mixture-noise pairs itself;
    ``predict`` maps degraded N×3×H×W images to N×1×H×W fidelity maps.
    """

    def __init__(self, denoiser=None, depth=8, width=64, kernel=3, norm="batch", patch=50,
                 stride=25, crop_size=224, sigmas=MIXTURE_SIGMAS, epochs=30, lr=1e-4,
                 batch_size=128, warmup_epochs=5, seed=0):
        self.denoiser = denoiser
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
        if self.denoiser is None:
            raise ValueError("FidelityEstimator needs a trained denoiser")
        den = getattr(self.denoiser, "model_", self.denoiser)
        self.model_, self.history_ = train_estimator(
            check_images(X), den, estimator_config(self.depth, self.width, self.kernel, self.norm),
            PatchSampler(self.patch, self.stride), tuple(self.sigmas), self.crop_size,
            self.epochs, self.lr, self.batch_size, self.warmup_epochs, self.seed)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return run_model(self.model_, check_images(X, same_size=True), clamp=(0.0, None))

    def score(self, X, y):
        """Negative mean absolute error against target maps ``y``."""
        return -float(np.mean(np.abs(self.predict(X) - np.asarray(y))))
