"""Training loops for the classifier baselines and the calibration network.

Both loops share one recipe: per-step linear warmup then cosine decay,
label-smoothed cross-entropy, and best-validation-epoch selection. Data for
each regime is synthesized on the fly from clean images, so degradation
levels are re-drawn per image every epoch.
"""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import degrade as dg
from .fidelity import fidelity_tensor, mixture_stats, normalize_values
from .imaging import PreprocessConfig, eval_geometry, normalize, train_geometry
from .io import atomic_write_text, state_dict_sha256
from .optim import LRSchedule, lr_at, make_optimizer, set_lr, smoothed_loss

log = logging.getLogger(__name__)

REGIMES = ("setup1_clean", "setup2_degraded", "setup3_restored",
           "calib_oracle", "calib_pretrained", "calib_end2end")
FIDELITY_SOURCES = {"calib_oracle": "oracle", "calib_pretrained": "estimator_frozen",
                    "calib_end2end": "estimator_finetuned"}


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "nag"
    lr_init: float = 0.001
    batch_size: int = 64
    epochs: int = 120
    warmup_epochs: int = 5
    schedule: str = "cosine"
    label_smoothing_eps: float = 0.1
    seed: int = 0
    regime: str = "setup1_clean"
    momentum: float = 0.9
    weight_decay: float = 0.0
    crop_size: int = 224
    sigmas: tuple = dg.MIXTURE_SIGMAS
    fidelity_metric: str = "l1"
    eval_batch: int = 128

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.epochs < self.warmup_epochs:
            raise ValueError("epochs must be >= warmup_epochs")
        if not 0 <= self.label_smoothing_eps < 1:
            raise ValueError("label_smoothing_eps must lie in [0, 1)")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is implemented")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class FitResult:
    model: object
    history: list = field(default_factory=list)  # rows: epoch, split, loss, accuracy
    best_epoch: int = -1
    best_val_accuracy: float = -1.0
    extra: dict = field(default_factory=dict)


def write_curves(path, history):
    lines = ["epoch,split,loss,accuracy"]
    for row in history:
        lines.append(f"{row['epoch']},{row['split']},{row['loss']:.6f},{row['accuracy']:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_curves(path):
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "split": r["split"], "loss": float(r["loss"]),
                 "accuracy": float(r["accuracy"])} for r in csv.DictReader(fh)]


# -- batch synthesis ---------------------------------------------------------

def eval_stack(images, crop_size):
    """Eval geometry for every image, stacked into N×3×S×S in [0, 1]."""
    cfg = PreprocessConfig("eval", crop_size=crop_size)
    return np.stack([eval_geometry(img, cfg) for img in images])


def degrade_stack(X, spec, offset=0):
    return np.stack([dg.apply(x, spec, offset + i) for i, x in enumerate(X)])


def mixture_stack(X, sigmas, seed, offset=0):
    """Fixed-seed mixture degradation (used for validation sets)."""
    out = []
    for i, x in enumerate(X):
        rng = dg.image_rng(seed, offset + i)
        out.append(dg.mixture_awgn(x, rng, sigmas)[0])
    return np.stack(out)


@torch.no_grad()
def restore_stack(denoiser, X, batch=128):
    if denoiser is None:
        raise ValueError("this regime needs a trained denoiser")
    denoiser.eval()
    t = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))
    return torch.cat([denoiser(t[i:i + batch]).clamp(0, 1) for i in range(0, len(t), batch)]).numpy()


def _train_geometry_batch(images, idx, crop_size, rng):
    cfg = PreprocessConfig("train", crop_size=crop_size)
    return np.stack([train_geometry(images[i], cfg, rng) for i in idx])


def _mixture_batch(X, rng, sigmas):
    return np.stack([dg.mixture_awgn(x, rng, sigmas)[0] for x in X])


def classifier_inputs(images, idx, cfg, rng, denoiser=None):
    """Augmented [0, 1] inputs for one classifier batch under ``cfg.regime``."""
    x = _train_geometry_batch(images, idx, cfg.crop_size, rng)
    if cfg.regime == "setup1_clean":
        return x
    x = _mixture_batch(x, rng, cfg.sigmas)
    if cfg.regime == "setup3_restored":
        x = restore_stack(denoiser, x)
    return x


def to_model_input(X):
    return normalize(torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32)))


@torch.no_grad()
def predict_logits(model, X01, batch=128):
    model.eval()
    t = to_model_input(X01)
    return torch.cat([model(t[i:i + batch]) for i in range(0, len(t), batch)])


def _epoch_eval(logits, labels, eps):
    y = torch.as_tensor(labels)
    loss = float(smoothed_loss(logits, y, eps))
    acc = float((logits.argmax(1) == y).float().mean())
    return loss, acc


def _run_loop(params, forward_batch, n_train, cfg, val_fn, snapshot, tag):
    """Generic epoch loop; ``forward_batch(idx, rng)`` returns ``(logits, labels)``."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    steps = math.ceil(n_train / cfg.batch_size)
    sched = LRSchedule.from_epochs(cfg.lr_init, cfg.epochs, cfg.warmup_epochs, steps)
    opt = make_optimizer(params, cfg.optimizer, cfg.lr_init, cfg.momentum, cfg.weight_decay)
    history, best = [], (-1.0, -1, None)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        tot_loss, tot_correct = 0.0, 0
        for b in range(steps):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            set_lr(opt, lr_at(sched, step))
            logits, y = forward_batch(idx, rng)
            y = torch.as_tensor(y)
            loss = smoothed_loss(logits, y, cfg.label_smoothing_eps)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"{tag}: non-finite loss at epoch {epoch} step {step} (lr={lr_at(sched, step):.3g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            tot_loss += float(loss.detach()) * len(idx)
            tot_correct += int((logits.argmax(1) == y).sum())
        history.append({"epoch": epoch, "split": "train", "loss": tot_loss / n_train,
                        "accuracy": tot_correct / n_train})
        vloss, vacc = val_fn()
        history.append({"epoch": epoch, "split": "val", "loss": vloss, "accuracy": vacc})
        log.info("%s epoch %d  train %.4f/%.3f  val %.4f/%.3f", tag, epoch,
                 history[-2]["loss"], history[-2]["accuracy"], vloss, vacc)
        if vacc > best[0]:
            best = (vacc, epoch, snapshot())
    return history, best


def fit_classifier(train_images, train_labels, val_images, val_labels, cfg, model, denoiser=None):
    """Fine-tune ``model`` under a baseline regime; returns the best-validation weights."""
    if cfg.regime not in ("setup1_clean", "setup2_degraded", "setup3_restored"):
        raise ValueError(f"{cfg.regime} is not a classifier regime")
    if len(train_images) == 0:
        raise ValueError("empty training set")
    train_labels = np.asarray(train_labels)
    val_clean = eval_stack(val_images, cfg.crop_size)
    if cfg.regime == "setup1_clean":
        val_x = val_clean
    else:
        val_x = mixture_stack(val_clean, cfg.sigmas, cfg.seed + 1)
        if cfg.regime == "setup3_restored":
            val_x = restore_stack(denoiser, val_x)

    def forward_batch(idx, rng):
        model.train()
        x = classifier_inputs(train_images, idx, cfg, rng, denoiser)
        return model(to_model_input(x)), train_labels[idx]

    def val_fn():
        return _epoch_eval(predict_logits(model, val_x, cfg.eval_batch), val_labels,
                           cfg.label_smoothing_eps)

    def snapshot():
        return copy.deepcopy(model.state_dict())

    history, (acc, epoch, state) = _run_loop(model.parameters(), forward_batch, len(train_images),
                                             cfg, val_fn, snapshot, cfg.regime)
    model.load_state_dict(state)
    model.eval()
    return FitResult(model, history, epoch, acc)


# -- calibration -------------------------------------------------------------

def fidelity_batch(restored, clean=None, noisy=None, source="oracle", metric="l1",
                   stats=None, estimator=None):
    """Model-ready fidelity maps (normalized for l1/l2) as an N×1×H×W tensor."""
    if source == "oracle":
        if clean is None:
            raise ValueError("oracle fidelity needs the clean images")
        fmap = fidelity_tensor(torch.as_tensor(restored), torch.as_tensor(clean), metric)
    else:
        if estimator is None:
            raise ValueError(f"{source} fidelity needs an estimator")
        if metric != "l1":
            raise ValueError("the fidelity estimator predicts l1 maps only")
        fmap = estimator(torch.as_tensor(noisy)).clamp(min=0.0)
    if metric == "cosine":
        return fmap
    return normalize_values(fmap, metric, stats or mixture_stats())


def calibration_batch(clean, rng, sigmas, denoiser):
    noisy = _mixture_batch(clean, rng, sigmas)
    return noisy, restore_stack(denoiser, noisy)


@torch.no_grad()
def predict_calibrated(split, calib, restored, fid, batch=128):
    calib.eval()
    img = to_model_input(restored)
    fid = torch.as_tensor(fid)
    return torch.cat([calib(split, img[i:i + batch], fid[i:i + batch]) for i in range(0, len(img), batch)])


def fit_calibration(train_images, train_labels, val_images, val_labels, cfg, split, calib,
                    denoiser, fidelity_source="oracle", estimator=None, stats=None,
                    backbone_sha256=None):
    """Train ``calib`` (and, end-to-end, ``estimator``) on top of a frozen ``split``."""
    if fidelity_source not in ("oracle", "estimator_frozen", "estimator_finetuned"):
        raise ValueError(f"unknown fidelity source {fidelity_source!r}")
    split.freeze()
    before = state_dict_sha256(split.state_dict())
    if backbone_sha256 is not None and before != backbone_sha256:
        raise ValueError("backbone does not match the checkpoint the calibration is bound to")
    stats = stats or mixture_stats(cfg.sigmas)
    train_labels = np.asarray(train_labels)
    source = "oracle" if fidelity_source == "oracle" else "estimator"
    finetune = fidelity_source == "estimator_finetuned"
    if estimator is not None:
        for p in estimator.parameters():
            p.requires_grad_(finetune)

    val_clean = eval_stack(val_images, cfg.crop_size)
    val_noisy = mixture_stack(val_clean, cfg.sigmas, cfg.seed + 1)
    val_restored = restore_stack(denoiser, val_noisy)

    def val_fn():
        if estimator is not None:
            estimator.eval()
        with torch.no_grad():
            fid = fidelity_batch(val_restored, val_clean, val_noisy, source, cfg.fidelity_metric,
                                 stats, estimator)
        return _epoch_eval(predict_calibrated(split, calib, val_restored, fid, cfg.eval_batch),
                           val_labels, cfg.label_smoothing_eps)

    def forward_batch(idx, rng):
        calib.train()
        if estimator is not None:
            estimator.train(finetune)
        clean = _train_geometry_batch(train_images, idx, cfg.crop_size, rng)
        noisy, restored = calibration_batch(clean, rng, cfg.sigmas, denoiser)
        fid = fidelity_batch(restored, clean, noisy, source, cfg.fidelity_metric, stats, estimator)
        return calib(split, to_model_input(restored), fid), train_labels[idx]

    def snapshot():
        snap = {"calib": copy.deepcopy(calib.state_dict())}
        if finetune:
            snap["estimator"] = copy.deepcopy(estimator.state_dict())
        return snap

    params = list(calib.parameters())
    if finetune:
        params += list(estimator.parameters())
    history, (acc, epoch, state) = _run_loop(params, forward_batch, len(train_images), cfg,
                                             val_fn, snapshot, f"calib/{fidelity_source}")
    calib.load_state_dict(state["calib"])
    if finetune:
        estimator.load_state_dict(state["estimator"])
    calib.eval()
    after = state_dict_sha256(split.state_dict())
    if after != before:
        raise RuntimeError("backbone weights changed during calibration training")
    return FitResult(calib, history, epoch, acc, {"backbone_sha256": before, "estimator": estimator})
