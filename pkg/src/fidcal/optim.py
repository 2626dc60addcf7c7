"""Learning-rate schedule, label-smoothed loss and optimizer construction."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LRSchedule:
    """Linear per-step warmup followed by cosine decay to zero."""

    total_steps: int
    warmup_steps: int
    lr_init: float

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"bad schedule lengths {self.warmup_steps}/{self.total_steps}")

    @classmethod
    def from_epochs(cls, lr_init, epochs, warmup_epochs, steps_per_epoch):
        return cls(epochs * steps_per_epoch, min(epochs, warmup_epochs) * steps_per_epoch, lr_init)


def lr_at(schedule, step):
    if not 0 <= step < schedule.total_steps:
        raise IndexError(f"step {step} outside [0, {schedule.total_steps})")
    w = schedule.warmup_steps
    if step < w:
        return schedule.lr_init * (step + 1) / w
    span = schedule.total_steps - w
    progress = (step - w) / span
    return schedule.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def smoothed_loss(logits, target, eps=0.1, num_classes=None):
    """Cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    k = logits.shape[-1] if num_classes is None else num_classes
    if k < 2:
        raise ValueError("label smoothing needs at least two classes")
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= k):
        raise ValueError(f"class ids must lie in [0, {k})")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(dim=-1)
    return ((1.0 - eps) * nll + eps * uniform).mean()


def make_optimizer(params, name, lr, momentum=0.9, weight_decay=0.0):
    params = [p for p in params if p.requires_grad]
    if name == "nag":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, nesterov=True,
                               weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
