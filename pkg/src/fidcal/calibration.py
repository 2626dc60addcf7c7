"""Fidelity-conditioned calibration of a frozen classifier's features.

A :class:`CalibrationNet` never touches backbone weights. It hooks every
insertion point of a :class:`~fidcal.backbones.BackboneSplit` with a spatial
gate/offset computed from the fidelity map, then reweights and re-mixes the
pooled feature vector before the (also frozen) classifier head.
"""

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .io import load_checkpoint, save_checkpoint, state_dict_sha256

MODULES = ("spatial_mult", "spatial_add", "channel_mult", "channel_concat", "residual", "ensemble")
DOWNSAMPLING = ("bilinear", "bicubic", "nearest")


def resize_map(fid, size, mode="bilinear"):
    """Resize an N×1×H×W map to ``size``; identity when sizes already agree."""
    if tuple(fid.shape[-2:]) == tuple(size):
        return fid
    if mode == "nearest":
        return F.interpolate(fid, size=size, mode="nearest")
    return F.interpolate(fid, size=size, mode=mode, align_corners=False, antialias=True)


def channel_feature(fid, channels, mode="bilinear"):
    """Length-``channels`` vector from the flattened map and its transpose.

    Each flattened path (row-major, then transposed) is downsampled to
    ``channels // 2`` samples; the two halves are concatenated.
    """
    if channels % 2:
        raise ValueError(f"channel count must be even, got {channels}")
    if mode not in DOWNSAMPLING:
        raise ValueError(f"unknown downsampling {mode!r}")
    if fid.dim() == 2:
        fid = fid[None, None]
    elif fid.dim() == 3:
        fid = fid[None]
    n, _, h, w = fid.shape
    rows = fid.reshape(n, 1, 1, h * w)
    cols = fid.transpose(-1, -2).reshape(n, 1, 1, h * w)
    half = channels // 2
    v1 = resize_map(rows, (1, half), mode).reshape(n, half)
    v2 = resize_map(cols, (1, half), mode).reshape(n, half)
    return torch.cat([v1, v2], dim=1)


class ConvStack(nn.Module):
    """Conv+ReLU+Conv+ReLU+Conv on a one-channel map."""

    def __init__(self, hidden=64, kernel=3, zero_last=True):
        super().__init__()
        p = kernel // 2
        self.body = nn.Sequential(
            nn.Conv2d(1, hidden, kernel, padding=p), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, kernel, padding=p), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, kernel, padding=p),
        )
        if zero_last:
            nn.init.zeros_(self.body[-1].weight)
            nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return self.body(x)


class FCStack(nn.Module):
    """FC+ReLU+FC."""

    def __init__(self, cin, hidden, cout, zero_last=True):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(cin, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, cout))
        if zero_last:
            nn.init.zeros_(self.body[-1].weight)
            nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return self.body(x)


def gate(pre_activation):
    """``2 * sigmoid``: multiplicative gate in (0, 2), equal to 1 at zero."""
    return 2.0 * torch.sigmoid(pre_activation)


def spatial_multiply(feature, fid, block, mode="bilinear"):
    f = resize_map(fid, feature.shape[-2:], mode)
    g = gate(block(f))
    if g.shape[-2:] != feature.shape[-2:]:
        raise ValueError("gate and feature spatial sizes differ")
    return feature * g


def spatial_add(feature, fid, block, mode="bilinear"):
    f = resize_map(fid, feature.shape[-2:], mode)
    a = block(f)
    if a.shape[-2:] != feature.shape[-2:]:
        raise ValueError("offset and feature spatial sizes differ")
    return feature + a


def _check_lengths(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature lengths differ: {a.shape[-1]} vs {b.shape[-1]}")


def channel_multiply(image_feat, fid_feat, fc_stack):
    _check_lengths(image_feat, fid_feat)
    return image_feat * gate(fc_stack(fid_feat))


def channel_concat(image_feat, fid_feat, fc_stack):
    _check_lengths(image_feat, fid_feat)
    return fc_stack(torch.cat([image_feat, fid_feat], dim=-1))


def ensemble(modified, original, gate_params):
    _check_lengths(modified, original)
    _check_lengths(modified, gate_params)
    alpha = torch.sigmoid(gate_params)
    return alpha * modified + (1.0 - alpha) * original


@dataclass(frozen=True)
class CalibrationConfig:
    site_shapes: tuple  # (C, H, W) per insertion point
    feature_dim: int
    modules: dict = field(default_factory=lambda: {m: True for m in MODULES})
    conv_hidden: int = 64
    fc_hidden: int = None  # defaults to feature_dim
    downsampling: str = "bilinear"

    def __post_init__(self):
        unknown = set(self.modules) - set(MODULES)
        if unknown:
            raise ValueError(f"unknown calibration modules {sorted(unknown)}")
        if self.downsampling not in DOWNSAMPLING:
            raise ValueError(f"unknown downsampling {self.downsampling!r}")
        if self.feature_dim % 2:
            raise ValueError("feature_dim must be even")

    def enabled(self, name):
        return bool(self.modules.get(name, True))


class CalibrationNet(nn.Module):
    """Trainable fidelity-conditioned modules for one backbone split.

    With the residual mechanism on, each spatial site computes
    ``y = x + s * ((x * gate(fid) + offset(fid)) - x)`` with a learnable scalar
    ``s`` and the channel path returns ``v + t * concat(v, phi)``. Every branch
    output layer starts at zero and ``s = t = 1``, so the network is an exact
    identity at init while every parameter still receives gradient. With it
    off, sites return the gated/offset feature directly and the concatenation
    branch (default init) replaces the feature.
    """

    def __init__(self, cfg: CalibrationConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.enabled("residual")
        n_sites = len(cfg.site_shapes)
        self.mult = nn.ModuleList(
            [ConvStack(cfg.conv_hidden) for _ in range(n_sites)]
        ) if cfg.enabled("spatial_mult") else None
        self.add = nn.ModuleList(
            [ConvStack(cfg.conv_hidden) for _ in range(n_sites)]
        ) if cfg.enabled("spatial_add") else None
        spatial = self.mult is not None or self.add is not None
        self.site_scale = nn.Parameter(torch.ones(n_sites)) if res and spatial else None

        c = cfg.feature_dim
        hidden = cfg.fc_hidden or c
        self.ch_mult = FCStack(c, hidden, c) if cfg.enabled("channel_mult") else None
        self.ch_concat = FCStack(2 * c, hidden, c, zero_last=res) if cfg.enabled("channel_concat") else None
        self.concat_scale = nn.Parameter(torch.ones(1)) if res and self.ch_concat is not None else None
        self.ens = nn.Parameter(torch.zeros(c)) if cfg.enabled("ensemble") else None

    def site(self, k, x, fid):
        if self.mult is None and self.add is None:
            return x
        mode = "bilinear"
        y = spatial_multiply(x, fid, self.mult[k], mode) if self.mult is not None else x
        if self.add is not None:
            y = spatial_add(y, fid, self.add[k], mode)
        if self.site_scale is not None:
            return x + self.site_scale[k] * (y - x)
        return y

    def calibrate_feature(self, v, fid):
        if self.ch_mult is None and self.ch_concat is None:
            return v
        phi = channel_feature(fid, self.cfg.feature_dim, self.cfg.downsampling)
        if self.ch_mult is not None:
            v = channel_multiply(v, phi, self.ch_mult)
        if self.ch_concat is not None:
            z = channel_concat(v, phi, self.ch_concat)
            v = v + self.concat_scale * z if self.concat_scale is not None else z
        return v

    def features(self, split, img, fid, original=None):
        v = split.features(img, hook=lambda k, x: self.site(k, x, fid))
        v = self.calibrate_feature(v, fid)
        if self.ens is not None:
            if original is None:
                with torch.no_grad():
                    original = split.features(img)
            v = ensemble(v, original, self.ens)
        return v

    def forward(self, split, img, fid, original=None):
        """Logits for normalized restored images ``img`` and fidelity maps ``fid``."""
        return split.head(self.features(split, img, fid, original))


def build_calibration(split, input_shape, modules=None, conv_hidden=64, fc_hidden=None,
                      downsampling="bilinear", seed=0):
    mods = {m: True for m in MODULES}
    mods.update(modules or {})
    cfg = CalibrationConfig(tuple(split.site_shapes(input_shape)), split.feature_dim, mods,
                            conv_hidden, fc_hidden, downsampling)
    torch.manual_seed(seed)
    return CalibrationNet(cfg)


def trainable_blocks(net):
    """Named parameter groups, one per trainable block (for checks and logging)."""
    blocks = {}
    for name in ("mult", "add"):
        stacks = getattr(net, name)
        if stacks is not None:
            for k, s in enumerate(stacks):
                blocks[f"spatial_{name}[{k}]"] = list(s.parameters())
    for name, attr in (("channel_mult", "ch_mult"), ("channel_concat", "ch_concat")):
        mod = getattr(net, attr)
        if mod is not None:
            blocks[name] = list(mod.parameters())
    for name, attr in (("site_scale", "site_scale"), ("concat_scale", "concat_scale"), ("ensemble", "ens")):
        p = getattr(net, attr)
        if p is not None:
            blocks[name] = [p]
    return blocks


def save_calibration(path, net, split, **meta):
    cfg = asdict(net.cfg)
    save_checkpoint(path, "calibration", cfg, net.state_dict(),
                    backbone_sha256=state_dict_sha256(split.state_dict()), **meta)


def load_calibration(path, split):
    ckpt = load_checkpoint(path, kind="calibration")
    want = ckpt["meta"]["backbone_sha256"]
    have = state_dict_sha256(split.state_dict())
    if want != have:
        raise ValueError(f"{path}: calibration was trained against backbone {want[:12]}, "
                         f"got {have[:12]}")
    cfg = ckpt["config"]
    cfg["site_shapes"] = tuple(tuple(s) for s in cfg["site_shapes"])
    net = CalibrationNet(CalibrationConfig(**cfg))
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net, ckpt
