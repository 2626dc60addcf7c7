"""Classifier backbones, and the helper that splits one into feature extractor + head."""

import warnings

import torch
import torch.nn as nn

from .io import load_checkpoint, save_checkpoint

POOLING = (nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)


def _conv_block(cin, cout):
    return [
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    ]


class DeskNet(nn.Module):
    """Compact VGG-style classifier: three conv blocks, two max-pools and a global average pool."""

    def __init__(self, num_classes, widths=(16, 32, 64)):
        super().__init__()
        a, b, c = widths
        self.features = nn.Sequential(
            *_conv_block(3, a), nn.MaxPool2d(2),
            *_conv_block(a, b), nn.MaxPool2d(2),
            *_conv_block(b, c), nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(c, num_classes)
        reset_head(self.fc)

    def forward(self, x):
        return self.fc(torch.flatten(self.features(x), 1))


def reset_head(linear):
    nn.init.xavier_uniform_(linear.weight)
    nn.init.zeros_(linear.bias)


def build_backbone(arch, num_classes, **kw):
    if arch == "desk":
        return DeskNet(num_classes, **kw)
    if arch == "resnet50":
        from torchvision.models import resnet50
        model = resnet50(weights=kw.pop("weights", None))
        model.fc = nn.Linear(model.fc.in_features, num_classes)
        reset_head(model.fc)
        return model
    raise ValueError(f"unknown backbone {arch!r}")


def _flatten_layers(module):
    """Forward-ordered leaves, expanding ``nn.Sequential`` containers only."""
    out = []
    for name, child in module.named_children():
        if isinstance(child, nn.Sequential):
            out += [(f"{name}.{n}", m) for n, m in _flatten_layers(child)]
        else:
            out.append((name, child))
    return out


class BackboneSplit(nn.Module):
    """A classifier as ``stages`` (feature extractor) followed by ``head``.

    Insertion point ``k`` is the input of ``stages[k]``: site 0 is the image,
    later sites sit right before each pooling layer.
    """

    def __init__(self, stages, head, site_names):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.head = head
        self.site_names = list(site_names)
        self.feature_dim = head.in_features

    @property
    def insertion_points(self):
        return self.site_names

    def features(self, x, hook=None):
        for k, stage in enumerate(self.stages):
            if hook is not None:
                x = hook(k, x)
            x = stage(x)
        return torch.flatten(x, 1)

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def site_shapes(self, input_shape):
        """``(C, H, W)`` seen at each insertion point for a given input shape."""
        shapes = []
        self.features(torch.zeros(1, *input_shape, dtype=next(self.parameters()).dtype),
                      hook=lambda k, x: shapes.append(tuple(x.shape[1:])) or x)
        return shapes

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode=True):
        # frozen backbones keep normalization statistics fixed
        if any(p.requires_grad for p in self.parameters()):
            return super().train(mode)
        return super().train(False)


def split_backbone(model):
    """Decompose a sequentially-structured classifier into a :class:`BackboneSplit`.

    The last ``nn.Linear`` is the head; everything before it (then flattened)
    is the feature extractor. Works for :class:`DeskNet` and torchvision ResNets.
    """
    layers = _flatten_layers(model)
    head_idx = max((i for i, (_, m) in enumerate(layers) if isinstance(m, nn.Linear)), default=None)
    if head_idx is None:
        raise ValueError("classifier has no final fully-connected layer")
    trailing = [m for _, m in layers[head_idx + 1:] if not isinstance(m, (nn.Identity, nn.Dropout))]
    if trailing:
        raise ValueError("layers after the final fully-connected layer are not supported")
    body = layers[:head_idx]
    cuts = [0] + [i for i, (_, m) in enumerate(body) if isinstance(m, POOLING) and i > 0]
    if len(cuts) == 1:
        warnings.warn("no pooling layers found; only the input insertion point is available")
    names = ["input"] + [f"before:{body[i][0]}" for i in cuts[1:]]
    bounds = cuts + [len(body)]
    stages = [nn.Sequential(*[m for _, m in body[a:b]]) for a, b in zip(bounds[:-1], bounds[1:])]
    return BackboneSplit(stages, layers[head_idx][1], names)


def save_classifier(path, model, arch, num_classes, **meta):
    save_checkpoint(path, "classifier", {"arch": arch, "num_classes": num_classes},
                    model.state_dict(), **meta)


def load_classifier(path):
    ckpt = load_checkpoint(path, kind="classifier")
    model = build_backbone(ckpt["config"]["arch"], ckpt["config"]["num_classes"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
