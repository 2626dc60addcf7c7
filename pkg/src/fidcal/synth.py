"""Procedural desk corpus: colored shapes on smooth backgrounds, one folder per class."""

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("circle", "square", "triangle", "plus", "ring", "star", "hbars", "vbars", "diamond", "xcross")
SUPERSAMPLE = 4


def _rotate(points, angle, cx, cy):
    c, s = math.cos(angle), math.sin(angle)
    return [(cx + (x - cx) * c - (y - cy) * s, cy + (x - cx) * s + (y - cy) * c) for x, y in points]


def _rect(cx, cy, hw, hh):
    return [(cx - hw, cy - hh), (cx + hw, cy - hh), (cx + hw, cy + hh), (cx - hw, cy + hh)]


def _shape_polygons(shape, cx, cy, r, rng):
    """Polygons to fill for ``shape``; ring returns (outer, inner) ellipses separately."""
    jitter = rng.uniform(-0.2, 0.2)
    if shape == "square":
        return [_rotate(_rect(cx, cy, 0.8 * r, 0.8 * r), jitter, cx, cy)]
    if shape == "diamond":
        return [_rotate(_rect(cx, cy, 0.8 * r, 0.8 * r), math.pi / 4 + jitter, cx, cy)]
    if shape == "triangle":
        a0 = rng.uniform(0, 2 * math.pi)
        return [[(cx + r * math.cos(a0 + k * 2 * math.pi / 3), cy + r * math.sin(a0 + k * 2 * math.pi / 3))
                 for k in range(3)]]
    if shape == "star":
        a0 = rng.uniform(0, 2 * math.pi)
        pts = []
        for k in range(10):
            rr = r if k % 2 == 0 else 0.42 * r
            a = a0 + k * math.pi / 5
            pts.append((cx + rr * math.cos(a), cy + rr * math.sin(a)))
        return [pts]
    if shape in ("plus", "xcross"):
        base = jitter + (math.pi / 4 if shape == "xcross" else 0.0)
        t = 0.28 * r
        return [_rotate(_rect(cx, cy, r, t), base, cx, cy), _rotate(_rect(cx, cy, t, r), base, cx, cy)]
    if shape in ("hbars", "vbars"):
        polys = []
        for k in (-1, 0, 1):
            off = k * 0.62 * r
            if shape == "hbars":
                polys.append(_rotate(_rect(cx, cy + off, r, 0.17 * r), jitter / 2, cx, cy))
            else:
                polys.append(_rotate(_rect(cx + off, cy, 0.17 * r, r), jitter / 2, cx, cy))
        return polys
    raise ValueError(shape)


def _background(h, w, rng):
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    angle = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    t = np.clip(0.5 + (xx - 0.5) * math.cos(angle) + (yy - 0.5) * math.sin(angle), 0, 1)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def render(shape, h, w, rng):
    """One ``3×h×w`` float image in [0, 1]."""
    bg = _background(h, w, rng)
    mean_bg = bg.mean(axis=(1, 2))
    while True:
        color = rng.uniform(0, 1, 3)
        if np.abs(color - mean_bg).max() > 0.35:
            break
    S = SUPERSAMPLE
    side = min(h, w)
    r = rng.uniform(0.26, 0.40) * side
    cx = w / 2 + rng.uniform(-0.12, 0.12) * side
    cy = h / 2 + rng.uniform(-0.12, 0.12) * side
    mask = Image.new("L", (w * S, h * S), 0)
    draw = ImageDraw.Draw(mask)
    if shape in ("circle", "ring"):
        draw.ellipse([(cx - r) * S, (cy - r) * S, (cx + r) * S, (cy + r) * S], fill=255)
        if shape == "ring":
            ri = 0.55 * r
            draw.ellipse([(cx - ri) * S, (cy - ri) * S, (cx + ri) * S, (cy + ri) * S], fill=0)
    else:
        for poly in _shape_polygons(shape, cx, cy, r, rng):
            draw.polygon([(x * S, y * S) for x, y in poly], fill=255)
    alpha = np.asarray(mask.resize((w, h), Image.BOX), dtype=np.float64) / 255.0
    img = bg * (1 - alpha) + color[:, None, None] * alpha
    return np.clip(img, 0, 1).astype(np.float32)


def make_desk_corpus(root, per_class=100, classes=SHAPES, seed=0, size_range=(36, 56)):
    """Write ``root/<class>/<class>_NNNN.png``; returns the class names."""
    root = Path(root)
    for cid, shape in enumerate(classes):
        rng = np.random.default_rng([seed, cid, 1])
        d = root / shape
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            h = int(rng.integers(size_range[0], size_range[1] + 1))
            w = int(rng.integers(size_range[0], size_range[1] + 1))
            img = render(shape, h, w, rng)
            u8 = np.rint(img.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(u8).save(d / f"{shape}_{i:04d}.png", format="PNG")
    return list(classes)
