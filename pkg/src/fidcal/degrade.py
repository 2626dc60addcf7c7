"""Synthetic degradations: AWGN (uniform or spatially varying), blurs,
salt-and-pepper noise and square occlusion.

Every operator maps a ``[0, 1]`` C×H×W image to a ``[0, 1]`` image of the same
shape and is a pure function of its inputs, seed included.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .imaging import check_image

KINDS = ("awgn", "gaussian_blur", "motion_blur", "salt_pepper", "rect_crop")
VARIATIONS = ("uniform", "varying_1d", "varying_2d")
MIXTURE_SIGMAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
GAUSS_KERNEL_SIZE = 13


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "awgn"
    level: float = 0.0
    variation: str = "uniform"
    level_hi: float = 0.5
    level_lo: float = 0.0
    seed: int = 0
    anchor: str = "anchor-low"
    axis: str = None  # "rows" | "cols" | None (random per image)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.variation not in VARIATIONS:
            raise ValueError(f"unknown variation {self.variation!r}")
        if self.variation != "uniform" and self.kind != "awgn":
            raise ValueError("spatial variation is only defined for awgn")
        if self.level < 0 or self.level_hi < 0 or self.level_lo < 0:
            raise ValueError("degradation levels must be non-negative")
        if self.kind in ("salt_pepper", "rect_crop") and self.level > 1:
            raise ValueError(f"{self.kind} level must lie in [0, 1]")
        if self.anchor not in ("anchor-low", "anchor-high"):
            raise ValueError(f"unknown anchor mode {self.anchor!r}")
        if self.axis not in (None, "rows", "cols"):
            raise ValueError(f"unknown axis {self.axis!r}")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return DegradationSpec(**d)

    def label(self):
        if self.variation == "varying_1d":
            return "1D"
        if self.variation == "varying_2d":
            return "2D"
        if self.kind == "awgn":
            return "clean" if self.level == 0 else f"{self.level:g}"
        return f"{self.kind}:{self.level:g}"


def image_rng(seed, index=0):
    """Independent stream per image, derived from (global seed, image index)."""
    return np.random.default_rng([int(seed), int(index)])


def sigma_field(spec, h, w, rng=None):
    """Per-pixel noise standard deviation for ``spec`` on an h×w grid."""
    if h < 1 or w < 1:
        raise ValueError(f"sigma field needs h, w >= 1, got {h}x{w}")
    if spec.variation == "uniform":
        return np.full((h, w), spec.level, dtype=np.float32)
    rng = image_rng(spec.seed) if rng is None else rng
    hi, lo = spec.level_hi, spec.level_lo
    if spec.variation == "varying_1d":
        axis = spec.axis or ("rows" if rng.random() < 0.5 else "cols")
        if axis == "cols":
            ramp = np.linspace(hi, lo, w, dtype=np.float64)
            return np.broadcast_to(ramp[None, :], (h, w)).astype(np.float32)
        ramp = np.linspace(hi, lo, h, dtype=np.float64)
        return np.broadcast_to(ramp[:, None], (h, w)).astype(np.float32)
    ai, aj = int(rng.integers(0, h)), int(rng.integers(0, w))
    ii, jj = np.mgrid[0:h, 0:w]
    dist = np.hypot(ii - ai, jj - aj)
    dmax = dist.max()
    t = dist / dmax if dmax > 0 else np.zeros_like(dist)
    near, far = (lo, hi) if spec.anchor == "anchor-low" else (hi, lo)
    return (near + (far - near) * t).astype(np.float32)


def awgn_noise(spec, shape, rng=None):
    """The pre-clip noise draw ``awgn`` adds; returns ``(noise, sigma_field)``."""
    if spec.kind != "awgn":
        raise ValueError(f"awgn called with kind {spec.kind!r}")
    rng = image_rng(spec.seed) if rng is None else rng
    field = sigma_field(spec, shape[1], shape[2], rng)
    return rng.standard_normal(shape).astype(np.float32) * field[None], field


def awgn(img, spec, rng=None):
    """Add channel-independent Gaussian noise; returns ``(noisy, sigma_field)``."""
    img = check_image(img, channels=None)
    noise, field = awgn_noise(spec, img.shape, rng)
    return np.clip(img + noise, 0.0, 1.0), field


def gaussian_kernel(sigma, size=GAUSS_KERNEL_SIZE):
    if sigma < 0:
        raise ValueError("blur sigma must be non-negative")
    k = np.zeros((size, size), dtype=np.float64)
    c = size // 2
    if sigma < 1e-8:
        k[c, c] = 1.0
        return k
    x = np.arange(size) - c
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def motion_kernel(length, angle_deg=45.0):
    """Anti-aliased line kernel of ``length`` taps at ``angle_deg``, sums to 1."""
    if length < 1:
        raise ValueError("motion blur length must be >= 1")
    half = (length - 1) / 2.0
    dx, dy = math.cos(math.radians(angle_deg)), -math.sin(math.radians(angle_deg))
    r = int(math.ceil(half * max(abs(dx), abs(dy)))) + 1
    size = 2 * r + 1
    k = np.zeros((size, size), dtype=np.float64)
    n = max(1, 16 * int(length))
    ts = np.linspace(-half, half, n) if length > 1 else np.zeros(1)
    for t in ts:
        x, y = r + t * dx, r + t * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        k[y0, x0] += (1 - fx) * (1 - fy)
        k[y0, x0 + 1] += fx * (1 - fy)
        k[y0 + 1, x0] += (1 - fx) * fy
        k[y0 + 1, x0 + 1] += fx * fy
    return k / k.sum()


def _filter(img, kernel):
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.correlate(img[c].astype(np.float64), kernel, mode="mirror")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur(img, sigma):
    img = check_image(img, channels=None)
    return _filter(img, gaussian_kernel(sigma))


def motion_blur(img, length):
    img = check_image(img, channels=None)
    if int(length) != length:
        raise ValueError("motion blur length must be an integer")
    return _filter(img, motion_kernel(int(length)))


def salt_pepper(img, p, seed=0, rng=None):
    if not 0 <= p <= 1:
        raise ValueError("salt-and-pepper probability must lie in [0, 1]")
    img = check_image(img, channels=None)
    rng = image_rng(seed) if rng is None else rng
    hit = rng.random(img.shape) < p
    white = rng.random(img.shape) < 0.5
    return np.where(hit, white.astype(np.float32), img)


def rect_crop(img, ratio, seed=0, rng=None):
    """Black out a square of side ``round(ratio * min(H, W))`` at a random spot."""
    if not 0 <= ratio <= 1:
        raise ValueError("rect_crop ratio must lie in [0, 1]")
    img = check_image(img, channels=None)
    rng = image_rng(seed) if rng is None else rng
    h, w = img.shape[1:]
    side = int(round(ratio * min(h, w)))
    out = img.copy()
    if side == 0:
        return out
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out[:, top:top + side, left:left + side] = 0.0
    return out


def apply(img, spec, index=0):
    """Apply ``spec`` to one image, using the stream for ``(spec.seed, index)``."""
    rng = image_rng(spec.seed, index)
    if spec.kind == "awgn":
        return awgn(img, spec, rng)[0]
    if spec.kind == "gaussian_blur":
        return gaussian_blur(img, spec.level)
    if spec.kind == "motion_blur":
        return motion_blur(img, int(round(spec.level)))
    if spec.kind == "salt_pepper":
        return salt_pepper(img, spec.level, rng=rng)
    return rect_crop(img, spec.level, rng=rng)


def sample_mixture_sigma(rng, sigmas=MIXTURE_SIGMAS):
    return float(sigmas[int(rng.integers(0, len(sigmas)))])


def mixture_awgn(img, rng, sigmas=MIXTURE_SIGMAS):
    """Uniform AWGN at a level drawn per image from ``sigmas``; returns ``(noisy, sigma)``."""
    sigma = sample_mixture_sigma(rng, sigmas)
    noisy, _ = awgn(img, DegradationSpec("awgn", sigma), rng)
    return noisy, sigma


class Degrader(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one degradation to a batch of images.

    Image ``i`` of a batch draws its randomness from ``(seed, offset + i)`` so a
    corpus degrades identically regardless of how it is chunked.
    """

    def __init__(self, kind="awgn", level=0.0, variation="uniform", level_hi=0.5,
                 level_lo=0.0, anchor="anchor-low", seed=0, offset=0):
        self.kind = kind
        self.level = level
        self.variation = variation
        self.level_hi = level_hi
        self.level_lo = level_lo
        self.anchor = anchor
        self.seed = seed
        self.offset = offset

    def spec(self):
        return DegradationSpec(self.kind, self.level, self.variation, self.level_hi,
                               self.level_lo, self.seed, self.anchor)

    def fit(self, X=None, y=None):
        self.spec_ = self.spec()
        return self

    def transform(self, X):
        spec = self.spec()
        out = [apply(x, spec, self.offset + i) for i, x in enumerate(X)]
        return np.stack(out) if len({o.shape for o in out}) == 1 else out
