"""Weak/strong augmentation with invertible spatial records.

Spatial transforms are described by :class:`AffineRecord` (horizontal flip,
then rotation, then isotropic scaling about the image center). They are
applied with :func:`apply_affine` and undone on predictions with
:func:`invert_affine`. Intensity ("general") transforms never move pixels and
are not recorded.

Rotation angles are in degrees; a positive quarter turn matches
``torch.rot90(x, 1, dims=(-2, -1))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import SoftPrediction

VALID_THRESHOLD = 0.999


@dataclass(frozen=True)
class AffineRecord:
    rotation_deg: float = 0.0
    scale: float = 1.0
    hflip: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @property
    def is_identity(self) -> bool:
        return self.quarter_turns == 0 and self.scale == 1.0 and not self.hflip

    @property
    def quarter_turns(self) -> int | None:
        """Number of quarter turns if the rotation is an exact multiple of 90 degrees."""
        q = self.rotation_deg / 90.0
        if q == round(q):
            return int(round(q)) % 4
        return None

    def compose(self, first: "AffineRecord") -> "AffineRecord":
        """Record equivalent to applying ``first`` and then ``self``."""
        sign = -1.0 if self.hflip else 1.0
        return AffineRecord(
            rotation_deg=_wrap(self.rotation_deg + sign * first.rotation_deg),
            scale=self.scale * first.scale,
            hflip=self.hflip != first.hflip,
        )

    def inverse(self) -> "AffineRecord":
        rot = self.rotation_deg if self.hflip else -self.rotation_deg
        return AffineRecord(_wrap(rot), 1.0 / self.scale, self.hflip)

    def matrix(self) -> np.ndarray:
        """2x2 forward map on centered (x, y) pixel coordinates, y pointing down."""
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        rot = np.array([[c, s], [-s, c]])
        flip = np.diag([-1.0 if self.hflip else 1.0, 1.0])
        return self.scale * rot @ flip


IDENTITY = AffineRecord()


def _wrap(deg: float) -> float:
    out = math.fmod(deg, 360.0)
    return out + 360.0 if out < 0 else out


def _as_batch(x) -> tuple[torch.Tensor, int]:
    x = torch.as_tensor(x)
    squeeze = 0
    while x.dim() < 4:
        x = x.unsqueeze(0)
        squeeze += 1
    return x, squeeze


def _unbatch(x: torch.Tensor, squeeze: int) -> torch.Tensor:
    for _ in range(squeeze):
        x = x.squeeze(0)
    return x


def _exact_warp(x: torch.Tensor, record: AffineRecord) -> torch.Tensor:
    if record.hflip:
        x = torch.flip(x, dims=[-1])
    k = record.quarter_turns
    if k:
        x = torch.rot90(x, k, dims=(-2, -1))
    return x


def _is_exact(record: AffineRecord, h: int, w: int) -> bool:
    k = record.quarter_turns
    return record.scale == 1.0 and k is not None and (k % 2 == 0 or h == w)


def _sampling_grid(record: AffineRecord, n: int, h: int, w: int, dtype) -> torch.Tensor:
    # output pixel q samples input at T^-1 q; affine_grid works in normalized coords
    inv = np.linalg.inv(record.matrix())
    d = np.diag([w / 2.0, h / 2.0])
    theta = np.zeros((2, 3))
    theta[:, :2] = np.linalg.inv(d) @ inv @ d
    theta_t = torch.as_tensor(theta, dtype=dtype).unsqueeze(0).expand(n, 2, 3)
    return F.affine_grid(theta_t, [n, 1, h, w], align_corners=False)


def warp(x, record: AffineRecord, mode: str = "bilinear") -> torch.Tensor:
    """Resample ``x`` (``(..., H, W)``) through ``record``; outside pixels become 0."""
    x, squeeze = _as_batch(x)
    h, w = x.shape[-2:]
    if _is_exact(record, h, w):
        return _unbatch(_exact_warp(x, record), squeeze)
    orig_dtype = x.dtype
    xf = x if x.is_floating_point() else x.to(torch.float32)
    grid = _sampling_grid(record, xf.shape[0], h, w, xf.dtype)
    out = F.grid_sample(xf, grid, mode=mode, padding_mode="zeros", align_corners=False)
    if not orig_dtype.is_floating_point:
        out = out.round().to(orig_dtype)
    return _unbatch(out, squeeze)


def canvas_validity(record: AffineRecord, h: int, w: int) -> torch.Tensor:
    """Boolean ``(H, W)`` map of output pixels fully supported by the input canvas."""
    if _is_exact(record, h, w):
        return torch.ones(h, w, dtype=torch.bool)
    ones = torch.ones(1, 1, h, w, dtype=torch.float64)
    return warp(ones, record)[0, 0] >= VALID_THRESHOLD


def apply_affine(image, record: AffineRecord, mask=None):
    """Apply ``record`` to an image (bilinear) and optional mask (nearest).

    Returns ``(image', mask', validity)``. Padding is 0 for images and
    background for masks.
    """
    image = torch.as_tensor(image)
    out = warp(image, record, "bilinear")
    out_mask = None
    if mask is not None:
        out_mask = warp(torch.as_tensor(mask), record, "nearest")
    return out, out_mask, canvas_validity(record, *image.shape[-2:])


def invert_affine(prediction: SoftPrediction, record: AffineRecord) -> SoftPrediction:
    """Resample ``prediction`` through the inverse of ``record``.

    Probabilities are interpolated bilinearly and renormalized per pixel;
    pixels that map outside the canvas, or onto invalid source pixels, are
    marked invalid and set to the uniform distribution.
    """
    inv = record.inverse()
    probs = prediction.probs
    n, k, h, w = probs.shape
    if _is_exact(inv, h, w):
        return SoftPrediction(_exact_warp(probs, inv), _exact_warp(prediction.validity, inv))
    out = warp(probs, inv, "bilinear")
    valid_src = prediction.validity.to(probs.dtype).unsqueeze(1)
    valid = warp(valid_src, inv, "bilinear")[:, 0] >= VALID_THRESHOLD
    total = out.sum(dim=1, keepdim=True)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    out = out / safe
    uniform = torch.full_like(out, 1.0 / k)
    out = torch.where(valid.unsqueeze(1), out, uniform)
    return SoftPrediction(out, valid)


# -- weak policy -------------------------------------------------------------


@dataclass(frozen=True)
class WeakPolicy:
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range: tuple[float, float] = (-15.0, 15.0)
    flip_prob: float = 0.5

    def sample(self, rng: np.random.Generator) -> AffineRecord:
        scale = float(rng.uniform(*self.scale_range))
        rot = float(rng.uniform(*self.rot_range))
        flip = bool(rng.random() < self.flip_prob)
        return AffineRecord(_wrap(rot), scale, flip)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def weak_augment(image, mask=None, seed=None, policy: WeakPolicy = WeakPolicy()):
    """Random small scale/rotation/flip applied to image and mask alike.

    Returns ``(image', mask', record)``; output size equals input size.
    """
    record = policy.sample(_rng(seed))
    out, out_mask, _ = apply_affine(image, record, mask)
    return out, out_mask, record


# -- strong policy: general (intensity) transforms on [0, 1] images ---------


def _level(magnitude: int) -> float:
    return magnitude / MAX_MAGNITUDE


def _signed_factor(magnitude, rng):
    # enhancement factor in [0.1, 1.9], 1 is identity
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return 1.0 + sign * 0.9 * _level(magnitude)


def auto_contrast(img, magnitude, rng):
    lo = img.amin(dim=(-2, -1), keepdim=True)
    hi = img.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    stretched = (img - lo) / torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, stretched, img)


def invert(img, magnitude, rng):
    return 1.0 - img


def equalize(img, magnitude, rng):
    """Histogram equalization over 256 levels per channel."""
    out = img.clone()
    levels = (img.clamp(0, 1) * 255).round().long()
    for c in range(img.shape[0]):
        lv = levels[c].flatten()
        hist = torch.bincount(lv, minlength=256)
        nz = hist[hist > 0]
        if nz.numel() <= 1:
            continue
        # PIL semantics: step excludes the largest bin
        step = (nz.sum() - nz[-1]) // 255
        if step == 0:
            continue
        lut = (torch.cumsum(hist, 0) - hist + step // 2) // step
        lut = lut.clamp(0, 255)
        out[c] = (lut[levels[c]].to(img.dtype)) / 255.0
    return out


def solarize(img, magnitude, rng):
    threshold = 1.0 - _level(magnitude)
    return torch.where(img >= threshold, 1.0 - img, img)


def contrast(img, magnitude, rng):
    f = _signed_factor(magnitude, rng)
    mean = img.mean(dim=(-2, -1), keepdim=True)
    return (mean + f * (img - mean)).clamp(0, 1)


def color(img, magnitude, rng):
    f = _signed_factor(magnitude, rng)
    if img.shape[0] != 3:
        return img
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype).view(3, 1, 1)
    gray = (img * weights).sum(dim=0, keepdim=True)
    return (gray + f * (img - gray)).clamp(0, 1)


def brightness(img, magnitude, rng):
    return (_signed_factor(magnitude, rng) * img).clamp(0, 1)


_SMOOTH = torch.tensor([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0


def sharpness(img, magnitude, rng):
    f = _signed_factor(magnitude, rng)
    c = img.shape[0]
    kernel = _SMOOTH.to(img.dtype).expand(c, 1, 3, 3)
    blurred = F.conv2d(img.unsqueeze(0), kernel, groups=c)[0]
    # borders stay untouched, as in PIL
    smooth = img.clone()
    smooth[:, 1:-1, 1:-1] = blurred
    return (smooth + f * (img - smooth)).clamp(0, 1)


ROTATE = "Rotate"
GENERAL_TRANSFORMS: dict[str, Callable] = {
    "AutoContrast": auto_contrast,
    "Invert": invert,
    "Equalize": equalize,
    "Solarize": solarize,
    "Contrast": contrast,
    "Color": color,
    "Brightness": brightness,
    "Sharpness": sharpness,
}
OP_POOL: tuple[str, ...] = (ROTATE,) + tuple(GENERAL_TRANSFORMS)
MAX_MAGNITUDE = 30


@dataclass(frozen=True)
class StrongPolicy:
    n_ops: int = 2
    magnitude: int = 15
    op_pool: tuple[str, ...] = field(default=OP_POOL)

    def __post_init__(self):
        if self.n_ops < 1:
            raise ValueError("n_ops must be >= 1")
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise ValueError(f"magnitude must be in [0, {MAX_MAGNITUDE}]")
        unknown = set(self.op_pool) - set(OP_POOL)
        if unknown or not self.op_pool:
            raise ValueError(f"unknown transforms {sorted(unknown)}")

    def sample(self, rng: np.random.Generator) -> list[str]:
        """Draw ``n_ops`` transforms uniformly (with replacement) from the pool."""
        idx = rng.integers(0, len(self.op_pool), size=self.n_ops)
        return [self.op_pool[i] for i in idx]


def sample_strong(image, policy: StrongPolicy = StrongPolicy(), seed=None, ops: Sequence[str] | None = None):
    """Apply the sampled general transforms and return the pending rotation.

    Returns ``(image', record)`` where ``image'`` has not been rotated yet, so
    callers can compose ``record`` with further spatial transforms and warp once.
    """
    rng = _rng(seed)
    img = torch.as_tensor(image)
    if img.dim() == 2:
        img = img.unsqueeze(0)
    ops = list(policy.sample(rng) if ops is None else ops)
    rotation = 0.0
    for name in ops:
        if name == ROTATE:
            rotation += float(rng.uniform(0.0, 360.0))
        else:
            img = GENERAL_TRANSFORMS[name](img, policy.magnitude, rng)
    return img, AffineRecord(_wrap(rotation))


def strong_augment(image, policy: StrongPolicy = StrongPolicy(), seed=None, ops: Sequence[str] | None = None):
    """Apply sampled general transforms, then the sampled rotation.

    Returns ``(image', record)``. ``ops`` overrides sampling; a sampled
    rotation draws its angle uniformly from [0, 360).
    """
    img, record = sample_strong(image, policy, seed, ops)
    if not record.is_identity:
        img = warp(img, record)
    return img, record
