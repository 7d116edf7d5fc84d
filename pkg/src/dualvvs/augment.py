"""Contrastive view generation and relative-position (quadrant) samples.

All randomness comes from an explicit ``numpy.random.Generator``; parameters
are drawn per image in a fixed order and then applied to the whole batch with
torch, so the batched and single-image paths give identical results.

Quadrant indices follow the grid ``idx = 2 * row + col``::

    0 | 1
    --+--
    2 | 3
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

DIRECTIONS = (
    "left", "right", "upper", "lower",
    "upper-left", "upper-right", "lower-left", "lower-right",
)
# (d_row, d_col) sign pair of block b relative to block a -> label
_DIRECTION_OF = {
    (0, -1): 0, (0, 1): 1, (-1, 0): 2, (1, 0): 3,
    (-1, -1): 4, (-1, 1): 5, (1, -1): 6, (1, 1): 7,
}
ORDERED_PAIRS = tuple((a, b) for a in range(4) for b in range(4) if a != b)

_LUMA = (0.299, 0.587, 0.114)


@dataclass
class AugmentPolicy:
    """SimCLR-style augmentation settings (defaults follow the SimCLR recipe)."""

    crop_scale_range: tuple = (0.2, 1.0)
    crop_ratio_range: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    color_jitter_strengths: tuple = (0.4, 0.4, 0.4, 0.1)
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    output_size: int = 32

    def __post_init__(self):
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        self.crop_ratio_range = tuple(float(v) for v in self.crop_ratio_range)
        self.color_jitter_strengths = tuple(float(v) for v in self.color_jitter_strengths)
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        rlo, rhi = self.crop_ratio_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad crop_ratio_range {self.crop_ratio_range}")
        for name in ("flip_prob", "color_jitter_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if len(self.color_jitter_strengths) != 4 or min(self.color_jitter_strengths) < 0:
            raise ValueError("color_jitter_strengths must be 4 non-negative numbers")
        if self.color_jitter_strengths[3] > 0.5:
            raise ValueError("hue jitter must be <= 0.5")
        if self.output_size < 1:
            raise ValueError("output_size must be positive")

    @classmethod
    def identity(cls, output_size: int) -> "AugmentPolicy":
        return cls(crop_scale_range=(1.0, 1.0), flip_prob=0.0,
                   color_jitter_strengths=(0.0, 0.0, 0.0, 0.0),
                   grayscale_prob=0.0, output_size=output_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        return cls(**d)


class ViewParams(NamedTuple):
    top: int
    left: int
    height: int
    width: int
    flip: bool
    jitter: tuple | None  # (brightness, contrast, saturation, hue) factors
    grayscale: bool


def _sample_crop(rng: np.random.Generator, k: int, policy: AugmentPolicy):
    area = k * k
    lo, hi = policy.crop_scale_range
    log_r = (math.log(policy.crop_ratio_range[0]), math.log(policy.crop_ratio_range[1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if w == 0 or h == 0:
            raise ValueError(f"degenerate crop window {h}x{w} for a {k}x{k} image")
        if w <= k and h <= k:
            top = int(rng.integers(0, k - h + 1))
            left = int(rng.integers(0, k - w + 1))
            return top, left, h, w
    # fallback: centre crop at the closest admissible aspect ratio
    ratio = 1.0
    if ratio < policy.crop_ratio_range[0]:
        ratio = policy.crop_ratio_range[0]
    elif ratio > policy.crop_ratio_range[1]:
        ratio = policy.crop_ratio_range[1]
    if ratio >= 1.0:
        w, h = k, int(round(k / ratio))
    else:
        h, w = k, int(round(k * ratio))
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate crop window {h}x{w} for a {k}x{k} image")
    return (k - h) // 2, (k - w) // 2, h, w


def sample_view_params(rng: np.random.Generator, k: int, policy: AugmentPolicy) -> ViewParams:
    top, left, h, w = _sample_crop(rng, k, policy)
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate crop window {h}x{w}")
    flip = bool(rng.random() < policy.flip_prob)
    jitter = None
    b, c, s, hue = policy.color_jitter_strengths
    if rng.random() < policy.color_jitter_prob and (b or c or s or hue):
        jitter = (
            float(rng.uniform(max(0.0, 1 - b), 1 + b)),
            float(rng.uniform(max(0.0, 1 - c), 1 + c)),
            float(rng.uniform(max(0.0, 1 - s), 1 + s)),
            float(rng.uniform(-hue, hue)),
        )
    gray = bool(rng.random() < policy.grayscale_prob)
    return ViewParams(top, left, h, w, flip, jitter, gray)


def _grayscale(x: torch.Tensor) -> torch.Tensor:
    w = x.new_tensor(_LUMA).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def _rgb_to_hsv(x: torch.Tensor):
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    maxc, _ = x.max(dim=1)
    minc, _ = x.min(dim=1)
    delta = maxc - minc
    v = maxc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    safe = delta.clamp_min(1e-12)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.to(torch.int64) % 6
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ]
    out = []
    for ch in range(3):
        val = torch.zeros_like(v)
        for idx, trip in enumerate(choices):
            val = torch.where(i == idx, trip[ch], val)
        out.append(val)
    return torch.stack(out, dim=1)


def _color_jitter(x: torch.Tensor, factors: torch.Tensor) -> torch.Tensor:
    """Brightness, contrast, saturation, hue, in that order; one row of factors per image."""
    bright, contrast, sat, hue = (factors[:, i].view(-1, 1, 1, 1) for i in range(4))
    x = (x * bright).clamp(0, 1)
    mean = _grayscale(x).mean(dim=(2, 3), keepdim=True)
    x = (contrast * x + (1 - contrast) * mean).clamp(0, 1)
    gray = _grayscale(x)
    x = (sat * x + (1 - sat) * gray).clamp(0, 1)
    if torch.any(hue != 0):
        h, s, v = _rgb_to_hsv(x)
        h = (h + hue.view(-1, 1, 1)) % 1.0
        x = _hsv_to_rgb(h, s, v).clamp(0, 1)
    return x


def apply_view_params(images: torch.Tensor, params: list[ViewParams], output_size: int) -> torch.Tensor:
    """Apply one :class:`ViewParams` per image to a ``[B, C, k, k]`` batch."""
    bsz, c, k, _ = images.shape
    if len(params) != bsz:
        raise ValueError("need exactly one ViewParams per image")
    dtype = images.dtype
    theta = torch.zeros(bsz, 2, 3, dtype=dtype)
    for i, p in enumerate(params):
        # affine grid maps output [-1, 1] onto the crop box in input coordinates
        sx = p.width / k
        sy = p.height / k
        cx = (2 * p.left + p.width) / k - 1
        cy = (2 * p.top + p.height) / k - 1
        theta[i, 0, 0] = -sx if p.flip else sx
        theta[i, 0, 2] = cx
        theta[i, 1, 1] = sy
        theta[i, 1, 2] = cy
    grid = F.affine_grid(theta, [bsz, c, output_size, output_size], align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)

    jitter_rows = [i for i, p in enumerate(params) if p.jitter is not None]
    if jitter_rows:
        idx = torch.tensor(jitter_rows)
        factors = torch.tensor([params[i].jitter for i in jitter_rows], dtype=dtype)
        out = out.clone()
        out[idx] = _color_jitter(out[idx], factors)
    gray_rows = [i for i, p in enumerate(params) if p.grayscale]
    if gray_rows:
        idx = torch.tensor(gray_rows)
        out[idx] = _grayscale(out[idx]).expand(-1, c, -1, -1)
    return out.clamp(0.0, 1.0)


def _as_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    return torch.from_numpy(np.array(images, dtype=np.float32))


def make_views_batch(images, rng: np.random.Generator, policy: AugmentPolicy):
    """Two augmented views of every image: returns ``(views_1, views_2)``.

    Parameters are drawn image by image (view 1 then view 2), so the result
    for image ``i`` equals ``make_views(images[i], rng, policy)`` when the
    rng state matches.
    """
    x = _as_tensor(images)
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ValueError(f"images must be [B, C, k, k], got {tuple(x.shape)}")
    k = x.shape[-1]
    p1, p2 = [], []
    for _ in range(x.shape[0]):
        p1.append(sample_view_params(rng, k, policy))
        p2.append(sample_view_params(rng, k, policy))
    both = apply_view_params(torch.cat([x, x]), p1 + p2, policy.output_size)
    return both[: x.shape[0]], both[x.shape[0]:]


def make_views(image, rng: np.random.Generator, policy: AugmentPolicy):
    """Two independent stochastic augmentations of one ``[C, k, k]`` image."""
    x = _as_tensor(image)
    if x.ndim != 3:
        raise ValueError(f"expected a single [C, k, k] image, got {tuple(x.shape)}")
    v1, v2 = make_views_batch(x[None], rng, policy)
    return v1[0], v2[0]


def interleave_views(v1: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
    """Stack as ``[v1_0, v2_0, v1_1, v2_1, ...]`` so rows 2i, 2i+1 are partners."""
    return torch.stack([v1, v2], dim=1).reshape(-1, *v1.shape[1:])


# --------------------------------------------------------------------------
# relative position


def grid_position(idx: int) -> tuple[int, int]:
    if idx not in (0, 1, 2, 3):
        raise ValueError(f"quadrant index must be in 0..3, got {idx}")
    return divmod(idx, 2)


def split_quadrants(image):
    """Four non-overlapping ``k/2 x k/2`` blocks in grid order (TL, TR, BL, BR)."""
    k = image.shape[-1]
    if image.shape[-2] != k:
        raise ValueError(f"image must be square, got {tuple(image.shape[-2:])}")
    if k % 2:
        raise ValueError(f"image side must be even to split into quadrants, got {k}")
    h = k // 2
    return [image[..., r * h:(r + 1) * h, c * h:(c + 1) * h] for r in (0, 1) for c in (0, 1)]


def join_quadrants(blocks):
    top = np.concatenate([np.asarray(blocks[0]), np.asarray(blocks[1])], axis=-1)
    bottom = np.concatenate([np.asarray(blocks[2]), np.asarray(blocks[3])], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def direction_label(a_idx: int, b_idx: int) -> int:
    """Direction (0..7) of block ``b`` as seen from block ``a``."""
    if a_idx == b_idx:
        raise ValueError("a_idx and b_idx must differ")
    ra, ca = grid_position(a_idx)
    rb, cb = grid_position(b_idx)
    return _DIRECTION_OF[(rb - ra, cb - ca)]


def opposite_direction(d: int) -> int:
    return {0: 1, 1: 0, 2: 3, 3: 2, 4: 7, 7: 4, 5: 6, 6: 5}[d]


@dataclass
class QuadrantSample:
    block_a: np.ndarray
    block_b: np.ndarray
    a_idx: int
    b_idx: int
    d: int = field(init=False)

    def __post_init__(self):
        if self.block_a.shape != self.block_b.shape:
            raise ValueError("blocks must have equal shapes")
        self.d = direction_label(self.a_idx, self.b_idx)


def sample_pair_indices(rng: np.random.Generator) -> tuple[int, int]:
    a, b = ORDERED_PAIRS[int(rng.integers(len(ORDERED_PAIRS)))]
    return a, b


def sample_rp_pair(image, rng: np.random.Generator) -> QuadrantSample:
    """Pick an ordered pair of distinct quadrants uniformly and label it."""
    blocks = split_quadrants(image)
    a, b = sample_pair_indices(rng)
    return QuadrantSample(np.asarray(blocks[a]), np.asarray(blocks[b]), a, b)


def sample_rp_batch(images, rng: np.random.Generator, resize_to: int | None = None):
    """One quadrant pair per image: ``(blocks_a, blocks_b, labels)`` as tensors.

    Blocks are not augmented; with ``resize_to`` they are bilinearly resized.
    """
    x = _as_tensor(images)
    n, _, k, _ = x.shape
    if k % 2:
        raise ValueError(f"image side must be even to split into quadrants, got {k}")
    h = k // 2
    pairs = [sample_pair_indices(rng) for _ in range(n)]
    quads = x.unfold(2, h, h).unfold(3, h, h)  # [n, c, 2, 2, h, h]
    rows = torch.arange(n)
    a_idx = torch.tensor([p[0] for p in pairs])
    b_idx = torch.tensor([p[1] for p in pairs])
    block_a = quads[rows, :, a_idx // 2, a_idx % 2]
    block_b = quads[rows, :, b_idx // 2, b_idx % 2]
    labels = torch.tensor([direction_label(a, b) for a, b in pairs], dtype=torch.int64)
    if resize_to is not None and resize_to != h:
        both = F.interpolate(torch.cat([block_a, block_b]), size=(resize_to, resize_to),
                             mode="bilinear", align_corners=False)
        block_a, block_b = both[:n], both[n:]
    return block_a.contiguous(), block_b.contiguous(), labels
