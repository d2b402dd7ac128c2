"""Label-preserving image augmentation on (C, H, W) float arrays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Rng

TEN_CROP_ORDER = (
    "top_left",
    "top_right",
    "bottom_left",
    "bottom_right",
    "center",
    "top_left_flip",
    "top_right_flip",
    "bottom_left_flip",
    "bottom_right_flip",
    "center_flip",
)


@dataclass(frozen=True)
class CropPolicy:
    src: int = 64
    crop: int = 56
    flip: bool = True

    def __post_init__(self):
        if not 1 <= self.crop <= self.src:
            raise ShapeError(f"crop size {self.crop} must lie in [1, {self.src}]")

    @property
    def multiplicity(self) -> int:
        """Number of distinct (offset, flip) combinations."""
        offsets = max(self.src - self.crop, 1) ** 2
        return offsets * (2 if self.flip else 1)


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def crop(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return img[..., top : top + size, left : left + size].copy()


def random_crop_flip(img: np.ndarray, policy: CropPolicy, rng: Rng) -> np.ndarray:
    """Crop at a uniform offset in [0, src - crop) per axis, then maybe mirror.

    When ``src == crop`` the offset is 0.
    """
    h, w = img.shape[-2:]
    if h < policy.crop or w < policy.crop:
        raise ShapeError(f"image {h}x{w} smaller than crop {policy.crop}")
    span_y = max(h - policy.crop, 1)
    span_x = max(w - policy.crop, 1)
    top = int(rng.integers(0, span_y))
    left = int(rng.integers(0, span_x))
    out = crop(img, top, left, policy.crop)
    if policy.flip and rng.random() < 0.5:
        out = flip_horizontal(out)
    return out


def ten_crop_offsets(height: int, width: int, size: int) -> list[tuple[int, int]]:
    """(top, left) of the four corner crops and the center crop, in that order."""
    if size > height or size > width:
        raise ShapeError(f"crop size {size} exceeds image {height}x{width}")
    bottom, right = height - size, width - size
    return [(0, 0), (0, right), (bottom, 0), (bottom, right), (bottom // 2, right // 2)]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    top, left = ten_crop_offsets(h, w, size)[4]
    return crop(img, top, left, size)


def ten_crop(img: np.ndarray, size: int) -> list[np.ndarray]:
    """Corners, center, then the mirror image of each (see ``TEN_CROP_ORDER``)."""
    h, w = img.shape[-2:]
    patches = [crop(img, t, l, size) for t, l in ten_crop_offsets(h, w, size)]
    return patches + [flip_horizontal(p) for p in patches]


@dataclass(frozen=True)
class PcaColorModel:
    """Principal axes of RGB pixel values.

    ``eigvecs[:, i]`` is the i-th eigenvector; eigenvalues are descending.
    """

    eigvecs: np.ndarray
    eigvals: np.ndarray
    sigma: float = 0.1

    def offset(self, alphas) -> np.ndarray:
        return self.eigvecs @ (np.asarray(alphas) * self.eigvals)


def fit_pca_color(pixels, max_pixels: int = 1_000_000, rng: Rng | None = None, sigma: float = 0.1):
    """Eigen-decompose the 3x3 covariance of RGB values.

    ``pixels`` is either an (M, 3) array or an image batch (N, 3, H, W).
    At most ``max_pixels`` pixels are used, drawn at random when more exist.
    Each eigenvector's first nonzero component is made positive.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 4:
        pixels = pixels.transpose(0, 2, 3, 1).reshape(-1, pixels.shape[1])
    if pixels.ndim != 2 or pixels.shape[1] != 3:
        raise ShapeError(f"expected (M, 3) pixels or (N, 3, H, W) images, got {pixels.shape}")
    if len(pixels) > max_pixels:
        rng = rng or Rng(0)
        pixels = pixels[np.sort(rng.permutation(len(pixels))[:max_pixels])]
    if len(pixels) < 2:
        cov = np.zeros((3, 3))
    else:
        cov = np.cov(pixels, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1].copy()
    scale = max(float(np.abs(vals).max()), np.finfo(float).tiny)
    vals = np.where(vals <= 1e-12 * scale, 0.0, vals)
    for i in range(3):
        nz = np.flatnonzero(np.abs(vecs[:, i]) > 1e-12)
        if nz.size and vecs[nz[0], i] < 0:
            vecs[:, i] = -vecs[:, i]
    return PcaColorModel(vecs, vals, sigma)


def apply_pca_color(img: np.ndarray, model: PcaColorModel, rng: Rng) -> np.ndarray:
    """Shift every pixel by the same random combination of the principal axes."""
    if img.shape[0] != 3:
        raise ShapeError(f"PCA color augmentation needs 3 channels, got {img.shape[0]}")
    alphas = rng.normal(0.0, model.sigma, 3)
    return img + model.offset(alphas)[:, None, None]


@dataclass(frozen=True)
class ScaleJitterPolicy:
    s_min: int = 64
    s_max: int = 80

    def __post_init__(self):
        if not 1 <= self.s_min <= self.s_max:
            raise ValueError(f"need 1 <= s_min <= s_max, got {self.s_min}, {self.s_max}")


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with corner pixels aligned (linear ramps stay exact)."""
    h, w = img.shape[-2:]

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, height)
    x0, x1, fx = coords(w, width)
    top = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def scale_jitter(img: np.ndarray, policy: ScaleJitterPolicy, rng: Rng) -> np.ndarray:
    """Resize so the shorter side is a uniform random S in [s_min, s_max]."""
    s = int(rng.integers(policy.s_min, policy.s_max + 1))
    h, w = img.shape[-2:]
    if h <= w:
        new_h, new_w = s, max(1, round(w * s / h))
    else:
        new_h, new_w = max(1, round(h * s / w)), s
    return resize_bilinear(img, new_h, new_w)


@dataclass
class Augmenter:
    """Training-time pipeline: scale jitter, random crop + flip, PCA color shift.

    Each stage is optional. Called as ``augmenter(img, rng)``.
    """

    crop: CropPolicy | None = None
    jitter: ScaleJitterPolicy | None = None
    pca: PcaColorModel | None = None

    def __call__(self, img: np.ndarray, rng: Rng) -> np.ndarray:
        if self.jitter is not None:
            img = scale_jitter(img, self.jitter, rng.child(0))
        if self.crop is not None:
            img = random_crop_flip(img, self.crop, rng.child(1))
        if self.pca is not None:
            img = apply_pca_color(img, self.pca, rng.child(2))
        return img
