"""Synthetic LR generation: LR = (HR * k) downsampled by bicubic, plus noise.

Images are float64 arrays shaped (3, H, W) with values nominally in [0, 1].
Noise levels are given on the 0..255 scale.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from . import kernels

KERNEL_SIZE = 21
SETTING1_WIDTH = (0.2, 4.0)
SETTING2_EIG = (0.2, 4.0)
SETTING2_NOISE = (0.0, 25.0)
BICUBIC_A = -0.5


class DegradationError(ValueError):
    pass


class InvalidKernelSize(DegradationError):
    pass


class DegenerateWidth(DegradationError):
    pass


class SingularCovariance(DegradationError):
    pass


class InvalidScale(DegradationError):
    pass


class InvalidSpec(DegradationError):
    pass


@dataclass(frozen=True, eq=False)
class BlurKernel:
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def to_text(self) -> str:
        """Row-major grid, one row per line, round-trip precision."""
        return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in self.weights)

    @classmethod
    def from_text(cls, text: str) -> "BlurKernel":
        rows = [[float(v) for v in line.split()] for line in text.splitlines() if line.strip()]
        w = np.array(rows, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvalidKernelSize(f"kernel grid must be square, got {w.shape}")
        return cls(w)


def _grid(size: int):
    if size < 3 or size % 2 == 0:
        raise InvalidKernelSize(f"kernel size must be odd and >= 3, got {size}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return xx, yy


def delta_kernel(size: int = KERNEL_SIZE) -> BlurKernel:
    _grid(size)
    w = np.zeros((size, size))
    w[size // 2, size // 2] = 1.0
    return BlurKernel(w)


def make_isotropic_kernel(width: float, size: int = KERNEL_SIZE) -> BlurKernel:
    """Normalized isotropic Gaussian; ``width == 0`` gives the delta kernel."""
    xx, yy = _grid(size)
    if width == 0:
        return delta_kernel(size)
    if not width > 0:
        raise DegenerateWidth(f"kernel width must be positive, got {width}")
    k = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * width ** 2))
    return BlurKernel(k / k.sum())


def make_anisotropic_kernel(eig1: float, eig2: float, angle: float, size: int = KERNEL_SIZE) -> BlurKernel:
    """Normalized N(0, R diag(eig1, eig2) R^T) sampled on the centered grid."""
    xx, yy = _grid(size)
    if not (eig1 > 0 and eig2 > 0):
        raise SingularCovariance(f"covariance eigenvalues must be positive, got {eig1}, {eig2}")
    c, s = math.cos(angle), math.sin(angle)
    # coordinates in the eigenbasis: R^T p
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * (u ** 2 / eig1 + v ** 2 / eig2))
    return BlurKernel(k / k.sum())


@dataclass(frozen=True)
class DegradationSpec:
    kind: Literal["isotropic", "anisotropic"] = "isotropic"
    width: float = 0.0
    eig1: float = 1.0
    eig2: float = 1.0
    angle: float = 0.0
    noise_sigma: float = 0.0
    scale: int = 4

    def kernel(self, size: int = KERNEL_SIZE) -> BlurKernel:
        if self.kind == "isotropic":
            return make_isotropic_kernel(self.width, size)
        if self.kind == "anisotropic":
            return make_anisotropic_kernel(self.eig1, self.eig2, self.angle, size)
        raise InvalidSpec(f"unknown kernel kind {self.kind!r}")

    def validate(self, setting: Optional[str] = None) -> "DegradationSpec":
        if self.scale < 1:
            raise InvalidScale(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if setting == "setting1":
            lo, hi = SETTING1_WIDTH
            if self.kind != "isotropic":
                raise InvalidSpec("setting1 only has isotropic kernels")
            if not lo <= self.width <= hi:
                raise InvalidSpec(f"setting1 width must lie in [{lo}, {hi}], got {self.width}")
            if self.noise_sigma != 0:
                raise InvalidSpec("setting1 is noise free")
        elif setting == "setting2":
            lo, hi = SETTING2_EIG
            if self.kind != "anisotropic":
                raise InvalidSpec("setting2 expects anisotropic kernels")
            for name in ("eig1", "eig2"):
                if not lo <= getattr(self, name) <= hi:
                    raise InvalidSpec(f"setting2 {name} must lie in [{lo}, {hi}]")
            if not 0 <= self.angle < math.pi:
                raise InvalidSpec("setting2 angle must lie in [0, pi)")
            if not SETTING2_NOISE[0] <= self.noise_sigma <= SETTING2_NOISE[1]:
                raise InvalidSpec("setting2 noise must lie in [0, 25]")
        elif setting is not None:
            raise InvalidSpec(f"unknown setting {setting!r}")
        return self

    def label(self) -> str:
        if self.kind == "isotropic":
            core = f"iso_w{self.width:g}"
        else:
            core = f"aniso_{self.eig1:g}_{self.eig2:g}_{self.angle:.4f}"
        return f"{core}_n{self.noise_sigma:g}_x{self.scale}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)


def sample_spec(
    rng: np.random.Generator,
    setting: str = "setting1",
    scale: int = 4,
    widths: Optional[Sequence[float]] = None,
    noise: Optional[float] = None,
) -> DegradationSpec:
    """Draw a spec from a setting's ranges, or from a finite pool of widths."""
    if widths:
        w = float(widths[rng.integers(len(widths))])
        return DegradationSpec("isotropic", width=w, noise_sigma=noise or 0.0, scale=scale)
    if setting == "setting1":
        w = float(rng.uniform(*SETTING1_WIDTH))
        return DegradationSpec("isotropic", width=w, noise_sigma=noise or 0.0, scale=scale)
    if setting == "setting2":
        e1, e2 = rng.uniform(*SETTING2_EIG, size=2)
        angle = float(rng.uniform(0.0, math.pi))
        n = float(rng.uniform(*SETTING2_NOISE)) if noise is None else noise
        return DegradationSpec("anisotropic", eig1=float(e1), eig2=float(e2), angle=angle, noise_sigma=n, scale=scale)
    raise InvalidSpec(f"unknown setting {setting!r}")


def sample_kernels(n: int, setting: str, seed: int, size: int = KERNEL_SIZE) -> list[BlurKernel]:
    rng = np.random.default_rng(seed)
    return [sample_spec(rng, setting).kernel(size) for _ in range(n)]


# --- resampling -----------------------------------------------------------


def cubic(x, a: float = BICUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_weights(n_in: int, n_out: int, antialias: bool = True):
    """Tap tables for resizing one axis from ``n_in`` to ``n_out`` samples.

    Pixel centers are aligned (half-pixel convention).  When shrinking with
    antialiasing the cubic is stretched by the scale factor.  Taps falling
    outside the input are dropped and each row renormalized to sum to 1.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0) if antialias else 1.0
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic((centers[:, None] - idx) / stretch)
    inside = (idx >= 0) & (idx < n_in)
    w = np.where(inside, w, 0.0)
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    return np.ascontiguousarray(idx), np.ascontiguousarray(w)


def _resize_axis_last(x: np.ndarray, n_out: int, antialias: bool) -> np.ndarray:
    lead = x.shape[:-1]
    idx, w = resample_weights(x.shape[-1], n_out, antialias)
    rows = np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)
    return kernels.resample_last(rows, idx, w).reshape(*lead, n_out)


def resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable bicubic resize of a (C, H, W) image (width pass first)."""
    img = np.asarray(img, dtype=np.float64)
    x = _resize_axis_last(img, out_w, antialias)
    x = _resize_axis_last(np.ascontiguousarray(x.transpose(0, 2, 1)), out_h, antialias)
    return np.ascontiguousarray(x.transpose(0, 2, 1))


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., : h - h % scale, : w - w % scale]


def bicubic_downsample(img: np.ndarray, scale: int) -> np.ndarray:
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise InvalidScale(f"scale must be an integer >= 1, got {scale!r}")
    img = crop_to_multiple(np.asarray(img, dtype=np.float64), scale)
    if scale == 1:
        return img.copy()
    h, w = img.shape[-2:]
    return resize(img, h // scale, w // scale, antialias=True)


def bicubic_upsample(img: np.ndarray, scale: int) -> np.ndarray:
    if scale < 1:
        raise InvalidScale(f"scale must be >= 1, got {scale}")
    h, w = img.shape[-2:]
    return resize(img, h * scale, w * scale, antialias=False)


def blur(img: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """2-D convolution with reflect padding, output the same size as ``img``."""
    img = np.asarray(img, dtype=np.float64)
    r = kernel.size // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="reflect")
    flipped = np.ascontiguousarray(kernel.weights[::-1, ::-1])
    return kernels.valid_conv2d(np.ascontiguousarray(padded), flipped)


def add_noise(img: np.ndarray, noise_sigma: float, seed: int) -> np.ndarray:
    if noise_sigma == 0:
        return img
    rng = np.random.default_rng(seed)
    return img + rng.standard_normal(img.shape) * (noise_sigma / 255.0)


def degrade(hr: np.ndarray, spec: DegradationSpec, seed: int, kernel_size: int = KERNEL_SIZE) -> np.ndarray:
    """Blur, bicubic-downsample and add noise; a pure function of its inputs."""
    spec.validate()
    hr = crop_to_multiple(np.asarray(hr, dtype=np.float64), spec.scale)
    blurred = blur(hr, spec.kernel(kernel_size))
    lr = bicubic_downsample(blurred, spec.scale)
    return add_noise(lr, spec.noise_sigma, seed)
