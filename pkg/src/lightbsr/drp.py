"""Degradation reference priors: PCA-projected blur kernel + noise level,
stretched over the patch so it can be stacked onto the image channels."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .degradation import KERNEL_SIZE, BlurKernel, sample_kernels

SIGN_CONVENTION = "maxabs-positive"
NOISE_REPEATS = 3
_MAGIC = "# lightbsr-pca-basis v1"


class DimensionError(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PCABasis:
    mean: np.ndarray  # (k*k,)
    components: np.ndarray  # (t, k*k), orthonormal rows
    kernel_size: int
    corpus_hash: str = ""

    @property
    def t(self) -> int:
        return self.components.shape[0]

    def project(self, kernel: BlurKernel) -> np.ndarray:
        return project_kernel(kernel, self)

    def reconstruct(self, coeffs: np.ndarray) -> BlurKernel:
        vec = self.mean + self.components.T @ np.asarray(coeffs, dtype=np.float64)
        return BlurKernel(vec.reshape(self.kernel_size, self.kernel_size))

    def to_text(self) -> str:
        lines = [
            _MAGIC,
            f"t {self.t}",
            f"k {self.kernel_size}",
            f"corpus_sha256 {self.corpus_hash or '-'}",
            f"sign {SIGN_CONVENTION}",
            "mean",
            " ".join(repr(float(v)) for v in self.mean),
            "components",
        ]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.components]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PCABasis":
        lines = text.splitlines()
        if not lines or lines[0] != _MAGIC:
            raise ValueError("not a PCA basis file")
        header = dict(line.split(" ", 1) for line in lines[1:5])
        t, k = int(header["t"]), int(header["k"])
        if header["sign"] != SIGN_CONVENTION:
            raise ValueError(f"unsupported sign convention {header['sign']!r}")
        if lines[5] != "mean" or lines[7] != "components":
            raise ValueError("malformed PCA basis file")
        mean = np.array([float(v) for v in lines[6].split()])
        comps = np.array([[float(v) for v in row.split()] for row in lines[8 : 8 + t]])
        if mean.shape != (k * k,) or comps.shape != (t, k * k):
            raise DimensionError("PCA basis file has inconsistent dimensions")
        corpus = header["corpus_sha256"]
        return cls(mean, comps, k, "" if corpus == "-" else corpus)

    def save(self, path) -> str:
        Path(path).write_text(self.to_text())
        return self.digest()

    @classmethod
    def load(cls, path) -> "PCABasis":
        return cls.from_text(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _corpus_hash(X: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(X, dtype="<f8").tobytes()).hexdigest()


def fit_pca_basis(kernels: list[BlurKernel], t: int = 15) -> PCABasis:
    """Top-``t`` principal directions of the vectorized kernels (via SVD)."""
    if len(kernels) < t + 1:
        raise InsufficientSamples(f"need at least t+1={t + 1} kernels, got {len(kernels)}")
    sizes = {k.size for k in kernels}
    if len(sizes) != 1:
        raise DimensionError(f"kernels have mixed sizes {sorted(sizes)}")
    size = sizes.pop()
    if t >= size * size:
        raise DimensionError(f"t={t} must be smaller than k*k={size * size}")
    X = np.stack([k.weights.reshape(-1) for k in kernels])
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:t].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(t), pivot])
    comps *= signs[:, None]
    return PCABasis(mean, comps, size, _corpus_hash(X))


def fit_setting_basis(setting: str, n: int = 10_000, t: int = 15, seed: int = 0, size: int = KERNEL_SIZE) -> PCABasis:
    return fit_pca_basis(sample_kernels(n, setting, seed, size), t)


def project_kernel(kernel: BlurKernel, basis: PCABasis) -> np.ndarray:
    if kernel.size != basis.kernel_size:
        raise DimensionError(f"kernel size {kernel.size} != basis kernel size {basis.kernel_size}")
    return basis.components @ (kernel.weights.reshape(-1) - basis.mean)


def drp_vector(kernel: BlurKernel, noise_sigma: float, basis: PCABasis) -> np.ndarray:
    return np.concatenate([project_kernel(kernel, basis), np.full(NOISE_REPEATS, float(noise_sigma))])


def build_drp(kernel: BlurKernel, noise_sigma: float, basis: PCABasis, h: int, w: int) -> np.ndarray:
    """(t+3, h, w) tensor; every channel is constant over space.

    ``noise_sigma`` stays on the 0..255 scale.
    """
    if h < 1 or w < 1:
        raise DimensionError("DRP spatial size must be positive")
    vec = drp_vector(kernel, noise_sigma, basis)
    return np.repeat(vec[:, None, None], h, axis=1).repeat(w, axis=2)


def assemble_teacher_input(patches: np.ndarray, drp: np.ndarray) -> np.ndarray:
    """Stack each (3, H, W) patch with the DRP -> (D, t+6, H, W)."""
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[None]
    if patches.ndim != 4 or drp.ndim != 3 or patches.shape[-2:] != drp.shape[-2:]:
        raise DimensionError(f"patch shape {patches.shape} incompatible with DRP {drp.shape}")
    drps = np.broadcast_to(drp, (patches.shape[0],) + drp.shape)
    return np.concatenate([patches, drps.astype(patches.dtype)], axis=1)
