"""Dataset scanning, augmentation and positive-set sample generation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .degradation import DegradationSpec, degrade, sample_spec
from .drp import DimensionError, PCABasis, build_drp

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(ValueError):
    pass


# --- image IO ---------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an image as float64 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path, format="PNG")


# --- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str  # relative to the manifest root
    height: int
    width: int


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def to_jsonl(self) -> str:
        head = json.dumps({"root": self.root, "split": self.split}, sort_keys=True)
        rows = [json.dumps(e.__dict__, sort_keys=True) for e in self.entries]
        return "\n".join([head] + rows) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "DatasetManifest":
        lines = [json.loads(l) for l in text.splitlines() if l.strip()]
        head, rows = lines[0], lines[1:]
        return cls(head["root"], [ManifestEntry(**r) for r in rows], head.get("split", "train"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_jsonl(Path(path).read_text())

    def digest(self) -> str:
        rows = [json.dumps(e.__dict__, sort_keys=True) for e in self.entries]
        return hashlib.sha256("\n".join([self.split] + rows).encode()).hexdigest()

    def load_images(self) -> list[np.ndarray]:
        root = Path(self.root)
        out = []
        for e in self.entries:
            p = root / e.path
            if not p.exists():
                raise DatasetError(f"manifest entry {e.id}: {p} does not exist")
            out.append(load_image(p))
        return out


def scan_dataset(root, split: str = "train", min_size: int = 0) -> DatasetManifest:
    """List readable images under ``root`` (recursively) in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    entries = []
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            log.warning("skipping non-image file %s", rel)
            continue
        try:
            with Image.open(p) as im:
                im.verify()
            with Image.open(p) as im:
                w, h = im.size
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            log.warning("skipping unreadable image %s (%s)", rel, exc)
            continue
        if min(h, w) < min_size:
            log.warning("skipping %s: %dx%d smaller than %d", rel, h, w, min_size)
            continue
        entries.append(ManifestEntry(Path(rel).with_suffix("").as_posix(), rel, h, w))
    if not entries:
        raise DatasetError(f"no usable images under {root}")
    return DatasetManifest(str(root), entries, split)


# --- augmentation ---------------------------------------------------------------


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """k in 0..7: rotate by 90*(k % 4) degrees, mirror horizontally if k >= 4."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(hr: np.ndarray, seed: int) -> np.ndarray:
    k = int(np.random.default_rng(seed).integers(8))
    return dihedral(hr, k)


# --- samples --------------------------------------------------------------------


@dataclass
class TrainSample:
    hr_patch: np.ndarray  # (3, s*p, s*p)
    lr_patches: np.ndarray  # (D, 3, p, p)
    spec: DegradationSpec
    drp: Optional[np.ndarray]  # (t+3, p, p) or None without a prior
    offsets: list[tuple[int, int]] = field(default_factory=list)
    noise_seed: int = 0


def make_train_sample(
    hr: np.ndarray,
    spec: DegradationSpec,
    basis: Optional[PCABasis],
    patch: int,
    D: int,
    seed: int,
    sr_index: int = 0,
    kernel_size: int = 21,
) -> TrainSample:
    """Degrade the whole image once, then crop D positives from the LR result."""
    if D < 1:
        raise DatasetError("D must be >= 1")
    s = spec.scale
    rng = np.random.default_rng(seed)
    noise_seed = int(rng.integers(2**31))
    lr = degrade(hr, spec, noise_seed, kernel_size)
    lh, lw = lr.shape[-2:]
    if lh < patch or lw < patch:
        raise DatasetError(f"LR image {lh}x{lw} smaller than patch {patch}")
    ys = rng.integers(0, lh - patch + 1, size=D)
    xs = rng.integers(0, lw - patch + 1, size=D)
    offsets = [(int(y), int(x)) for y, x in zip(ys, xs)]
    lr_patches = np.stack([lr[:, y : y + patch, x : x + patch] for y, x in offsets])
    y0, x0 = offsets[sr_index]
    hr_patch = np.ascontiguousarray(hr[:, y0 * s : (y0 + patch) * s, x0 * s : (x0 + patch) * s])
    drp = None
    if basis is not None:
        drp = build_drp(spec.kernel(kernel_size), spec.noise_sigma, basis, patch, patch)
    return TrainSample(hr_patch, lr_patches, spec, drp, offsets, noise_seed)


@dataclass
class Batch:
    patches: torch.Tensor  # (B, D, 3, p, p)
    drps: Optional[torch.Tensor]  # (B, D, t+3, p, p)
    hr: torch.Tensor  # (B, 3, s*p, s*p)
    specs: list[DegradationSpec]

    def teacher_input(self) -> torch.Tensor:
        """(B, D, t+6, p, p) estimator input, or the bare patches without a prior."""
        if self.drps is None:
            return self.patches
        return torch.cat([self.patches, self.drps], dim=2)


def assemble_batch(samples: Sequence[TrainSample], dtype=torch.float32) -> Batch:
    if not samples:
        raise DatasetError("empty batch")
    shapes = {(s.lr_patches.shape, s.hr_patch.shape, None if s.drp is None else s.drp.shape) for s in samples}
    if len(shapes) != 1:
        raise DimensionError(f"ragged samples: {sorted(map(str, shapes))}")
    patches = torch.from_numpy(np.stack([s.lr_patches for s in samples])).to(dtype)
    hr = torch.from_numpy(np.stack([s.hr_patch for s in samples])).to(dtype)
    drps = None
    if samples[0].drp is not None:
        D = samples[0].lr_patches.shape[0]
        d = np.stack([np.broadcast_to(s.drp, (D,) + s.drp.shape) for s in samples])
        drps = torch.from_numpy(np.ascontiguousarray(d)).to(dtype)
    return Batch(patches, drps, hr, [s.spec for s in samples])


def unstack_batch(batch: Batch) -> list[tuple[np.ndarray, Optional[np.ndarray], np.ndarray]]:
    out = []
    for i in range(batch.patches.shape[0]):
        drp = None if batch.drps is None else batch.drps[i, 0].numpy()
        out.append((batch.patches[i].numpy(), drp, batch.hr[i].numpy()))
    return out


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class TrainLoader:
    """Deterministic batches: every sample is a pure function of
    (seed, epoch, step, slot) and the images."""

    def __init__(
        self,
        images: Sequence[np.ndarray],
        *,
        B: int,
        D: int,
        patch: int,
        scale: int,
        seed: int,
        basis: Optional[PCABasis] = None,
        setting: str = "setting1",
        widths: Optional[Sequence[float]] = None,
        noise: Optional[float] = None,
        kernel_size: int = 21,
        fixed: bool = False,
        sr_index: int = 0,
        workers: int = 1,
        augment: bool = True,
    ):
        if not images:
            raise DatasetError("empty dataset")
        self.images = []
        for i, img in enumerate(images):
            if min(img.shape[-2:]) // scale < patch:
                log.warning("skipping image %d: %dx%d degrades below patch %d", i, *img.shape[-2:], patch)
                continue
            self.images.append(img)
        if not self.images:
            raise DatasetError(f"no image is large enough for {patch}px LR patches at x{scale}")
        self.B, self.D, self.patch, self.scale = B, D, patch, scale
        self.seed, self.basis = seed, basis
        self.setting, self.widths, self.noise = setting, widths, noise
        self.kernel_size, self.fixed, self.sr_index = kernel_size, fixed, sr_index
        self.workers, self.augment = workers, augment
        self._cache: dict = {}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.images) / self.B)

    def order(self, epoch: int) -> np.ndarray:
        e = 0 if self.fixed else epoch
        return np.random.default_rng(derive_seed(self.seed, e, 0xA11)).permutation(len(self.images))

    def sample(self, epoch: int, step: int, slot: int) -> TrainSample:
        e = 0 if self.fixed else epoch
        if self.fixed and (step, slot) in self._cache:
            return self._cache[step, slot]
        order = self.order(epoch)
        idx = int(order[(step * self.B + slot) % len(order)])
        rng = np.random.default_rng(derive_seed(self.seed, e, step, slot))
        hr = self.images[idx]
        if self.augment:
            hr = augment(hr, int(rng.integers(2**31)))
        spec = sample_spec(rng, self.setting, self.scale, self.widths, self.noise)
        out = make_train_sample(
            hr, spec, self.basis, self.patch, self.D, int(rng.integers(2**31)), self.sr_index, self.kernel_size
        )
        if self.fixed:
            self._cache[step, slot] = out
        return out

    def batch(self, epoch: int, step: int) -> Batch:
        return assemble_batch([self.sample(epoch, step, j) for j in range(self.B)])

    def epoch_batches(self, epoch: int) -> Iterator[Batch]:
        steps = range(self.steps_per_epoch)
        if self.workers <= 1:
            for step in steps:
                yield self.batch(epoch, step)
            return
        # bounded look-ahead; futures are consumed in submission order
        it = iter(steps)
        with ThreadPoolExecutor(self.workers) as pool:
            pending = deque(pool.submit(self.batch, epoch, s) for s in islice(it, 2 * self.workers))
            while pending:
                fut = pending.popleft()
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(self.batch, epoch, nxt))
                yield fut.result()
