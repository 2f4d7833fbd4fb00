"""PSNR, IDR embedding export and separability, the error-IDR robustness
harness, and benchmark grids."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score

from .checkpoint import CheckpointBundle, CheckpointError
from .config import RunConfig
from .data import DatasetManifest, derive_seed
from .degradation import DegradationSpec, bicubic_upsample, crop_to_multiple, degrade
from .drp import PCABasis, build_drp
from .network import LightBSR
from .training import build_network

Images = Union[DatasetManifest, Sequence[np.ndarray], Sequence[tuple[str, np.ndarray]]]


# --- PSNR ---------------------------------------------------------------------------


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a (3, H, W) image in [0, 1], result in [16/255, 235/255]."""
    r, g, b = img[0], img[1], img[2]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def psnr(a, b, mode: str = "y_channel", shave: int = 4) -> float:
    """PSNR in dB of [0, 1] images; ``math.inf`` when they are identical."""
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    if mode == "y_channel":
        a, b = rgb_to_y(a), rgb_to_y(b)
    elif mode != "rgb":
        raise ValueError(f"unknown PSNR mode {mode!r}")
    if shave:
        a = a[..., shave:-shave, shave:-shave]
        b = b[..., shave:-shave, shave:-shave]
    if a.size == 0:
        raise ValueError("nothing left after shaving the border")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --- model access ---------------------------------------------------------------------


@dataclass
class LoadedModel:
    net: LightBSR
    cfg: RunConfig
    role: str
    basis: Optional[PCABasis]
    model_id: str

    @property
    def needs_prior(self) -> bool:
        return self.role == "teacher" and self.cfg.train.use_drp

    def estimator_input(self, lr: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
        if not self.needs_prior:
            return lr
        drp = build_drp(spec.kernel(self.cfg.degradation.kernel_size), spec.noise_sigma, self.basis, *lr.shape[-2:])
        return torch.cat([lr, torch.from_numpy(drp).to(lr.dtype)[None].expand(lr.shape[0], -1, -1, -1)], dim=1)


def load_model(ckpt: Union[CheckpointBundle, str, Path], basis: Optional[PCABasis] = None) -> LoadedModel:
    bundle = ckpt if isinstance(ckpt, CheckpointBundle) else CheckpointBundle.load(ckpt)
    if not any(k.startswith("estimator.") for k in bundle.model):
        raise CheckpointError("checkpoint has no estimator weights")
    cfg = RunConfig.model_validate(bundle.config)
    net = build_network(cfg, bundle.role)
    net.load_state_dict(bundle.model)
    net.eval()
    loaded = LoadedModel(net, cfg, bundle.role, basis, bundle.digest())
    if loaded.needs_prior:
        if basis is None:
            raise ValueError("this teacher uses the degradation prior: pass its PCA basis")
        if bundle.basis_hash and basis.digest() != bundle.basis_hash:
            raise CheckpointError("PCA basis differs from the one the checkpoint was trained with")
    return loaded


def _named(images: Images) -> list[tuple[str, np.ndarray]]:
    if isinstance(images, DatasetManifest):
        return [(e.id, img) for e, img in zip(images.entries, images.load_images())]
    out = []
    for i, item in enumerate(images):
        if isinstance(item, tuple):
            out.append((str(item[0]), item[1]))
        else:
            out.append((f"{i:04d}", item))
    return out


def _t(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]


@torch.no_grad()
def super_resolve(model: LoadedModel, lr: np.ndarray, spec: DegradationSpec, raw_noise=None) -> np.ndarray:
    """SR of one (3, h, w) LR image, clipped to [0, 1]."""
    x = _t(lr)
    raw = model.net.estimator(model.estimator_input(x, spec))
    if raw_noise is not None:
        raw = raw + raw_noise
    idr = model.net.converter(raw, x.shape[-2:])
    sr = model.net(x, idr=idr)
    return sr[0].clamp(0, 1).double().numpy()


# --- embeddings -------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingRow:
    id: str
    label: str
    vector: tuple[float, ...]


@dataclass
class EmbeddingDump:
    rows: list[EmbeddingRow]

    def __post_init__(self):
        if len({len(r.vector) for r in self.rows}) > 1:
            raise ValueError("embedding vectors have inconsistent lengths")

    def __len__(self):
        return len(self.rows)

    @property
    def dim(self) -> int:
        return len(self.rows[0].vector) if self.rows else 0

    def matrix(self) -> np.ndarray:
        return np.array([r.vector for r in self.rows], dtype=np.float64)

    def labels(self) -> list[str]:
        return [r.label for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label"] + [f"v{i}" for i in range(self.dim)])
        for r in self.rows:
            w.writerow([r.id, r.label] + [repr(float(v)) for v in r.vector])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmbeddingDump":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise ValueError("not an embedding dump")
        return cls([EmbeddingRow(r[0], r[1], tuple(float(v) for v in r[2:])) for r in reader if r])

    def save(self, path) -> str:
        text = self.to_csv()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "EmbeddingDump":
        return cls.from_csv(Path(path).read_text())

    def project_2d(self) -> np.ndarray:
        """First two principal coordinates, for quick-look scatter plots."""
        X = self.matrix()
        coords = PCA(n_components=2, svd_solver="full").fit_transform(X)
        # fix the arbitrary sign so reruns produce identical files
        pivot = np.argmax(np.abs(coords), axis=0)
        return coords * np.sign(coords[pivot, [0, 1]])

    def projection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label", "pc0", "pc1"])
        for r, (x, y) in zip(self.rows, self.project_2d()):
            w.writerow([r.id, r.label, repr(float(x)), repr(float(y))])
        return buf.getvalue()


@torch.no_grad()
def export_embeddings(
    ckpt,
    dataset: Images,
    specs: Sequence[DegradationSpec],
    seed: int = 0,
    basis: Optional[PCABasis] = None,
    crop: Optional[int] = None,
) -> EmbeddingDump:
    """Channel IDR of every (image, spec) pair.

    ``crop`` evaluates a centred LR window of that size instead of the
    whole LR image.
    """
    if len(specs) < 2:
        raise ValueError("need at least two degradation specs")
    model = ckpt if isinstance(ckpt, LoadedModel) else load_model(ckpt, basis)
    rows = []
    for i, (img_id, hr) in enumerate(_named(dataset)):
        for j, spec in enumerate(specs):
            lr = degrade(hr, spec, derive_seed(seed, i, j), model.cfg.degradation.kernel_size)
            if crop is not None:
                y0, x0 = (lr.shape[1] - crop) // 2, (lr.shape[2] - crop) // 2
                if min(y0, x0) < 0:
                    raise ValueError(f"image {img_id} is smaller than the {crop}px crop")
                lr = lr[:, y0 : y0 + crop, x0 : x0 + crop]
            x = _t(lr)
            idr = model.net.estimate(model.estimator_input(x, spec))
            rows.append(EmbeddingRow(img_id, spec.label(), tuple(idr.channel[0].double().tolist())))
    return EmbeddingDump(rows)


def separability_score(dump: EmbeddingDump) -> tuple[float, float]:
    """(silhouette, leave-one-out nearest-centroid accuracy) over the labels."""
    X = dump.matrix()
    labels = np.array(dump.labels())
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least two labels")
    if counts.min() < 2:
        raise ValueError(f"label {classes[counts.argmin()]!r} has a single row")
    for c in classes:
        pts = X[labels == c]
        if np.all(pts == pts[0]):
            raise ValueError(f"label {c!r} has zero intra-class spread")
    sil = float(silhouette_score(X, labels, metric="euclidean"))
    sums = {c: X[labels == c].sum(axis=0) for c in classes}
    n = dict(zip(classes, counts))
    correct = 0
    for x, y in zip(X, labels):
        best, best_d = None, math.inf
        for c in classes:
            cen = (sums[c] - x) / (n[c] - 1) if c == y else sums[c] / n[c]
            d = float(np.sum((x - cen) ** 2))
            if d < best_d:
                best, best_d = c, d
        correct += best == y
    return sil, correct / len(X)


# --- robustness to wrong IDRs ----------------------------------------------------------------


@dataclass
class PerturbResult:
    clean: list[float]
    perturbed: list[float]

    @property
    def clean_mean(self) -> float:
        return float(np.mean(self.clean))

    @property
    def perturbed_mean(self) -> float:
        return float(np.mean(self.perturbed))


@torch.no_grad()
def perturb_idr_eval(
    ckpt,
    dataset: Images,
    spec: DegradationSpec,
    noise_seed: int = 0,
    amplitude: float = 1.0,
    basis: Optional[PCABasis] = None,
    mode: str = "y_channel",
) -> PerturbResult:
    """PSNR with the estimated IDR, and with uniform[0, amplitude) noise added
    to the raw IDR before the converter."""
    model = ckpt if isinstance(ckpt, LoadedModel) else load_model(ckpt, basis)
    s = model.cfg.model.scale
    clean, perturbed = [], []
    for i, (_, hr) in enumerate(_named(dataset)):
        hr = crop_to_multiple(hr, s)
        lr = degrade(hr, spec, derive_seed(noise_seed, i, 0), model.cfg.degradation.kernel_size)
        x = _t(lr)
        raw_shape = model.net.estimator(model.estimator_input(x, spec)).shape
        gen = torch.Generator().manual_seed(derive_seed(noise_seed, i, 1))
        noise = torch.rand(raw_shape, generator=gen) * amplitude
        clean.append(psnr(super_resolve(model, lr, spec), hr, mode, s))
        perturbed.append(psnr(super_resolve(model, lr, spec, noise), hr, mode, s))
    return PerturbResult(clean, perturbed)


# --- benchmark grid --------------------------------------------------------------------------


@dataclass
class BenchCell:
    method: str
    spec: DegradationSpec
    dataset: str
    per_image: list[tuple[str, float]]

    @property
    def mean(self) -> float:
        return float(np.mean([p for _, p in self.per_image]))


@dataclass
class BenchReport:
    model_id: str
    config_hash: str
    cells: list[BenchCell] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "spec", "dataset", "image", "psnr"])
        for c in self.cells:
            for img_id, p in c.per_image:
                w.writerow([c.method, c.spec.label(), c.dataset, img_id, repr(p)])
            w.writerow([c.method, c.spec.label(), c.dataset, "mean", repr(c.mean)])
        return buf.getvalue()

    def digest(self) -> str:
        head = json.dumps({"model": self.model_id, "config": self.config_hash}, sort_keys=True)
        return hashlib.sha256((head + "\n" + self.to_csv()).encode()).hexdigest()

    def summary(self) -> str:
        """Methods as rows, degradation specs as columns, mean PSNR in dB."""
        specs = list(dict.fromkeys(c.spec.label() for c in self.cells))
        methods = list(dict.fromkeys(c.method for c in self.cells))
        means = {(c.method, c.spec.label()): c.mean for c in self.cells}
        width = max(12, *(len(s) for s in specs))
        lines = ["method".ljust(10) + "".join(s.rjust(width + 2) for s in specs)]
        for m in methods:
            lines.append(m.ljust(10) + "".join(f"{means[m, s]:.3f}".rjust(width + 2) for s in specs))
        return "\n".join(lines)


def run_benchmark(
    ckpt,
    dataset: Images,
    grid: Sequence[DegradationSpec],
    seed: int = 0,
    basis: Optional[PCABasis] = None,
    dataset_name: Optional[str] = None,
    mode: str = "y_channel",
) -> BenchReport:
    """PSNR of the model and of plain bicubic upsampling for every grid spec."""
    if not grid:
        raise ValueError("empty degradation grid")
    model = ckpt if isinstance(ckpt, LoadedModel) else load_model(ckpt, basis)
    if dataset_name is None:
        dataset_name = Path(dataset.root).name if isinstance(dataset, DatasetManifest) else "images"
    s = model.cfg.model.scale
    images = _named(dataset)
    report = BenchReport(model.model_id, model.cfg.digest())
    for j, spec in enumerate(grid):
        ours, base = [], []
        for i, (img_id, hr) in enumerate(images):
            hr = crop_to_multiple(hr, s)
            lr = degrade(hr, spec, derive_seed(seed, j, i), model.cfg.degradation.kernel_size)
            ours.append((img_id, psnr(super_resolve(model, lr, spec), hr, mode, s)))
            up = np.clip(bicubic_upsample(lr, s), 0.0, 1.0)
            base.append((img_id, psnr(up, hr, mode, s)))
        report.cells.append(BenchCell(model.role, spec, dataset_name, ours))
        report.cells.append(BenchCell("bicubic", spec, dataset_name, base))
    return report
