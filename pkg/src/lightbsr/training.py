"""Two-stage teacher training (contrastive + degradation prior) and
two-stage student training (IDR distillation)."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointBundle, CheckpointError
from .config import RunConfig
from .data import Batch, DatasetError, DatasetManifest, TrainLoader, derive_seed
from .drp import PCABasis
from .losses import NegativeQueue, contrastive_loss, distill_losses, momentum_update, sr_loss
from .network import IDRPair, LightBSR

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "steps", "l_cl", "l_sr", "l_dl", "l2", "lkl", "l1", "lr", "wall_time"]
Dataset = Union[DatasetManifest, Sequence[np.ndarray]]


class Projector(nn.Module):
    """Two-layer FC head on the pooled raw IDR, unit-norm output."""

    def __init__(self, in_channels: int, dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, raw):
        z = self.fc2(F.leaky_relu(self.fc1(raw.mean(dim=(2, 3))), 0.1))
        return F.normalize(z, dim=1)


def build_network(cfg: RunConfig, role: str) -> LightBSR:
    in_ch = cfg.pca_dim + 6 if role == "teacher" and cfg.train.use_drp else 3
    mcfg = cfg.model.model_copy(update={"in_channels": in_ch})
    t = cfg.train
    return LightBSR(mcfg, t.use_spatial_idr, t.use_channel_idr, t.use_idr_cb)


class Teacher(nn.Module):
    """SR network plus the contrastive branches (principal and momentum)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.net = build_network(cfg, "teacher")
        self.uses_cl = cfg.train.use_cl
        if self.uses_cl:
            raw = self.net.estimator.out_channels
            self.projector = Projector(raw, cfg.train.projection_dim)
            self.momentum_estimator = copy.deepcopy(self.net.estimator)
            self.momentum_projector = copy.deepcopy(self.projector)
            for p in self.momentum_parameters():
                p.requires_grad_(False)

    def principal_parameters(self):
        return list(self.net.estimator.parameters()) + list(self.projector.parameters())

    def momentum_parameters(self):
        return list(self.momentum_estimator.parameters()) + list(self.momentum_projector.parameters())

    @torch.no_grad()
    def momentum_project(self, x: torch.Tensor) -> torch.Tensor:
        return self.momentum_projector(self.momentum_estimator(x))

    def update_momentum(self, alpha: float) -> None:
        momentum_update(self.momentum_parameters(), self.principal_parameters(), alpha)

    def extra_state(self) -> dict:
        if not self.uses_cl:
            return {}
        return {
            "projector": self.projector.state_dict(),
            "momentum_estimator": self.momentum_estimator.state_dict(),
            "momentum_projector": self.momentum_projector.state_dict(),
        }

    def load_extra(self, extra: dict) -> None:
        if self.uses_cl:
            self.projector.load_state_dict(extra["projector"])
            self.momentum_estimator.load_state_dict(extra["momentum_estimator"])
            self.momentum_projector.load_state_dict(extra["momentum_projector"])


def cosine_lr(epoch: int, epochs: int, start: float, end: float) -> float:
    """Cosine annealing from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if epochs <= 1:
        return start
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


class MetricsLog:
    """Per-epoch metrics, appended to a CSV file when a path is given."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path is not None:
            # a new run starts a fresh file; rows are appended as epochs finish
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def add(self, epoch: int, sums: dict, steps: int, lr: float, t0: float) -> dict:
        row = {"epoch": epoch, "steps": steps, "lr": lr}
        for k in ("l_cl", "l_sr", "l_dl", "l2", "lkl", "l1"):
            row[k] = sums[k] / steps if steps and k in sums else None
        self.rows.append(dict(row))
        row["wall_time"] = round(time.perf_counter() - t0, 3)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(["" if row[c] is None else repr(row[c]) for c in METRIC_COLUMNS])
        return row


def _images(dataset: Dataset) -> list[np.ndarray]:
    if isinstance(dataset, DatasetManifest):
        images = dataset.load_images()
    else:
        images = list(dataset)
    if not images:
        raise DatasetError("empty dataset")
    return images


def make_loader(cfg: RunConfig, dataset: Dataset, basis: Optional[PCABasis], stage_tag: int) -> TrainLoader:
    t, d = cfg.train, cfg.degradation
    return TrainLoader(
        _images(dataset),
        B=t.B,
        D=t.D,
        patch=t.patch,
        scale=cfg.model.scale,
        seed=derive_seed(cfg.seed, stage_tag),
        basis=basis,
        setting=cfg.setting,
        widths=d.widths,
        noise=d.noise,
        kernel_size=d.kernel_size,
        fixed=t.fixed_samples,
        sr_index=t.sr_patch_index,
        workers=t.workers,
    )


def _check_basis(cfg: RunConfig, basis: Optional[PCABasis], needs: bool) -> Optional[PCABasis]:
    if not needs:
        return None
    if basis is None:
        raise ValueError("a PCA basis is required when the degradation prior is enabled")
    if basis.t != cfg.pca_dim or basis.kernel_size != cfg.degradation.kernel_size:
        raise ValueError(
            f"basis (t={basis.t}, k={basis.kernel_size}) does not match config "
            f"(t={cfg.pca_dim}, k={cfg.degradation.kernel_size})"
        )
    return basis


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(-1, *x.shape[2:])


def _select(idr: IDRPair, B: int, D: int, k: int) -> IDRPair:
    s = idr.spatial.reshape(B, D, *idr.spatial.shape[1:])[:, k]
    c = idr.channel.reshape(B, D, -1)[:, k]
    return IDRPair(s, c)


def _bundle(cfg, role, stage, model, opt, extra, basis, step, epoch, history) -> CheckpointBundle:
    extra = dict(extra)
    extra["history"] = history
    return CheckpointBundle(
        role=role,
        stage=stage,
        config=cfg.model_dump(mode="json"),
        model=copy.deepcopy(model.state_dict()),
        optimizer=copy.deepcopy(opt.state_dict()) if opt is not None else None,
        extra=extra,
        basis_hash=basis.digest() if basis is not None else "",
        step=step,
        epoch=epoch,
    )


def _save(bundle: CheckpointBundle, out_dir) -> None:
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        bundle.save(out / f"{bundle.stage}.ckpt")


def _metrics(out_dir, stage) -> MetricsLog:
    return MetricsLog(Path(out_dir) / f"{stage}_metrics.csv" if out_dir is not None else None)


def _acc(sums: dict, **vals) -> None:
    for k, v in vals.items():
        sums[k] = sums.get(k, 0.0) + float(v)


def _same_setup(cfg: RunConfig, other: dict, keys=("model", "pca_dim")) -> bool:
    mine = cfg.model_dump(mode="json")
    if any(mine[k] != other.get(k) for k in keys):
        return False
    toggles = ("use_drp", "use_cl", "use_spatial_idr", "use_channel_idr", "use_idr_cb")
    return all(mine["train"][k] == other["train"][k] for k in toggles)


# --- teacher ----------------------------------------------------------------------


def teacher_cl_losses(teacher: Teacher, x: torch.Tensor, queue: NegativeQueue, tau: float):
    """Contrastive loss for a (B, D, C, p, p) batch; also returns M and the raw IDRs."""
    B, D = x.shape[:2]
    flat = _flat(x)
    M = teacher.momentum_project(flat).reshape(B, D, -1)
    raw = teacher.net.estimator(flat)
    P = teacher.projector(raw).reshape(B, D, -1)
    return contrastive_loss(P, M, queue, tau), M, raw


def teacher_sr_loss(teacher: Teacher, batch: Batch, raw: torch.Tensor, k: int) -> torch.Tensor:
    B, D = batch.patches.shape[:2]
    p = batch.patches.shape[-2:]
    raw_k = raw.reshape(B, D, *raw.shape[1:])[:, k]
    idr = teacher.net.converter(raw_k, p)
    sr = teacher.net(batch.patches[:, k], idr=idr)
    return sr_loss(sr, batch.hr)


def train_teacher_stage1(cfg: RunConfig, dataset: Dataset, basis: Optional[PCABasis], out_dir=None) -> CheckpointBundle:
    """Pre-train the estimator through the contrastive branches only."""
    t = cfg.train
    basis = _check_basis(cfg, basis, t.use_drp)
    torch.manual_seed(derive_seed(cfg.seed, 1))
    teacher = Teacher(cfg)
    metrics = _metrics(out_dir, "teacher_stage1")
    if not t.use_cl:
        log.info("contrastive learning disabled: teacher stage 1 has nothing to train")
        bundle = _bundle(cfg, "teacher", "teacher_stage1", teacher.net, None, {"skipped": True}, basis, 0, 0, [])
        _save(bundle, out_dir)
        return bundle
    loader = make_loader(cfg, dataset, basis, 1)
    queue = NegativeQueue(t.N, t.projection_dim)
    opt = torch.optim.Adam(teacher.principal_parameters(), lr=t.lr_stage1, betas=(0.9, 0.999))
    step = 0
    t0 = time.perf_counter()
    for epoch in range(t.epochs_stage1):
        sums, n = {}, 0
        for batch in loader.epoch_batches(epoch):
            x = batch.teacher_input()
            if len(queue) < x.shape[0] * x.shape[1]:
                # cold start: fill the queue from the momentum branch first
                queue.enqueue(teacher.momentum_project(_flat(x)))
                continue
            loss, M, _ = teacher_cl_losses(teacher, x, queue, t.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            teacher.update_momentum(t.alpha)
            queue.enqueue(M)
            step += 1
            n += 1
            _acc(sums, l_cl=loss.item())
        row = metrics.add(epoch, sums, n, t.lr_stage1, t0)
        log.info("teacher stage1 epoch %d: %s", epoch, row)
    extra = teacher.extra_state()
    extra["queue"] = queue.state_dict()
    bundle = _bundle(cfg, "teacher", "teacher_stage1", teacher.net, opt, extra, basis, step, t.epochs_stage1, metrics.rows)
    _save(bundle, out_dir)
    return bundle


def load_teacher(bundle: CheckpointBundle, cfg: Optional[RunConfig] = None) -> tuple[Teacher, Optional[NegativeQueue]]:
    if bundle.role != "teacher":
        raise CheckpointError(f"expected a teacher checkpoint, got {bundle.role}")
    cfg = cfg or RunConfig.model_validate(bundle.config)
    teacher = Teacher(cfg)
    teacher.net.load_state_dict(bundle.model)
    queue = None
    if teacher.uses_cl and "projector" in bundle.extra:
        teacher.load_extra(bundle.extra)
        queue = NegativeQueue.from_state_dict(bundle.extra["queue"])
    return teacher, queue


def train_teacher_stage2(
    cfg: RunConfig, dataset: Dataset, basis: Optional[PCABasis], stage1: CheckpointBundle, out_dir=None
) -> CheckpointBundle:
    """Fine-tune the whole teacher with L_SR + L_CL under cosine annealing."""
    t = cfg.train
    if stage1 is None:
        raise CheckpointError("teacher stage 2 needs the teacher stage 1 checkpoint")
    if stage1.stage != "teacher_stage1" or not _same_setup(cfg, stage1.config):
        raise CheckpointError("incompatible checkpoint: expected a teacher_stage1 bundle with the same model setup")
    basis = _check_basis(cfg, basis, t.use_drp)
    if basis is not None and stage1.basis_hash and basis.digest() != stage1.basis_hash:
        raise CheckpointError("PCA basis differs from the one used in stage 1")
    torch.manual_seed(derive_seed(cfg.seed, 2))
    teacher, queue = load_teacher(stage1, cfg)
    if t.use_cl and queue is None:
        queue = NegativeQueue(t.N, t.projection_dim)
    params = list(teacher.net.parameters()) + (list(teacher.projector.parameters()) if t.use_cl else [])
    opt = torch.optim.Adam(params, lr=t.lr_stage2_start, betas=(0.9, 0.999))
    loader = make_loader(cfg, dataset, basis, 2)
    metrics = _metrics(out_dir, "teacher_stage2")
    step = 0
    t0 = time.perf_counter()
    for epoch in range(t.epochs_stage2):
        lr = cosine_lr(epoch, t.epochs_stage2, t.lr_stage2_start, t.lr_stage2_end)
        _set_lr(opt, lr)
        sums, n = {}, 0
        for batch in loader.epoch_batches(epoch):
            x = batch.teacher_input()
            if t.use_cl:
                if len(queue) < x.shape[0] * x.shape[1]:
                    queue.enqueue(teacher.momentum_project(_flat(x)))
                    continue
                l_cl, M, raw = teacher_cl_losses(teacher, x, queue, t.tau)
            else:
                raw = teacher.net.estimator(_flat(x))
                l_cl = torch.zeros(())
            l_sr = teacher_sr_loss(teacher, batch, raw, t.sr_patch_index)
            loss = l_sr + t.cl_weight * l_cl
            opt.zero_grad()
            loss.backward()
            opt.step()
            if t.use_cl and t.stage2_momentum:
                teacher.update_momentum(t.alpha)
                queue.enqueue(M)
            step += 1
            n += 1
            _acc(sums, l_cl=l_cl.item(), l_sr=l_sr.item())
        row = metrics.add(epoch, sums, n, lr, t0)
        log.info("teacher stage2 epoch %d: %s", epoch, row)
    extra = teacher.extra_state()
    if queue is not None:
        extra["queue"] = queue.state_dict()
    bundle = _bundle(cfg, "teacher", "teacher_stage2", teacher.net, opt, extra, basis, step, t.epochs_stage2, metrics.rows)
    _save(bundle, out_dir)
    return bundle


# --- student --------------------------------------------------------------------------


def frozen_teacher(bundle: CheckpointBundle) -> tuple[LightBSR, RunConfig]:
    """The teacher's estimator + converter, frozen, with the config it was trained under."""
    if bundle is None or bundle.role != "teacher":
        raise CheckpointError("a teacher checkpoint is required")
    keys = bundle.model.keys()
    if not any(k.startswith("estimator.") for k in keys) or not any(k.startswith("converter.") for k in keys):
        raise CheckpointError("teacher checkpoint lacks estimator/converter weights")
    tcfg = RunConfig.model_validate(bundle.config)
    net = build_network(tcfg, "teacher")
    net.load_state_dict(bundle.model)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, tcfg


def init_from(student: nn.Module, state: dict) -> list[str]:
    """Copy every tensor whose name and shape match; returns the copied names."""
    own = student.state_dict()
    copied = []
    for k, v in state.items():
        if k in own and own[k].shape == v.shape:
            own[k] = v.clone()
            copied.append(k)
    student.load_state_dict(own)
    return copied


def student_distill(student: LightBSR, teacher: LightBSR, batch: Batch, beta: float):
    """L_DL between teacher IDRs (prior-augmented input) and student IDRs (LR only)."""
    with torch.no_grad():
        T = teacher.estimate(_flat(batch.teacher_input()))
    raw = student.estimator(_flat(batch.patches))
    S = student.converter(raw, batch.patches.shape[-2:])
    return distill_losses(T, S, beta), S


def _teacher_basis(tcfg: RunConfig, basis: Optional[PCABasis], bundle: CheckpointBundle) -> Optional[PCABasis]:
    if not tcfg.train.use_drp:
        return None
    basis = _check_basis(tcfg, basis, True)
    if bundle.basis_hash and basis.digest() != bundle.basis_hash:
        raise CheckpointError("PCA basis differs from the one the teacher was trained with")
    return basis


def train_student_stage1(
    cfg: RunConfig, dataset: Dataset, teacher_ckpt: CheckpointBundle, basis: Optional[PCABasis] = None, out_dir=None
) -> CheckpointBundle:
    """Align the student's estimator + converter with the frozen teacher's."""
    t = cfg.train
    teacher, tcfg = frozen_teacher(teacher_ckpt)
    basis = _teacher_basis(tcfg, basis, teacher_ckpt)
    torch.manual_seed(derive_seed(cfg.seed, 3))
    student = build_network(cfg, "student")
    init_from(student, teacher_ckpt.model)
    params = student.idr_parameters()
    opt = torch.optim.Adam(params, lr=t.lr_stage1, betas=(0.9, 0.999))
    loader = make_loader(cfg, dataset, basis, 3)
    metrics = _metrics(out_dir, "student_stage1")
    step = 0
    t0 = time.perf_counter()
    for epoch in range(t.epochs_stage1):
        sums, n = {}, 0
        for batch in loader.epoch_batches(epoch):
            dl, _ = student_distill(student, teacher, batch, t.beta)
            opt.zero_grad()
            dl.total.backward()
            opt.step()
            step += 1
            n += 1
            _acc(sums, l_dl=dl.total.item(), l2=dl.l2.item(), lkl=dl.kl.item(), l1=dl.l1.item())
        row = metrics.add(epoch, sums, n, t.lr_stage1, t0)
        log.info("student stage1 epoch %d: %s", epoch, row)
    bundle = _bundle(cfg, "student", "student_stage1", student, opt, {}, basis, step, t.epochs_stage1, metrics.rows)
    _save(bundle, out_dir)
    return bundle


def load_student(bundle: CheckpointBundle, cfg: Optional[RunConfig] = None) -> LightBSR:
    if bundle.role != "student":
        raise CheckpointError(f"expected a student checkpoint, got {bundle.role}")
    cfg = cfg or RunConfig.model_validate(bundle.config)
    net = build_network(cfg, "student")
    net.load_state_dict(bundle.model)
    return net


def student_stage2_losses(student: LightBSR, teacher: LightBSR, batch: Batch, cfg: RunConfig):
    t = cfg.train
    B, D = batch.patches.shape[:2]
    dl, S = student_distill(student, teacher, batch, t.beta)
    idr = _select(S, B, D, t.sr_patch_index)
    sr = student(batch.patches[:, t.sr_patch_index], idr=idr)
    return sr_loss(sr, batch.hr), dl, sr


def train_student_stage2(
    cfg: RunConfig,
    dataset: Dataset,
    teacher_ckpt: CheckpointBundle,
    stage1: CheckpointBundle,
    basis: Optional[PCABasis] = None,
    out_dir=None,
) -> CheckpointBundle:
    """Train the whole student on L_SR + L_DL under cosine annealing."""
    t = cfg.train
    if stage1 is None:
        raise CheckpointError("student stage 2 needs the student stage 1 checkpoint")
    if stage1.stage != "student_stage1" or not _same_setup(cfg, stage1.config):
        raise CheckpointError("incompatible checkpoint: expected a student_stage1 bundle with the same model setup")
    teacher, tcfg = frozen_teacher(teacher_ckpt)
    basis = _teacher_basis(tcfg, basis, teacher_ckpt)
    torch.manual_seed(derive_seed(cfg.seed, 4))
    student = load_student(stage1, cfg)
    opt = torch.optim.Adam(student.parameters(), lr=t.lr_stage2_start, betas=(0.9, 0.999))
    loader = make_loader(cfg, dataset, basis, 4)
    metrics = _metrics(out_dir, "student_stage2")
    out_shape = None
    step = 0
    t0 = time.perf_counter()
    for epoch in range(t.epochs_stage2):
        lr = cosine_lr(epoch, t.epochs_stage2, t.lr_stage2_start, t.lr_stage2_end)
        _set_lr(opt, lr)
        sums, n = {}, 0
        for batch in loader.epoch_batches(epoch):
            l_sr, dl, sr = student_stage2_losses(student, teacher, batch, cfg)
            if sr.shape != batch.hr.shape:
                raise RuntimeError(f"SR output {tuple(sr.shape)} does not match HR {tuple(batch.hr.shape)}")
            out_shape = tuple(sr.shape)
            loss = l_sr + t.dl_weight * dl.total
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n += 1
            _acc(sums, l_sr=l_sr.item(), l_dl=dl.total.item(), l2=dl.l2.item(), lkl=dl.kl.item(), l1=dl.l1.item())
        row = metrics.add(epoch, sums, n, lr, t0)
        log.info("student stage2 epoch %d: %s (sr shape %s)", epoch, row, out_shape)
    bundle = _bundle(cfg, "student", "student_stage2", student, opt, {}, basis, step, t.epochs_stage2, metrics.rows)
    _save(bundle, out_dir)
    return bundle


def describe_branches(cfg: RunConfig) -> dict:
    """Structural summary of which inputs and branches a configuration activates,
    read off freshly built teacher and student models."""
    torch.manual_seed(0)
    teacher = Teacher(cfg)
    student = build_network(cfg, "student")
    blocks = [m for m in student.modules() if m.__class__.__name__ == "AdaptBlock"]
    return {
        "teacher_in_channels": teacher.net.estimator.in_channels,
        "student_in_channels": student.estimator.in_channels,
        "uses_drp": teacher.net.estimator.in_channels == cfg.pca_dim + 6,
        "uses_cl": hasattr(teacher, "projector") and hasattr(teacher, "momentum_estimator"),
        "spatial_modulation": all(hasattr(b, "sg1") for b in blocks),
        "channel_modulation": all(hasattr(b, "cg1") for b in blocks),
        "idr_correction": student.body.correctors is not None,
    }
