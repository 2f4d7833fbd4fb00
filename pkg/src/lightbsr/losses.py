"""Training objectives: contrastive (InfoNCE over a momentum queue),
reconstruction L1, and the IDR distillation losses."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .network import IDRPair


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm vectors backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buf = torch.zeros(capacity, dim, dtype=dtype)
        self._ptr = 0  # next write position
        self._len = 0

    def __len__(self):
        return self._len

    @torch.no_grad()
    def enqueue(self, vectors: torch.Tensor) -> None:
        v = F.normalize(vectors.detach().reshape(-1, self.dim).to(self._buf.dtype), dim=1)
        if v.shape[0] >= self.capacity:
            v = v[-self.capacity :]
        n = v.shape[0]
        end = self._ptr + n
        if end <= self.capacity:
            self._buf[self._ptr : end] = v
        else:
            k = self.capacity - self._ptr
            self._buf[self._ptr :] = v[:k]
            self._buf[: n - k] = v[k:]
        self._ptr = end % self.capacity
        self._len = min(self.capacity, self._len + n)

    def entries(self) -> torch.Tensor:
        """Stored vectors, oldest first."""
        if self._len < self.capacity:
            return self._buf[: self._len].clone()
        return torch.cat([self._buf[self._ptr :], self._buf[: self._ptr]])

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "entries": self.entries()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "NegativeQueue":
        q = cls(state["capacity"], state["dim"], state["entries"].dtype)
        if len(state["entries"]):
            q.enqueue(state["entries"])
        return q


def contrastive_loss(P: torch.Tensor, M: torch.Tensor, Q, tau: float = 0.07) -> torch.Tensor:
    """Mean over ordered pairs i != j of the batch-averaged InfoNCE term.

    ``P`` and ``M`` are (B, D, dim) unit vectors from the principal and
    momentum branches; ``Q`` is a :class:`NegativeQueue` or an (N, dim) tensor.
    For pair (i, j) the positive logit is P_i . M_j and the negatives are
    P_i . q for every queue entry q.
    """
    if isinstance(Q, NegativeQueue):
        Q = Q.entries()
    if Q.shape[0] == 0:
        raise ValueError("negative queue is empty")
    if P.shape != M.shape:
        raise ValueError(f"P {tuple(P.shape)} and M {tuple(M.shape)} differ")
    B, D, _ = P.shape
    if D < 2:
        raise ValueError("need D >= 2 positives per set")
    Q = Q.to(P.dtype)
    pos = torch.einsum("bic,bjc->bij", P, M) / tau
    neg = torch.logsumexp(torch.einsum("bic,nc->bin", P, Q) / tau, dim=-1)
    terms = torch.logaddexp(pos, neg[:, :, None]) - pos  # -log softmax of the positive
    off = ~torch.eye(D, dtype=torch.bool, device=P.device)
    return terms[:, off].mean(dim=0).sum() / (D * (D - 1))


def _tensors(obj) -> list[torch.Tensor]:
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    if isinstance(obj, dict):
        return list(obj.values())
    return list(obj)


@torch.no_grad()
def momentum_update(theta_m, theta_p, alpha: float):
    """In place: theta_m <- alpha * theta_m + (1 - alpha) * theta_p."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    tm, tp = _tensors(theta_m), _tensors(theta_p)
    if len(tm) != len(tp):
        raise ValueError("parameter sets have different lengths")
    for a, b in zip(tm, tp):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    for a, b in zip(tm, tp):
        a.mul_(alpha).add_(b.to(a.dtype), alpha=1.0 - alpha)
    return theta_m


def sr_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    if sr.shape != hr.shape:
        raise ValueError(f"SR {tuple(sr.shape)} and HR {tuple(hr.shape)} differ")
    return (sr - hr).abs().mean()


class DistillLosses(NamedTuple):
    l2: torch.Tensor
    kl: torch.Tensor
    l1: torch.Tensor
    total: torch.Tensor


def combine_distill(l2, kl, l1, beta: float = 0.1):
    return l2 + kl + beta * l1


def distill_losses(teacher: IDRPair, student: IDRPair, beta: float = 0.1) -> DistillLosses:
    """Spatial MSE, forward KL of softmaxed channel IDRs (teacher as
    reference, batch mean), channel L1, and their weighted sum."""
    ts, tc = teacher
    ss, sc = student
    if ts.shape != ss.shape or tc.shape != sc.shape:
        raise ValueError("teacher and student IDR shapes differ")
    l2 = (ts - ss).pow(2).mean()
    log_pt = F.log_softmax(tc, dim=-1)
    log_ps = F.log_softmax(sc, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(-1).mean().clamp_min(0.0)
    l1 = (tc - sc).abs().mean()
    return DistillLosses(l2, kl, l1, combine_distill(l2, kl, l1, beta))
