import math
from collections import deque

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from lightbsr.losses import (
    NegativeQueue,
    combine_distill,
    contrastive_loss,
    distill_losses,
    momentum_update,
    sr_loss,
)
from lightbsr.network import IDRPair


def unit(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(*shape, generator=g, dtype=dtype), dim=-1)


def loop_oracle(P, M, Q, tau):
    """Quadruple loop over (i, j, batch, queue) in plain Python floats."""
    P, M, Q = P.tolist(), M.tolist(), Q.tolist()
    B, D = len(P), len(P[0])
    dot = lambda a, b: sum(x * y for x, y in zip(a, b))
    total = 0.0
    for i in range(D):
        for j in range(D):
            if i == j:
                continue
            acc = 0.0
            for b in range(B):
                pos = math.exp(dot(P[b][i], M[b][j]) / tau)
                neg = sum(math.exp(dot(P[b][i], q) / tau) for q in Q)
                acc += -math.log(pos / (pos + neg))
            total += acc / B
    return total / (D * (D - 1))


def test_direct_formula_example():
    tau, N = 0.07, 8
    P = torch.tensor([[[1.0, 0.0], [1.0, 0.0]]], dtype=torch.float64)
    M = P.clone()
    Q = torch.tensor([[-1.0, 0.0]] * N, dtype=torch.float64)
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + N * math.exp(-1 / tau)))
    assert abs(contrastive_loss(P, M, Q, tau).item() - expected) < 1e-12


def test_matches_loop_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(100):
        B, D, N = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 33))
        dim = int(rng.integers(2, 9))
        P, M, Q = unit(B, D, dim, seed=3 * trial), unit(B, D, dim, seed=3 * trial + 1), unit(N, dim, seed=3 * trial + 2)
        tau = float(rng.uniform(0.05, 1.0))
        assert abs(contrastive_loss(P, M, Q, tau).item() - loop_oracle(P, M, Q, tau)) < 1e-6


def test_queue_permutation_invariance():
    P, M, Q = unit(4, 4, 16, seed=1), unit(4, 4, 16, seed=2), unit(16, 16, seed=3)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
    a = contrastive_loss(P, M, Q, 0.07)
    b = contrastive_loss(P, M, Q[perm], 0.07)
    assert torch.allclose(a, b, atol=1e-12)


def test_contrastive_errors():
    P = unit(2, 2, 8)
    with pytest.raises(ValueError):
        contrastive_loss(P, P, NegativeQueue(4, 8), 0.07)
    with pytest.raises(ValueError):
        contrastive_loss(unit(2, 1, 8), unit(2, 1, 8), unit(4, 8), 0.07)
    with pytest.raises(ValueError):
        contrastive_loss(P, unit(2, 3, 8), unit(4, 8), 0.07)


def test_projector_gradient_matches_finite_differences():
    torch.manual_seed(0)
    proj = torch.nn.Linear(6, 8).double()
    feats_p = torch.randn(2, 2, 6, dtype=torch.float64)
    M = unit(2, 2, 8, seed=5)
    Q = unit(4, 8, seed=6)

    def f(w, b):
        P = F.normalize(F.linear(feats_p, w, b), dim=-1)
        return contrastive_loss(P, M, Q, 0.07)

    assert torch.autograd.gradcheck(f, (proj.weight.detach().requires_grad_(), proj.bias.detach().requires_grad_()), eps=1e-6, atol=1e-6, rtol=1e-3)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 50), st.lists(st.integers(1, 40), min_size=1, max_size=500), st.integers(0, 2**16))
def test_queue_fifo_against_deque(capacity, sizes, seed):
    q = NegativeQueue(capacity, 4, dtype=torch.float64)
    ref = deque(maxlen=capacity)
    g = torch.Generator().manual_seed(seed)
    for n in sizes:
        v = F.normalize(torch.randn(n, 4, generator=g, dtype=torch.float64), dim=1)
        q.enqueue(v)
        ref.extend(v)
        assert len(q) == len(ref) <= capacity
    entries = q.entries()
    assert torch.allclose(entries, torch.stack(list(ref)), atol=1e-12, rtol=0)
    assert torch.allclose(entries.norm(dim=1), torch.ones(len(entries), dtype=torch.float64), atol=1e-6)


def test_queue_normalizes_and_round_trips():
    q = NegativeQueue(5, 3)
    q.enqueue(torch.tensor([[3.0, 0.0, 4.0]]))
    assert torch.allclose(q.entries(), torch.tensor([[0.6, 0.0, 0.8]]))
    q.enqueue(torch.randn(7, 3))
    back = NegativeQueue.from_state_dict(q.state_dict())
    assert torch.equal(back.entries(), q.entries())
    with pytest.raises(ValueError):
        NegativeQueue(0, 3)


def test_queue_ten_thousand_enqueues():
    q = NegativeQueue(97, 2, dtype=torch.float64)
    counter = 0
    rng = np.random.default_rng(1)
    for _ in range(10_000 // 10):
        n = int(rng.integers(1, 20))
        angles = torch.arange(counter, counter + n, dtype=torch.float64) * 1e-4
        q.enqueue(torch.stack([angles.cos(), angles.sin()], 1))
        counter += n
        assert len(q) <= 97
    got = torch.atan2(q.entries()[:, 1], q.entries()[:, 0]) / 1e-4
    expected = torch.arange(counter - 97, counter, dtype=torch.float64)
    assert torch.allclose(got, expected, atol=1e-6)


def test_momentum_update_cases():
    tp = [torch.ones(3, 2, dtype=torch.float64)]
    tm = [torch.zeros(3, 2, dtype=torch.float64)]
    momentum_update(tm, tp, 0.999)
    assert torch.allclose(tm[0], torch.full((3, 2), 0.001, dtype=torch.float64), atol=1e-12, rtol=0)
    a = [torch.randn(4, dtype=torch.float64)]
    before = a[0].clone()
    momentum_update(a, [torch.randn(4, dtype=torch.float64)], 1.0)
    assert torch.equal(a[0], before)
    b = [torch.randn(4, dtype=torch.float64)]
    momentum_update(a, b, 0.0)
    assert torch.equal(a[0], b[0])


def test_momentum_update_is_linear():
    g = torch.Generator().manual_seed(0)
    m = [torch.randn(5, 3, generator=g, dtype=torch.float64) for _ in range(3)]
    p = [torch.randn(5, 3, generator=g, dtype=torch.float64) for _ in range(3)]
    expect = [0.7 * a + 0.3 * b for a, b in zip(m, p)]
    momentum_update(m, p, 0.7)
    for a, e in zip(m, expect):
        assert (a - e).abs().max() < 1e-12


def test_momentum_update_errors():
    with pytest.raises(ValueError):
        momentum_update([torch.zeros(2)], [torch.zeros(3)], 0.5)
    with pytest.raises(ValueError):
        momentum_update([torch.zeros(2)], [torch.zeros(2)], 1.5)
    with pytest.raises(ValueError):
        momentum_update([torch.zeros(2)], [], 0.5)


def test_sr_loss():
    hr = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert sr_loss(hr, hr).item() == 0
    assert abs(sr_loss(hr + 0.1, hr).item() - 0.1) < 1e-12
    sr = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    naive = sum(abs(a - b) for a, b in zip(sr.flatten().tolist(), hr.flatten().tolist())) / sr.numel()
    assert abs(sr_loss(sr, hr).item() - naive) < 1e-7
    with pytest.raises(ValueError):
        sr_loss(sr, hr[..., :4])


def _pair(seed, b=2):
    g = torch.Generator().manual_seed(seed)
    return IDRPair(torch.randn(b, 8, 5, 5, generator=g, dtype=torch.float64), torch.randn(b, 48, generator=g, dtype=torch.float64))


def test_distill_zero_at_equality():
    t = _pair(0)
    losses = distill_losses(t, t, 0.1)
    assert all(v.item() == 0 for v in losses)


def test_distill_combination_and_kl_shift_invariance():
    assert combine_distill(1.0, 0.5, 2.0, 0.1) == pytest.approx(1.7, abs=1e-15)
    sp = torch.zeros(1, 8, 2, 2)
    a = IDRPair(sp, torch.zeros(1, 48))
    b = IDRPair(sp, torch.ones(1, 48))
    assert distill_losses(a, b).kl.item() == pytest.approx(0.0, abs=1e-7)


def test_distill_components_against_oracle():
    t, s = _pair(1), _pair(2)
    out = distill_losses(t, s, 0.1)
    assert out.l2.item() == pytest.approx(((t.spatial - s.spatial) ** 2).mean().item(), abs=1e-14)
    pt, ps = t.channel.softmax(-1).numpy(), s.channel.softmax(-1).numpy()
    kl = np.mean(np.sum(pt * np.log(pt / ps), axis=1))
    assert out.kl.item() == pytest.approx(kl, abs=1e-12)
    assert out.l1.item() == pytest.approx((t.channel - s.channel).abs().mean().item(), abs=1e-14)
    assert out.total.item() == out.l2.item() + out.kl.item() + 0.1 * out.l1.item()
    assert all(v.item() > 0 for v in out)


def test_distill_shape_mismatch():
    with pytest.raises(ValueError):
        distill_losses(_pair(0, 2), _pair(0, 3))
