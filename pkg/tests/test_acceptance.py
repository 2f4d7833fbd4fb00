"""Acceptance suite: one test per criterion, each reporting PASS/FAIL in the
terminal summary.  Run alone with ``pytest tests/test_acceptance.py -v``."""
import csv
import hashlib
import io
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from helpers import ACCEPTANCE_RESULTS, TINY_MODEL, synthetic_image, tiny_config
from lightbsr import training as T
from lightbsr.cli import main as cli
from lightbsr.config import ABLATION_PRESETS, ModelConfig, RunConfig, apply_ablation
from lightbsr.data import save_image
from lightbsr.degradation import (
    DegradationSpec,
    add_noise,
    bicubic_downsample,
    bicubic_upsample,
    degrade,
    make_anisotropic_kernel,
    make_isotropic_kernel,
    sample_spec,
)
from lightbsr.drp import build_drp, fit_setting_basis
from lightbsr.evaluation import export_embeddings, load_model, perturb_idr_eval, psnr, separability_score
from lightbsr.losses import contrastive_loss, distill_losses, momentum_update
from lightbsr.network import AdaptModule, IDRPair, LightBSR, count_flops, count_parameters, zero_weights

TARGET_PARAMS = 3.09e6
TARGET_GFLOPS = 206.16


@contextmanager
def criterion(number: int, budget_s: float | None = None):
    """Record PASS/FAIL for ``number``; ``info`` entries become the detail text."""
    info: dict = {}
    t0 = time.perf_counter()

    def detail():
        return ", ".join(f"{k}={v}" for k, v in info.items())

    try:
        yield info
        elapsed = time.perf_counter() - t0
        info["runtime"] = f"{elapsed:.1f}s"
        if budget_s is not None:
            assert elapsed < budget_s, f"runtime {elapsed:.1f}s over the {budget_s:.0f}s budget"
    except BaseException as exc:
        ACCEPTANCE_RESULTS[number] = (False, f"{detail()} -> {type(exc).__name__}: {str(exc).splitlines()[0][:160] if str(exc) else ''}")
        print(f"criterion {number}: FAIL")
        raise
    ACCEPTANCE_RESULTS[number] = (True, detail())
    print(f"criterion {number}: PASS {detail()}")


# 1 ---------------------------------------------------------------------------------------


def test_01_kernel_suite():
    with criterion(1, 30) as info:
        rng = np.random.default_rng(1)
        worst = {"norm": 0.0, "iso": 0.0, "period": 0.0}
        for setting in ("setting1", "setting2"):
            for _ in range(1000):
                spec = sample_spec(rng, setting)
                k = spec.kernel().weights
                worst["norm"] = max(worst["norm"], abs(k.sum() - 1))
                assert np.all(k >= 0)
                if setting == "setting2":
                    same = make_anisotropic_kernel(spec.eig1, spec.eig1, spec.angle).weights
                    iso = make_isotropic_kernel(math.sqrt(spec.eig1)).weights
                    worst["iso"] = max(worst["iso"], float(np.abs(same - iso).max()))
                    shifted = make_anisotropic_kernel(spec.eig1, spec.eig2, spec.angle + math.pi).weights
                    worst["period"] = max(worst["period"], float(np.abs(shifted - k).max()))
        info.update({f"max_{k}_err": f"{v:.1e}" for k, v in worst.items()})
        assert worst["norm"] < 1e-8
        assert worst["iso"] < 1e-10
        assert worst["period"] < 1e-10


# 2 ---------------------------------------------------------------------------------------


def test_02_degradation_oracle():
    with criterion(2, 120) as info:
        rng = np.random.default_rng(2)
        for s in (2, 3, 4):
            hr = rng.random((3, 12 * s, 10 * s))
            lr = degrade(hr, DegradationSpec(width=0.0, scale=s), seed=0)
            assert np.array_equal(lr, bicubic_downsample(hr, s))
        info["delta_exact"] = True
        sigma = 25.0
        trials, hits_mean, hits_var = 20, 0, 0
        img = np.full((3, 96, 96), 0.5)
        for t in range(trials):
            n = (add_noise(img, sigma, seed=t) - img).ravel()
            m, sd = n.size, sigma / 255
            hits_mean += abs(n.mean()) < 3 * sd / math.sqrt(m)
            hits_var += abs(n.var(ddof=1) - sd**2) < 3 * sd**2 * math.sqrt(2 / (m - 1))
        info["mean_within_3sigma"] = f"{hits_mean}/{trials}"
        info["var_within_3sigma"] = f"{hits_var}/{trials}"
        # P(|z| > 3) = 0.27%: at most one miss among 20 independent draws
        assert hits_mean >= trials - 1 and hits_var >= trials - 1


# 3 ---------------------------------------------------------------------------------------


def test_03_drp_contract():
    with criterion(3) as info:
        basis = fit_setting_basis("setting2", n=2000, t=15, seed=0)
        spec = DegradationSpec("anisotropic", eig1=2.0, eig2=0.6, angle=0.4, noise_sigma=7.5)
        drp = build_drp(spec.kernel(), spec.noise_sigma, basis, 24, 17)
        info["shape"] = tuple(drp.shape)
        assert drp.shape == (18, 24, 17)
        assert np.all(drp == drp[:, :1, :1])
        assert np.all(drp[15:] == 7.5)


# 4 ---------------------------------------------------------------------------------------


def test_04_model_structure():
    with criterion(4) as info:
        torch.manual_seed(0)
        net = LightBSR(ModelConfig())
        params = count_parameters(net)
        gflops = count_flops(net, 256, 256) / 1e9
        info["params"] = f"{params / 1e6:.3f}M ({100 * (params / TARGET_PARAMS - 1):+.1f}%)"
        info["gflops"] = f"{gflops:.2f} ({100 * (gflops / TARGET_GFLOPS - 1):+.1f}%)"
        assert abs(params / TARGET_PARAMS - 1) <= 0.10
        assert abs(gflops / TARGET_GFLOPS - 1) <= 0.10
        rng = np.random.default_rng(4)
        with torch.no_grad():
            for _ in range(10):
                h, w = (int(v) for v in rng.integers(8, 33, size=2))
                assert net(torch.rand(1, 3, h, w)).shape == (1, 3, 4 * h, 4 * w)
        info["shapes"] = "10/10"


# 5 ---------------------------------------------------------------------------------------


def test_05_zero_weight_identity():
    with criterion(5) as info:
        cfg = ModelConfig()
        m = AdaptModule(cfg)
        zero_weights(m)
        f = torch.randn(2, cfg.trunk_width, 12, 10)
        idr = IDRPair(torch.randn(2, cfg.spatial_idr, 12, 10), torch.randn(2, cfg.channel_idr))
        dev = (m(f, idr) - f).abs().max().item()
        info["max_abs_dev"] = dev
        assert dev == 0


# 6 ---------------------------------------------------------------------------------------


def _loop_contrastive(P, M, Q, tau):
    B, D, _ = P.shape
    total = 0.0
    for i in range(D):
        for j in range(D):
            if i != j:
                acc = 0.0
                for b in range(B):
                    pos = math.exp(float(P[b, i] @ M[b, j]) / tau)
                    neg = sum(math.exp(float(P[b, i] @ q) / tau) for q in Q)
                    acc -= math.log(pos / (pos + neg))
                total += acc / B
    return total / (D * (D - 1))


def test_06_loss_oracles():
    with criterion(6) as info:
        g = torch.Generator().manual_seed(6)
        rng = np.random.default_rng(6)
        worst = 0.0
        norm = torch.nn.functional.normalize
        for _ in range(100):
            B, D, N, dim = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 33)), int(rng.integers(2, 17))
            P = norm(torch.randn(B, D, dim, generator=g, dtype=torch.float64), dim=-1)
            M = norm(torch.randn(B, D, dim, generator=g, dtype=torch.float64), dim=-1)
            Q = norm(torch.randn(N, dim, generator=g, dtype=torch.float64), dim=-1)
            worst = max(worst, abs(contrastive_loss(P, M, Q, 0.07).item() - _loop_contrastive(P, M, Q, 0.07)))
        info["contrastive_max_err"] = f"{worst:.1e}"
        assert worst < 1e-6
        tm, tp = [torch.zeros(4, 3, dtype=torch.float64)], [torch.ones(4, 3, dtype=torch.float64)]
        momentum_update(tm, tp, 0.999)
        merr = (tm[0] - 0.001).abs().max().item()
        info["momentum_err"] = f"{merr:.1e}"
        assert merr < 1e-12
        t = IDRPair(torch.randn(2, 8, 6, 6, generator=g), torch.randn(2, 48, generator=g))
        s = IDRPair(torch.randn(2, 8, 6, 6, generator=g), torch.randn(2, 48, generator=g))
        assert all(v.item() == 0 for v in distill_losses(t, t, 0.1))
        d = distill_losses(t, s, 0.1)
        assert d.total.item() == (d.l2 + d.kl + 0.1 * d.l1).item()
        info["distill"] = "zero at equality, L_DL = L2 + Lkl + 0.1 L1"


# 7 ---------------------------------------------------------------------------------------


def test_07_gradient_check():
    with criterion(7, 300) as info:
        torch.manual_seed(7)
        cfg = ModelConfig(trunk_width=8, n_groups=1, n_blocks=2, estimator_widths=(8, 8, 8, 8, 8, 16))
        net = LightBSR(cfg).double()
        with torch.no_grad():
            for p in net.parameters():
                p.normal_(0, 0.3)  # no zero-initialized gates, every path carries gradient
        lr = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        with torch.no_grad():
            target = net(lr) + 0.5  # keep the L1 residual away from its kink

        def loss():
            return (net(lr) - target).abs().mean()

        params = [p for p in net.parameters()]
        net.zero_grad()
        loss().backward()
        rng = np.random.default_rng(7)
        sizes = np.array([p.numel() for p in params])
        flat_idx = rng.choice(sizes.sum(), size=50, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        eps, worst = 1e-3, 0.0
        for fi in flat_idx:
            k = int(np.searchsorted(offsets, fi, side="right") - 1)
            p, j = params[k], int(fi - offsets[k])
            analytic = p.grad.view(-1)[j].item()
            with torch.no_grad():
                old = p.view(-1)[j].item()
                p.view(-1)[j] = old + eps
                up = loss().item()
                p.view(-1)[j] = old - eps
                down = loss().item()
                p.view(-1)[j] = old
            numeric = (up - down) / (2 * eps)
            scale = max(abs(analytic), abs(numeric))
            rel = abs(analytic - numeric) / scale if scale > 1e-8 else abs(analytic - numeric)
            worst = max(worst, rel)
        info["params_checked"] = 50
        info["max_rel_err"] = f"{worst:.1e}"
        assert worst < 1e-3


# 8 ---------------------------------------------------------------------------------------


def test_08_discriminability():
    with criterion(8, 900) as info:
        torch.manual_seed(0)
        cfg = RunConfig.model_validate(
            {
                "seed": 0,
                "train": {"B": 8, "D": 4, "N": 512, "epochs_stage1": 75, "patch": 32},
                "degradation": {"widths": [0.8, 3.2]},
            }
        )
        crops = [synthetic_image(i, 192) for i in range(16)]
        basis = fit_setting_basis("setting1", n=2000, t=15, seed=0)
        bundle = T.train_teacher_stage1(cfg, crops, basis)
        info["steps"] = bundle.step
        assert bundle.step <= 2000
        specs = [DegradationSpec(width=0.8), DegradationSpec(width=3.2)]
        dump = export_embeddings(load_model(bundle, basis), crops, specs, seed=0)
        assert dump.dim == 48
        sil, acc = separability_score(dump)
        info["silhouette"] = f"{sil:.3f}"
        info["probe_accuracy"] = f"{acc:.3f}"
        assert acc >= 0.95 and sil > 0.3


# 9 ---------------------------------------------------------------------------------------


def test_09_distillation_convergence():
    with criterion(9, 300) as info:
        cfg = tiny_config(train={"B": 2, "D": 4, "epochs_stage1": 200, "patch": 24, "fixed_samples": True, "use_cl": False})
        imgs = [synthetic_image(i, 128) for i in range(2)]
        basis = fit_setting_basis("setting1", n=500)
        teacher = T.train_teacher_stage1(cfg, imgs, basis)  # toy teacher: initial weights, frozen
        student = T.train_student_stage1(cfg, imgs, teacher, basis)
        assert student.step == 200
        frozen, _ = T.frozen_teacher(teacher)
        batch = T.make_loader(cfg, imgs, basis, 3).batch(0, 0)
        assert batch.patches.shape[:2] == (2, 4)  # the fixed 8-patch set
        with torch.no_grad():
            final = T.student_distill(T.load_student(student), frozen, batch, cfg.train.beta)[0].total.item()
        first = student.extra["history"][0]["l_dl"]
        drop = 1 - final / first
        info["l_dl_step0"] = f"{first:.3e}"
        info["l_dl_final"] = f"{final:.3e}"
        info["reduction"] = f"{100 * drop:.1f}%"
        assert drop >= 0.80


# 10 / 12 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_pipeline():
    t0 = time.perf_counter()
    train = {"B": 2, "D": 2, "N": 64, "epochs_stage1": 50, "epochs_stage2": 50, "patch": 32, "fixed_samples": True}
    cfg = tiny_config(train=train)
    long = tiny_config(train={**train, "epochs_stage2": 2000})
    imgs = [synthetic_image(i, 160) for i in range(2)]
    basis = fit_setting_basis("setting1", n=500)
    t1 = T.train_teacher_stage1(cfg, imgs, basis)
    t2 = T.train_teacher_stage2(cfg, imgs, basis, t1)
    s1 = T.train_student_stage1(cfg, imgs, t2, basis)
    s2 = T.train_student_stage2(long, imgs, t2, s1, basis)
    return {"cfg": long, "imgs": imgs, "basis": basis, "student": s2, "seconds": time.perf_counter() - t0}


def test_10_end_to_end_overfit(overfit_pipeline):
    with criterion(10, 1200) as info:
        run = overfit_pipeline
        cfg, s2 = run["cfg"], run["student"]
        info["student_stage2_steps"] = s2.step
        assert s2.step == 2000
        net = T.load_student(s2)
        batch = T.make_loader(cfg, run["imgs"], run["basis"], 4).batch(0, 0)  # the training crops
        k = cfg.train.sr_patch_index
        with torch.no_grad():
            sr = net(batch.patches[:, k]).clamp(0, 1).double().numpy()
        ours, base = [], []
        for i in range(batch.hr.shape[0]):
            hr = batch.hr[i].double().numpy()
            up = np.clip(bicubic_upsample(batch.patches[i, k].double().numpy(), 4), 0, 1)
            ours.append(psnr(sr[i], hr))
            base.append(psnr(up, hr))
        gain = float(np.mean(ours) - np.mean(base))
        info["psnr_model"] = f"{np.mean(ours):.2f}dB"
        info["psnr_bicubic"] = f"{np.mean(base):.2f}dB"
        info["gain"] = f"{gain:.2f}dB"
        info["pipeline_time"] = f"{run['seconds']:.0f}s"
        assert run["seconds"] < 1200
        assert gain >= 1.0


# 11 --------------------------------------------------------------------------------------


def test_11_ablation_plumbing():
    with criterion(11) as info:
        base = tiny_config()
        for name, toggles in ABLATION_PRESETS.items():
            cfg = apply_ablation(base, name)
            got = T.describe_branches(cfg)
            t = cfg.train
            assert got["teacher_in_channels"] == (cfg.pca_dim + 6 if t.use_drp else 3)
            assert got["student_in_channels"] == 3
            assert got["uses_drp"] == t.use_drp and got["uses_cl"] == t.use_cl
            assert got["spatial_modulation"] == t.use_spatial_idr
            assert got["channel_modulation"] == t.use_channel_idr
            assert got["idr_correction"] == t.use_idr_cb
            for k, v in toggles.items():
                assert getattr(t, k) == v
            # every variant runs forward
            teacher = T.Teacher(cfg)
            x = torch.rand(1, 3, 12, 12)
            est = torch.cat([x, torch.rand(1, cfg.pca_dim + 3, 12, 12)], 1) if t.use_drp else x
            assert teacher.net(x, est_input=est).shape == (1, 3, 48, 48)
        info["variants"] = ",".join(ABLATION_PRESETS)


# 12 --------------------------------------------------------------------------------------


def test_12_robustness_harness(overfit_pipeline):
    with criterion(12) as info:
        student = overfit_pipeline["student"]
        bench = [synthetic_image(200 + i, 128) for i in range(5)]
        spec = DegradationSpec(width=2.0)
        zero = perturb_idr_eval(student, bench, spec, noise_seed=0, amplitude=0.0)
        assert zero.clean == zero.perturbed
        res = perturb_idr_eval(student, bench, spec, noise_seed=0, amplitude=1.0)
        info["clean"] = f"{res.clean_mean:.3f}dB"
        info["perturbed"] = f"{res.perturbed_mean:.3f}dB"
        assert res.perturbed_mean <= res.clean_mean


# 13 --------------------------------------------------------------------------------------


def _digest(path: Path) -> str:
    if path.name.endswith("_metrics.csv"):
        rows = list(csv.reader(io.StringIO(path.read_text())))
        keep = [i for i, c in enumerate(rows[0]) if c != "wall_time"]
        text = "\n".join(",".join(r[i] for i in keep) for r in rows)
        return hashlib.sha256(text.encode()).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_everything(ws: Path) -> dict:
    out = ws / "out"
    cfg_args = ["--config", str(ws / "cfg.yaml"), "--dataset", str(ws / "hr"), "--output", str(out / "run"), "--basis", str(out / "basis.txt")]
    assert cli(["fit-pca", "--n", "200", "--seed", "3", "--output", str(out / "basis.txt")]) == 0
    assert cli(["degrade", str(ws / "hr"), str(out / "lr"), "--width", "1.5", "--noise", "5", "--seed", "4"]) == 0
    for role in ("teacher", "student"):
        for stage in ("stage1", "stage2"):
            assert cli(["train", role, stage, *cfg_args]) == 0
    ev = ["eval", "--checkpoint", str(out / "run" / "student_stage2.ckpt"), "--dataset", str(ws / "hr"), "--output", str(out / "eval"), "--seed", "1"]
    assert cli(ev + ["--grid", "widths=1.2,2.4", "--export-idr", "widths=0.8,3.2", "--perturb-idr", "widths=2.0"]) == 0
    return {str(p.relative_to(out)): _digest(p) for p in sorted(out.rglob("*")) if p.is_file()}


def test_13_determinism(tmp_path):
    with criterion(13) as info:
        ws = tmp_path
        (ws / "hr").mkdir()
        for i in range(3):
            save_image(ws / "hr" / f"img{i}.png", synthetic_image(i, 80))
        cfg = {
            "seed": 11,
            "model": TINY_MODEL,
            "train": {"B": 2, "D": 2, "N": 16, "epochs_stage1": 2, "epochs_stage2": 2, "patch": 16, "workers": 2},
            "degradation": {"widths": [0.8, 3.2]},
        }
        (ws / "cfg.yaml").write_text(yaml.safe_dump(cfg))
        first = _run_everything(ws)
        second = _run_everything(ws)
        info["artifacts"] = len(first)
        differing = sorted(k for k in first if first[k] != second.get(k))
        assert set(first) == set(second)
        assert not differing, f"differing artifacts: {differing}"
        assert any(k.endswith(".ckpt") for k in first) and "eval/benchmark.csv" in first


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
