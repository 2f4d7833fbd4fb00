"""Command-line entry point: ``lightbsr {degrade,fit-pca,train,eval}``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml
from pydantic import ValidationError

from . import training
from .checkpoint import CheckpointBundle, CheckpointError
from .config import ABLATION_FLAGS, ABLATION_PRESETS, RunConfig, apply_ablation, dump_config, load_config
from .data import DatasetError, DatasetManifest, load_image, save_image, scan_dataset
from .degradation import KERNEL_SIZE, DegradationError, DegradationSpec, degrade
from .drp import PCABasis, fit_setting_basis
from .evaluation import EmbeddingDump, export_embeddings, load_model, perturb_idr_eval, run_benchmark, separability_score

log = logging.getLogger("lightbsr")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

CONFIG_HELP = (
    "run configuration as a YAML mapping with sections model, train, degradation and paths "
    "plus top-level setting, seed and pca_dim; unknown keys are rejected"
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- degrade -------------------------------------------------------------------------------


def cmd_degrade(args) -> int:
    spec = DegradationSpec(
        kind=args.kind,
        width=args.width,
        eig1=args.eig1,
        eig2=args.eig2,
        angle=args.angle,
        noise_sigma=args.noise,
        scale=args.scale,
    ).validate(args.setting)
    spec.kernel(args.kernel_size)  # surfaces kernel errors before any file is written
    src = Path(args.input)
    if src.is_dir():
        inputs = [(e.id, Path(src) / e.path) for e in scan_dataset(src).entries]
    elif src.is_file():
        inputs = [(src.stem, src)]
    else:
        raise FileNotFoundError(f"{src} does not exist")
    out = Path(args.output)
    for i, (name, path) in enumerate(inputs):
        seed = args.seed + i
        lr = degrade(load_image(path), spec, seed, args.kernel_size)
        target = out / f"{name}.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(target, lr)
        sidecar = {
            "source": str(path),
            "source_sha256": _sha256(path),
            "spec": spec.to_dict(),
            "kernel_size": args.kernel_size,
            "seed": seed,
            "setting": args.setting,
        }
        target.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        print(f"{target} {_sha256(target)}")
    return EXIT_OK


# --- fit-pca ---------------------------------------------------------------------------------


def cmd_fit_pca(args) -> int:
    if args.t >= args.kernel_size ** 2:
        raise ValueError(f"t={args.t} must be smaller than k*k={args.kernel_size ** 2}")
    if args.n < args.t + 1:
        raise ValueError(f"--n must be at least t+1={args.t + 1}")
    basis = fit_setting_basis(args.setting, n=args.n, t=args.t, seed=args.seed, size=args.kernel_size)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = basis.save(out)
    print(f"{out} {digest}")
    return EXIT_OK


# --- train -----------------------------------------------------------------------------------


def _parse_sets(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _resolve_config(args) -> RunConfig:
    overrides = _parse_sets(args.set)
    for flag, key in (
        ("seed", "seed"),
        ("setting", "setting"),
        ("dataset", "paths.dataset"),
        ("output", "paths.output"),
        ("basis", "paths.basis"),
        ("teacher", "paths.teacher"),
        ("stage1", "paths.stage1"),
        ("workers", "train.workers"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, overrides)
    if args.ablate:
        cfg = apply_ablation(cfg, *args.ablate)
    return cfg


def _dataset(cfg: RunConfig) -> DatasetManifest:
    if cfg.paths.dataset is None:
        raise ValueError("no dataset given (--dataset or paths.dataset)")
    p = Path(cfg.paths.dataset)
    if p.is_file():
        return DatasetManifest.load(p)
    return scan_dataset(p)


def _ckpt(path: Optional[str], fallback: Path, what: str) -> CheckpointBundle:
    p = Path(path) if path else fallback
    if not p.exists():
        raise CheckpointError(f"missing prerequisite: {what} checkpoint not found at {p}")
    return CheckpointBundle.load(p)


def _basis(cfg: RunConfig, required: bool) -> Optional[PCABasis]:
    if cfg.paths.basis is None:
        if required:
            raise ValueError("the degradation prior is enabled: pass a PCA basis (--basis, see fit-pca)")
        return None
    return PCABasis.load(cfg.paths.basis)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.paths.output)
    role, stage = args.role, args.stage
    dataset = _dataset(cfg)
    if role == "teacher":
        basis = _basis(cfg, cfg.train.use_drp)
        if stage == "stage1":
            run = lambda: training.train_teacher_stage1(cfg, dataset, basis, out)
        else:
            s1 = _ckpt(cfg.paths.stage1, out / "teacher_stage1.ckpt", "teacher stage 1")
            run = lambda: training.train_teacher_stage2(cfg, dataset, basis, s1, out)
    else:
        teacher = _ckpt(cfg.paths.teacher, out / "teacher_stage2.ckpt", "teacher stage 2")
        tcfg = RunConfig.model_validate(teacher.config)
        basis = _basis(cfg, tcfg.train.use_drp)
        if stage == "stage1":
            run = lambda: training.train_student_stage1(cfg, dataset, teacher, basis, out)
        else:
            s1 = _ckpt(cfg.paths.stage1, out / "student_stage1.ckpt", "student stage 1")
            run = lambda: training.train_student_stage2(cfg, dataset, teacher, s1, basis, out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{role}_{stage}_config.yaml").write_text(dump_config(cfg))
    dataset.save(out / f"{role}_{stage}_manifest.jsonl")
    bundle = run()
    print(f"{out / (bundle.stage + '.ckpt')} {bundle.digest()}")
    return EXIT_OK


# --- eval ------------------------------------------------------------------------------------


def _parse_grid(text: str, noise: float, scale: int) -> list[DegradationSpec]:
    """``widths=1.2,2.4,3.6`` for isotropic kernels or
    ``aniso=e1:e2:angle;e1:e2:angle`` for anisotropic ones."""
    key, _, values = text.partition("=")
    if not values:
        raise ValueError(f"bad grid {text!r}; expected widths=... or aniso=...")
    if key == "widths":
        specs = [DegradationSpec("isotropic", width=float(v), noise_sigma=noise, scale=scale) for v in values.split(",") if v]
    elif key == "aniso":
        specs = []
        for item in values.split(";"):
            e1, e2, ang = (float(v) for v in item.split(":"))
            specs.append(DegradationSpec("anisotropic", eig1=e1, eig2=e2, angle=ang, noise_sigma=noise, scale=scale))
    else:
        raise ValueError(f"unknown grid kind {key!r}")
    if not specs:
        raise ValueError("empty degradation grid")
    for s in specs:
        s.validate()
    return specs


def _eval_images(path: str):
    p = Path(path)
    return DatasetManifest.load(p) if p.is_file() else scan_dataset(p, split="eval")


def cmd_eval(args) -> int:
    if not (args.grid or args.export_idr or args.perturb_idr or args.separability):
        raise UsageError("choose at least one of --grid, --export-idr, --perturb-idr, --separability")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.separability:
        sil, acc = separability_score(EmbeddingDump.load(args.separability))
        _report_separability(out, sil, acc)
    if not (args.grid or args.export_idr or args.perturb_idr):
        return EXIT_OK
    if not args.checkpoint or not args.dataset:
        raise UsageError("--checkpoint and --dataset are required for --grid/--export-idr/--perturb-idr")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint {ckpt} does not exist")
    basis = PCABasis.load(args.basis) if args.basis else None
    model = load_model(ckpt, basis)
    scale = model.cfg.model.scale
    images = _eval_images(args.dataset)
    if args.grid:
        report = run_benchmark(model, images, _parse_grid(args.grid, args.noise, scale), args.seed)
        (out / "benchmark.csv").write_text(report.to_csv())
        print(report.summary())
        print(f"{out / 'benchmark.csv'} {report.digest()}")
    if args.export_idr:
        dump = export_embeddings(model, images, _parse_grid(args.export_idr, args.noise, scale), args.seed, crop=args.crop)
        digest = dump.save(out / "embeddings.csv")
        (out / "embeddings_pca2d.csv").write_text(dump.projection_csv())
        print(f"{out / 'embeddings.csv'} {digest}")
        sil, acc = separability_score(dump)
        _report_separability(out, sil, acc)
    if args.perturb_idr:
        specs = _parse_grid(args.perturb_idr, args.noise, scale)
        lines = ["spec,image,clean_psnr,perturbed_psnr"]
        for spec in specs:
            res = perturb_idr_eval(model, images, spec, args.seed, args.amplitude)
            ids = [e.id for e in images.entries]
            lines += [f"{spec.label()},{i},{c!r},{p!r}" for i, c, p in zip(ids, res.clean, res.perturbed)]
            print(f"{spec.label()}: clean {res.clean_mean:.3f} dB, perturbed {res.perturbed_mean:.3f} dB")
        (out / "perturb.csv").write_text("\n".join(lines) + "\n")
        print(f"{out / 'perturb.csv'} {_sha256(out / 'perturb.csv')}")
    return EXIT_OK


def _report_separability(out: Path, sil: float, acc: float) -> None:
    (out / "separability.json").write_text(json.dumps({"silhouette": sil, "probe_accuracy": acc}, sort_keys=True) + "\n")
    print(f"silhouette {sil:.4f}  probe_accuracy {acc:.4f}")


# --- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lightbsr", description="Blind super-resolution with implicit degradation representations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="synthesize LR images: blur, bicubic downsample, noise")
    d.add_argument("input", help="HR image file or directory of images")
    d.add_argument("output", help="output directory for LR PNGs and their .json spec sidecars")
    d.add_argument("--kind", choices=["isotropic", "anisotropic"], default="isotropic", help="Gaussian kernel type")
    d.add_argument("--width", type=float, default=0.0, help="isotropic kernel width (0 = no blur)")
    d.add_argument("--eig1", type=float, default=1.0, help="anisotropic kernel: first covariance eigenvalue")
    d.add_argument("--eig2", type=float, default=1.0, help="anisotropic kernel: second covariance eigenvalue")
    d.add_argument("--angle", type=float, default=0.0, help="anisotropic kernel: rotation in radians")
    d.add_argument("--noise", type=float, default=0.0, help="Gaussian noise level on the 0..255 scale")
    d.add_argument("--scale", type=int, default=4, help="downsampling factor")
    d.add_argument("--seed", type=int, default=0, help="noise seed (image i in a directory uses seed+i)")
    d.add_argument("--setting", choices=["setting1", "setting2"], help="validate parameters against a setting's ranges")
    d.add_argument("--kernel-size", type=int, default=KERNEL_SIZE, help="blur kernel size (odd)")
    d.set_defaults(func=cmd_degrade)

    f = sub.add_parser("fit-pca", help="fit the PCA basis for kernel priors; prints the file hash")
    f.add_argument("--setting", choices=["setting1", "setting2"], default="setting1", help="kernel distribution to sample")
    f.add_argument("--n", type=int, default=10_000, help="number of sampled kernels")
    f.add_argument("--t", type=int, default=15, help="number of principal components")
    f.add_argument("--seed", type=int, default=0, help="kernel sampling seed")
    f.add_argument("--kernel-size", type=int, default=KERNEL_SIZE, help="kernel size k (t must be < k*k)")
    f.add_argument("--output", default="basis.txt", help="output basis file")
    f.set_defaults(func=cmd_fit_pca)

    t = sub.add_parser(
        "train",
        help="run one training stage",
        description="Run one teacher or student stage. Config file format: " + CONFIG_HELP + ". Flags override the file.",
    )
    t.add_argument("role", choices=["teacher", "student"], help="which network to train")
    t.add_argument("stage", choices=["stage1", "stage2"], help="training stage")
    t.add_argument("--config", help="YAML config file (" + CONFIG_HELP + ")")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key, e.g. train.B=16 (repeatable)")
    t.add_argument("--dataset", help="HR image directory or manifest .jsonl")
    t.add_argument("--output", help="output directory for checkpoints, metrics and the resolved config")
    t.add_argument("--basis", help="PCA basis file (needed whenever the degradation prior is used)")
    t.add_argument("--teacher", help="teacher stage 2 checkpoint (student stages; default OUTPUT/teacher_stage2.ckpt)")
    t.add_argument("--stage1", help="stage 1 checkpoint for stage 2 (default OUTPUT/<role>_stage1.ckpt)")
    t.add_argument("--seed", type=int, help="run seed")
    t.add_argument("--setting", choices=["setting1", "setting2"], help="degradation setting")
    t.add_argument("--workers", type=int, help="cap on data prefetch threads")
    t.add_argument(
        "--ablate",
        action="append",
        choices=sorted(ABLATION_FLAGS) + sorted(ABLATION_PRESETS),
        help="switch off a component or apply an ablation preset (repeatable)",
    )
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark grids, IDR export, separability and wrong-IDR robustness")
    e.add_argument("--checkpoint", help="teacher or student checkpoint")
    e.add_argument("--dataset", help="HR image directory or manifest .jsonl")
    e.add_argument("--basis", help="PCA basis file (teacher checkpoints trained with the prior)")
    e.add_argument("--output", default="eval", help="output directory for CSV artifacts")
    e.add_argument("--seed", type=int, default=0, help="degradation noise seed")
    e.add_argument("--noise", type=float, default=0.0, help="noise level applied to every grid spec")
    e.add_argument("--grid", metavar="GRID", help="PSNR benchmark over widths=a,b,c or aniso=e1:e2:angle;...")
    e.add_argument("--export-idr", metavar="GRID", help="dump 48-dim channel IDRs for every image under each grid spec")
    e.add_argument("--crop", type=int, help="centre LR crop size for --export-idr")
    e.add_argument("--perturb-idr", metavar="GRID", help="paired clean/perturbed PSNR with uniform noise on the raw IDR")
    e.add_argument("--amplitude", type=float, default=1.0, help="upper bound of the uniform IDR perturbation")
    e.add_argument("--separability", metavar="CSV", help="score an existing embedding dump")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, DegradationError, DatasetError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
