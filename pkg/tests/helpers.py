"""Shared builders for tests: small configs and synthetic HR images."""
from __future__ import annotations

import numpy as np

from lightbsr.config import RunConfig

TINY_MODEL = {"trunk_width": 16, "n_groups": 1, "n_blocks": 2, "estimator_widths": [8, 8, 16, 16, 16, 32]}


def tiny_config(**sections) -> RunConfig:
    """Reduced model and short schedules; keyword sections are merged in."""
    data = {
        "seed": 0,
        "model": dict(TINY_MODEL),
        "train": {"B": 2, "D": 2, "N": 16, "epochs_stage1": 1, "epochs_stage2": 1, "patch": 16},
        "degradation": {"widths": [0.8, 3.2]},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return RunConfig.model_validate(data)


def synthetic_image(seed: int, size: int = 96) -> np.ndarray:
    """(3, size, size) image in [0, 1] with edges, gradients and texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((3, size, size))
    for _ in range(6):
        fy, fx = rng.uniform(1, 12, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(-0.15, 0.15, size=3)
        img += color[:, None, None] * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    for _ in range(5):
        y0, x0 = rng.integers(0, size - 8, size=2)
        h, w = rng.integers(4, size // 2, size=2)
        img[:, y0 : y0 + h, x0 : x0 + w] += rng.uniform(-0.3, 0.3, size=3)[:, None, None]
    img += 0.03 * rng.standard_normal(img.shape)
    return np.clip(img + 0.5, 0.0, 1.0)


# criterion number -> (passed, detail); printed by the terminal summary hook
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}
