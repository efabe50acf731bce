"""Feature-variance diagnostic for rotation equivariance.

An input image is rotated through eight steps of 45 degrees. For each probed
feature map the response is rotated back (and its orientation axis rolled
back), and the pixel-wise variance across the eight aligned copies is
reported. Exact equivariance gives zero variance; the "exact" subset uses only
the four quarter turns, where no interpolation happens anywhere.
"""
from __future__ import annotations

import json
import math
import os

import numpy as np

from .model import ConfigError, Model
from .pgm import write_pgm
from .tensor import rot90, rotate_interp

STEPS = 8
PROBE_A = "stem.hidden"


def rotate_step(t: np.ndarray, s: int, mode: str = "edge") -> np.ndarray:
    """Rotate the last two axes counter-clockwise by ``s * 45`` degrees."""
    s %= STEPS
    if s % 2 == 0:
        return rot90(t, s // 2)
    return rotate_interp(t, s * math.pi / 4, mode=mode)


def disk_mask(h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = min(h, w) / 2
    return (y - cy) ** 2 + (x - cx) ** 2 <= r * r


def probe_names(model: Model) -> dict[str, str]:
    return {"A": PROBE_A, "B": model.conv_units()[-1].name}


def align(feat: np.ndarray, s: int, n: int) -> np.ndarray:
    """Undo an input rotation by ``s`` steps on a (B, C, n, H, W) map."""
    if s == 0:
        return feat
    if n == 1:
        return rotate_step(feat, -s)
    if (s * n) % STEPS:
        raise ValueError(f"n={n} has no orientation channel for a {45 * s} degree rotation")
    back = np.roll(feat, -(s * n // STEPS), axis=2)
    return rotate_step(back, -s)


def supported_subsets(n: int) -> list[str]:
    """Protocols whose rotations map onto orientation channels of a C_n model."""
    subsets = []
    if n == 1 or n % STEPS == 0:
        subsets.append("all")
    if n == 1 or n % 4 == 0:
        subsets.append("exact")
    return subsets


def feature_variance(model: Model, image: np.ndarray, subset: str = "all") -> dict:
    """Variance statistics per probe and for the logits.

    ``image`` is (1, C, H, W). ``subset`` is "all" (8 steps) or "exact" (4).
    """
    steps = range(0, STEPS, 2) if subset == "exact" else range(STEPS)
    n = model.cfg.n
    if subset == "exact" and n % 4 and n != 1:
        raise ValueError(f"the exact protocol needs n divisible by 4, got n={n}")
    names = probe_names(model)
    aligned = {k: [] for k in names}
    logits = []
    for s in steps:
        probes: dict = {}
        out = model.forward(rotate_step(image, s), probes=probes).data
        logits.append(out.reshape(-1))
        for key, layer in names.items():
            aligned[key].append(align(probes[layer], s, n))
    result = {}
    for key, feats in aligned.items():
        stack = np.stack(feats)  # (S, 1, C, n, H, W)
        var = stack.var(axis=0)[0]  # (C, n, H, W)
        h, w = var.shape[-2:]
        mask = disk_mask(h, w) if subset == "all" else np.ones((h, w), bool)
        vals = var[..., mask]
        power = float(np.mean(stack[..., mask] ** 2))
        result[key] = {
            "layer": names[key],
            "mean": float(vals.mean()),
            "max": float(vals.max()),
            "relative": float(vals.mean() / power) if power > 0 else 0.0,
            "map": var.mean(axis=(0, 1)) * mask,
        }
    lg = np.stack(logits)
    result["logits"] = {"layer": "logits", "mean": float(lg.var(axis=0).mean()),
                        "max": float(lg.var(axis=0).max()), "relative": 0.0, "map": None}
    scale = float(np.mean(lg ** 2))
    if scale > 0:
        result["logits"]["relative"] = result["logits"]["mean"] / scale
    return result


def equivariance_report(model: Model, image: np.ndarray, out_dir: str,
                        baseline: Model | None = None) -> dict:
    """Run both protocols on ``model`` (and ``baseline``), write PGMs and report.json."""
    os.makedirs(out_dir, exist_ok=True)
    models = {"model": model}
    if baseline is not None:
        models["baseline"] = baseline
    report: dict = {}
    for tag, m in models.items():
        report[tag] = {"n": m.cfg.n, "family": m.cfg.family, "params": m.num_params()}
        subsets = supported_subsets(m.cfg.n)
        if not subsets:
            raise ConfigError(f"n={m.cfg.n} supports neither the 45 nor the 90 degree protocol")
        for subset in subsets:
            stats = feature_variance(m, image, subset)
            for key, st in stats.items():
                if st["map"] is not None:
                    write_pgm(os.path.join(out_dir, f"{tag}_{subset}_probe{key}_variance.pgm"), st["map"])
                report[tag][f"{subset}.{key}"] = {k: v for k, v in st.items() if k != "map"}
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


def format_report(report: dict) -> str:
    lines = []
    for tag, entry in report.items():
        lines.append(f"{tag}: {entry['family']} n={entry['n']} params={entry['params']}")
        for key, st in entry.items():
            if isinstance(st, dict):
                lines.append(f"  {key:14s} {st['layer']:14s} mean {st['mean']:.3e}  max {st['max']:.3e}  "
                             f"relative {st['relative']:.3e}")
    return "\n".join(lines)
