"""Ablation matrices: encoder-branch rows, fusion variants, layer sweeps.

Each cell is a set of config overrides trained over several seeds; cells
fail independently (an error is recorded and the matrix continues).
"""

from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .training import TrainConfig, train


@dataclass
class AblationCell:
    name: str
    overrides: dict
    seeds: tuple = (0, 1, 2)


# The five encoder configurations: no encoder at all, visual-only with and
# without text guidance, both branches without guidance, and the full model.
ENCODER_ROWS = (
    ("decoder_only", {"encoder_visual": False, "encoder_textual": False, "fusion": "none"}),
    ("visual", {"encoder_visual": True, "encoder_textual": False, "fusion": "none"}),
    ("visual_text_guided", {"encoder_visual": True, "encoder_textual": False, "fusion": "text_guided"}),
    ("visual_textual", {"encoder_visual": True, "encoder_textual": True, "fusion": "none"}),
    ("full", {"encoder_visual": True, "encoder_textual": True, "fusion": "text_guided"}),
)

FUSION_ROWS = (
    ("text_guided", {"fusion": "text_guided"}),
    ("cross_modal", {"fusion": "cross_modal"}),
)


def encoder_ablation_cells(seeds=(0, 1, 2)):
    return [AblationCell(name, dict(ov), tuple(seeds)) for name, ov in ENCODER_ROWS]


def fusion_cells(seeds=(0, 1, 2)):
    return [AblationCell(name, dict(ov), tuple(seeds)) for name, ov in FUSION_ROWS]


def layer_sweep_cells(layers=(1, 2, 3, 4), seeds=(0,)):
    return [AblationCell(f"layers_{n}", {"n_layers": n}, tuple(seeds)) for n in layers]


def run_matrix(base_config, cells, out_dir, log=print):
    """Train every (cell, seed), returning {cell: {accs, mean, sd, errors}}.

    base_config: flat dict of TrainConfig keys; cell overrides are applied
    on top, and each seed gets its own run directory under out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for cell in cells:
        accs, errors = [], []
        for seed in cell.seeds:
            flat = dict(base_config)
            flat.update(cell.overrides)
            flat["seed"] = int(seed)
            run_dir = os.path.join(out_dir, cell.name, f"seed{seed}")
            try:
                config = TrainConfig.from_flat_dict(flat)
                result = train(config, run_dir, log=lambda *_: None)
                accs.append(result.best_accuracy)
                log(f"[{cell.name} seed {seed}] best val acc@0.5 = {result.best_accuracy:.3f}")
            except Exception as exc:  # keep the matrix going
                errors.append(f"seed {seed}: {exc}")
                log(f"[{cell.name} seed {seed}] FAILED: {exc}")
                log(traceback.format_exc())
        results[cell.name] = {
            "accs": accs,
            "mean": float(np.mean(accs)) if accs else None,
            "sd": float(np.std(accs)) if accs else None,
            "seeds": list(cell.seeds),
            "overrides": cell.overrides,
            "errors": errors,
        }
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_table(results))
    return results


def format_table(results):
    lines = [f"{'cell':24s} {'mean':>7s} {'sd':>7s}  accs"]
    for name, r in results.items():
        if r["mean"] is None:
            lines.append(f"{name:24s} {'--':>7s} {'--':>7s}  errors: {'; '.join(r['errors'])}")
        else:
            accs = " ".join(f"{a:.3f}" for a in r["accs"])
            lines.append(f"{name:24s} {r['mean']:7.3f} {r['sd']:7.3f}  {accs}")
    return "\n".join(lines) + "\n"


def load_matrix_file(path):
    """Matrix file: {"base": {...}, "cells": [{name, overrides, seeds}]}."""
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    if "base" not in spec or "cells" not in spec:
        raise ConfigError(f"{path}: matrix file needs 'base' and 'cells' keys")
    cells = [AblationCell(c["name"], dict(c.get("overrides", {})),
                          tuple(c.get("seeds", (0, 1, 2))))
             for c in spec["cells"]]
    return spec["base"], cells
