"""Building and running ablation matrices.

A matrix is a base config plus named override cells, each trained over
several seeds. This demo runs a deliberately tiny matrix (~2 minutes);
the full encoder/fusion matrices used for evaluation live in
refbox.ablation and are exercised by the acceptance tests.

Run: python demos/07_ablation_matrix.py
"""

import json
import tempfile

from refbox.ablation import (encoder_ablation_cells, format_table,
                             fusion_cells, run_matrix)
from refbox.data import SceneConfig, generate_dataset

root = tempfile.mkdtemp(prefix="refbox_ablate_")
scene = SceneConfig(image_side=32)
generate_dataset(100, 0, f"{root}/train", scene)
generate_dataset(40, 0, f"{root}/val", scene, start_index=100)

base = {
    "train_data": f"{root}/train", "val_data": f"{root}/val",
    "image_size": 32, "stride": 8, "dim": 16, "n_heads": 2, "n_layers": 1,
    "n_text_tokens": 2, "backbone_widths": [8, 8, 8],
    "epochs": 2, "batch_size": 8, "lr": 1e-3, "beta2": 0.99,
}

# The standard matrices, restricted to one seed for the demo:
cells = encoder_ablation_cells(seeds=(0,))[:2] + fusion_cells(seeds=(0,))[:1]
print("cells:", [c.name for c in cells])

results = run_matrix(base, cells, f"{root}/out")
print()
print(format_table(results))
print("full results in", f"{root}/out/results.json")

# Matrix files for the CLI are plain JSON:
matrix_file = f"{root}/matrix.json"
with open(matrix_file, "w") as fh:
    json.dump({"base": base,
               "cells": [{"name": c.name, "overrides": c.overrides,
                          "seeds": list(c.seeds)} for c in cells]}, fh, indent=2)
print("equivalent CLI invocation:")
print(f"  refbox ablate --matrix {matrix_file} --out {root}/out_cli")
