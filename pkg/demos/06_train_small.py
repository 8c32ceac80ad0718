"""End-to-end training on a reduced task (a couple of minutes on a CPU).

Uses 48x48 images and a narrow model; the full-size recipe lives in the
README and the acceptance tests.

Run: python demos/06_train_small.py
"""

import tempfile

from refbox.data import SceneConfig, generate_dataset, load_dataset
from refbox.training import TrainConfig, evaluate_checkpoint, train

root = tempfile.mkdtemp(prefix="refbox_demo_")
scene = SceneConfig(image_side=48)
generate_dataset(300, 0, f"{root}/train", scene)
generate_dataset(80, 0, f"{root}/val", scene, start_index=300)
print("dataset under", root)

config = TrainConfig.from_flat_dict({
    **TrainConfig().to_flat_dict(),
    "train_data": f"{root}/train", "val_data": f"{root}/val",
    "image_size": 48, "stride": 8, "dim": 32, "n_heads": 4,
    "backbone_widths": [16, 16, 32],
    "epochs": 12, "batch_size": 8, "lr": 1e-3, "beta2": 0.99,
    "head_hidden": 128,
})
result = train(config, f"{root}/run")
print(f"\nbest val acc@0.5 {result.best_accuracy:.3f} at epoch {result.best_epoch}")

again = evaluate_checkpoint(result.best_path, config.val_data)
print(f"re-evaluating the best checkpoint: acc@0.5 {again.accuracy:.3f} "
      f"(matches the logged value: {again.accuracy == result.best_accuracy})")
