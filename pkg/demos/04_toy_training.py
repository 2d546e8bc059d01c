"""Train the Light network on eight synthetic scenes and look at the result.

Takes several minutes on one core. Writes demo_pred.ppm next to the script.

Run: python demos/04_toy_training.py [iterations]
"""

import sys
from pathlib import Path

import numpy as np

from bidganet.data import colorize, evaluate, miou, synth_dataset, write_raster
from bidganet.model import NetworkConfig, build_model
from bidganet.tensor import Tensor
from bidganet.train import TrainConfig, cross_entropy, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 400
data = synth_dataset(8, (64, 64), classes=3, seed=0)
model = build_model(NetworkConfig(version="light", num_classes=3, seed=0))

# OHEM keeps the pixels the model still gets wrong, which here are mostly
# shape boundaries, so the last iterations are spent where mIoU is decided.
cfg = TrainConfig(base_lr=0.05, total_iters=iters, crop=(64, 64), batch_size=8,
                  ohem=True, log_every=50, seed=0)
report = train_loop(model, data, cfg, log=lambda r: print(f"iter {r['iter']:4d}  lr {r['lr']:.4f}  "
                                                           f"ohem loss {r['loss']:.4f}"))

x = Tensor(np.stack([s.image for s in data]))
y = np.stack([s.label for s in data])
print(f"plain CE on the training set: {cross_entropy(model(x), y).item():.4f}")
per_class, mean = miou(evaluate(model, data, 3))
print("per-class IoU", [round(v, 3) for v in per_class], "mIoU", round(mean, 4))

palette = np.array([[0, 0, 0], [230, 60, 60], [60, 120, 230]], np.uint8)
side_by_side = np.concatenate([colorize(y[0], palette), colorize(model.predict(data[0].image), palette)],
                              axis=2)
out = Path(__file__).with_name("demo_pred.ppm")
write_raster(out, side_by_side)
print("label | prediction written to", out)
