"""
Removing watermarks and scoring the result
==========================================

Load a checkpoint, clean a folder of images and compute dataset metrics.
Run ``plot_03_train.py`` first or pass any checkpoint path as the first
argument.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from demark.config import TrainConfig
from demark.metrics import EvalConfig, evaluate
from demark.model import NetConfig
from demark.reconstruct import infer, infer_paths
from demark.synthgen import GeneratorConfig, generate_dataset, make_backgrounds
from demark.trainer import init_state, load_model, save_checkpoint

work = Path(tempfile.mkdtemp(prefix="demark_eval_"))
if len(sys.argv) > 1:
    ckpt = Path(sys.argv[1])
else:
    # an untrained model keeps the demo self-contained
    ckpt = save_checkpoint(work / "init.pt", init_state(NetConfig.small((64, 64), width=8), TrainConfig()))
model = load_model(ckpt)

make_backgrounds(work / "bg", 3, (64, 64), seed=5)
generate_dataset(work / "bg", work / "data", 4, seed=9, config=GeneratorConfig(image_hw=(64, 64)))

# %%
# Tensors in, images out
# ----------------------
# The final image keeps the input wherever the predicted mask is zero.
batch = torch.rand(1, 3, 64, 64)
(result,) = infer(model, batch, mask_mode="soft")
print("mask range:", float(result.predicted_mask.min()), float(result.predicted_mask.max()))

# %%
# Files in, files out
# -------------------
# Inputs of any size are padded to the network's divisor and cropped back.
written = infer_paths(model, work / "data" / "corrupted", work / "clean", mask_mode=0.5, save_mask=True)
print(len(written), "images written to", work / "clean")

# %%
# Metrics
# -------
report = evaluate(model, work / "data", EvalConfig(), csv_path=work / "per_sample.csv")
print(report.to_json())
print(np.loadtxt(work / "per_sample.csv", delimiter=",", skiprows=1).shape)
