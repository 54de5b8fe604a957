"""
Training a small model
======================

Fit a narrow network on a handful of samples and read the per-stage loss
log.  Uses the library API; ``demark train`` does the same from a YAML file.
"""

import tempfile
from pathlib import Path

from demark.config import RunConfig
from demark.synthgen import GeneratorConfig, generate_dataset, make_backgrounds
from demark.trainer import fit, read_loss_log, stage_curves

work = Path(tempfile.mkdtemp(prefix="demark_train_"))
make_backgrounds(work / "bg", 4, (64, 64), seed=0)
generate_dataset(work / "bg", work / "data", 8, seed=1, config=GeneratorConfig(image_hw=(64, 64)))

cfg = RunConfig()
cfg.net = {"preset": "small", "width": 8, "input_hw": [64, 64]}
cfg.train.dataset_dir = str(work / "data")
cfg.train.out_dir = str(work / "run")
cfg.train.max_steps = 40
cfg.train.batch_size = 4
cfg.train.checkpoint_every = 20

checkpoint = fit(cfg)
print("final checkpoint:", checkpoint)

# %%
# The loss log
# ------------
# One JSON line per step with every term.  ``stage_curves`` pulls out the
# mask loss of each side output, deepest first.
records = read_loss_log(work / "run")
curves = stage_curves(records, cfg.loss)
print("total loss:", round(records[0]["total"], 3), "->", round(records[-1]["total"], 3))
for k, col in enumerate(curves.T):
    print(f"mask side {k}: {col[0]:.3f} -> {col[-1]:.3f}")
