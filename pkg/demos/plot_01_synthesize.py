"""
Synthesizing watermarked images
===============================

Draw a random text watermark, blend it onto a background and write a small
dataset to disk.
"""

import tempfile
from pathlib import Path

import numpy as np

from demark.synthgen import (GeneratorConfig, composite, generate_dataset, generate_sample, make_backgrounds,
                             read_manifest)

work = Path(tempfile.mkdtemp(prefix="demark_demo_"))

# Any folder of photos works as backgrounds.  Here we make smooth noise images.
make_backgrounds(work / "backgrounds", count=4, hw=(128, 128), seed=0)

# %%
# One sample, in memory
# ---------------------
# The watermark is a colored plane with a per-pixel opacity.  The corrupted
# image is the alpha blend of that plane over the background.
cfg = GeneratorConfig(image_hw=(128, 128))
rng = np.random.default_rng(0)
sample = generate_sample(rng.random((3, 128, 128)), cfg, seed=42)
print("text:", repr(sample.spec.text), "font size:", sample.spec.font_size_px)
print("watermark covers", f"{100 * sample.mask.mean():.1f}% of the pixels")

again = composite(sample.original, sample.watermark_image(), sample.alpha)
print("blend is reproducible:", np.array_equal(again, sample.corrupted))

# %%
# A dataset on disk
# -----------------
# Each sample becomes four PNGs plus an entry in ``manifest.json`` that holds
# its seed and watermark parameters.
generate_dataset(work / "backgrounds", work / "data", count=8, seed=7, config=cfg)
print(sorted(p.name for p in (work / "data").iterdir()))
print("first entry:", read_manifest(work / "data")["samples"][0]["files"])
print("written to", work)
