"""Follow one synthetic face from raw image to relational descriptor.

    python3 demos/relations_walkthrough.py
"""

import math

import numpy as np

from prnface import backbone as bb
from prnface import data, geometry, prn
from prnface.config import RunConfig
from prnface.numerics import nn
from prnface.numerics.nn import ParamStore

run = RunConfig()
ds = data.synth_generate(2, 1, data.SynthConfig.preset("medium"), seed=3)
sample = ds[0]
acfg = data.synthetic_align_config(run.image_size)

# alignment: level the eyes, then place eye and mouth rows
face, aligned, transform = geometry.align_face(sample.image, sample.landmarks, acfg)
left = aligned.points[list(acfg.left_eye)].mean(axis=0)
right = aligned.points[list(acfg.right_eye)].mean(axis=0)
mouth = aligned.points[list(acfg.mouth)].mean(axis=0)
print(f"raw image {sample.image.shape}, aligned {face.pixels.shape}")
print(f"eye line angle after alignment: {math.atan2(*(right - left)[::-1]):.2e} rad")
print(f"eye row {(left[1] + right[1]) / 2:.2f} (target {0.30 * run.image_size:.2f}), "
      f"mouth row {mouth[1]:.2f} (target {0.65 * run.image_size:.2f})")

# backbone map and one patch per landmark
store = ParamStore(np.float32, seed=0)
bb.build(store, run.backbone, n_classes=2)
maps, fg = bb.backbone_forward(face.pixels[None].astype(np.float32), store, run.backbone, nn.EVAL)
patches = bb.extract_patches(maps, aligned.points[None], run.image_size, run.roi_m)
print(f"feature map {maps.shape[1:]}, global feature {fg.shape[1]}, "
      f"{patches.n_patches} patches of width {patches.vectors.shape[-1]} (cell extent {patches.extent})")

# every unordered patch pair goes through g_theta; relations are summed
pairs = prn.enumerate_pairs(patches.n_patches)
prn.build_prn(store, run.prn, patches.vectors.shape[-1], conditioned=False)
bundle, emb = prn.prn_forward(patches.vectors, store, run.prn, nn.EVAL)
print(f"{len(pairs)} pairs -> relations {bundle.relations.shape[1:]} -> aggregate {bundle.aggregate.shape[1]} "
      f"-> descriptor {emb.vector.shape[1]}")
print(f"(a 68-landmark face has {len(prn.enumerate_pairs(68))} pairs)")
