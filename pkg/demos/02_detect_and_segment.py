"""Grid-cell detection and encoder-decoder segmentation on synthetic eyes.

Trains both networks briefly (a few minutes on one core) and prints how
well they do on eyes they have not seen.  The acceptance suite runs the
longer versions.

    python3 demos/02_detect_and_segment.py [epochs]
"""
import sys
import time

import numpy as np

from irisnet.dataio import synth_samples
from irisnet.detect import DetectorConfig, DetectorRecipe, detect, train_detector
from irisnet.geometry import iou
from irisnet.segment import SegRecipe, aggregate, roi_pair, seg_metrics, segment_batch, train_segmenter
from irisnet.synth import preprocess

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
train = synth_samples(20, 10)
held = synth_samples(5, 4, first_identity=900, first_pose=900)
s = train[0]
print(f"{len(train)} training eyes of {s.size}; first iris box centre ({s.iris_box.cx:.2f}, {s.iris_box.cy:.2f}) "
      f"side {s.iris_box.w:.2f}, pupil side {s.pupil_box.w:.2f}")


def log(name):
    return lambda ep, h: print(f"  {name} epoch {ep + 1}: loss {h.losses[-1]:.4f}", flush=True)


# %% detector: one pass over the image, best iris and pupil box from the grid
t0 = time.time()
det, means, _ = train_detector(train, DetectorConfig.desk(), DetectorRecipe.desk(epochs=epochs), 0, log("detector"))
found = detect(det, np.stack([h.image for h in held]), means)
ious = [iou(d["iris"], h.iris_box) if d["iris"] else 0.0 for d, h in zip(found, held)]
print(f"detector: {time.time() - t0:.0f} s, held-out iris IoU median {np.median(ious):.2f}, "
      f">= 0.7 on {np.mean(np.array(ious) >= 0.7):.0%}")

# %% segmenter: iris ROI in, per-pixel background / iris / pupil out
t0 = time.time()
seg, smeans, _ = train_segmenter(train, 0.125, SegRecipe.desk(epochs=epochs), 0, log("segmenter"))
pairs = [roi_pair(h) for h in held]
_, masks = segment_batch(seg, np.stack([preprocess(r, smeans) for r, _ in pairs]))
summ = aggregate([seg_metrics(m, lab) for m, (_, lab) in zip(masks, pairs)])
print(f"segmenter: {time.time() - t0:.0f} s, iris F {summ.mean.f_measure:.3f} +- {summ.std.f_measure:.3f}")

# a coarse look at one predicted mask: . background, o iris, # pupil
for row in masks[0][::6]:
    print("  " + "".join(".o#"[v] for v in row[::3]))
