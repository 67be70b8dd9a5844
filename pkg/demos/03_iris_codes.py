"""Deep features versus binary iris codes.

Trains a small embedder on 10 synthetic subject-eyes, then scores unseen
captures of the same eyes two ways: cosine on the real pool5 vector, and
Hamming distance on its sign bits.  The binary template is 32 times smaller.

    python3 demos/03_iris_codes.py [epochs]
"""
import sys

import numpy as np

from irisnet.codec import Gallery, IrisTemplate
from irisnet.dataio import synth_samples
from irisnet.embed import EmbedRecipe, extract_features
from irisnet.evaluate import ProtocolSpec, eer, protocol, roc_auc
from irisnet.pipeline import oracle_input, train_embedder_from_samples
from irisnet.synth import preprocess

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
train = synth_samples(10, 20)
net, means, hist, classes = train_embedder_from_samples(
    train, {"width": 0.125}, EmbedRecipe.desk(epochs=epochs), "segmented", 0,
    lambda ep, h: print(f"  epoch {ep + 1}: loss {h.losses[-1]:.4f}", flush=True))

held = synth_samples(10, 10, first_pose=1000)
feats = extract_features(np.stack([preprocess(oracle_input(s), means) for s in held]), net)
print(f"pool5 features: {feats.shape}, share of positive units {np.mean(feats > 0):.2f}")

# %% same protocol, two representations
for binary in (False, True):
    ts = [IrisTemplate.from_features(f, s.subject, s.eye, sample=str(k), binary=binary)
          for k, (f, s) in enumerate(zip(feats, held))]
    res = protocol(ts, ProtocolSpec(0.5, 0))
    g = Gallery([ts[i] for i in res.gallery])
    name = "hamming" if binary else "cosine "
    print(f"{name}  EER {eer(res.scores):.4f}  AUC {roc_auc(res.scores).auc:.4f}  "
          f"rank-1 {res.rank1([t.label for t in ts]):.2f}  record {g.record_size} bytes")

# %% what a code looks like
code = IrisTemplate.from_features(feats[0], held[0].subject, held[0].eye, binary=True)
print("first code word:", format(int(code.payload[0]), "064b"))
