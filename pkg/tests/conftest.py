import time

import numpy as np
import pytest

from irisnet import ops
from irisnet.codec import IrisTemplate
from irisnet.dataio import synth_samples
from irisnet.detect import DetectorConfig, DetectorRecipe, train_detector
from irisnet.embed import EmbedRecipe, forward_embed, predict
from irisnet.pipeline import oracle_input, train_embedder_from_samples
from irisnet.segment import SegRecipe, train_segmenter
from irisnet.synth import preprocess
from irisnet.tensor import Tensor, no_grad

SEED = 0


def gradient_error(fn, arrays, seed=0, eps=1e-3, max_elems=40):
    """Max error between autodiff and central differences, per input.

    ``fn`` maps Tensors to a Tensor. The scalar probed is ``sum(w * fn(...))``
    for a fixed random ``w``; the reduction runs in float64 so that only the
    float32 forward pass contributes rounding noise. Errors are scaled by the
    largest finite-difference magnitude of that input.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = rng.standard_normal(out.shape)
    loss = ops.sum(ops.mul(out, Tensor(w)))
    loss.backward()

    def scalar():
        with no_grad():
            return float(np.sum(fn(*tensors).data.astype(np.float64) * w))

    errors = []
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_elems:
            picks = rng.choice(flat.size, max_elems, replace=False)
        num = np.empty(len(picks))
        for n, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar()
            flat[i] = orig - eps
            down = scalar()
            flat[i] = orig
            num[n] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[picks]
        denom = max(np.abs(num).max(), np.abs(a).max(), 1e-8)
        errors.append(float(np.abs(a - num).max() / denom))
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# session fixtures: toy training runs shared by the acceptance and
# trained-pipeline tests
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def det_data():
    train = synth_samples(50, 10, size=128)
    held = synth_samples(10, 10, size=128, first_identity=1000, first_pose=5000)
    return train, held


@pytest.fixture(scope="session")
def toy_detector(det_data):
    train, _ = det_data
    t0 = time.perf_counter()
    model, means, _ = train_detector(train, DetectorConfig.desk(), DetectorRecipe.desk(), SEED)
    return model, means, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_segmenter(det_data):
    train, _ = det_data
    net, means, _ = train_segmenter(train, 0.125, SegRecipe.desk(), SEED)
    return net, means


@pytest.fixture(scope="session")
def toy_embedder():
    train = synth_samples(10, 20, size=128)
    held = synth_samples(10, 10, size=128, first_pose=1000)
    net, means, hist, classes = train_embedder_from_samples(
        train, {"width": 0.125}, EmbedRecipe.desk(epochs=50), "segmented", SEED)
    ids = {c: k for k, c in enumerate(classes)}
    x = np.stack([preprocess(oracle_input(s), means) for s in train])
    acc = float(np.mean(predict(x, net) == np.array([ids[s.label] for s in train])))
    xh = np.stack([preprocess(oracle_input(s), means) for s in held])
    feats = forward_embed(xh, net).pool5_features
    meta = [(s.subject, s.eye, str(k)) for k, s in enumerate(held)]
    real = [IrisTemplate.from_features(f, sub, eye, sample=k) for f, (sub, eye, k) in zip(feats, meta)]
    binary = [IrisTemplate.from_features(f, sub, eye, sample=k, binary=True)
              for f, (sub, eye, k) in zip(feats, meta)]
    return {"net": net, "means": means, "hist": hist, "acc": acc, "real": real, "binary": binary}
