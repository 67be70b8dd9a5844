"""Iris embedder: ten-conv backbone, three spatial transformers, four aux heads.

Layout on a 100x100 input (floor-mode 2x2 max pools)::

    ST1 -> conv1 5x5 -> pool1 (50) -> ST2 -> conv2 -> pool2 (25) -> ST3
        -> conv3 conv4 -> pool3 (12) -> conv5 conv6 -> pool4 (6)
        -> conv7 conv8 conv9 -> conv10 -> pool5 (global average) -> linear C

ReLU follows every conv except conv10, so pool5 features keep their sign and
zero-thresholding them gives a balanced binary code. Dropout sits on conv9
and conv10. Aux heads read pool1..pool4 (before any transformer) and only run
in training mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nn, ops
from .stn import STModuleConfig, SpatialTransformer
from .tensor import Tensor, no_grad
from .train import History, TrainRecipe, fit

INPUT_SIZE = 100
CONV_WIDTHS = (64, 96, 128, 192, 256, 256, 384, 384, 512, 1024)
# which pool (1-based) follows each conv; None means the next conv is stacked directly
POOL_AFTER = (1, 2, None, 3, None, 4, None, None, None, 5)
ST_AFTER = ("input", "pool1", "pool2")
AUX_TAPS = ("pool1", "pool2", "pool3", "pool4")
AUX_WIDTH = 128


@dataclass
class EmbedderConfig:
    classes: int
    in_channels: int = 1
    width: float = 1.0
    input_size: int = INPUT_SIZE
    alpha: float = 0.3
    dropout: float = 0.5
    use_st: bool = True
    st_width: int = 8
    st_lr_scale: float = 0.01
    # knobs for the linearity probe; the real network keeps relu / max / bias
    activation: str = "relu"
    pool: str = "max"
    bias: bool = True
    widths: tuple = field(default=CONV_WIDTHS)

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width scale must be positive")
        if self.classes < 1:
            raise ValueError("need at least one class")
        if len(self.widths) != 10:
            raise ValueError("the backbone has exactly 10 convolutions")
        if self.activation not in ("relu", "identity") or self.pool not in ("max", "avg"):
            raise ValueError(f"unsupported activation/pool {self.activation}/{self.pool}")

    def channels(self) -> list[int]:
        return [max(1, int(round(c * self.width))) for c in self.widths]

    @property
    def feature_dim(self) -> int:
        return self.channels()[-1]

    @classmethod
    def desk(cls, classes: int, in_channels: int = 1, **kw) -> "EmbedderConfig":
        base = dict(width=0.125, dropout=0.5)
        base.update(kw)
        return cls(classes, in_channels, **base)


@dataclass
class EmbedOutput:
    pool5_features: np.ndarray  # (N, D)
    main_logits: np.ndarray  # (N, C)
    aux_logits: Optional[list]  # four (N, C) arrays in train mode, None in infer mode


class AuxHead(nn.Module):
    """avg-pool 3/2, 1x1 conv, ReLU, linear to the class count."""

    def __init__(self, cin: int, hw: int, width: int, classes: int, rng):
        self.conv = nn.Conv2d(cin, width, 1, rng=rng)
        side = ops.pool_output_size(hw, 3, 2, False) if hw >= 3 else hw
        self.pool_k = 3 if hw >= 3 else 1
        self.fc = nn.Linear(width * side * side, classes, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.pool_k > 1:
            x = ops.avgpool2d(x, 3, 2)
        return self.fc(ops.relu(self.conv(x)))


class Embedder(nn.Module):
    def __init__(self, cfg: EmbedderConfig, seed: int = 0):
        self.cfg = cfg
        chans = cfg.channels()
        # separate streams so switching STs off leaves backbone weights unchanged
        conv_rng = np.random.default_rng([seed, 7, 0])
        st_rng = np.random.default_rng([seed, 7, 1])
        aux_rng = np.random.default_rng([seed, 7, 2])
        self.drop_rng = np.random.default_rng([seed, 7, 3])

        self.convs: list[nn.Conv2d] = []
        hw, cin = cfg.input_size, cfg.in_channels
        self.tap_shapes: dict[str, tuple] = {"input": (cin, hw)}
        for i, cout in enumerate(chans):
            k = 5 if i == 0 else 3
            self.convs.append(nn.Conv2d(cin, cout, k, 1, k // 2, conv_rng, bias=cfg.bias))
            cin = cout
            p = POOL_AFTER[i]
            if p is not None and p < 5:
                hw = ops.pool_output_size(hw, 2, 2, False)
                if hw < 1:
                    raise ValueError(f"input {cfg.input_size} collapses at pool{p}")
                self.tap_shapes[f"pool{p}"] = (cin, hw)
        self.pool5_hw = hw

        self.sts: dict[str, SpatialTransformer] = {}
        if cfg.use_st:
            for where in ST_AFTER:
                c, s = self.tap_shapes[where]
                st_cfg = STModuleConfig.default(c, (s, s), cfg.st_width, label=f"st@{where}")
                self.sts[where] = SpatialTransformer(st_cfg, st_rng)
        self.st_modules = list(self.sts.values())  # registered for parameters()
        self.st_lr_scale = cfg.st_lr_scale

        aux_w = max(1, int(round(AUX_WIDTH * cfg.width)))
        self.aux = [AuxHead(*self.tap_shapes[t], aux_w, cfg.classes, aux_rng) for t in AUX_TAPS]
        self.classifier = nn.Linear(chans[-1], cfg.classes, conv_rng)
        # small output layers keep the initial loss near log(C) per head
        for fc in [self.classifier] + [a.fc for a in self.aux]:
            fc.weight.data *= 0.1

    def lr_scales(self) -> list[float]:
        """Per-parameter learning-rate multipliers: localisation nets learn slower."""
        st_ids = {id(p) for st in self.st_modules for p in st.parameters()}
        return [self.st_lr_scale if id(p) in st_ids else 1.0 for p in self.parameters()]

    def _act(self, x: Tensor) -> Tensor:
        return ops.relu(x) if self.cfg.activation == "relu" else x

    def _pool(self, x: Tensor) -> Tensor:
        if self.cfg.pool == "max":
            return ops.maxpool2d(x, 2, 2)[0]
        return ops.avgpool2d(x, 2, 2)

    def _st(self, where: str, x: Tensor) -> Tensor:
        st = self.sts.get(where)
        return st(x) if st is not None else x

    def forward(self, x: Tensor, with_aux: Optional[bool] = None):
        """Return (pool5 features, main logits, aux logits or None)."""
        cfg = self.cfg
        want = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ValueError(f"embedder expects (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        with_aux = self.training if with_aux is None else with_aux
        taps = {}
        h = self._st("input", x)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < 9:
                h = self._act(h)
            if i >= 8:
                h = ops.dropout(h, cfg.dropout, self.training, self.drop_rng)
            p = POOL_AFTER[i]
            if p is not None and p < 5:
                h = self._pool(h)
                taps[f"pool{p}"] = h
                h = self._st(f"pool{p}", h)
        feats = ops.global_avgpool(h)
        logits = self.classifier(feats)
        aux = [head(taps[t]) for head, t in zip(self.aux, AUX_TAPS)] if with_aux else None
        return feats, logits, aux


def build_embedder(cfg: EmbedderConfig, seed: int = 0) -> Embedder:
    return Embedder(cfg, seed)


def forward_embed(x, net: Embedder, mode: str = "infer") -> EmbedOutput:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    net.train(mode == "train")
    if mode == "infer":
        with no_grad():
            feats, logits, _ = net(x, with_aux=False)
        return EmbedOutput(feats.data.copy(), logits.data.copy(), None)
    feats, logits, aux = net(x, with_aux=True)
    return EmbedOutput(feats.data.copy(), logits.data.copy(), [a.data.copy() for a in aux])


def embed_loss(net: Embedder, x: Tensor, labels) -> Tensor:
    _, logits, aux = net(x, with_aux=True)
    labels = np.asarray(labels)
    return ops.total_loss(ops.softmax_xent(logits, labels),
                          [ops.softmax_xent(a, labels) for a in aux], net.cfg.alpha)


def dataset_loss(net: Embedder, x, labels, batch: int = 64) -> float:
    """Mean total loss over a whole set in inference mode (no dropout), so it
    is a deterministic function of the weights."""
    x, labels = np.asarray(x, np.float32), np.asarray(labels)
    net.eval()
    total = 0.0
    with no_grad():
        for i in range(0, len(x), batch):
            xb = x[i:i + batch]
            total += float(embed_loss(net, Tensor(xb), labels[i:i + batch]).data) * len(xb)
    return total / len(x)


def extract_features(x, net: Embedder, batch: int = 64) -> np.ndarray:
    """Pool5 vectors (N, D) for preprocessed inputs (N, C, H, W)."""
    x = np.asarray(x, np.float32)
    if x.ndim == 3:
        x = x[None]
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch):
            out.append(net(Tensor(x[i:i + batch]), with_aux=False)[0].data)
    return np.concatenate(out)


def predict(x, net: Embedder, batch: int = 64) -> np.ndarray:
    x = np.asarray(x, np.float32)
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch):
            out.append(net(Tensor(x[i:i + batch]), with_aux=False)[1].data.argmax(axis=1))
    return np.concatenate(out)


@dataclass
class EmbedRecipe(TrainRecipe):
    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 50
    clip_norm: Optional[float] = 10.0

    @classmethod
    def desk(cls, **kw) -> "EmbedRecipe":
        base = dict(batch_size=32)
        base.update(kw)
        return cls(**base)


def train_embedder(x: np.ndarray, labels: Sequence[int], cfg: EmbedderConfig,
                   recipe: EmbedRecipe, seed: int = 0, on_epoch=None) -> tuple[Embedder, History]:
    """Fit the classifier on preprocessed inputs ``x`` (N, C, 100, 100)."""
    labels = np.asarray(labels, np.int64)
    if labels.min() < 0 or labels.max() >= cfg.classes:
        raise ValueError(f"labels must lie in [0, {cfg.classes})")
    net = build_embedder(cfg, seed)
    start = dataset_loss(net, x, labels)
    hist = fit(net, np.asarray(x, np.float32), labels, embed_loss, replace(recipe, seed=seed),
               on_epoch=on_epoch)
    hist.initial_loss, hist.final_loss = start, dataset_loss(net, x, labels)
    return net, hist
