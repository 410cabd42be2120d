"""Three-branch adversarial model: extractor, label head, and domain head behind a GRL."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .diffengine import LayerSpec, Network, ShapeError, sgd_step, softmax_cross_entropy


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple[int, ...] = (3, 16, 16)
    num_classes: int = 5
    num_domains: int = 2
    conv_channels: tuple[int, ...] = (8,)
    feature_units: int = 64
    label_hidden: tuple[int, ...] = (32,)
    domain_hidden: tuple[int, ...] = (32, 32)
    dropout: float = 0.5
    extra_pools: int = 0  # 2x2 max-pools after the last conv block

    def __post_init__(self):
        if self.num_classes < 1 or self.num_domains < 1:
            raise ValueError("num_classes and num_domains must be positive")
        if len(self.input_shape) not in (1, 3):
            raise ValueError(f"input_shape must be (D,) or (C, H, W), got {self.input_shape}")
        if self.conv_channels and len(self.input_shape) != 3:
            raise ValueError("conv layers need a (C, H, W) input_shape")

    def extractor_specs(self) -> list[LayerSpec]:
        specs = []
        for ch in self.conv_channels:
            specs += [LayerSpec("conv2d", channels=ch, kernel=3), LayerSpec("relu"), LayerSpec("maxpool2x2")]
        specs += [LayerSpec("maxpool2x2")] * self.extra_pools
        if len(self.input_shape) == 3:
            specs.append(LayerSpec("flatten"))
        if self.feature_units:
            specs += [LayerSpec("dense", units=self.feature_units), LayerSpec("relu")]
        return specs

    def head_specs(self, hidden: Sequence[int], out: int) -> list[LayerSpec]:
        specs = []
        for h in hidden:
            specs += [LayerSpec("dense", units=h), LayerSpec("relu")]
            if self.dropout > 0:
                specs.append(LayerSpec("dropout", rate=self.dropout))
        specs.append(LayerSpec("dense", units=out))
        return specs


@dataclass
class Model:
    extractor: Network
    label_head: Network
    domain_head: Network
    num_classes: int
    num_domains: int

    def param_sets(self):
        return self.extractor.params(), self.label_head.params(), self.domain_head.params()

    def zero_grad(self) -> None:
        for net in (self.extractor, self.label_head, self.domain_head):
            net.zero_grad()


def build_model(
    config: ArchConfig,
    rng: np.random.Generator,
    domain_rng: np.random.Generator | None = None,
) -> Model:
    """Randomly initialised model; the domain head draws from ``domain_rng`` when given."""
    extractor = Network(config.extractor_specs(), config.input_shape, rng)
    feat_shape = extractor.output_shape
    if len(feat_shape) != 1:
        raise ShapeError(f"extractor output must be flat, got {feat_shape}")
    label_head = Network(config.head_specs(config.label_hidden, config.num_classes), feat_shape, rng)
    domain_head = Network(
        config.head_specs(config.domain_hidden, config.num_domains), feat_shape, domain_rng if domain_rng is not None else rng
    )
    if label_head.output_shape != (config.num_classes,) or domain_head.output_shape != (config.num_domains,):
        raise ShapeError("head output widths do not match class/domain counts")
    model = Model(extractor, label_head, domain_head, config.num_classes, config.num_domains)
    model.zero_grad()
    return model


def lambda_schedule(p: float) -> float:
    """Adaptation weight ``2 / (1 + exp(-10 p)) - 1`` for training progress ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress p must lie in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


@dataclass
class AdaptationState:
    step: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.total_steps}]")

    @property
    def progress(self) -> float:
        return self.step / self.total_steps

    @property
    def lam(self) -> float:
        return lambda_schedule(self.progress)


def grl_backward(upstream_grad: np.ndarray, lam: float) -> np.ndarray:
    """Gradient reversal: forward is the identity, backward multiplies by ``-lam``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return -lam * np.asarray(upstream_grad)


@dataclass
class TrainBatch:
    images: np.ndarray
    class_labels: np.ndarray  # -1 marks a sample without a class label
    domain_labels: np.ndarray  # index of the sample's domain neuron

    def __post_init__(self):
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.domain_labels = np.asarray(self.domain_labels, dtype=np.int64)
        n = len(self.images)
        if n == 0:
            raise ValueError("empty batch")
        if self.class_labels.shape != (n,) or self.domain_labels.shape != (n,):
            raise ShapeError("one class label slot and one domain label per sample required")

    @property
    def labeled(self) -> np.ndarray:
        return self.class_labels >= 0


class Losses(NamedTuple):
    label: float
    domain: float


def train_step(
    model: Model,
    batch: TrainBatch,
    state: AdaptationState | None,
    mu: float,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    restrict_softmax: bool = False,
) -> Losses:
    """One SGD update of all three branches.

    ``state=None`` drops the domain branch entirely (plain supervised training);
    the reported domain loss is then NaN.  ``mask`` holds one length-m vector per
    sample and multiplies the domain-loss gradient at the domain logits before
    anything is backpropagated through the domain head.  With
    ``restrict_softmax`` that gradient is taken from a softmax over the masked-in
    neurons only, which keeps it zero-sum per sample.  The reported losses are
    always the unmasked ones.
    """
    x = batch.images
    n = len(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        if mask.shape != (n, model.num_domains):
            raise ShapeError(f"mask shape {mask.shape} != ({n}, {model.num_domains})")

    feats = model.extractor.forward(x, training=True, rng=rng)
    g_feats = np.zeros_like(feats)

    labeled = batch.labeled
    loss_y = 0.0
    if labeled.any():
        logits_y = model.label_head.forward(feats[labeled], training=True, rng=rng)
        loss_y, g_y = softmax_cross_entropy(logits_y, batch.class_labels[labeled])
        g_feats[labeled] = model.label_head.backward(g_y)

    loss_d = math.nan
    if state is not None:
        logits_d = model.domain_head.forward(feats, training=True, rng=rng)
        loss_d, g_d = softmax_cross_entropy(logits_d, batch.domain_labels)
        if mask is not None:
            if restrict_softmax:
                _, g_d = softmax_cross_entropy(logits_d, batch.domain_labels, support=mask)
            g_d = g_d * mask
        g_feats = g_feats + grl_backward(model.domain_head.backward(g_d), state.lam)

    model.extractor.backward(g_feats)
    sgd_step(model.extractor.params(), mu)
    sgd_step(model.label_head.params(), mu)
    if state is not None:
        sgd_step(model.domain_head.params(), mu)
    if not (math.isfinite(loss_y) and (state is None or math.isfinite(loss_d))):
        raise FloatingPointError("non-finite training loss")
    return Losses(loss_y, loss_d)


def _batched_forward(net: Network, feats_fn, images: np.ndarray, batch_size: int) -> np.ndarray:
    outs = [net.forward(feats_fn(images[i : i + batch_size]), training=False) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,) + net.output_shape)


def label_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return _batched_forward(
        model.label_head, lambda b: model.extractor.forward(b, training=False), np.asarray(images), batch_size
    )


def predict_labels(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ``np.argmax`` resolves ties toward the lowest index."""
    return np.argmax(label_logits(model, images, batch_size), axis=1)


def evaluate_accuracy(model: Model, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict_labels(model, dataset.images)
    return float(np.mean(pred == dataset.labels))
