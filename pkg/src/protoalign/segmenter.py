"""Dilated residual segmenter: feature extractor, mask predictor and the
hybrid cross-entropy + Dice loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from protoalign.errors import ConfigError, ShapeError
from protoalign.tensor import ParameterStore, Tensor, nn, ops

DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class SegmenterArch:
    """Toy stand-in for the full-scale DRN.

    ``stride`` downsamples in the stem; the mask predictor upsamples its
    logits by the same factor so predictions match the input resolution.
    The feature map is the channel concatenation of every block's output.
    """

    n_classes: int = 5
    in_channels: int = 1
    channels: int = 8
    dilations: tuple = (1, 1, 2, 4)
    stride: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.n_classes < 2:
            raise ConfigError("n_classes", "need at least two classes")
        if self.channels < 1 or not self.dilations:
            raise ConfigError("channels", "need at least one block with one channel")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations", "dilation rates must be positive")
        if self.stride < 1:
            raise ConfigError("stride", "must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")

    @property
    def n_blocks(self) -> int:
        return len(self.dilations)

    @property
    def feature_dim(self) -> int:
        return self.n_blocks * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


class Segmenter:
    """Parameters, batch-norm buffers and the forward map of G and P."""

    def __init__(self, arch: SegmenterArch, rng: np.random.Generator):
        self.arch = arch
        self.params = ParameterStore()
        self.buffers: dict[str, np.ndarray] = {}
        c = arch.channels

        def conv(name, cin, cout, k=3):
            std = np.sqrt(2.0 / (k * k * cin))
            self.params.add(f"{name}.w", rng.normal(0.0, std, size=(k, k, cin, cout)))

        def bn(name, ch):
            self.params.add(f"{name}.gamma", np.ones(ch))
            self.params.add(f"{name}.beta", np.zeros(ch))
            self.buffers[f"{name}.mean"] = np.zeros(ch)
            self.buffers[f"{name}.var"] = np.ones(ch)

        conv("stem", arch.in_channels, c)
        bn("stem.bn", c)
        for i in range(arch.n_blocks):
            conv(f"block{i}.conv1", c, c)
            bn(f"block{i}.bn1", c)
            conv(f"block{i}.conv2", c, c)
            bn(f"block{i}.bn2", c)
        d = arch.feature_dim
        self.params.add("head.w", rng.normal(0.0, np.sqrt(1.0 / d), size=(d, arch.n_classes)))
        self.params.add("head.b", np.zeros(arch.n_classes))

    def _bn(self, x, name, batch_stats):
        p = self.params
        return nn.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                             self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"],
                             training=batch_stats)

    def features(self, image, *, batch_stats=False, dropout_rng=None) -> Tensor:
        """G: (N, H, W, 1) image -> (N, H/stride, W/stride, d) feature map."""
        arch, p = self.arch, self.params
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.ndim == 3:
            image = image.reshape(1, *image.shape)
        if image.ndim != 4 or image.shape[3] != arch.in_channels:
            raise ShapeError("segmenter", image.shape, detail=f"expected (N, H, W, {arch.in_channels})")
        if image.shape[1] % arch.stride or image.shape[2] % arch.stride:
            raise ConfigError("stride", f"image extent {image.shape[1:3]} not divisible by {arch.stride}")
        training = dropout_rng is not None
        x = nn.conv2d(image, p["stem.w"], stride=arch.stride)
        x = ops.relu(self._bn(x, "stem.bn", batch_stats))
        outputs = []
        for i, dil in enumerate(arch.dilations):
            y = nn.conv2d(x, p[f"block{i}.conv1.w"], dilation=dil)
            y = ops.relu(self._bn(y, f"block{i}.bn1", batch_stats))
            y = nn.dropout(y, arch.dropout, dropout_rng, training)
            y = nn.conv2d(y, p[f"block{i}.conv2.w"], dilation=dil)
            y = self._bn(y, f"block{i}.bn2", batch_stats)
            x = ops.relu(x + y)
            outputs.append(x)
        return ops.concat(outputs, axis=-1)

    def predict(self, features: Tensor) -> Tensor:
        """P: feature map -> per-pixel class probabilities at input resolution."""
        logits = features @ self.params["head.w"] + self.params["head.b"]
        logits = nn.upsample_bilinear(logits, self.arch.stride)
        return ops.softmax(logits, axis=-1)

    def forward(self, image, *, batch_stats=False, dropout_rng=None):
        """Return ``(F, M)``.

        ``batch_stats`` normalises with batch statistics and updates the
        running buffers; otherwise the stored statistics are used.
        ``dropout_rng`` enables dropout; pass ``None`` for evaluation.
        """
        f = self.features(image, batch_stats=batch_stats, dropout_rng=dropout_rng)
        return f, self.predict(f)

    def snapshot(self) -> dict[str, np.ndarray]:
        out = self.params.snapshot()
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        self.params.restore({k: v for k, v in arrays.items() if not k.startswith("buffer:")})
        for k, v in arrays.items():
            if k.startswith("buffer:"):
                name = k[len("buffer:"):]
                if name not in self.buffers:
                    raise KeyError(f"unknown buffer {name!r}")
                self.buffers[name] = np.array(v, dtype=np.float64)


def align_prediction(probs: Tensor, features: Tensor) -> Tensor:
    """Average-pool a prediction map onto the feature grid (still a simplex)."""
    factor = probs.shape[1] // features.shape[1]
    if factor * features.shape[1] != probs.shape[1]:
        raise ShapeError("align_prediction", probs.shape, features.shape)
    return nn.avg_pool2d(probs, factor)


def seg_loss(probs, labels, eta: float) -> Tensor:
    """Pixel cross-entropy minus ``eta`` times the summed soft Dice.

    ``probs`` and ``labels`` are (N, H, W, C) (a missing batch axis is
    added); the per-image value is averaged over the batch. Labels must be
    one-hot, so the cross-entropy only reads the probability of the true
    class.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("eta", f"{eta} outside [0, 1]")
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise ShapeError("seg_loss", probs.shape, y.shape)
    if probs.ndim == 3:
        probs = probs.reshape(1, *probs.shape)
        y = y[None]
    ce = -ops.mean(ops.log(ops.sum(probs * y, axis=-1)))
    inter = ops.sum(probs * y, axis=(1, 2))
    size = ops.sum(probs, axis=(1, 2)) + y.sum(axis=(1, 2))
    dice = (2.0 * inter + DICE_SMOOTH) / (size + DICE_SMOOTH)
    return ce - eta * ops.mean(ops.sum(dice, axis=-1))
