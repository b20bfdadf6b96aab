"""Conditional domain discriminator.

The feature map and the prediction map are fused with a frozen randomized
multilinear map, passed through a gradient reversal node and scored by a
per-pixel residual MLP whose logits are mean-pooled to one per image.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from protoalign.errors import ConfigError, ShapeError
from protoalign.tensor import ParameterStore, Tensor, ops

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class RandomizedMap:
    """Fixed random projections ``R_F`` (d x d_o) and ``R_M`` (N_c x d_o)."""

    r_f: np.ndarray
    r_m: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.r_f.ndim != 2 or self.r_m.ndim != 2 or self.r_f.shape[1] != self.r_m.shape[1]:
            raise ConfigError("randomized_map", f"bad shapes {self.r_f.shape}, {self.r_m.shape}")
        self.r_f.setflags(write=False)
        self.r_m.setflags(write=False)

    @classmethod
    def sample(cls, feature_dim: int, n_classes: int, out_dim: int, seed: int) -> "RandomizedMap":
        if out_dim < 1:
            raise ConfigError("d_o", "must be positive")
        if out_dim >= feature_dim * n_classes:
            raise ConfigError("d_o", f"{out_dim} must be smaller than d*N_c = {feature_dim * n_classes}")
        rng = np.random.default_rng(seed)
        r_f = rng.standard_normal((feature_dim, out_dim))
        r_m = rng.standard_normal((n_classes, out_dim))
        return cls(r_f, r_m, seed)

    @property
    def out_dim(self) -> int:
        return self.r_f.shape[1]


def multilinear_map(features, probs, rmap: RandomizedMap) -> Tensor:
    """``(F R_F) * (M R_M) / sqrt(d_o)`` applied to every pixel."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if features.shape[-1] != rmap.r_f.shape[0] or probs.shape[-1] != rmap.r_m.shape[0]:
        raise ConfigError("randomized_map",
                          f"map expects d={rmap.r_f.shape[0]}, N_c={rmap.r_m.shape[0]}; "
                          f"got {features.shape[-1]}, {probs.shape[-1]}")
    if features.shape[:-1] != probs.shape[:-1]:
        raise ShapeError("multilinear_map", features.shape, probs.shape)
    return (features @ rmap.r_f) * (probs @ rmap.r_m) * (1.0 / np.sqrt(rmap.out_dim))


class Discriminator:
    """Per-pixel residual MLP: input layer, ``n_blocks`` residual blocks, scalar head."""

    def __init__(self, in_dim: int, width: int, n_blocks: int, rng: np.random.Generator):
        self.params = ParameterStore()
        self.n_blocks = n_blocks
        p = self.params

        def dense(name, fan_in, fan_out):
            p.add(f"{name}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            p.add(f"{name}.b", np.zeros(fan_out))

        dense("disc.in", in_dim, width)
        for i in range(n_blocks):
            dense(f"disc.block{i}.fc1", width, width)
            dense(f"disc.block{i}.fc2", width, width)
        p.add("disc.out.w", rng.normal(0.0, np.sqrt(1.0 / width), size=(width, 1)))
        p.add("disc.out.b", np.zeros(1))

    def logits(self, fused: Tensor) -> Tensor:
        """(N, H, W, d_o) -> (N,) image-level logits."""
        p = self.params
        if fused.ndim != 4:
            raise ShapeError("discriminator", fused.shape, detail="expected (N, H, W, d_o)")
        n, h, w, c = fused.shape
        x = fused.reshape(n * h * w, c)
        x = ops.leaky_relu(x @ p["disc.in.w"] + p["disc.in.b"])
        for i in range(self.n_blocks):
            y = ops.leaky_relu(x @ p[f"disc.block{i}.fc1.w"] + p[f"disc.block{i}.fc1.b"])
            y = y @ p[f"disc.block{i}.fc2.w"] + p[f"disc.block{i}.fc2.b"]
            x = ops.leaky_relu(x + y)
        z = x @ p["disc.out.w"] + p["disc.out.b"]
        return ops.mean(z.reshape(n, h * w), axis=1)

    def __call__(self, fused: Tensor) -> Tensor:
        """Domain probability per image (source = 1)."""
        return ops.sigmoid(self.logits(fused))


def cdd_loss(fused_src, fused_tgt, disc: Discriminator, grl_scale: float | None = 1.0) -> Tensor:
    """Binary cross-entropy of the discriminator, source labelled 1, target 0.

    Both inputs pass through a gradient reversal of ``grl_scale`` first, so
    minimising the returned value trains the discriminator while pushing the
    upstream features to confuse it. ``grl_scale=None`` bypasses the reversal.

    The log-probabilities are evaluated from the logits
    (``-log D = softplus(-z)``), which is exact and keeps a nonzero gradient
    when the sigmoid saturates; clamping the probability instead would zero
    the gradient and freeze both players. Outputs beyond
    ``[PROB_CLAMP, 1 - PROB_CLAMP]`` are reported as saturated.
    """
    if grl_scale is not None:
        fused_src = ops.gradient_reversal(fused_src, grl_scale)
        fused_tgt = ops.gradient_reversal(fused_tgt, grl_scale)
    z_s = disc.logits(fused_src)
    z_t = disc.logits(fused_tgt)
    limit = np.log((1.0 - PROB_CLAMP) / PROB_CLAMP)
    saturated = int((np.abs(z_s.data) > limit).sum() + (np.abs(z_t.data) > limit).sum())
    if saturated:
        log.warning("discriminator saturated on %d image(s)", saturated)
    return ops.mean(ops.softplus(-z_s)) + ops.mean(ops.softplus(z_t))
