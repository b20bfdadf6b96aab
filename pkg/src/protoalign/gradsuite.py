"""Finite-difference checks of every training loss on toy shapes.

Each check builds a small random instance from a fixed seed and compares
backprop against central differences. Leaves upstream of the gradient
reversal are compared with the sign-flipped objective they actually descend.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from protoalign import ccpa, cdd
from protoalign.segmenter import Segmenter, SegmenterArch, align_prediction, seg_loss
from protoalign.tensor import GradCheckResult, Tensor, grad_check, ops

TOY_ARCH = SegmenterArch(n_classes=3, channels=2, dilations=(1, 2), stride=2, dropout=0.0)
TOY_SIZE = 8


@dataclass
class CheckReport:
    name: str
    result: GradCheckResult
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.passed


def _toy_segmenter(seed: int) -> Segmenter:
    rng = np.random.default_rng(seed)
    seg = Segmenter(TOY_ARCH, rng)
    seg.params["head.w"].data[...] = rng.normal(0.0, 0.5, seg.params["head.w"].shape)
    seg.params["head.b"].data[...] = rng.normal(0.0, 0.1, seg.params["head.b"].shape)
    for name, buf in seg.buffers.items():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith(".var") else rng.normal(0.0, 0.3, buf.shape)
    return seg


def _toy_batch(rng, n=2):
    images = rng.uniform(0.0, 1.0, (n, TOY_SIZE, TOY_SIZE, 1))
    labels = np.eye(TOY_ARCH.n_classes)[rng.integers(0, TOY_ARCH.n_classes, (n, TOY_SIZE, TOY_SIZE))]
    return images, labels


def _toy_align(rng):
    # off-identity weights: with W_M = I a diagonal entry only rescales its
    # class column, which the prototype normalisation cancels exactly, and a
    # zero true derivative cannot be resolved by finite differences
    d, k = TOY_ARCH.feature_dim, TOY_ARCH.n_classes
    params = ccpa.init_params(d, k)
    params["ccpa.att.w"].data[...] = rng.normal(-1.0, 0.3, d)
    params["ccpa.gc.wf"].data[...] += rng.normal(0.0, 0.2, (d, d))
    params["ccpa.gc.wm"].data[...] += rng.normal(0.0, 0.2, (k, k))
    return params


def check_seg_loss_probs(tolerance: float, seed: int = 0) -> GradCheckResult:
    """Hybrid loss w.r.t. the logits of a 4x4x3 prediction."""
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(1, 4, 4, 3)))
    y = np.eye(3)[rng.integers(0, 3, (1, 4, 4))]
    return grad_check(lambda: seg_loss(ops.softmax(logits, axis=-1), y, 0.7), {"logits": logits}, tolerance)


def check_seg_loss_network(tolerance: float, seed: int = 1) -> GradCheckResult:
    """Hybrid loss w.r.t. every segmenter parameter, batch statistics on."""
    seg = _toy_segmenter(seed)
    images, labels = _toy_batch(np.random.default_rng(seed + 100))

    def build():
        _, m = seg.forward(images, batch_stats=True)
        return seg_loss(m, labels, 1.0)

    return grad_check(build, dict(seg.params.items()), tolerance)


def check_cdd(tolerance: float, seed: int = 2, grl_scale: float = 0.5) -> GradCheckResult:
    """Adversarial loss through the randomized map and the reversal node."""
    seg = _toy_segmenter(seed)
    rng = np.random.default_rng(seed + 100)
    src, _ = _toy_batch(rng)
    tgt, _ = _toy_batch(rng)
    rmap = cdd.RandomizedMap.sample(TOY_ARCH.feature_dim, TOY_ARCH.n_classes, 3, seed)
    disc = cdd.Discriminator(3, 4, 1, rng)

    def build():
        f_s, m_s = seg.forward(src)
        f_t, m_t = seg.forward(tgt)
        j_s = cdd.multilinear_map(f_s, align_prediction(m_s, f_s), rmap)
        j_t = cdd.multilinear_map(f_t, align_prediction(m_t, f_t), rmap)
        return cdd.cdd_loss(j_s, j_t, disc, grl_scale)

    leaves = dict(seg.params.items())
    leaves.update(disc.params.items())
    scales = {name: -grl_scale for name in seg.params.names()}
    return grad_check(build, leaves, tolerance, scales=scales)


def check_ccpa_small(tolerance: float, seed: int = 3) -> GradCheckResult:
    """Prototype loss on a 2-class, 8-pixel instance (features and logits as leaves)."""
    rng = np.random.default_rng(seed)
    leaves = {
        "f_s": Tensor(rng.normal(size=(1, 2, 4, 3))),
        "f_t": Tensor(rng.normal(size=(1, 2, 4, 3))),
        "z_s": Tensor(rng.normal(size=(1, 2, 4, 2))),
        "z_t": Tensor(rng.normal(size=(1, 2, 4, 2))),
    }
    params = ccpa.init_params(3, 2)
    params["ccpa.att.w"].data[...] = rng.normal(-1.0, 0.3, 3)
    params["ccpa.gc.wf"].data[...] += rng.normal(0.0, 0.2, (3, 3))
    params["ccpa.gc.wm"].data[...] += rng.normal(0.0, 0.2, (2, 2))
    leaves.update(params.items())

    def build():
        m_s = ops.softmax(leaves["z_s"], axis=-1)
        m_t = ops.softmax(leaves["z_t"], axis=-1)
        ps = ccpa.domain_prototypes(leaves["f_s"], m_s, m_s, params, 1)
        pt = ccpa.domain_prototypes(leaves["f_t"], m_t, m_t, params, 1)
        return ccpa.ccpa_loss(ps.protos, pt.protos, ps.beta, pt.beta, margin=1.0).total

    return grad_check(build, leaves, tolerance)


def check_ccpa_network(tolerance: float, seed: int = 4) -> GradCheckResult:
    """Prototype loss through the segmenter, attention on a 2x-pooled grid."""
    seg = _toy_segmenter(seed)
    rng = np.random.default_rng(seed + 100)
    src, _ = _toy_batch(rng)
    tgt, _ = _toy_batch(rng)
    params = _toy_align(rng)

    def build():
        f_s, m_s = seg.forward(src)
        f_t, m_t = seg.forward(tgt)
        ps = ccpa.domain_prototypes(f_s, align_prediction(m_s, f_s), m_s, params, 2)
        pt = ccpa.domain_prototypes(f_t, align_prediction(m_t, f_t), m_t, params, 2)
        return ccpa.ccpa_loss(ps.protos, pt.protos, ps.beta, pt.beta, margin=1.0).total

    leaves = dict(seg.params.items())
    leaves.update(params.items())
    return grad_check(build, leaves, tolerance)


def check_total(tolerance: float, seed: int = 5, lambda1: float = 0.6, lambda2: float = 0.9,
                grl_scale: float = 1.0) -> list[GradCheckResult]:
    """Composite loss: heads against the true total, segmenter against the reversed surrogate."""
    seg = _toy_segmenter(seed)
    rng = np.random.default_rng(seed + 100)
    src, y_s = _toy_batch(rng)
    tgt, _ = _toy_batch(rng)
    rmap = cdd.RandomizedMap.sample(TOY_ARCH.feature_dim, TOY_ARCH.n_classes, 3, seed)
    disc = cdd.Discriminator(3, 4, 1, rng)
    align = _toy_align(rng)

    def terms():
        f_s, m_s = seg.forward(src)
        f_t, m_t = seg.forward(tgt)
        ms_grid, mt_grid = align_prediction(m_s, f_s), align_prediction(m_t, f_t)
        l_cdd = cdd.cdd_loss(cdd.multilinear_map(f_s, ms_grid, rmap),
                             cdd.multilinear_map(f_t, mt_grid, rmap), disc, grl_scale)
        ps = ccpa.domain_prototypes(f_s, ms_grid, m_s, align, 2)
        pt = ccpa.domain_prototypes(f_t, mt_grid, m_t, align, 2)
        l_ccpa = ccpa.ccpa_loss(ps.protos, pt.protos, ps.beta, pt.beta, 1.0).total
        return seg_loss(m_s, y_s, 1.0), l_cdd, l_ccpa

    def total():
        l_seg, l_cdd, l_ccpa = terms()
        return l_seg + lambda1 * l_cdd + lambda2 * l_ccpa

    def surrogate():
        l_seg, l_cdd, l_ccpa = terms()
        return l_seg - grl_scale * lambda1 * l_cdd + lambda2 * l_ccpa

    heads = dict(disc.params.items())
    heads.update(align.items())
    return [
        grad_check(total, heads, tolerance),
        grad_check(total, dict(seg.params.items()), tolerance, numeric_build=surrogate),
    ]


def run_suite(tolerance: float = 1e-4) -> list[CheckReport]:
    """Every check, in a fixed order."""
    reports = []
    checks = [
        ("seg_loss/probs", check_seg_loss_probs),
        ("seg_loss/network", check_seg_loss_network),
        ("cdd/network+grl", check_cdd),
        ("ccpa/8-pixel", check_ccpa_small),
        ("ccpa/network", check_ccpa_network),
    ]
    for name, fn in checks:
        t0 = time.perf_counter()
        result = fn(tolerance)
        reports.append(CheckReport(name, result, time.perf_counter() - t0))
    t0 = time.perf_counter()
    heads, upstream = check_total(tolerance)
    dt = time.perf_counter() - t0
    reports.append(CheckReport("total/heads", heads, dt / 2))
    reports.append(CheckReport("total/segmenter", upstream, dt / 2))
    return reports
