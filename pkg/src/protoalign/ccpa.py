"""Category-centric prototype alignment.

Pipeline per domain batch: pool features onto a coarse grid, build a
row-stochastic pixel affinity with graph attention, propagate features and
confidences with one graph-convolution step, merge them into per-class
prototypes, and weight classes by mean prediction entropy. The alignment
loss pulls same-class prototypes of the two domains together and pushes
different-class prototypes at least a margin apart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from protoalign.errors import ShapeError
from protoalign.tensor import ParameterStore, Tensor, nn, ops

EPS = 1e-12
ATTENTION_INIT = -1.0


def init_params(feature_dim: int, n_classes: int) -> ParameterStore:
    """Shared attention vector and identity-initialised graph-convolution weights."""
    store = ParameterStore()
    store.add("ccpa.att.w", np.full(feature_dim, ATTENTION_INIT))
    store.add("ccpa.gc.wf", np.eye(feature_dim))
    store.add("ccpa.gc.wm", np.eye(n_classes))
    return store


def pairwise_scores(h, w) -> Tensor:
    """``s[b, i, j] = w . |h[b, i] - h[b, j]|`` for (N, n, d) nodes and a (d,) vector.

    Fused so the (n, n, d) difference tensor is only materialised one image
    at a time.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if h.ndim != 3 or w.shape != (h.shape[2],):
        raise ShapeError("pairwise_scores", h.shape, w.shape)
    out = np.empty((h.shape[0], h.shape[1], h.shape[1]))
    for b in range(h.shape[0]):
        out[b] = np.abs(h.data[b, :, None, :] - h.data[b, None, :, :]) @ w.data

    def backward(g):
        gh = np.zeros_like(h.data) if h.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for b in range(h.shape[0]):
            diff = h.data[b, :, None, :] - h.data[b, None, :, :]
            if gw is not None:
                gw += np.einsum("ij,ijk->k", g[b], np.abs(diff))
            if gh is not None:
                sg = np.sign(diff)
                gh[b] = w.data * (np.einsum("ij,ijk->ik", g[b], sg) - np.einsum("ij,ijk->jk", g[b], sg))
        return gh, gw

    return Tensor._result(out, (h, w), backward, "pairwise_scores")


def flatten_grid(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, H*W, C)."""
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c)


def graph_attention(features, w, downsample: int = 1) -> Tensor:
    """Row-stochastic adjacency on the ``downsample``-pooled grid.

    ``features`` is (N, H, W, d); the result is (N, n, n) with
    ``n = (H/downsample) * (W/downsample)``.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.ndim == 3:
        features = features.reshape(1, *features.shape)
    h = flatten_grid(nn.avg_pool2d(features, downsample))
    return ops.softmax(ops.leaky_relu(pairwise_scores(h, w)), axis=-1)


def lift_adjacency(adj: np.ndarray, grid: tuple, factor: int) -> np.ndarray:
    """Expand a coarse (n, n) adjacency to the full grid.

    Each full-resolution pixel takes the row of its coarse parent cell,
    columns are expanded the same way and rows are renormalised.
    """
    hc, wc = grid
    rows = np.arange(hc * factor)[:, None] // factor * wc + np.arange(wc * factor)[None, :] // factor
    parent = rows.ravel()
    full = adj[np.ix_(parent, parent)]
    return full / full.sum(axis=1, keepdims=True)


def graph_convolve(adj, features, probs, w_f, w_m):
    """``ReLU(A F W_F)`` and ``ReLU(A M W_M)`` for node-major (N, n, .) inputs."""
    adj = adj if isinstance(adj, Tensor) else Tensor(adj)
    features = features if isinstance(features, Tensor) else Tensor(features)
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if adj.shape[-1] != features.shape[-2] or adj.shape[-1] != probs.shape[-2]:
        raise ShapeError("graph_convolve", adj.shape, features.shape, probs.shape)
    f_agg = ops.relu(adj @ features @ w_f)
    m_agg = ops.relu(adj @ probs @ w_m)
    return f_agg, m_agg


@dataclass
class PrototypeSet:
    centers: Tensor        # (N_c, d)
    alpha: Tensor          # (n_nodes, N_c), columns sum to 1 unless absent
    present: np.ndarray    # (N_c,) bool


def prototypes(f_agg, m_agg) -> PrototypeSet:
    """Confidence-weighted mean of aggregated features per class.

    Inputs may carry a leading batch axis; all nodes of the batch are pooled.
    A class whose total confidence is below ``EPS`` gets a zero weight column
    and is marked absent.
    """
    f_agg = f_agg if isinstance(f_agg, Tensor) else Tensor(f_agg)
    m_agg = m_agg if isinstance(m_agg, Tensor) else Tensor(m_agg)
    if f_agg.shape[:-1] != m_agg.shape[:-1]:
        raise ShapeError("prototypes", f_agg.shape, m_agg.shape)
    f2 = f_agg.reshape(-1, f_agg.shape[-1])
    m2 = m_agg.reshape(-1, m_agg.shape[-1])
    total = ops.sum(m2, axis=0)
    present = total.data >= EPS
    scale = np.where(present, 1.0, 0.0)
    alpha = m2 * (scale / (total + EPS))
    return PrototypeSet(alpha.T @ f2, alpha, present)


def entropy_weights(probs) -> Tensor:
    """Mean over pixels (and batch) of ``-p log p`` per class."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    axes = tuple(range(probs.ndim - 1))
    return -ops.mean(ops.xlogx(probs), axis=axes)


@dataclass
class AlignmentLoss:
    total: Tensor
    intra: float
    inter_ss: float
    inter_st: float
    inter_tt: float
    no_signal: bool


def _weighted_mean(values: Tensor, weights: Tensor, mask: np.ndarray):
    den = ops.sum(weights * mask)
    if den.data < EPS:
        return Tensor(0.0), True
    return ops.sum(weights * mask * values) / den, False


def _pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    return ops.norm(a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, *b.shape), axis=-1)


def ccpa_loss(src: PrototypeSet, tgt: PrototypeSet, beta_s, beta_t, margin: float = 1.0) -> AlignmentLoss:
    """Entropy-reweighted intra-class pull plus the mean of three inter-class hinges."""
    beta_s = beta_s if isinstance(beta_s, Tensor) else Tensor(beta_s)
    beta_t = beta_t if isinstance(beta_t, Tensor) else Tensor(beta_t)
    cs, ct = src.centers, tgt.centers
    if cs.shape != ct.shape or beta_s.shape != (cs.shape[0],) or beta_t.shape != beta_s.shape:
        raise ShapeError("ccpa_loss", cs.shape, ct.shape, beta_s.shape, beta_t.shape)
    k = cs.shape[0]
    off_diag = 1.0 - np.eye(k)

    def pair_weights(bi, bj):
        return bi.reshape(k, 1) * bj.reshape(1, k)

    def mask(pi, pj):
        return np.outer(pi, pj).astype(np.float64)

    d_st = _pairwise_distance(cs, ct)
    w_st = pair_weights(beta_s, beta_t)
    intra, flag_intra = _weighted_mean(d_st, w_st, mask(src.present, tgt.present) * np.eye(k))

    inter_terms, flags = [], [flag_intra]
    for a, b, ba, bb, pa, pb in (
        (cs, cs, beta_s, beta_s, src.present, src.present),
        (cs, ct, beta_s, beta_t, src.present, tgt.present),
        (ct, ct, beta_t, beta_t, tgt.present, tgt.present),
    ):
        dist = d_st if a is cs and b is ct else _pairwise_distance(a, b)
        hinge = ops.relu(margin - dist)
        term, flag = _weighted_mean(hinge, pair_weights(ba, bb), mask(pa, pb) * off_diag)
        inter_terms.append(term)
        flags.append(flag)
    total = intra + (inter_terms[0] + inter_terms[1] + inter_terms[2]) * (1.0 / 3.0)
    return AlignmentLoss(total, float(intra.data), *(float(t.data) for t in inter_terms),
                         no_signal=all(flags))


@dataclass
class DomainPrototypes:
    adjacency: Tensor
    f_agg: Tensor
    m_agg: Tensor
    protos: PrototypeSet
    beta: Tensor


def domain_prototypes(features, probs_on_grid, probs_full, params: ParameterStore,
                      downsample: int) -> DomainPrototypes:
    """Run attention, graph convolution, prototypes and entropy weights for one domain.

    ``probs_on_grid`` must share the spatial grid of ``features``;
    ``probs_full`` is the segmenter output used for the entropy weights.
    Adjacency is kept on the coarse grid: lifting it to full resolution and
    propagating there yields prototypes identical to the coarse computation,
    because every fine pixel in a cell receives the same aggregated row.
    """
    adj = graph_attention(features, params["ccpa.att.w"], downsample)
    f_nodes = flatten_grid(nn.avg_pool2d(features, downsample))
    m_nodes = flatten_grid(nn.avg_pool2d(probs_on_grid, downsample))
    f_agg, m_agg = graph_convolve(adj, f_nodes, m_nodes, params["ccpa.gc.wf"], params["ccpa.gc.wm"])
    return DomainPrototypes(adj, f_agg, m_agg, prototypes(f_agg, m_agg), entropy_weights(probs_full))
