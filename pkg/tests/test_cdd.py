"""Randomized multilinear map, discriminator and adversarial loss."""
import logging

import numpy as np
import pytest

from protoalign import cdd, gradsuite
from protoalign.errors import ConfigError, ShapeError
from protoalign.segmenter import Segmenter, SegmenterArch, align_prediction
from protoalign.tensor import Tensor, ops


class LinearDisc:
    """Stand-in discriminator whose logit is ``gain`` times the mean input."""

    def __init__(self, gain):
        self.gain = gain

    def logits(self, fused):
        n = fused.shape[0]
        return ops.mean(fused.reshape(n, -1), axis=1) * self.gain


def unit(r, n):
    v = r.normal(size=n)
    return v / np.linalg.norm(v)


def kernel_quadruples(seed, count, d, n_classes, floor=0.2):
    """Random unit vectors f, f', m, m' whose target product is at least ``floor`` in magnitude."""
    r = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        f, f2, m, m2 = unit(r, d), unit(r, d), unit(r, n_classes), unit(r, n_classes)
        if abs((f @ f2) * (m @ m2)) >= floor:
            out.append((f, f2, m, m2))
    return out


def mc_inner_product(quads, d, n_classes, d_o, draws, seed):
    """Average of <J(f, m), J(f', m')> over fresh Gaussian maps."""
    r = np.random.default_rng(seed)
    acc = np.zeros(len(quads))
    for _ in range(draws):
        rmap = cdd.RandomizedMap(r.standard_normal((d, d_o)), r.standard_normal((n_classes, d_o)))
        for i, (f, f2, m, m2) in enumerate(quads):
            j1 = cdd.multilinear_map(f[None], m[None], rmap).data
            j2 = cdd.multilinear_map(f2[None], m2[None], rmap).data
            acc[i] += float((j1 * j2).sum())
    return acc / draws


class TestRandomizedMap:
    def test_zero_features_give_zero(self):
        rmap = cdd.RandomizedMap.sample(4, 3, 5, seed=0)
        j = cdd.multilinear_map(np.zeros((2, 2, 4)), np.full((2, 2, 3), 1 / 3), rmap)
        assert not j.data.any()

    def test_hand_example(self):
        rmap = cdd.RandomizedMap(np.array([[1.0], [-1.0]]), np.array([[1.0], [1.0]]))
        j = cdd.multilinear_map(np.array([[3.0, 1.0]]), np.array([[0.5, 0.5]]), rmap)
        np.testing.assert_allclose(j.data, [[2.0]])

    def test_homogeneous_in_features(self):
        r = np.random.default_rng(1)
        rmap = cdd.RandomizedMap.sample(4, 3, 6, seed=2)
        f, m = r.normal(size=(3, 4)), r.dirichlet(np.ones(3), size=3)
        np.testing.assert_allclose(cdd.multilinear_map(2 * f, m, rmap).data,
                                   2 * cdd.multilinear_map(f, m, rmap).data, rtol=1e-14)

    def test_seeded_sample_reproducible(self):
        a = cdd.RandomizedMap.sample(4, 3, 6, seed=5)
        b = cdd.RandomizedMap.sample(4, 3, 6, seed=5)
        assert a.r_f.tobytes() == b.r_f.tobytes() and a.r_m.tobytes() == b.r_m.tobytes()

    def test_entries_standard_gaussian(self):
        rmap = cdd.RandomizedMap.sample(64, 40, 2000, seed=0)
        vals = np.concatenate([rmap.r_f.ravel(), rmap.r_m.ravel()])
        assert abs(vals.mean()) < 0.01
        assert abs(vals.var() - 1.0) < 0.02

    def test_frozen(self):
        rmap = cdd.RandomizedMap.sample(4, 3, 6, seed=0)
        with pytest.raises(ValueError):
            rmap.r_f[0, 0] = 1.0

    @pytest.mark.parametrize("d_o", [0, 12, 20])
    def test_output_dim_bounds(self, d_o):
        with pytest.raises(ConfigError) as info:
            cdd.RandomizedMap.sample(4, 3, d_o, seed=0)
        assert info.value.field == "d_o"

    def test_dimension_mismatch_is_config_error(self):
        rmap = cdd.RandomizedMap.sample(4, 3, 6, seed=0)
        with pytest.raises(ConfigError):
            cdd.multilinear_map(np.ones((2, 5)), np.ones((2, 3)) / 3, rmap)

    def test_spatial_mismatch(self):
        rmap = cdd.RandomizedMap.sample(4, 3, 6, seed=0)
        with pytest.raises(ShapeError):
            cdd.multilinear_map(np.ones((2, 4)), np.ones((3, 3)) / 3, rmap)

    def test_kernel_property(self):
        quads = kernel_quadruples(seed=0, count=3, d=6, n_classes=4)
        est = mc_inner_product(quads, 6, 4, d_o=4096, draws=100, seed=1)
        target = np.array([(f @ f2) * (m @ m2) for f, f2, m, m2 in quads])
        np.testing.assert_allclose(est, target, rtol=0.05)


class TestDiscriminator:
    def test_output_per_image_in_unit_interval(self):
        disc = cdd.Discriminator(6, 8, 2, np.random.default_rng(0))
        out = disc(Tensor(np.random.default_rng(1).normal(size=(3, 4, 4, 6))))
        assert out.shape == (3,)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_logits_are_spatial_means(self):
        disc = cdd.Discriminator(3, 4, 1, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(1, 2, 2, 3))
        pix = [disc.logits(Tensor(x[:, i:i + 1, j:j + 1])).item() for i in range(2) for j in range(2)]
        assert disc.logits(Tensor(x)).item() == pytest.approx(np.mean(pix), abs=1e-14)

    def test_rejects_flat_input(self):
        disc = cdd.Discriminator(3, 4, 1, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            disc.logits(Tensor(np.ones((2, 3))))


class TestCddLoss:
    def _zero_disc(self):
        disc = cdd.Discriminator(4, 8, 1, np.random.default_rng(0))
        disc.params["disc.out.w"].data[...] = 0.0
        return disc

    def test_chance_discriminator(self):
        j = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 4)))
        assert cdd.cdd_loss(j, j, self._zero_disc()).item() == pytest.approx(2 * np.log(2), abs=1e-14)

    def test_perfect_discriminator(self):
        delta = 1e-7
        disc = LinearDisc(np.log((1 - delta) / delta))
        js, jt = Tensor(np.ones((2, 1, 1, 3))), Tensor(-np.ones((2, 1, 1, 3)))
        # D(J_s) = 1 - delta, D(J_t) = delta
        assert cdd.cdd_loss(js, jt, disc).item() == pytest.approx(2e-7, rel=1e-6)

    def test_saturation_is_reported_not_fatal(self, caplog):
        disc = self._zero_disc()
        disc.params["disc.out.b"].data[...] = 40.0
        j = Tensor(np.zeros((2, 1, 1, 4)))
        with caplog.at_level(logging.WARNING, logger="protoalign.cdd"):
            loss = cdd.cdd_loss(j, j, disc)
        assert np.isfinite(loss.item())
        assert "saturated" in caplog.text

    def test_saturated_side_keeps_gradient(self):
        disc = self._zero_disc()
        disc.params["disc.out.b"].data[...] = 40.0
        j = Tensor(np.zeros((2, 1, 1, 4)))
        cdd.cdd_loss(j, j, disc).backward()
        assert disc.params["disc.out.b"].grad[0] > 0.5

    def test_reversal_flips_and_scales_segmenter_gradient(self):
        arch = SegmenterArch(n_classes=3, channels=2, dilations=(1, 2), dropout=0.0)
        r = np.random.default_rng(4)
        src, tgt = r.uniform(size=(2, 8, 8, 1)), r.uniform(size=(2, 8, 8, 1))
        grads = {}
        for scale in (None, 0.7):
            net = Segmenter(arch, np.random.default_rng(0))
            disc = cdd.Discriminator(3, 4, 1, np.random.default_rng(1))
            rmap = cdd.RandomizedMap.sample(arch.feature_dim, 3, 3, seed=2)
            f_s, m_s = net.forward(src)
            f_t, m_t = net.forward(tgt)
            loss = cdd.cdd_loss(cdd.multilinear_map(f_s, align_prediction(m_s, f_s), rmap),
                                cdd.multilinear_map(f_t, align_prediction(m_t, f_t), rmap), disc, scale)
            loss.backward()
            grads[scale] = ({k: t.grad.copy() for k, t in net.params.items()},
                            {k: t.grad.copy() for k, t in disc.params.items()})
        for k, g in grads[None][0].items():
            np.testing.assert_allclose(grads[0.7][0][k], -0.7 * g, rtol=1e-12, atol=1e-300)
        for k, g in grads[None][1].items():
            np.testing.assert_array_equal(grads[0.7][1][k], g)

    def test_gradient_check_with_reversal(self):
        res = gradsuite.check_cdd(1e-4)
        assert res.passed, (res.max_rel_error, res.worst_leaf)

    def test_binary_cross_entropy_form(self):
        disc = cdd.Discriminator(4, 8, 1, np.random.default_rng(3))
        r = np.random.default_rng(5)
        js, jt = Tensor(r.normal(size=(3, 2, 2, 4))), Tensor(r.normal(size=(2, 2, 2, 4)))
        d_s, d_t = disc(js).data, disc(jt).data
        expected = -np.mean(np.log(d_s)) - np.mean(np.log(1 - d_t))
        assert cdd.cdd_loss(js, jt, disc).item() == pytest.approx(expected, abs=1e-12)
