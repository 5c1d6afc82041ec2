import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomseg.anomaly import (AnomalyMap, aggregate_maps, channel_cosine,
                             compute_anomaly_map, export_anomaly_map,
                             level_anomaly_map, mean_squared_error,
                             training_loss)
from anomseg.autodiff import ShapeError, Tensor, backward
from anomseg import fileio

from test_autodiff import check_grads, rng


def cosine_oracle(a, b, eps=1e-12):
    """Independent per-pixel dot/norm evaluation, channel-first layout."""
    c, h, w = a.shape
    out = np.ones((h, w))
    for i in range(h):
        for j in range(w):
            va, vb = a[:, i, j], b[:, i, j]
            na, nb = np.linalg.norm(va), np.linalg.norm(vb)
            if na >= eps and nb >= eps:
                out[i, j] = va @ vb / (na * nb)
    return out


class TestChannelCosine:
    def test_identical_features_similarity_one(self):
        x = rng(1).normal(size=(4, 5, 5))
        sim = channel_cosine(Tensor(x), Tensor(x.copy())).data
        np.testing.assert_allclose(sim, 1.0, atol=1e-6)

    def test_orthogonal_pixel(self):
        a = np.zeros((2, 1, 1))
        b = np.zeros((2, 1, 1))
        a[0, 0, 0] = 1.0
        b[1, 0, 0] = 1.0
        sim = channel_cosine(Tensor(a), Tensor(b)).data
        assert sim[0, 0] == pytest.approx(0.0, abs=1e-7)

    def test_random_against_oracle(self):
        g = rng(2)
        a = g.normal(size=(6, 4, 3))
        b = g.normal(size=(6, 4, 3))
        got = channel_cosine(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        np.testing.assert_allclose(got, cosine_oracle(a, b), atol=1e-10)

    def test_zero_norm_scores_one_no_nan(self):
        a = np.zeros((3, 2, 2))
        b = rng(3).normal(size=(3, 2, 2))
        sim = channel_cosine(Tensor(a, requires_grad=True), Tensor(b)).data
        np.testing.assert_array_equal(sim, 1.0)

    def test_batched_matches_per_image(self):
        g = rng(4)
        a = g.normal(size=(3, 5, 4, 4)).astype(np.float32)
        b = g.normal(size=(3, 5, 4, 4)).astype(np.float32)
        full = channel_cosine(Tensor(a), Tensor(b)).data
        for i in range(3):
            single = channel_cosine(Tensor(a[i]), Tensor(b[i])).data
            np.testing.assert_allclose(full[i], single, atol=1e-6)

    def test_grads(self):
        g = rng(5)
        a = g.normal(size=(4, 3, 3)) + 0.5
        b = g.normal(size=(4, 3, 3)) + 0.5
        check_grads(lambda x, y: channel_cosine(x, y).sum(), a, b)

    def test_mse_grads_and_value(self):
        g = rng(6)
        a = g.normal(size=(3, 4, 4))
        b = g.normal(size=(3, 4, 4))
        got = mean_squared_error(Tensor(a), Tensor(b)).data
        assert got == pytest.approx(np.mean((a - b) ** 2), abs=1e-12)
        check_grads(lambda x, y: mean_squared_error(x, y), a, b)


def loss_oracle(recon, targets):
    """Closed-form CosDis + MSE evaluation, float64."""
    total = 0.0
    for zr, zo in zip(recon, targets):
        sim = cosine_oracle(zr[0] if zr.ndim == 4 else zr,
                            zo[0] if zo.ndim == 4 else zo)
        total += np.mean(1.0 - sim) + np.mean((zr - zo) ** 2)
    return total


class TestTrainingLoss:
    def test_equal_pyramids_zero_loss(self):
        g = rng(7)
        z = [Tensor(g.normal(size=(1, 4, 8, 8))) for _ in range(3)]
        lb = training_loss(z, [Tensor(t.data.copy()) for t in z])
        assert lb.total_value == pytest.approx(0.0, abs=1e-12)
        assert lb.cosine == pytest.approx([0.0] * 3, abs=1e-12)
        assert lb.mse == [0.0] * 3

    def test_antiparallel_cosine_term_two(self):
        g = rng(8)
        z = [Tensor(g.normal(size=(1, 4, 6, 6), scale=2.0) + 3.0)]
        neg = [Tensor(-z[0].data)]
        lb = training_loss(neg, z)
        assert lb.cosine[0] == pytest.approx(2.0, abs=1e-6)

    def test_random_pair_matches_direct_formula(self):
        g = rng(9)
        recon = [Tensor(g.normal(size=(1, 5, 4, 4)), dtype=np.float64) for _ in range(2)]
        targets = [Tensor(g.normal(size=(1, 5, 4, 4)), dtype=np.float64) for _ in range(2)]
        lb = training_loss(recon, targets)
        expect = loss_oracle([t.data for t in recon], [t.data for t in targets])
        assert lb.total_value == pytest.approx(expect, abs=1e-10)

    def test_breakdown_sums_to_total(self):
        g = rng(10)
        recon = [Tensor(g.normal(size=(2, 3, 4, 4))) for _ in range(4)]
        targets = [Tensor(g.normal(size=(2, 3, 4, 4))) for _ in range(4)]
        lb = training_loss(recon, targets)
        assert lb.total_value == pytest.approx(sum(lb.cosine) + sum(lb.mse), rel=1e-6)
        assert all(t >= 0 for t in lb.cosine + lb.mse)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            training_loss([Tensor(np.ones((1, 2, 4, 4)))], [Tensor(np.ones((1, 2, 8, 8)))])

    def test_gradients_flow_to_reconstruction_only(self):
        g = rng(11)
        zr = Tensor(g.normal(size=(1, 3, 4, 4)), requires_grad=True)
        zo = Tensor(g.normal(size=(1, 3, 4, 4)))
        lb = training_loss([zr], [zo])
        backward(lb.total)
        assert zr.grad is not None and zo.grad is None


class TestLevelAnomalyMap:
    def test_identical_features_zero_map(self):
        x = rng(12).normal(size=(4, 4, 4))
        amap = level_anomaly_map(Tensor(x), Tensor(x.copy()), 8, 8).data
        np.testing.assert_allclose(amap, 0.0, atol=1e-6)

    def test_orthogonal_pixel_scores_one(self):
        a = np.zeros((2, 2, 2))
        b = np.zeros((2, 2, 2))
        a[0], b[1] = 1.0, 1.0
        amap = level_anomaly_map(Tensor(a), Tensor(b), 2, 2).data
        np.testing.assert_allclose(amap, 1.0, atol=1e-7)

    def test_random_matches_oracle_after_upsampling(self):
        from test_nnops import bilinear_oracle
        g = rng(13)
        a = g.normal(size=(5, 4, 4))
        b = g.normal(size=(5, 4, 4))
        got = level_anomaly_map(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), 8, 8).data
        expect = bilinear_oracle(1.0 - cosine_oracle(a, b), 8, 8)
        np.testing.assert_allclose(got, expect, atol=1e-6)

    def test_range_preserved_by_upsampling(self):
        g = rng(14)
        a = g.normal(size=(3, 4, 4))
        b = g.normal(size=(3, 4, 4))
        amap = level_anomaly_map(Tensor(a), Tensor(b), 16, 16).data
        assert amap.min() >= -1e-6 and amap.max() <= 2.0 + 1e-6


class TestAggregation:
    def test_zero_factor_vetoes(self):
        g = rng(15)
        factors = [g.random(size=(4, 4)) for _ in range(3)]
        factors[1] = np.zeros((4, 4))
        np.testing.assert_array_equal(aggregate_maps(factors), 0.0)

    def test_all_ones_identity(self):
        factors = [np.ones((3, 3))] * 4
        np.testing.assert_array_equal(aggregate_maps(factors), 1.0)

    def test_antiparallel_four_levels_sixteen(self):
        factors = [np.full((2, 2), 2.0)] * 4
        np.testing.assert_allclose(aggregate_maps(factors), 16.0, atol=1e-12)

    def test_pointwise_veto_property(self):
        g = rng(16)
        factors = [g.random(size=(8, 8)) * 2 for _ in range(4)]
        factors[2][3, 5] = 0.0
        final = aggregate_maps(factors)
        assert final[3, 5] == 0.0

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=25, deadline=None)
    def test_monotonicity(self, seed):
        g = rng(seed)
        factors = [g.random(size=(5, 5)) * 2 for _ in range(3)]
        base = aggregate_maps(factors)
        bumped = [f.copy() for f in factors]
        bumped[1] += 0.1
        assert np.all(aggregate_maps(bumped) >= base - 1e-12)


class TestAnomalyMapObject:
    def build(self, seed=17):
        g = rng(seed)
        recon = [Tensor(g.normal(size=(3, 4, 4))) for _ in range(2)]
        targets = [Tensor(g.normal(size=(3, 4, 4))) for _ in range(2)]
        return compute_anomaly_map(recon, targets, 8, 8, image_id="img0")

    def test_invariants_validate(self):
        amap = self.build()
        amap.validate()
        assert amap.final.shape == (8, 8)
        assert len(amap.factors) == 2
        assert 0.0 <= amap.final.min() and amap.final.max() <= 4.0 + 1e-6

    def test_levels_subset_restricts_product(self):
        g = rng(18)
        recon = [Tensor(g.normal(size=(3, 4, 4))) for _ in range(3)]
        targets = [Tensor(g.normal(size=(3, 4, 4))) for _ in range(3)]
        full = compute_anomaly_map(recon, targets, 8, 8)
        only2 = compute_anomaly_map(recon, targets, 8, 8, levels=[2])
        np.testing.assert_allclose(only2.final, full.factors[1], atol=1e-12)
        assert len(only2.factors) == 3

    def test_validate_catches_corruption(self):
        amap = self.build()
        amap.final = amap.final + 0.5
        with pytest.raises(ValueError):
            amap.validate()

    def test_export_round_trip(self, tmp_path):
        amap = self.build()
        export_anomaly_map(amap, tmp_path, "img0")
        back = fileio.read_ust(tmp_path / "img0.ust")
        np.testing.assert_allclose(back, amap.final, atol=1e-6)
        import json
        sidecar = json.loads((tmp_path / "img0.json").read_text())
        assert sidecar["min"] == pytest.approx(float(amap.final.min()))
        assert sidecar["max"] == pytest.approx(float(amap.final.max()))
        assert (tmp_path / "img0.pgm").exists()
        # sidecar bounds let the 8-bit map be un-normalized
        pgm = fileio.read_pgm(tmp_path / "img0.pgm").astype(np.float64) / 255.0
        restored = sidecar["min"] + pgm * (sidecar["max"] - sidecar["min"])
        assert np.abs(restored - amap.final).max() < (sidecar["max"] - sidecar["min"]) / 255.0 + 1e-9
