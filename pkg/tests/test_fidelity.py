import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from fidcal import fidelity as fd
from fidcal.restore import DnCNN


def _pixel(rgb):
    return np.asarray(rgb, np.float32).reshape(3, 1, 1)


class TestCompute:
    @pytest.mark.parametrize("metric", ["l1", "l2", "cosine"])
    def test_identical_zero(self, metric, rng):
        x = rng.random((3, 6, 7), dtype=np.float32)
        f = fd.compute_fidelity(x, x, metric)
        assert f.values.shape == (1, 6, 7)
        np.testing.assert_allclose(f.values, 0, atol=1e-6)

    def test_l1_pixel(self):
        f = fd.compute_fidelity(_pixel([0.3, 0.4, 0.5]), _pixel([0.2, 0.4, 0.6]), "l1")
        assert f.values.item() == pytest.approx(0.2 / 3, abs=1e-6)

    def test_l2_pixel(self):
        f = fd.compute_fidelity(_pixel([0.3, 0.4, 0.5]), _pixel([0.2, 0.4, 0.6]), "l2")
        assert f.values.item() == pytest.approx(0.02 / 3, abs=1e-6)

    def test_cosine_range_and_zero_vector(self):
        f = fd.compute_fidelity(_pixel([1, 0, 0]), _pixel([0, 1, 0]), "cosine")
        assert f.values.item() == pytest.approx(1.0)
        f = fd.compute_fidelity(_pixel([0, 0, 0]), _pixel([0.5, 0.2, 0.1]), "cosine")
        assert f.values.item() == 0.0

    def test_unknown_metric(self, rng):
        x = rng.random((3, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            fd.compute_fidelity(x, x, "linf")


class TestMixtureStats:
    def test_no_halving(self):
        s = fd.mixture_stats(restore_halving=False)
        # exact rational 0.55/36, correctly rounded once
        assert s.sigma_sq == float(Fraction(55, 3600))
        assert s.sigma_sq == pytest.approx(0.55 / 36, rel=1e-15)
        assert s.model_sigma_sq == pytest.approx(0.0152778, abs=1e-7)

    def test_halving(self):
        s = fd.mixture_stats()
        assert s.post_restore_sigma_sq == float(Fraction(55, 7200))
        assert s.model_sigma_sq == pytest.approx(0.0076389, abs=1e-7)
        assert math.sqrt(s.model_sigma_sq) == pytest.approx(0.08740, abs=1e-5)
        assert s.half_normal_mean == pytest.approx(0.06974, abs=1e-5)
        assert s.half_normal_var == pytest.approx(s.model_sigma_sq * (1 - 2 / math.pi))
        assert s.gamma_mean == s.model_sigma_sq
        assert s.gamma_var == pytest.approx(2 * s.model_sigma_sq ** 2)

    def test_zero_only(self):
        s = fd.mixture_stats([0.0])
        assert all(v == 0 for v in s.__dict__.values())

    def test_empty(self):
        with pytest.raises(ValueError):
            fd.mixture_stats([])


class TestNormalize:
    def test_constant_at_mean_goes_to_zero(self):
        s = fd.mixture_stats()
        fmap = fd.FidelityMap(np.full((1, 4, 4), s.half_normal_mean, np.float32), "l1")
        out = fd.normalize(fmap, s)
        np.testing.assert_allclose(out.values, 0, atol=1e-6)
        assert out.normalized and out.stats["model_sigma_sq"] == s.model_sigma_sq

    def test_refuses_cosine_and_double(self):
        s = fd.mixture_stats()
        with pytest.raises(ValueError):
            fd.normalize(fd.FidelityMap(np.zeros((1, 2, 2)), "cosine"), s)
        done = fd.normalize(fd.FidelityMap(np.zeros((1, 2, 2)), "l1"), s)
        with pytest.raises(ValueError):
            fd.normalize(done, s)

    def test_zero_spread_rejected(self):
        with pytest.raises(ValueError):
            fd.normalize(fd.FidelityMap(np.zeros((1, 2, 2)), "l1"), fd.mixture_stats([0.0]))

    def test_save_load(self, tmp_path):
        s = fd.mixture_stats()
        m = fd.normalize(fd.FidelityMap(np.ones((1, 3, 2), np.float32) * 0.1, "l1"), s)
        m.save(tmp_path / "m.fcarr")
        back = fd.FidelityMap.load(tmp_path / "m.fcarr")
        np.testing.assert_array_equal(back.values, m.values)
        assert back.normalized and back.metric == "l1" and back.stats == m.stats


class TestEstimator:
    def test_zero_target_for_clean_pairs(self, rng):
        x = torch.from_numpy(rng.random((2, 3, 5, 5), dtype=np.float32))
        assert fd.fidelity_tensor(x, x, "l1").abs().max().item() == 0

    def test_shape_and_nonnegative(self, rng):
        torch.manual_seed(0)
        model = DnCNN(fd.estimator_config(depth=3, width=4))
        for p in model.parameters():
            torch.nn.init.normal_(p)
        f = fd.estimate_fidelity(model, rng.random((3, 11, 13), dtype=np.float32))
        assert f.values.shape == (1, 11, 13) and f.values.min() >= 0

    def test_untrained_wrapper_fails(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            fd.FidelityEstimator().predict(np.zeros((1, 3, 4, 4), np.float32))
        with pytest.raises(ValueError):
            fd.FidelityEstimator().fit([np.zeros((3, 4, 4), np.float32)])

    def test_wrapper_fit_predict(self, tiny_corpus):
        from fidcal.imaging import load_split
        from fidcal.restore import DenoiserConfig
        imgs, _ = load_split(tiny_corpus, 0).load_images("train")
        den = DnCNN(DenoiserConfig(depth=3, width=4))
        est = fd.FidelityEstimator(den, depth=3, width=8, patch=8, stride=8, crop_size=16,
                                   epochs=2, lr=1e-3, batch_size=32, warmup_epochs=1).fit(imgs)
        out = est.predict(np.zeros((2, 3, 16, 16), np.float32))
        assert out.shape == (2, 1, 16, 16) and out.min() >= 0
