import numpy as np
import pytest
import torch

from fidcal import imaging as im
from fidcal.imaging import PreprocessConfig
from fidcal.synth import make_desk_corpus


def _corpus(root, counts):
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True)
        for i in range(n):
            im.encode_png(np.full((3, 4, 4), i / max(n, 1), np.float32), d / f"{i:03d}.png")
    return root


class TestSplit:
    def test_counts_100_and_60(self, tmp_path):
        sp = im.load_split(_corpus(tmp_path, {"a": 100, "b": 60}), seed=0)
        by = lambda part, c: sum(1 for _, cid in getattr(sp, part) if cid == c)
        assert (by("train", 0), by("val", 0), by("test", 0)) == (48, 12, 40)
        assert (by("train", 1), by("val", 1), by("test", 1)) == (48, 12, 0)

    def test_disjoint_and_complete(self, tmp_path):
        sp = im.load_split(_corpus(tmp_path, {"a": 30, "b": 75}), seed=5)
        names = [r for part in ("train", "val", "test") for r, _ in getattr(sp, part)]
        assert len(names) == len(set(names)) == 105

    def test_manifest_deterministic(self, tmp_path):
        root = _corpus(tmp_path, {"a": 20, "b": 20})
        a = im.load_split(root, seed=1).manifest_text()
        b = im.load_split(root, seed=1).manifest_text()
        c = im.load_split(root, seed=2).manifest_text()
        assert a == b and a != c

    def test_manifest_format_and_roundtrip(self, tmp_path):
        root = _corpus(tmp_path / "data", {"cat": 8, "dog": 9})
        sp = im.load_split(root, seed=0, train_per_class=5)
        path = tmp_path / "split.tsv"
        sp.write_manifest(path)
        for line in path.read_text().splitlines():
            rel, cid, part = line.split("\t")
            assert rel.split("/")[0] in ("cat", "dog") and part in ("train", "val", "test")
            int(cid)
        assert im.read_manifest(root, path) == sp

    def test_empty_class_named_in_error(self, tmp_path):
        _corpus(tmp_path, {"full": 3})
        (tmp_path / "hollow").mkdir()
        with pytest.raises(ValueError, match="hollow"):
            im.load_split(tmp_path, seed=0)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            im.load_split(tmp_path / "nope", seed=0)

    def test_load_images(self, tiny_corpus):
        sp = im.load_split(tiny_corpus, seed=0, train_per_class=6)
        imgs, labels = sp.load_images("val")
        assert len(imgs) == len(labels) == len(sp.val)
        assert all(x.shape[0] == 3 and 0 <= x.min() and x.max() <= 1 for x in imgs)


class TestValidation:
    def test_check_image(self):
        with pytest.raises(ValueError):
            im.check_image(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            im.check_image(np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            im.check_image(np.full((3, 2, 2), np.nan))
        with pytest.raises(ValueError):
            im.check_image(np.zeros((3, 0, 2)))

    def test_check_images_mixed_sizes(self):
        out = im.check_images([np.zeros((3, 4, 4)), np.zeros((3, 5, 4))])
        assert isinstance(out, list)
        with pytest.raises(ValueError):
            im.check_images([np.zeros((3, 4, 4)), np.zeros((3, 5, 4))], same_size=True)
        with pytest.raises(ValueError):
            im.check_images([])

    def test_png_roundtrip(self, tmp_path, rng):
        img = np.round(rng.random((3, 7, 9)) * 255).astype(np.float32) / 255
        im.encode_png(img, tmp_path / "x.png")
        np.testing.assert_allclose(im.decode_image(tmp_path / "x.png"), img, atol=1e-6)


class TestPreprocess:
    def test_train_defaults(self):
        cfg = PreprocessConfig()
        assert cfg.crop_size == 224 and cfg.area_range == (0.08, 1.0)
        assert cfg.aspect_range == pytest.approx((0.75, 4 / 3)) and cfg.hflip_prob == 0.5

    @pytest.mark.parametrize("shape", [(3, 50, 300), (3, 224, 224), (3, 500, 120), (3, 13, 17)])
    def test_train_output_224(self, shape, rng):
        img = rng.random(shape, dtype=np.float32)
        out = im.preprocess_train(img, PreprocessConfig(), rng)
        assert out.shape == (3, 224, 224)

    def test_mean_image_normalizes_to_zero(self, rng):
        mean = np.asarray(im.IMAGENET_MEAN, np.float32)[:, None, None]
        img = np.broadcast_to(mean, (3, 60, 80)).copy()
        cfg = PreprocessConfig(hflip_prob=0.0)
        np.testing.assert_allclose(im.preprocess_train(img, cfg, rng), 0, atol=1e-6)

    def test_aspect_sampler_range(self, rng):
        cfg = PreprocessConfig()
        a = np.array([im.sample_aspect(cfg, rng) for _ in range(10_000)])
        assert a.min() >= 0.75 and a.max() <= 4 / 3

    def test_crop_box_inside(self, rng):
        cfg = PreprocessConfig()
        for h, w in [(10, 200), (200, 10), (33, 33), (1, 1)]:
            for _ in range(50):
                t, l, ch, cw = im.sample_crop_box(h, w, cfg, rng)
                assert 0 <= t and t + ch <= h and 0 <= l and l + cw <= w and ch > 0 and cw > 0

    def test_eval_448x336(self, rng):
        img = rng.random((3, 336, 448), dtype=np.float32)  # H=336, W=448
        cfg = PreprocessConfig("eval")
        out = im.eval_geometry(img, cfg)
        assert out.shape == (3, 224, 224)
        resized = im.resize(img, 224, 299)
        np.testing.assert_array_equal(out, resized[:, :, 38:262])

    def test_eval_identity_at_224(self, rng):
        img = rng.random((3, 224, 224), dtype=np.float32)
        np.testing.assert_array_equal(im.eval_geometry(img, PreprocessConfig("eval")), img)

    def test_eval_deterministic(self, rng):
        img = rng.random((3, 100, 130), dtype=np.float32)
        cfg = PreprocessConfig("eval", crop_size=32)
        np.testing.assert_array_equal(im.preprocess_eval(img, cfg), im.preprocess_eval(img, cfg))

    def test_mode_guard(self, rng):
        with pytest.raises(ValueError):
            im.preprocess_eval(np.zeros((3, 8, 8), np.float32), PreprocessConfig("train"))
        with pytest.raises(ValueError):
            PreprocessConfig("test")

    def test_normalize_tensor_and_array_agree(self, rng):
        x = rng.random((3, 5, 5), dtype=np.float32)
        a = im.normalize(x)
        t = im.normalize(torch.from_numpy(x)).numpy()
        np.testing.assert_allclose(a, t, atol=1e-6)
        np.testing.assert_allclose(im.denormalize(a), x, atol=1e-6)


def test_desk_corpus_layout(tmp_path):
    make_desk_corpus(tmp_path, per_class=2, classes=("circle", "star"), size_range=(20, 24))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["circle", "star"]
    for p in tmp_path.rglob("*.png"):
        img = im.decode_image(p)
        assert 20 <= img.shape[1] <= 24
