"""Dataset loading, resizing, synthesis, and the PNG round trip."""

import numpy as np
import pytest

from xfnet.data import (Dataset, SynthSpec, bilinear_resize, load_dataset,
                        split_dataset, synth_dataset, write_dataset_png)


class TestResize:
    def test_identity_when_size_matches(self):
        img = np.random.default_rng(0).uniform(size=(3, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(bilinear_resize(img, (5, 5)), img)

    def test_corners_preserved(self):
        # corner-aligned sampling maps output corners onto input corners
        img = np.random.default_rng(1).uniform(size=(3, 7, 9)).astype(np.float32)
        out = bilinear_resize(img, (13, 4))
        np.testing.assert_allclose(out[:, 0, 0], img[:, 0, 0], atol=1e-6)
        np.testing.assert_allclose(out[:, -1, -1], img[:, -1, -1], atol=1e-6)
        np.testing.assert_allclose(out[:, 0, -1], img[:, 0, -1], atol=1e-6)

    def test_2x2_to_3x3_hand_computed(self):
        img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        out = bilinear_resize(img, (3, 3))
        expected = np.array([[[0.0, 0.5, 1.0],
                              [1.0, 1.5, 2.0],
                              [2.0, 2.5, 3.0]]])
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_upscale_single_row(self):
        img = np.array([[[1.0, 5.0]]])
        out = bilinear_resize(img, (1, 5))
        np.testing.assert_allclose(out[0, 0], [1, 2, 3, 4, 5], atol=1e-6)

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.zeros((3, 4, 4)), (0, 4))


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(per_class=4, image_size=(16, 16), seed=9)
        a, b = synth_dataset(spec), synth_dataset(spec)
        for x, y in zip(a.images, b.images):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seed_changes_content(self):
        a = synth_dataset(SynthSpec(per_class=2, image_size=(16, 16), seed=1))
        b = synth_dataset(SynthSpec(per_class=2, image_size=(16, 16), seed=2))
        assert not np.array_equal(a.images[0], b.images[0])

    def test_shapes_and_range(self):
        ds = synth_dataset(SynthSpec(per_class=3, image_size=(16, 24)))
        assert len(ds) == 6 and ds.class_names == ("real", "fake")
        for img in ds.images:
            assert img.shape == (3, 16, 24) and img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0

    @pytest.mark.parametrize("kind", ["frequency-texture", "blob-vs-stripe"])
    def test_classes_are_statistically_separable(self, kind):
        # a trivial one-feature threshold must beat 90%: if it cannot,
        # sanity-scale training runs would be fighting the data
        ds = synth_dataset(SynthSpec(per_class=32, image_size=(32, 32), kind=kind))
        feature = np.array([img.var() for img in ds.images])
        threshold = np.median(feature)
        pred = (feature > threshold).astype(int)
        acc = max((pred == ds.labels).mean(), (1 - pred == ds.labels).mean())
        assert acc > 0.9, f"{kind}: variance threshold only reaches {acc}"

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            synth_dataset(SynthSpec(kind="checkerboard"))
        with pytest.raises(ValueError, match="per_class"):
            synth_dataset(SynthSpec(per_class=0))


class TestRoundTrip:
    def test_write_then_load(self, tmp_path):
        ds = synth_dataset(SynthSpec(per_class=3, image_size=(16, 16), seed=4))
        write_dataset_png(ds, tmp_path / "set")
        back = load_dataset(tmp_path / "set")
        assert back.class_names == ("0_real", "1_fake")
        np.testing.assert_array_equal(back.labels, ds.labels)
        for orig, loaded in zip(ds.images, back.images):
            # 8-bit quantisation allows at most half a step of drift
            assert np.abs(orig - loaded).max() <= 0.5 / 255 + 1e-6

    def test_load_resizes(self, tmp_path):
        ds = synth_dataset(SynthSpec(per_class=1, image_size=(16, 16)))
        write_dataset_png(ds, tmp_path / "set")
        back = load_dataset(tmp_path / "set", target_size=(8, 8))
        assert back.images[0].shape == (3, 8, 8)

    def test_fake_class_is_positive_index(self, tmp_path):
        ds = synth_dataset(SynthSpec(per_class=1, image_size=(16, 16)))
        write_dataset_png(ds, tmp_path / "set")
        back = load_dataset(tmp_path / "set")
        # lexicographic order puts 0_real before 1_fake
        assert back.class_names.index("1_fake") == 1


class TestLoadErrors:
    def test_missing_root(self, tmp_path):
        with pytest.raises(ValueError, match="not a directory"):
            load_dataset(tmp_path / "nope")

    def test_no_class_dirs(self, tmp_path):
        with pytest.raises(ValueError, match="no class"):
            load_dataset(tmp_path)

    def test_empty_class_dir_names_path(self, tmp_path):
        (tmp_path / "0_real").mkdir()
        with pytest.raises(ValueError, match="0_real"):
            load_dataset(tmp_path)

    def test_unreadable_file_names_path(self, tmp_path):
        d = tmp_path / "0_real"
        d.mkdir()
        (d / "broken.png").write_bytes(b"not a png at all")
        with pytest.raises(ValueError, match="broken.png"):
            load_dataset(tmp_path)


class TestSplit:
    def test_stratified_and_deterministic(self):
        ds = synth_dataset(SynthSpec(per_class=10, image_size=(16, 16)))
        t1, v1 = split_dataset(ds, val_fraction=0.2, seed=0)
        t2, v2 = split_dataset(ds, val_fraction=0.2, seed=0)
        np.testing.assert_array_equal(v1.labels, v2.labels)
        assert (v1.labels == 0).sum() == (v1.labels == 1).sum() == 2
        assert len(t1) + len(v1) == len(ds)
        for a, b in zip(v1.images, v2.images):
            np.testing.assert_array_equal(a, b)

    def test_no_overlap(self):
        ds = synth_dataset(SynthSpec(per_class=6, image_size=(16, 16)))
        t, v = split_dataset(ds, val_fraction=0.25, seed=1)
        train_ids = {id(img) for img in t.images}
        assert all(id(img) not in train_ids for img in v.images)

    def test_too_small_class_rejected(self):
        ds = Dataset(images=[np.zeros((3, 4, 4), np.float32)] * 2,
                     labels=np.array([0, 1]), class_names=("a", "b"))
        with pytest.raises(ValueError, match="too few"):
            split_dataset(ds, val_fraction=0.5, seed=0)

    def test_fraction_bounds(self):
        ds = synth_dataset(SynthSpec(per_class=4, image_size=(16, 16)))
        with pytest.raises(ValueError):
            split_dataset(ds, val_fraction=1.0)
