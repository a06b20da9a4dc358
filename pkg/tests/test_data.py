import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqshield.data import (ATTACK_KINDS, Dataset, SplitPlan, balance, dequantize, generate_synthetic,
                             largest_remainder, load_dataset, quantize, read_image, read_manifest, resize_bilinear,
                             save_dataset, split, write_image, write_manifest)


def bilinear_oracle(img, oh, ow):
    """Per-pixel corner-aligned interpolation, written out longhand."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = i * (h - 1) / (oh - 1) if oh > 1 else 0.0
            x = j * (w - 1) / (ow - 1) if ow > 1 else 0.0
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def _toy(counts, size=8):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    imgs = np.random.default_rng(0).random((len(labels), size, size))
    return Dataset(imgs, labels, [f"c{i}" for i in range(len(counts))])


class TestResize:
    @pytest.mark.parametrize("src,dst", [((5, 7), (9, 4)), ((8, 8), (3, 3)), ((4, 6), (4, 6)), ((3, 3), (1, 5))])
    def test_matches_oracle(self, src, dst):
        img = np.random.default_rng(1).random(src)
        np.testing.assert_allclose(resize_bilinear(img, dst), bilinear_oracle(img, *dst), atol=1e-6)

    def test_corners_preserved(self):
        img = np.random.default_rng(2).random((10, 13))
        out = resize_bilinear(img, (64, 64))
        for (a, b), (c, d) in [((0, 0), (0, 0)), ((0, -1), (0, -1)), ((-1, 0), (-1, 0)), ((-1, -1), (-1, -1))]:
            assert out[a, b] == pytest.approx(img[c, d], abs=1e-6)


class TestQuantize:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
    def test_round_trip_within_half_level(self, vals):
        x = np.asarray(vals, dtype=np.float32)
        assert np.abs(dequantize(quantize(x)) - x).max() <= 0.5 / 255 + 1e-7

    def test_png_round_trip(self, tmp_path):
        x = np.random.default_rng(3).random((16, 16)).astype(np.float32)
        write_image(tmp_path / "a.png", x)
        assert np.array_equal(read_image(tmp_path / "a.png"), dequantize(quantize(x)))

    def test_corrupt_image_names_path(self, tmp_path):
        p = tmp_path / "broken.png"
        p.write_bytes(b"not a png")
        with pytest.raises(ValueError, match="broken.png"):
            read_image(p)


class TestDatasetIO:
    def test_save_load(self, tmp_path):
        ds = generate_synthetic(3, size=16, seed=1)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path, image_size=16)
        assert back.class_names == ds.class_names
        assert back.labels.tolist() == ds.labels.tolist()
        assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6

    def test_resizes_on_load(self, tmp_path):
        save_dataset(generate_synthetic(1, size=16), tmp_path)
        assert load_dataset(tmp_path, image_size=8).images.shape == (4, 8, 8)

    def test_empty_class_dir(self, tmp_path):
        (tmp_path / "a").mkdir()
        with pytest.raises(ValueError, match="no images"):
            load_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_ignores_stray_files(self, tmp_path):
        save_dataset(generate_synthetic(1, size=8), tmp_path)
        (tmp_path / "manifest.csv").write_text("x")
        (tmp_path / "0_non_demented" / "notes.txt").write_text("x")
        assert len(load_dataset(tmp_path, 8)) == 4


class TestSynthetic:
    def test_deterministic(self):
        a, b = generate_synthetic(2, size=32, seed=5), generate_synthetic(2, size=32, seed=5)
        assert a.images.tobytes() == b.images.tobytes()
        assert not np.array_equal(a.images, generate_synthetic(2, size=32, seed=6).images)

    def test_range_and_counts(self):
        ds = generate_synthetic(5, size=32)
        assert ds.counts == [5, 5, 5, 5]
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_ventricle_grows_with_class(self):
        ds = generate_synthetic(20, size=64, seed=0)
        dark = [(ds.images[ds.labels == c] < 0.2).sum(axis=(1, 2)).mean() for c in range(4)]
        assert dark == sorted(dark)


class TestBalance:
    def test_equalises_to_mean(self):
        out = balance(_toy([10, 4, 7]))
        assert out.counts == [7, 7, 7]

    def test_keeps_all_minority_items(self):
        ds = _toy([10, 2])
        out = balance(ds)
        minority = out.images[out.labels == 1]
        for img in ds.images[ds.labels == 1]:
            assert any(np.array_equal(img, m) for m in minority)

    def test_empty_class(self):
        ds = Dataset(np.zeros((2, 4, 4)), [0, 0], ["a", "b"])
        with pytest.raises(ValueError):
            balance(ds)


class TestApportionment:
    def test_ties_break_early(self):
        assert largest_remainder(1, [1, 1]) == [1, 0]
        assert largest_remainder(160, SplitPlan().shares)[0] == 59

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 500), st.lists(st.floats(0.01, 10), min_size=1, max_size=9))
    def test_sums_and_quota_bounds(self, total, shares):
        parts = largest_remainder(total, shares)
        assert sum(parts) == total
        quotas = np.asarray(shares) / sum(shares) * total
        assert all(np.floor(q) <= p <= np.floor(q) + 1 for p, q in zip(parts, quotas))


class TestSplit:
    def test_stratified_and_disjoint(self):
        ds = _toy([20, 30, 10])
        sp = split(ds, SplitPlan(seed=1))
        assert set(sp.train).isdisjoint(sp.test)
        assert len(sp.train) + len(sp.test) == len(ds)
        for c, n in enumerate([20, 30, 10]):
            assert (ds.labels[sp.train] == c).sum() == round(0.8 * n)

    def test_assignment_shares(self):
        ds = generate_synthetic(200, size=8)
        sp = split(ds)
        labels = [sp.assignment[int(i)] for i in sp.test]
        assert len(labels) == 160
        assert labels.count("clean") == 59
        assert sum(labels.count(k) for k in ATTACK_KINDS) == 101
        assert sorted(sp.test_items("clean").tolist()) == sorted(i for i in sp.test if sp.assignment[int(i)] == "clean")

    def test_tiny_class_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            split(_toy([5, 1]))

    def test_deterministic(self):
        ds = _toy([12, 12])
        a, b = split(ds, SplitPlan(seed=4)), split(ds, SplitPlan(seed=4))
        assert a.train.tolist() == b.train.tolist() and a.assignment == b.assignment

    def test_manifest_round_trip(self, tmp_path):
        ds = generate_synthetic(4, size=8)
        save_dataset(ds, tmp_path / "d")
        sp = split(ds, SplitPlan(seed=2))
        write_manifest(tmp_path / "m.csv", ds, sp)
        back = read_manifest(tmp_path / "m.csv", load_dataset(tmp_path / "d", 8))
        assert back.train.tolist() == sp.train.tolist()
        assert back.test.tolist() == sp.test.tolist()
        assert back.assignment == sp.assignment

    @pytest.mark.parametrize("kw", [{"train_fraction": 1.0}, {"clean_fraction": 0}])
    def test_bad_plan(self, kw):
        with pytest.raises(ValueError):
            SplitPlan(**kw)
