import numpy as np
import pytest
from PIL import Image

from semiseg.dataset import (
    BIGBRAIN_REMAP,
    DATASETS,
    DataError,
    DatasetSpec,
    ImageSample,
    MaskAccessError,
    NormStats,
    center_crop,
    compute_stats,
    generate_synthetic,
    get_dataset_spec,
    load_dataset,
    make_label_split,
    normalize,
    read_volume,
    slice_volume,
    split_holdout,
    write_volume,
)


def write_pngs(root, n, size, mask_fn=None, rng=None):
    rng = rng or np.random.default_rng(0)
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for i in range(n):
        img = rng.integers(0, 255, size, dtype=np.uint8)
        mask = mask_fn(rng) if mask_fn else (img > 128).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"t{i:03d}.png")
        Image.fromarray(mask).save(root / "masks" / f"t{i:03d}.png")


class TestSpecs:
    @pytest.mark.parametrize(
        "name, semi, self_, k",
        [
            ("PhC", (512, 512), (128, 128), 2),
            ("FluoGFP", (512, 512), (128, 128), 2),
            ("FluoHoechst", (512, 512), (128, 128), 2),
            ("BigBrain", (600, 600), (256, 256), 4),
        ],
    )
    def test_crop_sizes(self, name, semi, self_, k):
        spec = get_dataset_spec(name)
        assert spec.crop_size("semi") == semi and spec.crop_size("self") == self_ and spec.class_count == k

    def test_bigbrain_remap_total(self):
        spec = DATASETS["BigBrain"]
        out = spec.remap(np.arange(9).reshape(3, 3))
        assert set(np.unique(out)) == {0, 1, 2, 3}
        assert out.ravel().tolist() == [BIGBRAIN_REMAP[c] for c in range(9)]
        assert len({BIGBRAIN_REMAP[c] for c in (2, 3, 5)}) == 3

    def test_unknown_class_id(self):
        with pytest.raises(DataError):
            DATASETS["BigBrain"].remap(np.array([[9]]))

    def test_unknown_dataset(self):
        with pytest.raises((KeyError, ValueError)):
            get_dataset_spec("nope")

    def test_center_crop_too_small(self):
        with pytest.raises(DataError):
            center_crop(np.zeros((4, 4)), (8, 8))


class TestLoad:
    def test_phc_sized_directory(self, tmp_path):
        write_pngs(tmp_path, 114, (520, 530))
        samples = load_dataset(tmp_path, get_dataset_spec("PhC"))
        assert len(samples) == 114
        assert all(s.image.shape == (1, 512, 512) and s.mask.shape == (512, 512) for s in samples)
        assert set(np.unique(samples[0].mask)) <= {0, 1}

    def test_empty_directory(self, tmp_path):
        (tmp_path / "images").mkdir()
        with pytest.raises(DataError, match="no samples found"):
            load_dataset(tmp_path, get_dataset_spec("PhC"))

    def test_bigbrain_masks_remapped(self, tmp_path):
        write_pngs(tmp_path, 2, (600, 600), mask_fn=lambda r: r.integers(0, 9, (600, 600), dtype=np.uint8))
        samples = load_dataset(tmp_path, get_dataset_spec("BigBrain"))
        for s in samples:
            assert set(np.unique(s.mask)) == {0, 1, 2, 3}

    def test_missing_mask(self, tmp_path):
        write_pngs(tmp_path, 2, (512, 512))
        (tmp_path / "masks" / "t001.png").unlink()
        with pytest.raises(DataError, match="missing mask"):
            load_dataset(tmp_path, get_dataset_spec("PhC"))

    def test_small_image_rejected(self, tmp_path):
        write_pngs(tmp_path, 1, (100, 100))
        with pytest.raises(DataError, match="t000"):
            load_dataset(tmp_path, get_dataset_spec("PhC"))

    def test_self_mode_crop(self, tmp_path):
        write_pngs(tmp_path, 1, (200, 200))
        (s,) = load_dataset(tmp_path, get_dataset_spec("PhC"), mode="self")
        assert s.shape == (128, 128)


class TestNormalize:
    def samples(self, *values):
        return [ImageSample(np.array([[v]], dtype=np.float32), None, f"s{i}") for i, v in enumerate(values)]

    def test_formula_and_clamp(self):
        train, other, stats = normalize(self.samples(10.0, 20.0, 15.0), self.samples(25.0, 10.0, 5.0))
        assert [float(s.image.item()) for s in train] == [0.0, 1.0, 0.5]
        assert [float(s.image.item()) for s in other] == [1.0, 0.0, 0.0]
        assert stats == NormStats((10.0,), (20.0,))

    def test_constant(self):
        with pytest.raises(DataError, match="constant training data"):
            normalize(self.samples(3.0, 3.0))

    def test_idempotent_with_same_stats(self, rng):
        stats = compute_stats([rng.normal(size=(2, 8, 8))])
        once = stats.apply(rng.normal(size=(2, 8, 8)))
        unit = NormStats((0.0, 0.0), (1.0, 1.0))
        assert np.allclose(unit.apply(once), once, atol=1e-6)

    def test_per_channel(self):
        img = np.stack([np.array([[0.0, 2.0]]), np.array([[10.0, 30.0]])])
        stats = compute_stats([img])
        assert stats.min == (0.0, 10.0) and stats.max == (2.0, 30.0)

    def test_stats_file_round_trip(self, tmp_path):
        stats = NormStats((0.125, -3.0), (7.5, 1.0 / 3.0))
        stats.save(tmp_path / "s.txt")
        assert NormStats.load(tmp_path / "s.txt") == stats


class TestSplits:
    def train(self, n):
        return generate_synthetic("blobs", n, (16, 16), seed=0)

    def test_cardinality(self):
        split = make_label_split(self.train(100), 0.25, seed=3)
        assert len(split.labeled) == 25 and len(split.unlabeled) == 75
        assert not set(split.labeled) & set(split.unlabeled)
        assert set(split.labeled) | set(split.unlabeled) == {s.id for s in self.train(100)}

    def test_ratio_one(self):
        split = make_label_split(self.train(10), 1.0, seed=0)
        assert len(split.labeled) == 10 and split.unlabeled == ()

    def test_deterministic(self):
        t = self.train(30)
        assert make_label_split(t, 0.5, 11) == make_label_split(t, 0.5, 11)
        assert make_label_split(t, 0.5, 11) != make_label_split(t, 0.5, 12)

    def test_ratio_too_small(self):
        with pytest.raises(ValueError, match="ratio too small for dataset"):
            make_label_split(self.train(4), 0.1, 0)

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
    def test_ratio_bounds(self, ratio):
        with pytest.raises(ValueError):
            make_label_split(self.train(10), ratio, 0)

    def test_unlabeled_masks_withheld(self):
        t = self.train(8)
        labeled, unlabeled = make_label_split(t, 0.25, 0).apply(t)
        assert all(s.mask is not None for s in labeled)
        for s in unlabeled:
            assert not s.has_mask and s.diagnostic_mask is not None
            with pytest.raises(MaskAccessError):
                s.mask

    def test_holdout(self):
        rest, held = split_holdout(self.train(20), 0.1, seed=0)
        assert len(held) == 2 and len(rest) == 18
        assert all(s.split == "val" for s in held)


class TestVolume:
    def test_identity_rotation_is_exact_central_plane(self):
        vol = np.arange(9 * 10 * 12, dtype=np.float32).reshape(9, 10, 12)
        (s,) = slice_volume(vol, 1, seed=0, crop=(6, 8), random_rotation=False)
        assert np.array_equal(s.image[0], vol[4, 2:8, 2:10])

    def test_count(self):
        vol = np.random.default_rng(0).random((20, 20, 20)).astype(np.float32)
        labels = np.random.default_rng(1).integers(0, 9, (20, 20, 20))
        out = slice_volume(vol, 3479, seed=4, crop=(6, 6), labels=labels, spec=DATASETS["BigBrain"])
        assert len(out) == 3479
        assert len({s.id for s in out}) == 3479
        assert all(set(np.unique(s.mask)) <= {0, 1, 2, 3} for s in out[:200])

    def test_constant_volume(self):
        vol = np.full((16, 16, 16), 3.5, dtype=np.float32)
        for s in slice_volume(vol, 20, seed=1, crop=(6, 6)):
            assert np.all(s.image == np.float32(3.5))

    def test_infeasible_crop(self):
        with pytest.raises(DataError):
            slice_volume(np.zeros((10, 10, 10)), 1, seed=0, crop=(10, 10))

    def test_labels_integral(self):
        vol = np.zeros((16, 16, 16), dtype=np.float32)
        labels = np.zeros((16, 16, 16), dtype=np.int64)
        labels[:, :, 8:] = 5
        for s in slice_volume(vol, 10, 0, (6, 6), labels=labels):
            assert set(np.unique(s.mask)) <= {0, 5}

    def test_raw_volume_round_trip(self, tmp_path):
        vol = np.random.default_rng(2).random((3, 4, 5)).astype(">f4")
        write_volume(tmp_path / "v.raw", vol)
        back = read_volume(tmp_path / "v.raw")
        assert back.shape == (3, 4, 5) and np.array_equal(np.asarray(back), vol)

    def test_truncated_volume(self, tmp_path):
        write_volume(tmp_path / "v.raw", np.zeros((2, 2, 2), dtype=np.uint8))
        (tmp_path / "v.raw").write_bytes(b"\0" * 3)
        with pytest.raises(DataError):
            read_volume(tmp_path / "v.raw")


class TestSynthetic:
    def test_single_blob_sample(self):
        (s,) = generate_synthetic("blobs", 1, (64, 64), seed=5)
        assert s.mask.sum() > 0
        # mask support is exactly the bright region
        assert s.image[0][s.mask == 1].min() > s.image[0][s.mask == 0].max()

    def test_deterministic(self):
        a = generate_synthetic("two-intensity", 3, (32, 32), seed=9)
        b = generate_synthetic("two-intensity", 3, (32, 32), seed=9)
        assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))

    def test_two_intensity_contrast(self):
        for s in generate_synthetic("two-intensity", 50, (64, 64), seed=0):
            img, m = s.image[0], s.mask.astype(bool)
            assert img[m].mean() - img[~m].mean() >= 0.3

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            generate_synthetic("stripes", 1)


def test_sample_shape_checks():
    with pytest.raises(DataError):
        ImageSample(np.zeros((4, 4)), np.zeros((3, 4)))
    assert DatasetSpec("x", 2, (8, 8), (8, 8)).remap(np.array([[0, 7]])).tolist() == [[0, 1]]
