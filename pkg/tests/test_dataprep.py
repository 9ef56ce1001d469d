import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fixtures.generate import fixture_image
from conftest import FIXTURES, random_images
from con2.dataprep import (
    NORM_MEAN,
    NORM_STD,
    DatasetSplit,
    FolderLayout,
    SyntheticConfig,
    build_context_dataset,
    load_image,
    load_image_folder,
    make_synthetic_split,
    make_view_batch,
    normalize,
)
from con2.imageops import ContentAugmentationPolicy, invert


class TestContextDataset:
    def test_cardinality(self, rng):
        ds = build_context_dataset(list(random_images(rng, 3)), "invert")
        assert len(ds) == 6
        assert np.bincount(ds.labels).tolist() == [3, 3]

    def test_label_one_is_inverted_original(self, rng):
        imgs = random_images(rng, 4)
        ds = build_context_dataset(list(imgs), "invert")
        for i in range(4):
            orig = ds.images[(ds.ids == i) & (ds.labels == 0)][0]
            ctx = ds.images[(ds.ids == i) & (ds.labels == 1)][0]
            assert np.array_equal(ctx, 1.0 - orig)

    def test_each_id_once_per_context(self, rng):
        ds = build_context_dataset(list(random_images(rng, 3)), "vflip")
        for i in range(3):
            assert sorted(ds.labels[ds.ids == i].tolist()) == [0, 1]
        assert ds.augmentation == "vflip"

    def test_strip_and_dedupe_recovers_input(self, rng):
        imgs = random_images(rng, 5)
        ds = build_context_dataset(list(imgs), "equalize")
        recovered = ds.images[ds.labels == 0][np.argsort(ds.ids[ds.labels == 0])]
        assert np.array_equal(recovered, imgs)

    def test_empty(self):
        with pytest.raises(ValueError):
            build_context_dataset([], "invert")


class TestViewBatch:
    def test_single_image(self, rng):
        batch = make_view_batch([(fixture_image(), 0)], "invert", ContentAugmentationPolicy(), rng)
        assert batch.views.shape == (4, 20, 20, 3)
        assert batch.labels.tolist() == [0, 0, 1, 1]
        assert len(batch.transforms) == 4

    def test_identity_policy_views(self, rng):
        x = fixture_image(size=16)
        batch = make_view_batch([(x, 7)], "invert", ContentAugmentationPolicy.identity(), rng,
                                normalize_views=False)
        expected = np.stack([x, x, 1 - x, 1 - x]).astype(np.float32)
        assert np.array_equal(batch.views, expected)
        assert batch.ids.tolist() == [7] * 4

    def test_normalization_is_affine(self, rng):
        x = fixture_image(size=16)
        policy = ContentAugmentationPolicy.identity()
        raw = make_view_batch([(x, 0)], "invert", policy, np.random.default_rng(1), normalize_views=False)
        normed = make_view_batch([(x, 0)], "invert", policy, np.random.default_rng(1))
        np.testing.assert_allclose(normed.views, (raw.views - NORM_MEAN) / NORM_STD, atol=1e-6)
        np.testing.assert_allclose(normalize(np.array([0.0, 0.5, 1.0])), [-1.0, 0.0, 1.0])

    def test_grayscale_replicated(self, rng):
        x = fixture_image(size=12, channels=1)
        batch = make_view_batch([(x, 0)], "vflip", ContentAugmentationPolicy.identity(), rng)
        assert batch.views.shape[-1] == 3

    def test_golden_batch(self, golden):
        img = fixture_image()
        batch = make_view_batch([(img, 0), (img[::-1], 1)], "invert", ContentAugmentationPolicy(),
                                np.random.default_rng(5))
        g = golden["view_batch_seed5"]
        views = batch.views.astype(np.float64)
        assert views.sum() == pytest.approx(g["sum"], rel=1e-6, abs=1e-6)
        assert np.abs(views).sum() == pytest.approx(g["abs_sum"], rel=1e-9)
        np.testing.assert_allclose(views[:, 0, 0, 0], g["first_pixels"], atol=1e-9)

    @given(st.integers(1, 4), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_batch_invariants(self, n, seed):
        rng = np.random.default_rng(seed)
        base = [(img, i) for i, img in enumerate(random_images(rng, n, size=10))]
        policy = ContentAugmentationPolicy(output_size=8)
        batch = make_view_batch(base, "equalize", policy, rng)
        assert len(batch) == 4 * n
        assert batch.labels.sum() == 2 * n
        for i in range(n):
            assert sorted(batch.labels[batch.ids == i].tolist()) == [0, 0, 1, 1]
        assert batch.views.shape[1:] == (8, 8, 3)

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            make_view_batch([], "invert", ContentAugmentationPolicy(), rng)


class TestSynthetic:
    def test_sizes(self):
        split = make_synthetic_split(SyntheticConfig(n_train=100, n_test_normal=50, n_test_anomaly=50))
        assert (len(split.train), len(split.test)) == (100, 100)
        assert split.test_labels.sum() == 50

    def test_noise_free_pixel_sets(self):
        split = make_synthetic_split(SyntheticConfig(noise=0.0, n_train=20, n_test_normal=20, n_test_anomaly=20))
        half = 8
        normal = split.test[split.test_labels == 0]
        anomalous = split.test[split.test_labels == 1]
        assert normal[:, half:, half:].max() == 0.0 and normal[:, :half, :half].max() == 1.0
        assert anomalous[:, :half, :half].max() == 0.0 and anomalous[:, half:, half:].max() == 1.0

    def test_class_separability(self):
        split = make_synthetic_split()
        flat = split.test.reshape(len(split.test), -1)
        labels = split.test_labels
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        same = labels[:, None] == labels[None]
        off_diag = ~np.eye(len(flat), dtype=bool)
        between = d[~same].mean()
        within = d[same & off_diag].mean()
        assert between > within

    def test_valid_images_and_deterministic(self):
        a, b = make_synthetic_split(), make_synthetic_split()
        assert np.array_equal(a.train, b.train)
        assert a.train.min() >= 0 and a.train.max() <= 1
        assert np.array_equal(invert(invert(a.train)), a.train)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SyntheticConfig(size=4)


def _write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr * 255).round().astype(np.uint8).squeeze()).save(path)


def _make_folder(root, n_train=2, n_normal=2, n_anomaly=2):
    for i in range(n_train):
        _write_png(root / "train/normal" / f"{i}.png", fixture_image(size=20, seed=i))
    for i in range(n_normal):
        _write_png(root / "test/normal" / f"{i}.png", fixture_image(size=20, seed=10 + i))
    for i in range(n_anomaly):
        _write_png(root / "test/anomaly" / f"{i}.png", 1 - fixture_image(size=20, seed=20 + i))
    return root


class TestFolders:
    layout = FolderLayout(resize=16, crop=12)

    def test_train_size(self, tmp_path):
        split = load_image_folder(_make_folder(tmp_path), self.layout)
        assert len(split.train) == 2
        assert split.train.shape[1:] == (12, 12, 3)
        assert split.test_labels.tolist() == [0, 0, 1, 1]

    def test_anomaly_in_train_rejected(self, tmp_path):
        root = _make_folder(tmp_path)
        (root / "train/normal/sneaky.png").write_bytes((root / "test/anomaly/0.png").read_bytes())
        with pytest.raises(ValueError, match="anomalous image"):
            load_image_folder(root, self.layout)

    def test_missing_folder(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image_folder(tmp_path / "nope", self.layout)
        root = _make_folder(tmp_path)
        with pytest.raises(FileNotFoundError):
            load_image_folder(root, FolderLayout(test_normal="elsewhere", resize=16, crop=12))

    def test_empty_train(self, tmp_path):
        root = _make_folder(tmp_path, n_train=0)
        (root / "train/normal").mkdir(parents=True)
        with pytest.raises(ValueError, match="no normal training images"):
            load_image_folder(root, self.layout)

    def test_undecodable_file_names_path(self, tmp_path):
        root = _make_folder(tmp_path)
        bad = root / "test/normal/broken.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ValueError, match="broken.png"):
            load_image_folder(root, self.layout)

    def test_golden_resize_crop(self, golden):
        arr = load_image(FIXTURES / "fixture_40x30.png", self.layout)
        g = golden["resize_crop_fixture"]
        assert list(arr.shape) == g["shape"]
        assert arr.sum() == pytest.approx(g["sum"], abs=1e-9)
        np.testing.assert_allclose(arr[0, 0], g["corner"], atol=1e-12)

    def test_grayscale_and_random_crop(self, tmp_path):
        root = _make_folder(tmp_path)
        layout = FolderLayout(resize=16, crop=12, crop_mode="random", channels=1, seed=3)
        a = load_image_folder(root, layout)
        b = load_image_folder(root, layout)
        assert a.train.shape[1:] == (12, 12, 1)
        assert np.array_equal(a.train, b.train)

    def test_layout_validation(self):
        with pytest.raises(ValueError):
            FolderLayout(crop_mode="diagonal")
        with pytest.raises(ValueError):
            FolderLayout(resize=8, crop=16)


def test_split_requires_train():
    with pytest.raises(ValueError):
        DatasetSplit(train=np.zeros((0, 8, 8, 1)), test=np.zeros((1, 8, 8, 1)), test_labels=np.array([0]))
