"""Dataset layout scanning, synthetic generation, and codec round-trips."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from tsdn.dataio import (
    DatasetLayoutError,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_mask,
    save_image,
    scan_dataset,
)


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def make_tree(root: Path, n_train=3, defects=("crack", "hole"), n_each=2, missing_mask=False):
    rng = np.random.default_rng(0)
    cat = root / "widget"
    (cat / "train" / "good").mkdir(parents=True)
    for i in range(n_train):
        save_image(rng.random((3, 16, 16)), cat / "train" / "good" / f"{i:03d}.png")
    (cat / "test" / "good").mkdir(parents=True)
    save_image(rng.random((3, 16, 16)), cat / "test" / "good" / "000.png")
    for defect in defects:
        (cat / "test" / defect).mkdir(parents=True)
        (cat / "ground_truth" / defect).mkdir(parents=True)
        for i in range(n_each):
            save_image(rng.random((3, 16, 16)), cat / "test" / defect / f"{i:03d}.png")
            if not (missing_mask and i == 0):
                mask = (rng.random((16, 16)) > 0.5).astype(np.float32)
                save_image(mask, cat / "ground_truth" / defect / f"{i:03d}_mask.png")
    return cat


class TestScanDataset:
    def test_enumeration_and_pairing(self, tmp_path):
        make_tree(tmp_path)
        items = scan_dataset(tmp_path, "widget")
        train = [i for i in items if i.split == "train"]
        assert len(train) == 3
        assert all(i.defect_type == "good" and i.mask_path is None for i in train)
        abnormal = [i for i in items if i.is_abnormal]
        assert len(abnormal) == 4
        assert all(i.mask_path is not None and i.mask_path.name.endswith("_mask.png") for i in abnormal)
        # filesystem oracle
        disk = sorted(str(p) for p in (tmp_path / "widget" / "test").rglob("*.png"))
        assert sorted(str(i.image_path) for i in items if i.split == "test") == disk

    def test_deterministic_order_fixed_point(self, tmp_path):
        make_tree(tmp_path)
        a = scan_dataset(tmp_path, "widget")
        b = scan_dataset(tmp_path, "widget")
        assert a == b
        # lexicographic within each directory group
        by_dir = {}
        for item in a:
            by_dir.setdefault(item.image_path.parent, []).append(item.image_path)
        for paths in by_dir.values():
            assert paths == sorted(paths)

    def test_empty_test_is_fine(self, tmp_path):
        cat = tmp_path / "widget"
        (cat / "train" / "good").mkdir(parents=True)
        save_image(np.zeros((3, 8, 8)), cat / "train" / "good" / "000.png")
        items = scan_dataset(tmp_path, "widget")
        assert all(i.split == "train" for i in items)

    def test_missing_train_dir_names_expected_path(self, tmp_path):
        with pytest.raises(DatasetLayoutError) as err:
            scan_dataset(tmp_path, "widget")
        assert "train" in str(err.value) and "widget" in str(err.value)

    def test_abnormal_without_mask_warns_and_flags(self, tmp_path):
        make_tree(tmp_path, missing_mask=True)
        with pytest.warns(UserWarning):
            items = scan_dataset(tmp_path, "widget")
        flagged = [i for i in items if i.is_abnormal and i.mask_path is None]
        assert len(flagged) == 2


class TestGenerateSynthetic:
    def test_layout_matches_scan_expectation(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_train=4, n_test_normal=2, n_test_abnormal=3, seed=1)
        category = generate_synthetic(cfg, tmp_path)
        items = scan_dataset(tmp_path, category.name)
        assert sum(i.split == "train" for i in items) == 4
        assert sum(i.is_abnormal for i in items) == 3
        assert all(i.mask_path is not None for i in items if i.is_abnormal)

    def test_no_abnormal_no_ground_truth_dir(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_train=2, n_test_normal=1, n_test_abnormal=0, seed=2)
        category = generate_synthetic(cfg, tmp_path)
        assert not (category / "ground_truth").exists()

    def test_mask_exactly_localizes_defect(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_train=1, n_test_normal=1, n_test_abnormal=2, seed=3)
        category = generate_synthetic(cfg, tmp_path)
        items = [i for i in scan_dataset(tmp_path, category.name) if i.is_abnormal]
        for item in items:
            img = load_image(item.image_path)
            mask = load_mask(item.mask_path)
            inside = img[:, mask > 0]
            # solid patch: constant color inside the mask
            assert np.allclose(inside, inside[:, :1], atol=1 / 255)
            assert mask.sum() > 0

    def test_square_defect_area_matches_request(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_train=1, n_test_normal=1, n_test_abnormal=4, defect_size=(8, 8), seed=4)
        category = generate_synthetic(cfg, tmp_path)
        for item in scan_dataset(tmp_path, category.name):
            if item.is_abnormal:
                assert load_mask(item.mask_path).sum() == 64

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = SynthConfig(image_size=32, n_train=3, n_test_normal=2, n_test_abnormal=2, seed=5)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    @pytest.mark.parametrize("texture", ["stripes", "checker", "blobs"])
    def test_textures_render(self, tmp_path, texture):
        cfg = SynthConfig(image_size=32, n_train=1, n_test_normal=1, n_test_abnormal=1, texture=texture, seed=6)
        category = generate_synthetic(cfg, tmp_path)
        img = load_image(next(iter(sorted((category / "train" / "good").glob("*.png")))))
        assert img.shape == (3, 32, 32)
        assert img.std() > 0.01


class TestCodecs:
    def test_round_trip_bounded_by_quantization(self, tmp_path):
        rng = np.random.default_rng(10)
        img = rng.random((3, 9, 13)).astype(np.float32)
        path = tmp_path / "img.png"
        save_image(img, path)
        back = load_image(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1.0 / 255.0

    def test_known_byte_values(self, tmp_path):
        img = np.array([[[0, 85], [170, 255]]], dtype=np.float64) / 255.0
        path = tmp_path / "quad.png"
        save_image(img, path)
        back = load_image(path)
        np.testing.assert_allclose(back[0], [[0.0, 0.3333], [0.6667, 1.0]], atol=1e-4)

    def test_mask_binarization(self, tmp_path):
        mask = np.array([[0.0, 1.0], [1.0, 0.0]])
        path = tmp_path / "mask.png"
        save_image(mask, path)
        back = load_mask(path)
        assert set(np.unique(back)) <= {0.0, 1.0}
        np.testing.assert_array_equal(back, mask)

    def test_unreadable_file_raises_with_path(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(ValueError) as err:
            load_image(path)
        assert "broken.png" in str(err.value)
