"""Partition, connectivity, and determinism checks for the superpixel clustering."""

import numpy as np
import pytest

from tsdn.slic import SlicParams, SuperpixelSegmentation, enforce_connectivity, slic_segment


def flood_fill_region(labels, start):
    """Independent BFS audit: all pixels 4-reachable from start with equal label."""
    h, w = labels.shape
    target = labels[start]
    seen = {start}
    stack = [start]
    while stack:
        y, x = stack.pop()
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and (ny, nx) not in seen and labels[ny, nx] == target:
                seen.add((ny, nx))
                stack.append((ny, nx))
    return seen


def assert_fully_connected(labels):
    for lbl in np.unique(labels):
        ys, xs = np.nonzero(labels == lbl)
        region = flood_fill_region(labels, (ys[0], xs[0]))
        assert len(region) == len(ys), f"label {lbl} is disconnected"


def random_texture(seed, size=48):
    rng = np.random.default_rng(seed)
    return rng.random((3, size, size)).astype(np.float32)


def boundary_pixel_count(labels):
    horiz = labels[:, :-1] != labels[:, 1:]
    vert = labels[:-1, :] != labels[1:, :]
    return int(horiz.sum() + vert.sum())


class TestSlicSegment:
    def test_constant_image_near_equal_grid_regions(self):
        img = np.full((3, 64, 64), 0.5, dtype=np.float32)
        seg = slic_segment(img, SlicParams(n_segments=4))
        assert seg.num_segments == 4
        counts = np.bincount(seg.labels.ravel(), minlength=4)
        assert np.all(np.abs(counts - 1024) <= 0.15 * 1024)
        # grid-aligned: the four quadrant corners carry four distinct labels
        corners = {seg.labels[0, 0], seg.labels[0, -1], seg.labels[-1, 0], seg.labels[-1, -1]}
        assert len(corners) == 4

    def test_partition_totality(self):
        seg = slic_segment(random_texture(0), SlicParams(n_segments=16))
        labels = np.unique(seg.labels)
        assert labels.min() == 0
        assert labels.max() == seg.num_segments - 1
        assert len(labels) == seg.num_segments

    def test_determinism(self):
        img = random_texture(1)
        params = SlicParams(n_segments=25, seed=7)
        a = slic_segment(img, params)
        b = slic_segment(img, params)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_connectivity_after_segmentation(self):
        seg = slic_segment(random_texture(2), SlicParams(n_segments=20))
        assert_fully_connected(seg.labels)

    def test_compactness_monotonicity(self):
        # correlated texture: raise compactness -> more grid-like regions
        from tsdn.imgproc import gaussian_blur, minmax_normalize

        rng = np.random.default_rng(3)
        img = minmax_normalize(gaussian_blur(rng.random((3, 48, 48)), 2.0)).astype(np.float32)
        loose = slic_segment(img, SlicParams(n_segments=16, compactness=1.0))
        tight = slic_segment(img, SlicParams(n_segments=16, compactness=40.0))
        assert boundary_pixel_count(tight.labels) <= boundary_pixel_count(loose.labels)

    def test_grayscale_input_accepted(self):
        rng = np.random.default_rng(4)
        seg = slic_segment(rng.random((1, 32, 32)), SlicParams(n_segments=9))
        assert seg.labels.shape == (32, 32)

    def test_too_many_segments_rejected(self):
        with pytest.raises(ValueError):
            slic_segment(np.zeros((3, 4, 4)), SlicParams(n_segments=17))

    def test_centers_one_per_label(self):
        seg = slic_segment(random_texture(5), SlicParams(n_segments=12))
        assert seg.centers.shape == (seg.num_segments, 5)
        assert np.all(np.isfinite(seg.centers))


class TestEnforceConnectivity:
    def _seg(self, labels):
        labels = np.asarray(labels, dtype=np.int32)
        k = labels.max() + 1
        centers = np.zeros((k, 5))
        return SuperpixelSegmentation(labels=labels, num_segments=k, centers=centers)

    def test_connected_input_is_fixed_point(self):
        labels = np.zeros((6, 6), dtype=np.int32)
        labels[:, 3:] = 1
        out = enforce_connectivity(self._seg(labels), min_size=2)
        assert out.num_segments == 2
        # partition preserved up to renumbering
        assert len(np.unique(out.labels[:, :3])) == 1
        assert len(np.unique(out.labels[:, 3:])) == 1
        assert out.labels[0, 0] != out.labels[0, 3]

    def test_single_pixel_island_absorbed(self):
        labels = np.zeros((5, 5), dtype=np.int32)
        labels[2, 2] = 1
        out = enforce_connectivity(self._seg(labels), min_size=2)
        assert out.num_segments == 1
        assert np.all(out.labels == 0)

    def test_disconnected_label_is_split(self):
        labels = np.zeros((4, 8), dtype=np.int32)
        labels[:, :3] = 1
        labels[:, 5:] = 1
        out = enforce_connectivity(self._seg(labels), min_size=2)
        assert out.num_segments == 3
        assert out.labels[0, 0] != out.labels[0, 7]

    @pytest.mark.parametrize("seed", range(3))
    def test_random_labels_pass_flood_fill_audit(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 5, size=(24, 24)).astype(np.int32)
        out = enforce_connectivity(self._seg(labels), min_size=4)
        assert_fully_connected(out.labels)
        # labels dense in [0, K)
        uniq = np.unique(out.labels)
        np.testing.assert_array_equal(uniq, np.arange(out.num_segments))
        # no region smaller than min_size survives unless isolated
        counts = np.bincount(out.labels.ravel())
        assert counts.min() >= 1
