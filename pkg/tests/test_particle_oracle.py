# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Tests for the classical particle counter.
"""

import math
from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from PIL import Image

from src.particle_oracle import (
    COUNTED_COLOR,
    EXCLUDED_COLOR,
    Connectivity,
    DimensionMismatch,
    DirectScale,
    EmptyHistogram,
    ExclusionMode,
    NonPositiveLength,
    ParticleOptions,
    Rect,
    RegionOutOfBounds,
    ScaleBar,
    UnsupportedImage,
    ZeroPixelLength,
    binarize,
    calibrate,
    count_particles,
    label_components,
    load_gray_image,
    otsu_threshold,
    render_overlay,
)

SIZE = 100


def blank(height=SIZE, width=SIZE):
    return np.zeros((height, width), dtype=np.uint8)


def draw_disk(image, cy, cx, r, value=255):
    yy, xx = np.ogrid[: image.shape[0], : image.shape[1]]
    image[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value
    return image


def brute_force_otsu(counts):
    """Exact between-class variance search, lowest t on ties."""
    total = sum(counts)
    best_t, best = None, None
    for t in range(256):
        n0 = sum(counts[: t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * counts[i] for i in range(t + 1)), n0)
        mu1 = Fraction(sum(i * counts[i] for i in range(t + 1, 256)), n1)
        score = Fraction(n0, total) * Fraction(n1, total) * (mu1 - mu0) ** 2
        if best is None or score > best:
            best_t, best = t, score
    if best_t is None:
        return next(i for i, c in enumerate(counts) if c)
    return best_t


def bfs_labels(mask, connectivity):
    """Reference labeling: flood fill from each unvisited pixel in raster order."""
    height, width = mask.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    labels = np.zeros((height, width), dtype=np.int32)
    next_id = 0
    for y in range(height):
        for x in range(width):
            if not mask[y, x] or labels[y, x]:
                continue
            next_id += 1
            labels[y, x] = next_id
            queue = deque([(y, x)])
            while queue:
                cy, cx = queue.popleft()
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < height and 0 <= nx < width and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = next_id
                        queue.append((ny, nx))
    return labels


@pytest.fixture
def half_micron():
    """0.5 microns per pixel."""
    return calibrate(DirectScale(0.5))


class TestOtsuThreshold:
    """Tests for otsu_threshold."""

    def test_two_levels_lowest_tie(self):
        """Test that every split between two spikes ties and the lowest wins."""
        counts = [0] * 256
        counts[50] = 10
        counts[200] = 10
        assert otsu_threshold(counts) == 50

    def test_three_levels(self):
        """Test a three-spike histogram splits off the bright spike."""
        counts = [0] * 256
        counts[10] = 100
        counts[20] = 100
        counts[240] = 50
        assert otsu_threshold(counts) == 20

    def test_single_bin(self):
        """Test that a one-level image gets its own level (empty foreground)."""
        counts = [0] * 256
        counts[128] = 42
        assert otsu_threshold(counts) == 128

    def test_empty(self):
        """Test that an all-zero histogram raises."""
        with pytest.raises(EmptyHistogram):
            otsu_threshold([0] * 256)

    def test_wrong_length(self):
        """Test that the histogram must have 256 bins."""
        with pytest.raises(ValueError):
            otsu_threshold([1] * 255)

    def test_negative_count(self):
        """Test that negative counts are rejected."""
        counts = [1] * 256
        counts[3] = -1
        with pytest.raises(ValueError):
            otsu_threshold(counts)

    def test_matches_exact_search(self):
        """Test random histograms against an exact rational search."""
        rng = np.random.default_rng(7)
        for _ in range(1000):
            occupied = rng.integers(1, 6)
            counts = [0] * 256
            for level in rng.choice(256, size=occupied, replace=False):
                counts[int(level)] = int(rng.integers(1, 50))
            assert otsu_threshold(counts) == brute_force_otsu(counts), counts


class TestBinarize:
    """Tests for binarize."""

    def test_strictly_above_threshold(self):
        """Test that pixels equal to a fixed level are background."""
        image = np.array([[99, 100, 101]], dtype=np.uint8)
        mask, level = binarize(image, 100)
        assert level == 100
        assert mask.tolist() == [[False, False, True]]

    def test_otsu_splits_two_levels(self):
        """Test that Otsu separates a two-level image at the darker level."""
        image = np.array([[20, 20, 200], [20, 200, 200]], dtype=np.uint8)
        mask, level = binarize(image)
        assert level == 20
        assert mask.tolist() == [[False, False, True], [False, True, True]]


class TestLabelComponents:
    """Tests for label_components."""

    @pytest.mark.parametrize("connectivity", [Connectivity.FOUR, Connectivity.EIGHT])
    def test_matches_flood_fill(self, connectivity):
        """Test random masks against a flood-fill reference, including ids."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            mask = rng.random((64, 64)) < rng.uniform(0.2, 0.6)
            labeling = label_components(mask, connectivity)
            expected = bfs_labels(mask, int(connectivity))
            np.testing.assert_array_equal(labeling.label_map, expected)
            assert len(labeling.components) == expected.max()

    def test_diagonal_pair(self):
        """Test that diagonal neighbors join only under 8-connectivity."""
        mask = np.array([[1, 0], [0, 1]], dtype=bool)
        assert len(label_components(mask, Connectivity.FOUR).components) == 2
        assert len(label_components(mask, Connectivity.EIGHT).components) == 1

    def test_u_shape_merges(self):
        """Test that two provisional labels merged late become one component."""
        mask = np.array([[1, 0, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)
        labeling = label_components(mask, Connectivity.FOUR)
        assert len(labeling.components) == 1
        assert labeling.components[0].pixel_count == 7

    def test_square_stats(self):
        """Test a 3x3 square's pixel count and bounding box."""
        mask = np.zeros((10, 10), dtype=bool)
        mask[4:7, 2:5] = True
        component = label_components(mask).components[0]
        assert component.pixel_count == 9
        assert component.bounding_box == Rect(2, 4, 3, 3)

    def test_empty_mask(self):
        """Test that an empty mask has no components."""
        labeling = label_components(np.zeros((5, 5), dtype=bool))
        assert labeling.components == []
        assert not labeling.label_map.any()


class TestCalibrate:
    """Tests for calibrate."""

    def test_direct(self):
        """Test a known pixel size."""
        assert calibrate(DirectScale(0.25)).microns_per_pixel == 0.25

    def test_scale_bar(self):
        """Test that a 50 um bar over 100 px gives 0.5 um/px."""
        assert calibrate(ScaleBar(50.0, 100)).microns_per_pixel == 0.5

    def test_zero_pixels(self):
        """Test that a zero-length bar raises."""
        with pytest.raises(ZeroPixelLength):
            calibrate(ScaleBar(50.0, 0))

    @pytest.mark.parametrize("source", [DirectScale(0.0), DirectScale(-1.0), ScaleBar(0.0, 10), ScaleBar(10.0, -5)])
    def test_non_positive(self, source):
        """Test non-positive lengths and scales."""
        with pytest.raises(NonPositiveLength):
            calibrate(source)

    def test_exclusion_region_carried(self):
        """Test that the scale-bar region comes through the calibration."""
        region = Rect(0, 90, SIZE, 10)
        assert calibrate(ScaleBar(50.0, 100, region)).exclusion_region == region


class TestCountParticles:
    """Tests for count_particles."""

    def test_area_cutoff(self, half_micron):
        """Test that only disks above 10 um^2 are counted."""
        image = blank()
        draw_disk(image, 20, 20, 10)
        draw_disk(image, 20, 70, 2)
        draw_disk(image, 60, 40, 8)

        result = count_particles(image, half_micron)

        assert result.count == 2
        assert len(result.components) == 3

    def test_disk_area_matches_geometry(self, half_micron):
        """Test the r=10 disk's pixel count is within 5% of pi r^2."""
        result = count_particles(draw_disk(blank(), 40, 40, 10), half_micron)
        assert result.components[0].pixel_count == pytest.approx(math.pi * 100, rel=0.05)
        assert result.components[0].area_um2 == pytest.approx(result.components[0].pixel_count * 0.25)

    def test_bottom_touching_excluded(self, half_micron):
        """Test that a disk cut by the bottom edge does not change the count."""
        image = draw_disk(blank(), 30, 30, 10)
        baseline = count_particles(image, half_micron).count

        draw_disk(image, SIZE - 3, 70, 8)
        result = count_particles(image, half_micron)

        assert result.count == baseline
        assert any(c.touches_bottom and not c.counted for c in result.components)

    def test_scale_bar_masked(self):
        """Test that a bright scale bar in the exclusion strip is never labeled."""
        image = draw_disk(blank(), 30, 30, 10)
        image[93:96, 10:60] = 255
        calibration = calibrate(ScaleBar(50.0, 100, Rect(0, 90, SIZE, 10)))

        result = count_particles(image, calibration)

        assert result.count == 1
        assert len(result.components) == 1

    def test_strip_top_is_bottom_edge(self):
        """Test that particles touching the strip count as bottom-touching."""
        image = blank()
        image[80:90, 40:50] = 255
        calibration = calibrate(ScaleBar(50.0, 100, Rect(0, 90, SIZE, 10)))

        result = count_particles(image, calibration)

        assert result.components[0].touches_bottom
        assert result.count == 0

    def test_flag_mode(self, half_micron):
        """Test that flag mode keeps the region's pixels but excludes its components."""
        image = draw_disk(blank(), 30, 30, 10)
        draw_disk(image, 80, 80, 6)
        options = ParticleOptions(exclusion_mode=ExclusionMode.FLAG, exclusion=Rect(70, 70, 25, 20))

        result = count_particles(image, half_micron, options)

        assert result.count == 1
        assert [c.in_exclusion for c in result.components] == [False, True]

    def test_region_out_of_bounds(self, half_micron):
        """Test that a region outside the image raises."""
        options = ParticleOptions(exclusion=Rect(90, 90, 20, 20))
        with pytest.raises(RegionOutOfBounds):
            count_particles(blank(), half_micron, options)

    def test_fixed_threshold(self, half_micron):
        """Test that a fixed level is used as given."""
        image = draw_disk(blank(), 40, 40, 10, value=100)
        assert count_particles(image, half_micron, ParticleOptions(threshold=150)).count == 0
        assert count_particles(image, half_micron, ParticleOptions(threshold=50)).count == 1

    def test_count_never_rises_with_cutoff(self, half_micron):
        """Test that raising the area cutoff can only lower the count."""
        rng = np.random.default_rng(21)
        for _ in range(20):
            image = blank()
            for _ in range(8):
                draw_disk(image, int(rng.integers(10, 80)), int(rng.integers(10, 90)), int(rng.integers(1, 12)))

            counts = [
                count_particles(image, half_micron, ParticleOptions(min_area_um2=cutoff)).count
                for cutoff in (0.0, 1.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0)
            ]

            assert counts == sorted(counts, reverse=True)

    def test_translation_invariant(self, half_micron):
        """Test that shifting the particles, clear of the bottom edge, keeps the count and areas."""
        rng = np.random.default_rng(8)
        disks = [(int(rng.integers(12, 80)), int(rng.integers(12, 90)), int(rng.integers(2, 12))) for _ in range(8)]

        results = []
        for dy, dx in [(0, 0), (5, 17), (40, 3), (23, 40)]:
            image = blank(160, 160)
            for cy, cx, r in disks:
                draw_disk(image, cy + dy, cx + dx, r)
            results.append(count_particles(image, half_micron))

        for result in results[1:]:
            assert result.count == results[0].count
            assert sorted(c.pixel_count for c in result.components) == sorted(c.pixel_count for c in results[0].components)

    def test_bad_threshold(self):
        """Test the threshold range."""
        with pytest.raises(ValueError):
            ParticleOptions(threshold=300)

    def test_options_from_dict(self):
        """Test building options from config."""
        options = ParticleOptions.from_dict({"connectivity": 4, "threshold": "120", "exclusion": "0,90,100,10"})
        assert options.connectivity is Connectivity.FOUR
        assert options.threshold == 120
        assert options.exclusion == Rect(0, 90, 100, 10)


class TestOverlay:
    """Tests for render_overlay."""

    def test_partition(self, half_micron):
        """Test that foreground is green or red and background stays gray."""
        image = blank() + 20
        draw_disk(image, 20, 20, 10)
        draw_disk(image, 60, 60, 2)
        draw_disk(image, SIZE - 2, 50, 5)

        result = count_particles(image, half_micron)
        overlay = result.overlay
        foreground = result.label_map > 0

        assert overlay.shape == (SIZE, SIZE, 3)
        colors = {tuple(int(v) for v in px) for px in overlay[foreground]}
        assert colors <= {COUNTED_COLOR, EXCLUDED_COLOR}
        assert COUNTED_COLOR in colors and EXCLUDED_COLOR in colors
        for channel in range(3):
            np.testing.assert_array_equal(overlay[~foreground][:, channel], image[~foreground])

    def test_dimension_mismatch(self, half_micron):
        """Test that a differently sized image is rejected."""
        result = count_particles(draw_disk(blank(), 40, 40, 10), half_micron)
        with pytest.raises(DimensionMismatch):
            render_overlay(blank(50, 50), result)


class TestLoadGrayImage:
    """Tests for image loading."""

    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_round_trip(self, tmp_path, suffix):
        """Test that grayscale files load unchanged."""
        image = draw_disk(blank(), 40, 40, 10)
        path = tmp_path / f"particles{suffix}"
        Image.fromarray(image).save(path)

        np.testing.assert_array_equal(load_gray_image(path), image)

    def test_rgb_rejected(self, tmp_path):
        """Test that color images are unsupported."""
        path = tmp_path / "color.png"
        Image.new("RGB", (10, 10)).save(path)
        with pytest.raises(UnsupportedImage):
            load_gray_image(path)
