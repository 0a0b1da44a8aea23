# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Classical particle counter used as ground truth for the counting experiment.

Pipeline: threshold (Otsu or fixed) -> drop the scale-bar region -> label
connected components (union-find) -> calibrate areas -> filter by area,
bottom-edge contact and exclusion region -> count. An RGB overlay marks
counted components green and excluded ones red.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Literal

import numpy as np
from PIL import Image

logger = logging.getLogger("image_debate.oracle")

DEFAULT_MIN_AREA_UM2 = 10.0
COUNTED_COLOR = (0, 255, 0)
EXCLUDED_COLOR = (255, 0, 0)


class OracleError(Exception):
    """Base class for particle-oracle errors."""


class EmptyHistogram(OracleError):
    """Histogram has no mass."""


class ZeroPixelLength(OracleError):
    """Scale bar pixel length is zero."""


class NonPositiveLength(OracleError):
    """A physical length or scale is not positive."""


class RegionOutOfBounds(OracleError):
    """Exclusion region lies outside the image."""


class DimensionMismatch(OracleError):
    """Image and analysis result have different shapes."""


class UnsupportedImage(OracleError):
    """Image is not 8-bit grayscale."""


class Connectivity(int, Enum):
    """Pixel adjacency for component labeling."""

    FOUR = 4
    EIGHT = 8


class ExclusionMode(str, Enum):
    """How the scale-bar region is handled."""

    # Zero the region before labeling
    MASK = "mask"
    # Keep the pixels, flag components that touch the region
    FLAG = "flag"


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in pixel coordinates."""

    x: int
    y: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise NonPositiveLength(f"Rectangle must have positive size, got {self.width}x{self.height}")

    @property
    def x_end(self) -> int:
        return self.x + self.width

    @property
    def y_end(self) -> int:
        return self.y + self.height

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x_end <= width and self.y_end <= height

    def to_dict(self) -> dict[str, int]:
        return {"x": self.x, "y": self.y, "width": self.width, "height": self.height}

    @classmethod
    def parse(cls, text: str) -> "Rect":
        """Parse 'x,y,w,h'."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"Expected x,y,w,h, got {text!r}")
        x, y, w, h = (int(p) for p in parts)
        return cls(x, y, w, h)


@dataclass(frozen=True)
class DirectScale:
    """Known microns per pixel."""

    microns_per_pixel: float


@dataclass(frozen=True)
class ScaleBar:
    """Scale bar of a known physical length spanning `pixel_length` pixels."""

    physical_length_um: float
    pixel_length: int
    exclusion_region: Rect | None = None


ScaleSource = DirectScale | ScaleBar


@dataclass(frozen=True)
class ScaleCalibration:
    """Resolved pixel size."""

    source: ScaleSource
    microns_per_pixel: float

    @property
    def exclusion_region(self) -> Rect | None:
        return self.source.exclusion_region if isinstance(self.source, ScaleBar) else None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"microns_per_pixel": self.microns_per_pixel}
        if isinstance(self.source, ScaleBar):
            data["scale_bar"] = {
                "physical_length_um": self.source.physical_length_um,
                "pixel_length": self.source.pixel_length,
                "exclusion_region": self.source.exclusion_region.to_dict() if self.source.exclusion_region else None,
            }
        return data


@dataclass(frozen=True)
class Component:
    """One connected foreground set."""

    id: int
    pixel_count: int
    bounding_box: Rect
    area_um2: float = 0.0
    touches_bottom: bool = False
    in_exclusion: bool = False
    passes_area: bool = False

    @property
    def counted(self) -> bool:
        return self.passes_area and not self.touches_bottom and not self.in_exclusion

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "pixel_count": self.pixel_count,
            "area_um2": self.area_um2,
            "touches_bottom": self.touches_bottom,
            "in_exclusion": self.in_exclusion,
            "passes_area": self.passes_area,
            "bbox": self.bounding_box.to_dict(),
        }


@dataclass(frozen=True)
class ComponentLabeling:
    """Label map (0 = background, ids from 1) plus per-component stats."""

    label_map: np.ndarray
    components: list[Component]


@dataclass(frozen=True)
class ParticleOptions:
    """Counting options."""

    min_area_um2: float = DEFAULT_MIN_AREA_UM2
    connectivity: Connectivity = Connectivity.EIGHT
    threshold: Literal["otsu"] | int = "otsu"
    exclusion_mode: ExclusionMode = ExclusionMode.MASK
    # Used when the calibration carries no exclusion region
    exclusion: Rect | None = None

    def __post_init__(self) -> None:
        if self.threshold != "otsu" and not (isinstance(self.threshold, int) and 0 <= self.threshold <= 255):
            raise ValueError(f"threshold must be 'otsu' or an integer in [0, 255], got {self.threshold!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "ParticleOptions":
        data = data or {}
        threshold = data.get("threshold", "otsu")
        exclusion = data.get("exclusion")
        return cls(
            min_area_um2=float(data.get("min_area_um2", DEFAULT_MIN_AREA_UM2)),
            connectivity=Connectivity(int(data.get("connectivity", 8))),
            threshold=threshold if threshold == "otsu" else int(threshold),
            exclusion_mode=ExclusionMode(data.get("exclusion_mode", "mask")),
            exclusion=Rect.parse(exclusion) if isinstance(exclusion, str) else (Rect(**exclusion) if exclusion else None),
        )


@dataclass
class ParticleAnalysisResult:
    """Output of count_particles."""

    components: list[Component]
    count: int
    overlay: np.ndarray
    calibration: ScaleCalibration
    threshold: int
    label_map: np.ndarray = field(repr=False)

    def to_record(self, image: str) -> dict[str, Any]:
        """Per-image JSON record."""
        return {
            "image": image,
            "count": self.count,
            "microns_per_pixel": self.calibration.microns_per_pixel,
            "threshold": self.threshold,
            "components": [c.to_dict() for c in self.components],
        }


def otsu_threshold(histogram: np.ndarray | list[int]) -> int:
    """
    Otsu threshold over a 256-bin histogram.

    Classes are {<= t} and {> t}. The between-class variance is compared in
    exact integer arithmetic; ties go to the lowest t. With fewer than two
    occupied bins there is no valid split and the occupied intensity is
    returned, leaving the foreground empty.

    Args:
        histogram: 256 non-negative counts

    Returns:
        Threshold level in [0, 255]

    Raises:
        EmptyHistogram: If the histogram total is zero
        ValueError: If the histogram does not have 256 bins
    """
    counts = [int(c) for c in histogram]
    if len(counts) != 256:
        raise ValueError(f"Histogram must have 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError("Histogram counts must be non-negative")

    total = sum(counts)
    if total == 0:
        raise EmptyHistogram("Histogram total is zero")

    total_sum = sum(i * c for i, c in enumerate(counts))

    best_t: int | None = None
    best_num, best_den = 0, 1
    n0 = 0
    s0 = 0

    for t in range(256):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_sum - s0
        # n0*n1*(mu1 - mu0)^2 scaled to integers
        num = (s1 * n0 - s0 * n1) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den

    if best_t is None:
        return next(i for i, c in enumerate(counts) if c)
    return best_t


def histogram(image: np.ndarray) -> np.ndarray:
    """256-bin intensity histogram of an 8-bit image."""
    return np.bincount(image.ravel(), minlength=256)


def binarize(image: np.ndarray, threshold: Literal["otsu"] | int = "otsu") -> tuple[np.ndarray, int]:
    """
    Foreground mask (intensity strictly above the threshold).

    Returns:
        Tuple of (boolean mask, threshold used)
    """
    level = otsu_threshold(histogram(image)) if threshold == "otsu" else int(threshold)
    return image > level, level


def label_components(mask: np.ndarray, connectivity: Connectivity = Connectivity.EIGHT) -> ComponentLabeling:
    """
    Two-pass union-find labeling.

    Component ids follow raster order of each component's first pixel.

    Args:
        mask: Boolean foreground mask (h x w)
        connectivity: FOUR or EIGHT adjacency

    Returns:
        ComponentLabeling with pre-calibration components
    """
    height, width = mask.shape
    provisional = np.zeros((height, width), dtype=np.int64)
    parent: list[int] = [0]

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    if connectivity is Connectivity.FOUR:
        offsets = [(-1, 0), (0, -1)]
    else:
        offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]

    # first pass
    for y, x in np.argwhere(mask):
        neighbors = []
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            if 0 <= ny and 0 <= nx < width and provisional[ny, nx]:
                neighbors.append(int(provisional[ny, nx]))
        if not neighbors:
            parent.append(len(parent))
            provisional[y, x] = len(parent) - 1
        else:
            smallest = min(neighbors)
            provisional[y, x] = smallest
            for n in neighbors:
                union(smallest, n)

    # second pass
    roots = np.array([find(i) for i in range(len(parent))], dtype=np.int64)
    resolved = roots[provisional]

    flat = resolved.ravel()
    foreground = np.flatnonzero(flat)
    label_map = np.zeros((height, width), dtype=np.int32)
    components: list[Component] = []
    if foreground.size == 0:
        return ComponentLabeling(label_map, components)

    # renumber roots by first appearance in raster order
    root_values, first_index = np.unique(flat[foreground], return_index=True)
    order = np.argsort(first_index)
    renumber = np.zeros(roots.max() + 1, dtype=np.int32)
    renumber[root_values[order]] = np.arange(1, len(order) + 1, dtype=np.int32)
    label_map = renumber[resolved].astype(np.int32)

    for component_id in range(1, len(order) + 1):
        ys, xs = np.nonzero(label_map == component_id)
        bbox = Rect(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        components.append(Component(id=component_id, pixel_count=int(ys.size), bounding_box=bbox))

    return ComponentLabeling(label_map, components)


def calibrate(source: ScaleSource) -> ScaleCalibration:
    """
    Resolve microns per pixel.

    Raises:
        ZeroPixelLength: If a scale bar spans zero pixels
        NonPositiveLength: If a length or scale is not positive
    """
    if isinstance(source, DirectScale):
        if source.microns_per_pixel <= 0:
            raise NonPositiveLength(f"microns_per_pixel must be positive, got {source.microns_per_pixel}")
        return ScaleCalibration(source, float(source.microns_per_pixel))

    if source.pixel_length == 0:
        raise ZeroPixelLength("Scale bar pixel length is zero")
    if source.pixel_length < 0 or source.physical_length_um <= 0:
        raise NonPositiveLength(f"Scale bar lengths must be positive, got {source.physical_length_um} um / {source.pixel_length} px")
    return ScaleCalibration(source, source.physical_length_um / source.pixel_length)


def _analyzable_bottom_row(height: int, width: int, exclusion: Rect | None) -> int:
    """Bottom row after removing a full-width strip anchored at the image bottom."""
    if exclusion is not None and exclusion.x == 0 and exclusion.width == width and exclusion.y_end == height and exclusion.y > 0:
        return exclusion.y - 1
    return height - 1


def count_particles(image: np.ndarray, calibration: ScaleCalibration, options: ParticleOptions | None = None) -> ParticleAnalysisResult:
    """
    Count particles larger than the area cutoff.

    Args:
        image: 8-bit grayscale image (h x w)
        calibration: Pixel size (and optional scale-bar exclusion region)
        options: Counting options

    Returns:
        ParticleAnalysisResult

    Raises:
        RegionOutOfBounds: If the exclusion region is not inside the image
    """
    options = options or ParticleOptions()
    image = np.asarray(image, dtype=np.uint8)
    height, width = image.shape
    exclusion = calibration.exclusion_region or options.exclusion

    if exclusion is not None and not exclusion.within(width, height):
        raise RegionOutOfBounds(f"Exclusion region {exclusion.to_dict()} is outside the {width}x{height} image")

    mask, level = binarize(image, options.threshold)
    if exclusion is not None and options.exclusion_mode is ExclusionMode.MASK:
        mask[exclusion.y : exclusion.y_end, exclusion.x : exclusion.x_end] = False

    labeling = label_components(mask, options.connectivity)
    bottom_row = _analyzable_bottom_row(height, width, exclusion)
    bottom_labels = set(np.unique(labeling.label_map[bottom_row]).tolist())
    exclusion_labels: set[int] = set()
    if exclusion is not None:
        exclusion_labels = set(np.unique(labeling.label_map[exclusion.y : exclusion.y_end, exclusion.x : exclusion.x_end]).tolist())

    pixel_area = calibration.microns_per_pixel**2
    components = []
    for c in labeling.components:
        area = c.pixel_count * pixel_area
        components.append(
            Component(
                id=c.id,
                pixel_count=c.pixel_count,
                bounding_box=c.bounding_box,
                area_um2=area,
                touches_bottom=c.id in bottom_labels,
                in_exclusion=c.id in exclusion_labels,
                passes_area=area > options.min_area_um2,
            )
        )

    count = sum(1 for c in components if c.counted)
    logger.info(f"Threshold {level}: {len(components)} components, {count} counted")

    result = ParticleAnalysisResult(
        components=components,
        count=count,
        overlay=np.empty((0, 0, 3), dtype=np.uint8),
        calibration=calibration,
        threshold=level,
        label_map=labeling.label_map,
    )
    result.overlay = render_overlay(image, result)
    return result


def render_overlay(image: np.ndarray, result: ParticleAnalysisResult) -> np.ndarray:
    """
    Tint counted components green and excluded components red over the grayscale base.

    Raises:
        DimensionMismatch: If the image and the result's label map differ in shape
    """
    image = np.asarray(image, dtype=np.uint8)
    if image.shape != result.label_map.shape:
        raise DimensionMismatch(f"Image shape {image.shape} does not match label map {result.label_map.shape}")

    overlay = np.repeat(image[:, :, np.newaxis], 3, axis=2)
    counted_ids = [c.id for c in result.components if c.counted]
    excluded_ids = [c.id for c in result.components if not c.counted]
    overlay[np.isin(result.label_map, counted_ids)] = COUNTED_COLOR
    overlay[np.isin(result.label_map, excluded_ids)] = EXCLUDED_COLOR
    return overlay


def load_gray_image(path: str | Path) -> np.ndarray:
    """
    Load an 8-bit grayscale PNG or PGM.

    Raises:
        UnsupportedImage: If the file is not single-channel 8-bit
    """
    with Image.open(path) as img:
        if img.mode != "L":
            raise UnsupportedImage(f"{path}: expected 8-bit grayscale (mode L), got mode {img.mode}")
        return np.array(img, dtype=np.uint8)


def save_rgb_png(array: np.ndarray, path: str | Path) -> Path:
    """Write an RGB array as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")
    return path


def write_result_record(result: ParticleAnalysisResult, image_name: str, path: str | Path) -> Path:
    """Write the per-image JSON record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_record(image_name), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
