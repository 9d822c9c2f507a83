"""Darkest-region segmentation and the SLIC superpixel baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import Frame, PipelineConfig, PipelineError, ShapeError

log = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
EIGHT_CONNECTED = ndimage.generate_binary_structure(2, 2)


class NoDarkRegion(PipelineError):
    module = "segmentation"
    exit_code = 3


@dataclass(frozen=True)
class SegmentMask:
    frame_index: int
    mask: np.ndarray
    anchor: tuple[int, int]
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ShapeError("mask must be 2-D", frame_index=self.frame_index)
        if not mask.any():
            raise ValueError("segment mask is empty")
        r, c = self.anchor
        if not mask[r, c]:
            raise ValueError(f"anchor {self.anchor} lies outside the mask")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "anchor", (int(r), int(c)))

    @property
    def area_px(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(min_x, min_y, max_x, max_y), inclusive."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def darkest_pixel(pixels: np.ndarray) -> tuple[int, int]:
    """Row-major first occurrence of the minimum intensity."""
    flat = int(np.argmin(pixels))
    r, c = divmod(flat, pixels.shape[1])
    return r, c


def threshold_segment(frame: Frame, cfg: PipelineConfig) -> SegmentMask:
    """Segment the dark lumen candidate of ``frame``.

    Takes the 4-connected component of sub-threshold pixels containing the
    darkest pixel. When that component is smaller than
    ``cfg.min_segment_pixels`` the largest sub-threshold component is used.
    """
    px = np.asarray(frame.pixels)
    below = px < cfg.intensity_threshold
    if not below.any():
        raise NoDarkRegion(f"no pixel below intensity {cfg.intensity_threshold}", frame_index=frame.index)
    labels, n = ndimage.label(below, structure=FOUR_CONNECTED)
    anchor = darkest_pixel(px)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    chosen = labels[anchor]
    flags: tuple[str, ...] = ()
    if sizes[chosen] < cfg.min_segment_pixels:
        chosen = int(np.argmax(sizes))  # lowest label wins ties, i.e. row-major first
        if sizes[chosen] < cfg.min_segment_pixels:
            raise NoDarkRegion(
                f"largest dark component has {sizes[chosen]} px (< {cfg.min_segment_pixels})",
                frame_index=frame.index,
            )
        comp = labels == chosen
        anchor = darkest_pixel(np.where(comp, px.astype(int), 256))
        flags = ("fallback_largest_component",)
    else:
        comp = labels == chosen
    return SegmentMask(frame_index=frame.index, mask=comp, anchor=anchor, flags=flags)


def mask_iou(a: SegmentMask | np.ndarray, b: SegmentMask | np.ndarray) -> float:
    ma = a.mask if isinstance(a, SegmentMask) else np.asarray(a, dtype=bool)
    mb = b.mask if isinstance(b, SegmentMask) else np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise ShapeError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ma & mb) / union


def slic_labels(
    intensity: np.ndarray,
    n_superpixels: int,
    compactness: float = 10.0,
    iterations: int = 10,
) -> np.ndarray:
    """SLIC on a single-channel image.

    Centers start on a regular grid with spacing S = sqrt(N / k) and are moved
    to the lowest-gradient pixel of their 3x3 neighbourhood. Each iteration
    assigns pixels within 2S of a center by
    D = sqrt(d_int**2 + (compactness / S)**2 * d_xy**2) and recomputes the
    centers as cluster means.
    """
    if n_superpixels < 2:
        raise ValueError("n_superpixels must be >= 2")
    img = np.asarray(intensity, dtype=float)
    h, w = img.shape
    step = np.sqrt(h * w / n_superpixels)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    while ny * nx < n_superpixels and ny * nx < h * w:
        if h / ny > w / nx:  # ties split the width first
            ny += 1
        else:
            nx += 1
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    cy, cx = [a.ravel() for a in np.meshgrid(ys, xs, indexing="ij")]
    cy = np.clip(np.floor(cy), 0, h - 1)
    cx = np.clip(np.floor(cx), 0, w - 1)

    gy, gx = np.gradient(img)
    grad = gy**2 + gx**2
    for k in range(cy.size):
        r0, c0 = int(cy[k]), int(cx[k])
        best = (grad[r0, c0], r0, c0)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = r0 + dr, c0 + dc
                if 0 <= r < h and 0 <= c < w and grad[r, c] < best[0]:
                    best = (grad[r, c], r, c)
        cy[k], cx[k] = best[1], best[2]
    ci = img[cy.astype(int), cx.astype(int)]

    rows, cols = np.mgrid[0:h, 0:w]
    spatial_w = (compactness / step) ** 2
    radius = int(np.ceil(2 * step))
    labels = np.zeros((h, w), dtype=int)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        for k in range(cy.size):
            r0 = max(int(cy[k]) - radius, 0)
            r1 = min(int(cy[k]) + radius + 1, h)
            c0 = max(int(cx[k]) - radius, 0)
            c1 = min(int(cx[k]) + radius + 1, w)
            win = img[r0:r1, c0:c1]
            d = (win - ci[k]) ** 2 + spatial_w * ((rows[r0:r1, c0:c1] - cy[k]) ** 2 + (cols[r0:r1, c0:c1] - cx[k]) ** 2)
            sub = dist[r0:r1, c0:c1]
            closer = d < sub
            sub[closer] = d[closer]
            labels[r0:r1, c0:c1][closer] = k
        counts = np.bincount(labels.ravel(), minlength=cy.size).astype(float)
        keep = counts > 0
        for arr, src in ((cy, rows), (cx, cols), (ci, img)):
            sums = np.bincount(labels.ravel(), weights=src.ravel().astype(float), minlength=cy.size)
            arr[keep] = sums[keep] / counts[keep]
    return labels


def slic_segment(frame: Frame, n_superpixels: int, compactness: float = 10.0) -> SegmentMask:
    """SLIC baseline: the superpixel containing the darkest pixel."""
    if n_superpixels < 2:
        raise ValueError("n_superpixels must be >= 2")
    px = np.asarray(frame.pixels)
    labels = slic_labels(px, n_superpixels, compactness)
    flags: tuple[str, ...] = ()
    if px.min() == px.max():
        anchor = (0, 0)
        flags = ("uniform_image",)
        log.warning("frame %d is uniform; SLIC segment is arbitrary", frame.index)
    else:
        anchor = darkest_pixel(px)
    return SegmentMask(frame_index=frame.index, mask=labels == labels[anchor], anchor=anchor, flags=flags)


def contour_ring(mask: np.ndarray) -> np.ndarray:
    """Pixels outside ``mask`` that touch it in the 8-neighbourhood."""
    mask = np.asarray(mask, dtype=bool)
    return ndimage.binary_dilation(mask, structure=EIGHT_CONNECTED) & ~mask


def save_overlay(frame: Frame, seg: SegmentMask, path: Path, alpha: float = 0.5) -> None:
    gray = np.asarray(frame.pixels, dtype=float)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    red = np.array([255.0, 0.0, 0.0])
    rgb[seg.mask] = (1 - alpha) * rgb[seg.mask] + alpha * red
    Image.fromarray(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8), mode="RGB").save(path)
