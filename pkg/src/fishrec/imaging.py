"""Image, mask and normalized-rectangle primitives.

Images are numpy arrays with values in [0, 1]: ``(H, W)`` for grayscale and
``(H, W, 3)`` RGB for color.  Masks are ``(H, W)`` boolean arrays.  Rectangles
live in normalized coordinates where ``x`` runs along the image width and
``y`` along the height, both in [0, 1].
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image as PILImage

MAX_BBOX_SIDE = 200
IMAGE_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")


class UnusableSample(ValueError):
    """Raised when an image/mask pair cannot be used (e.g. empty mask)."""


class InfeasibleRect(ValueError):
    """Raised when a rectangle violates the size/position box constraints."""


def round_half_away(v):
    """Round half away from zero (numpy's ``round`` is half-to-even)."""
    v = np.asarray(v, dtype=float)
    out = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return out if out.ndim else float(out)


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise ValueError(f"image must be (H, W) or (H, W, 3), got {image.shape}")
    if image.size == 0:
        raise ValueError("empty image")
    if np.any(image < 0) or np.any(image > 1):
        raise ValueError("image values must lie in [0, 1]")
    return image


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma (ITU-R BT.601) of an RGB image; grayscale input is returned as float."""
    if image.ndim == 2:
        return image.astype(np.float64, copy=False)
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle: center ``(cx, cy)`` and size ``(w, h)``, normalized."""

    cx: float
    cy: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def size(self) -> tuple[float, float]:
        return (self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def is_feasible(self, tol: float = 1e-9) -> bool:
        if not (-tol <= self.w <= 1 + tol and -tol <= self.h <= 1 + tol):
            return False
        x0, y0, x1, y1 = self.bounds()
        return min(x0, y0) >= -tol and max(x1, y1) <= 1 + tol

    def validate(self) -> "Rect":
        if not self.is_feasible():
            raise InfeasibleRect(f"rect {self} violates 0 <= s <= 1, 0 <= x +- s/2 <= 1")
        return self

    def with_center(self, cx: float, cy: float) -> "Rect":
        return Rect(cx, cy, self.w, self.h)

    def with_size(self, w: float, h: float) -> "Rect":
        return Rect(self.cx, self.cy, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def clamp_rect(r: Rect) -> Rect:
    """Project ``r`` onto the feasible set: clip the size first, then shift the center minimally."""
    w = min(max(r.w, 0.0), 1.0)
    h = min(max(r.h, 0.0), 1.0)
    cx = min(max(r.cx, w / 2), 1.0 - w / 2)
    cy = min(max(r.cy, h / 2), 1.0 - h / 2)
    return Rect(cx, cy, w, h)


def fit_size_to_center(r: Rect) -> Rect:
    """Shrink ``r`` uniformly (center fixed) until it satisfies the box constraints."""
    limit_w = 2 * min(r.cx, 1 - r.cx)
    limit_h = 2 * min(r.cy, 1 - r.cy)
    factor = 1.0
    if r.w > limit_w:
        factor = min(factor, limit_w / r.w)
    if r.h > limit_h:
        factor = min(factor, limit_h / r.h)
    factor = max(factor, 0.0)
    return Rect(r.cx, r.cy, min(r.w * factor, 1.0), min(r.h * factor, 1.0))


def overlap_rate(a: Rect, b: Rect) -> float:
    """Intersection-over-union of two rectangles (0 when the union is empty)."""
    if a == b:
        return 1.0 if a.area > 0 else 0.0
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def pixel_box(shape: tuple[int, ...], rect: Rect) -> tuple[int, int, int, int]:
    """Denormalize ``rect`` to integer pixel bounds ``(x0, y0, x1, y1)`` (exclusive ends)."""
    height, width = shape[:2]
    x0, y0, x1, y1 = rect.bounds()
    px0 = int(round_half_away(x0 * width))
    px1 = int(round_half_away(x1 * width))
    py0 = int(round_half_away(y0 * height))
    py1 = int(round_half_away(y1 * height))
    px0 = min(max(px0, 0), width - 1)
    py0 = min(max(py0, 0), height - 1)
    px1 = min(max(px1, px0 + 1), width)
    py1 = min(max(py1, py0 + 1), height)
    return px0, py0, px1, py1


def crop_region(image: np.ndarray, rect: Rect) -> np.ndarray:
    """Pixels of ``image`` covered by ``rect``; degenerate rects yield at least 1x1."""
    rect.validate()
    x0, y0, x1, y1 = pixel_box(image.shape, rect)
    return image[y0:y1, x0:x1]


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight bounding box ``(x0, y0, x1, y1)`` of a nonempty mask (exclusive ends)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise UnusableSample("mask is empty")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def rescale_to_bbox(image: np.ndarray, mask: np.ndarray,
                    max_side: int = MAX_BBOX_SIDE) -> tuple[np.ndarray, np.ndarray]:
    """Crop to the mask's bounding box and downscale so it fits in ``max_side`` squared.

    The aspect ratio is preserved and small objects are never upscaled.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    x0, y0, x1, y1 = mask_bbox(mask)
    img = image[y0:y1, x0:x1]
    msk = mask[y0:y1, x0:x1]
    bw, bh = x1 - x0, y1 - y0
    scale = min(1.0, max_side / max(bw, bh))
    if scale < 1.0:
        nw = max(1, int(round_half_away(bw * scale)))
        nh = max(1, int(round_half_away(bh * scale)))
        nw, nh = min(nw, max_side), min(nh, max_side)
        img = cv2.resize(img.astype(np.float32), (nw, nh), interpolation=cv2.INTER_AREA)
        img = np.clip(img.astype(np.float64), 0.0, 1.0)
        msk = cv2.resize(msk.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST) > 0
        if not msk.any():
            raise UnusableSample("mask vanished after rescaling")
    return np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(msk)


# --------------------------------------------------------------------------
# Dataset I/O
# --------------------------------------------------------------------------

@dataclass
class Sample:
    name: str
    image: np.ndarray
    mask: np.ndarray
    species: str
    trajectory_id: str


def read_image(path: str | Path, grayscale: bool | None = None) -> np.ndarray:
    with PILImage.open(path) as im:
        if grayscale is None:
            grayscale = im.mode in ("L", "I", "I;16", "1", "F")
        im = im.convert("L" if grayscale else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(round_half_away(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_labels(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"filename", "species", "trajectory_id"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: labels header lacks {sorted(missing)}")
        return [dict(row) for row in reader]


def find_image(images_dir: Path, filename: str) -> Path:
    direct = images_dir / filename
    if direct.exists():
        return direct
    stem = Path(filename).stem
    for ext in IMAGE_EXTENSIONS:
        p = images_dir / (stem + ext)
        if p.exists():
            return p
    raise FileNotFoundError(f"image for {filename!r} not found in {images_dir}")


def load_dataset(root: str | Path, grayscale: bool | None = None) -> list[Sample]:
    """Load ``images/``, ``masks/`` and ``labels.csv`` from a dataset directory."""
    root = Path(root)
    rows = read_labels(root / "labels.csv")
    samples = []
    for row in rows:
        img_path = find_image(root / "images", row["filename"])
        mask_path = root / "masks" / (Path(row["filename"]).stem + ".png")
        if not mask_path.exists():
            raise FileNotFoundError(f"mask {mask_path} not found")
        image = read_image(img_path, grayscale)
        mask = read_mask(mask_path)
        samples.append(Sample(Path(row["filename"]).stem, image, mask,
                              row["species"], row["trajectory_id"]))
    return samples
