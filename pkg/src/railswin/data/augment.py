"""Geometric augmentation with exact box bookkeeping.

Transforms are (kind, *params) tuples:

    ("hflip",)            ("vflip",)
    ("scale", s)          s in [0.5, 1.5], about the image center
    ("rotate", deg)       |deg| <= 15, or any exact multiple of 90
    ("shear", k)          |k| <= 0.2, horizontal shear about the center
    ("translate", dx, dy) |dx| <= 0.2*W, |dy| <= 0.2*H, in pixels

Pixels are resampled bilinearly with zero fill (flips are exact index
reversals).  Boxes are mapped by transforming their four corners, taking
the axis-aligned hull, and clamping to the image; boxes that shrink below
4 px^2 are dropped.  Exact 90-degree rotations use integer matrices, so
lattice images and boxes round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from ..errors import InvalidParam
from .boxes import BBox

MIN_BOX_AREA = 4.0

TRANSFORM_KINDS = ("hflip", "vflip", "scale", "rotate", "shear", "translate")


def validate_transform(spec, width, height):
    kind, *args = spec
    if kind not in TRANSFORM_KINDS:
        raise InvalidParam(f"unknown transform {kind!r}")
    if kind in ("hflip", "vflip"):
        if args:
            raise InvalidParam(f"{kind} takes no parameters")
    elif kind == "scale":
        (s,) = args
        if not 0.5 <= s <= 1.5:
            raise InvalidParam(f"scale must be in [0.5, 1.5], got {s}")
    elif kind == "rotate":
        (deg,) = args
        if abs(deg) > 15 and deg % 90 != 0:
            raise InvalidParam(f"rotation must satisfy |deg| <= 15 or be a multiple of 90, got {deg}")
    elif kind == "shear":
        (k,) = args
        if abs(k) > 0.2:
            raise InvalidParam(f"shear must satisfy |k| <= 0.2, got {k}")
    elif kind == "translate":
        dx, dy = args
        if abs(dx) > 0.2 * width or abs(dy) > 0.2 * height:
            raise InvalidParam(
                f"translation ({dx}, {dy}) exceeds 20% of image extent {width}x{height}")


def _affine_matrix(spec, width, height):
    """Forward 3x3 map of continuous (x, y) image coordinates, or None for flips."""
    kind, *args = spec
    cx, cy = width / 2.0, height / 2.0

    def about_center(lin):
        m = np.eye(3)
        m[:2, :2] = lin
        m[0, 2] = cx - lin[0][0] * cx - lin[0][1] * cy
        m[1, 2] = cy - lin[1][0] * cx - lin[1][1] * cy
        return m

    if kind == "scale":
        (s,) = args
        return about_center([[s, 0.0], [0.0, s]])
    if kind == "rotate":
        (deg,) = args
        if deg % 90 == 0:
            quarter = int(deg // 90) % 4
            c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter]
        else:
            rad = math.radians(deg)
            c, s = math.cos(rad), math.sin(rad)
        return about_center([[c, -s], [s, c]])
    if kind == "shear":
        (k,) = args
        return about_center([[1.0, k], [0.0, 1.0]])
    if kind == "translate":
        dx, dy = args
        m = np.eye(3)
        m[0, 2], m[1, 2] = dx, dy
        return m
    return None  # flips take the exact path


def _affine_inverse(m):
    """Closed-form affine inverse; exact for integer rotation matrices."""
    a, b, tx = m[0]
    c, d, ty = m[1]
    det = a * d - b * c
    ia, ib = d / det, -b / det
    ic, id_ = -c / det, a / det
    return np.array([[ia, ib, -(ia * tx + ib * ty)],
                     [ic, id_, -(ic * tx + id_ * ty)],
                     [0.0, 0.0, 1.0]])


def _bilinear_sample(pixels, inv):
    """Resample with the inverse map; out-of-bounds reads contribute zero."""
    H, W = pixels.shape[:2]
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    px, py = xs + 0.5, ys + 0.5
    sx = inv[0, 0] * px + inv[0, 1] * py + inv[0, 2]
    sy = inv[1, 0] * px + inv[1, 1] * py + inv[1, 2]
    fx, fy = sx - 0.5, sy - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx, wy = fx - x0, fy - y0

    img = pixels.astype(np.float64)
    color = img.ndim == 3
    out = np.zeros_like(img)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        weight = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        v = img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        if color:
            weight, valid = weight[..., None], valid[..., None]
        out += weight * np.where(valid, v, 0.0)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _map_box(box, matrix):
    pts = [(matrix[0, 0] * x + matrix[0, 1] * y + matrix[0, 2],
            matrix[1, 0] * x + matrix[1, 1] * y + matrix[1, 2]) for x, y in box.corners()]
    return BBox.hull(pts)


def augment(img, transform):
    """Apply one transform to an annotated image; returns a new record.

    Pixel data, when present, is resampled; instance boxes are remapped
    and clamped, with degenerate leftovers dropped.
    """
    validate_transform(transform, img.width, img.height)
    kind = transform[0]

    if kind in ("hflip", "vflip"):
        pixels = None
        if img.pixels is not None:
            pixels = np.flip(img.pixels, axis=1 if kind == "hflip" else 0).copy()
        instances = []
        for box, cat in img.instances:
            if kind == "hflip":
                moved = BBox(img.width - box.x - box.w, box.y, box.w, box.h)
            else:
                moved = BBox(box.x, img.height - box.y - box.h, box.w, box.h)
            instances.append((moved, cat))
        return replace(img, pixels=pixels, instances=instances)

    matrix = _affine_matrix(transform, img.width, img.height)
    pixels = None
    if img.pixels is not None:
        pixels = _bilinear_sample(img.pixels, _affine_inverse(matrix))
    instances = []
    for box, cat in img.instances:
        moved = _map_box(box, matrix).clamped(img.width, img.height)
        if moved.area >= MIN_BOX_AREA:
            instances.append((moved, cat))
    return replace(img, pixels=pixels, instances=instances)


def apply_transforms(img, transforms):
    for t in transforms:
        img = augment(img, t)
    return img
