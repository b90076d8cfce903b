"""Shared generators for tests: fish-shaped supports, part layouts, planted patches."""
import numpy as np

from fishrec.imaging import Rect


def fish_support():
    """Pixel coordinates of a body ellipse plus tail triangle, centred at the origin."""
    xs, ys = np.meshgrid(np.arange(-70, 70, 1.0), np.arange(-40, 40, 1.0))
    body = (xs / 50.0) ** 2 + (ys / 18.0) ** 2 <= 1
    tail = (xs < -42) & (xs > -66) & (np.abs(ys) <= (-xs - 42) * 0.8)
    m = body | tail
    return np.column_stack([xs[m], ys[m]])


def random_layout(rng, support, k=6, minsep=14.0):
    pts = []
    while len(pts) < k:
        p = support[rng.integers(len(support))] + rng.uniform(-0.5, 0.5, 2)
        if all(np.hypot(*(p - q)) > minsep for q in pts):
            pts.append(p)
    return np.array(pts)


def similarity(x, angle, scale, flip, shift):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    y = np.array(x, dtype=float)
    if flip:
        y[:, 0] = -y[:, 0]
    return (y @ rot.T) * scale + shift


def planted_instance(rng, size=16, side=None):
    """A 16x16 textured image, a rect whose patch is the planted target, and an init offset."""
    img = rng.random((size, size)) * 0.3
    side = side or int(rng.integers(4, 8))
    cx = int(rng.integers(side // 2 + 1, size - side // 2 - 1))
    cy = int(rng.integers(side // 2 + 1, size - side // 2 - 1))
    x0, y0 = cx - side // 2, cy - side // 2
    img[y0:y0 + side, x0:x0 + side] = rng.random((side, side)) * 0.7 + 0.3
    target = Rect((x0 + side / 2) / size, (y0 + side / 2) / size, side / size, side / size)
    return img, target
