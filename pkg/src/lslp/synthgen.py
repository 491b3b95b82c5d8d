"""Synthetic organ-phantom datasets with a spatial layout prior.

Each class is a jittered, rotated ellipse at a canonical image location,
filled with speckle texture; the background is smooth low-frequency noise.
All classes share the same intensity statistics on purpose: nothing but
location (and the texture contrast against the background) identifies a
class, which is exactly the regularity the grid prototypes exploit.
Generation is bit-exact from the seed, one derived stream per image.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episodes import LabeledImage, load_dataset, rng_from_seed, save_dataset
from .errors import ConfigError, DataError


def default_centers(n_classes: int) -> tuple:
    """Canonical blob centers: up to two rows of three, then a ring."""
    two_rows = ((0.25, 0.27), (0.50, 0.24), (0.75, 0.27),
                (0.25, 0.73), (0.50, 0.76), (0.75, 0.73))
    if n_classes <= len(two_rows):
        return two_rows[:n_classes]
    angles = np.linspace(0, 2 * math.pi, n_classes, endpoint=False)
    return tuple((0.5 + 0.26 * math.cos(a), 0.5 + 0.26 * math.sin(a))
                 for a in angles)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: tuple = (64, 64)
    n_classes: int = 6
    n_images: int = 100
    seed: int = 7
    centers: tuple = None            # per-class (cx, cy) fractions; None -> default layout
    base_radius: tuple = None        # per-class radius fraction; None -> 0.11 each
    pos_jitter: float = 0.035        # center jitter sigma, fraction of image side
    radius_jitter: float = 0.012     # radius jitter sigma, fraction of image side
    eccentricity_range: tuple = (0.70, 1.0)
    intensity_mean: tuple = None     # per-class; None -> 0.55 each
    intensity_sigma: tuple = None    # per-class; None -> 0.10 each
    background_level: float = 0.42
    background_amplitude: float = 0.16
    background_speckle: float = 0.03
    max_retries: int = 80

    def resolved(self) -> "PhantomSpec":
        """Fill per-class defaults and validate the canonical layout."""
        n = self.n_classes
        if n < 0:
            raise ConfigError(f"n_classes must be >= 0, got {n}")
        if self.n_images < 0:
            raise ConfigError(f"n_images must be >= 0, got {self.n_images}")
        w, h = self.image_size
        if w < 8 or h < 8:
            raise ConfigError(f"image_size {self.image_size} too small")
        centers = tuple(tuple(c) for c in (self.centers or default_centers(n)))
        radius = tuple(self.base_radius) if self.base_radius else (0.11,) * n
        mean = tuple(self.intensity_mean) if self.intensity_mean else (0.55,) * n
        sigma = tuple(self.intensity_sigma) if self.intensity_sigma else (0.10,) * n
        for name, seq in (("centers", centers), ("base_radius", radius),
                          ("intensity_mean", mean), ("intensity_sigma", sigma)):
            if len(seq) != n:
                raise ConfigError(f"{name} must list {n} entries, got {len(seq)}")
        # Blobs must fit inside the image at maximum (3 sigma) jitter.
        reach = 3 * self.pos_jitter
        for c, ((cx, cy), r) in enumerate(zip(centers, radius)):
            rmax = r + 3 * self.radius_jitter
            if (cx - rmax - reach < 0 or cx + rmax + reach > 1
                    or cy - rmax - reach < 0 or cy + rmax + reach > 1):
                raise ConfigError(
                    f"class {c + 1} cannot stay inside the image at max jitter "
                    f"(center {(cx, cy)}, radius {r})")
        return PhantomSpec(
            (int(w), int(h)), n, self.n_images, self.seed, centers, radius,
            self.pos_jitter, self.radius_jitter, tuple(self.eccentricity_range),
            mean, sigma, self.background_level, self.background_amplitude,
            self.background_speckle, self.max_retries)


def _ellipse_mask(w, h, cx, cy, a, b, theta):
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float32)


def _background(w, h, spec: PhantomSpec, rng) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(max(2, h // 8), max(2, w // 8)))
    # Bilinear blow-up of the coarse field gives smooth low-frequency clutter.
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, coarse.shape[0] - 1)
    x1 = np.minimum(x0 + 1, coarse.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    smooth = ((coarse[np.ix_(y0, x0)] * (1 - wx) + coarse[np.ix_(y0, x1)] * wx)
              * (1 - wy)
              + (coarse[np.ix_(y1, x0)] * (1 - wx) + coarse[np.ix_(y1, x1)] * wx)
              * wy)
    img = spec.background_level + spec.background_amplitude * smooth
    img = img + rng.normal(0.0, spec.background_speckle, size=(h, w))
    return img


def _render_image(spec: PhantomSpec, rng) -> tuple:
    w, h = spec.image_size
    side = min(w, h)
    img = _background(w, h, spec, rng)
    masks = {}
    occupied = np.zeros((h, w), dtype=bool)
    for c in range(spec.n_classes):
        cid = c + 1
        cx0, cy0 = spec.centers[c]
        placed = None
        for _ in range(spec.max_retries):
            cx = (cx0 + rng.normal(0.0, spec.pos_jitter)) * w
            cy = (cy0 + rng.normal(0.0, spec.pos_jitter)) * h
            r = (spec.base_radius[c] + rng.normal(0.0, spec.radius_jitter)) * side
            if r < 1.5:
                continue
            ecc = rng.uniform(*spec.eccentricity_range)
            theta = rng.uniform(0.0, math.pi)
            mask = _ellipse_mask(w, h, cx, cy, r, r * ecc, theta)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            if ys.min() == 0 or xs.min() == 0 or ys.max() == h - 1 or xs.max() == w - 1:
                continue  # touches the border; jitter pushed it out
            if (mask.astype(bool) & occupied).any():
                continue  # collision with an earlier class
            placed = mask
            break
        if placed is None:
            raise DataError(
                f"could not place class {cid} without colliding with classes "
                f"{sorted(masks)} after {spec.max_retries} tries")
        texture = spec.intensity_mean[c] + rng.normal(
            0.0, spec.intensity_sigma[c], size=(h, w))
        img = np.where(placed > 0, texture, img)
        occupied |= placed.astype(bool)
        masks[cid] = placed
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return img, masks


def generate_images(spec: PhantomSpec) -> list:
    """Render all phantom images in memory (one derived stream per image)."""
    spec = spec.resolved()
    images = []
    for i in range(spec.n_images):
        rng = rng_from_seed(spec.seed, 0x0811, i)
        img, masks = _render_image(spec, rng)
        present = frozenset(c for c, m in masks.items() if m.any())
        images.append(LabeledImage(f"img_{i:04d}", img, masks, present))
    return images


def generate_dataset(spec: PhantomSpec, out_dir) -> Path:
    """Render the phantom corpus and write it in the dataset directory format.

    Everything is generated (and validated) in memory first, so a failure
    leaves no partial directory behind.
    """
    spec = spec.resolved()
    images = generate_images(spec)
    classes = {c + 1: f"organ_{c + 1}" for c in range(spec.n_classes)}
    out_dir = Path(out_dir)
    save_dataset(out_dir, spec.image_size, classes, images)
    return out_dir


def layout_report(dataset) -> dict:
    """Per-class alignment statistics: the distribution of ground-truth mask
    Dice over all image pairs containing the class."""
    from .metrics import dice

    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)
    report = {}
    for cid in dataset.class_ids:
        holders = [img for img in dataset.images if cid in img.classes_present]
        values = []
        for i in range(len(holders)):
            for j in range(i + 1, len(holders)):
                values.append(dice(holders[i].masks[cid], holders[j].masks[cid]))
        if values:
            arr = np.asarray(values)
            report[cid] = {
                "count": len(values),
                "min": float(arr.min()),
                "median": float(np.median(arr)),
                "mean": float(arr.mean()),
                "max": float(arr.max()),
            }
        else:
            report[cid] = {"count": 0}
    return report
