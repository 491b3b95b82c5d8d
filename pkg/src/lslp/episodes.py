"""Dataset model, disjoint class splits, and n-way/k-shot episode sampling.

A dataset lives in a directory with a ``manifest.json`` plus one tensor file
per image and per mask. Class id 0 is reserved for the background everywhere,
so manifest class ids start at 1. Episode sampling is keyed by an integer
seed feeding a counter-based (Philox) stream, so samplers for different
seeds are independent and any episode can be regenerated from its seed.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ConfigError, DataError

MANIFEST_SCHEMA_VERSION = 1


def rng_from_seed(*key) -> np.random.Generator:
    """Counter-based generator for a (possibly composite) integer key."""
    return np.random.Generator(np.random.Philox(key=np.asarray(key, dtype=np.uint64)))


@dataclass(frozen=True, eq=False)
class LabeledImage:
    id: str
    image: np.ndarray           # (1, h, w) float32 in [0, 1]
    masks: dict                 # class_id -> (h, w) float32 binary
    classes_present: frozenset  # class ids with a nonempty mask

    def mask_for(self, class_id: int) -> np.ndarray:
        m = self.masks.get(class_id)
        if m is None:
            h, w = self.image.shape[1:]
            m = np.zeros((h, w), dtype=np.float32)
        return m


@dataclass(frozen=True, eq=False)
class Dataset:
    image_size: tuple   # (w, h)
    classes: dict       # class_id -> name
    images: tuple       # LabeledImage, manifest order

    @property
    def class_ids(self) -> tuple:
        return tuple(sorted(self.classes))

    def images_with(self, class_ids) -> list:
        wanted = set(class_ids)
        return [img for img in self.images if wanted <= img.classes_present]


@dataclass(frozen=True)
class ClassSplit:
    train_classes: frozenset
    test_classes: frozenset


@dataclass(frozen=True, eq=False)
class Episode:
    support: tuple   # k LabeledImage
    query: tuple     # n_q LabeledImage
    classes: tuple   # n class ids, sampled order
    seed: int


def split_classes(all_classes, test_classes_requested) -> ClassSplit:
    """Deterministic split; the requested test classes must leave a nonempty
    training side."""
    all_set = frozenset(all_classes)
    test = frozenset(test_classes_requested)
    if not test:
        raise ConfigError("test class set is empty")
    stray = test - all_set
    if stray:
        raise ConfigError(f"test classes not in dataset: {sorted(stray)}")
    train = all_set - test
    if not train:
        raise ConfigError("test classes cover every class; training side is empty")
    return ClassSplit(train, test)


def sample_episode(dataset: Dataset, class_pool, n: int, k: int, n_q: int,
                   seed: int) -> Episode:
    """Sample n classes uniformly from the pool, then k support + n_q query
    images without replacement among images containing all n classes."""
    pool = sorted(class_pool)
    if n < 1 or k < 1 or n_q < 1:
        raise ConfigError(f"n, k, n_q must be positive, got {(n, k, n_q)}")
    if n > len(pool):
        raise DataError(f"asked for {n} classes but the pool has {len(pool)}")
    rng = rng_from_seed(seed)
    picks = rng.choice(len(pool), size=n, replace=False)
    classes = tuple(pool[i] for i in picks)
    eligible = dataset.images_with(classes)
    need = k + n_q
    if len(eligible) < need:
        raise DataError(
            f"episode needs {need} images containing classes {sorted(classes)}, "
            f"only {len(eligible)} available (short by {need - len(eligible)})")
    idx = rng.choice(len(eligible), size=need, replace=False)
    chosen = [eligible[i] for i in idx]
    return Episode(tuple(chosen[:k]), tuple(chosen[k:]), classes, seed)


# --------------------------------------------------------------------------
# Photometric augmentation (masks untouched).
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    enabled: bool = True
    probability: float = 0.5
    gamma_range: tuple = (0.8, 1.2)
    contrast_range: tuple = (0.8, 1.2)
    brightness_range: tuple = (-0.1, 0.1)


def augment(image: np.ndarray, rng: np.random.Generator,
            params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Random gamma / contrast / brightness, each applied with the configured
    probability; intensities stay within [0, 1]."""
    x = np.asarray(image, dtype=np.float32)
    if rng.random() < params.probability:
        gamma = rng.uniform(*params.gamma_range)
        x = np.power(x, np.float32(gamma))
    if rng.random() < params.probability:
        c = rng.uniform(*params.contrast_range)
        x = np.clip(np.float32(0.5) + np.float32(c) * (x - np.float32(0.5)), 0.0, 1.0)
    if rng.random() < params.probability:
        b = rng.uniform(*params.brightness_range)
        x = np.clip(x + np.float32(b), 0.0, 1.0)
    return x.astype(np.float32)


# --------------------------------------------------------------------------
# On-disk format: manifest.json + one tensor file per image and per mask.
# --------------------------------------------------------------------------

def save_dataset(root, image_size, classes: dict, images) -> None:
    """Write a dataset directory. ``images`` is an iterable of LabeledImage."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for img in images:
        img_rel = f"images/{img.id}.lslp"
        tensorio.save_tensor(root / img_rel, img.image)
        mask_rels = {}
        for cid in sorted(img.masks):
            rel = f"masks/{img.id}_c{cid}.lslp"
            tensorio.save_tensor(root / rel, img.masks[cid])
            mask_rels[str(cid)] = rel
        entries.append({
            "id": img.id,
            "image": img_rel,
            "masks": mask_rels,
            "classes_present": sorted(img.classes_present),
        })
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "image_size": [int(image_size[0]), int(image_size[1])],
        "classes": [{"id": cid, "name": classes[cid]} for cid in sorted(classes)],
        "images": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root, resize_to=None) -> Dataset:
    """Load and validate a dataset directory.

    Checks the manifest against the files and the invariants: intensities in
    [0, 1], masks binary and mutually disjoint, presence lists consistent.
    ``resize_to=(w, h)`` rescales at load time (bilinear for intensities,
    nearest neighbor for masks).
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema in {manifest_path}")
    w, h = (int(v) for v in manifest["image_size"])
    classes = {}
    for entry in manifest["classes"]:
        cid = int(entry["id"])
        if cid < 1:
            raise DataError(f"class id {cid} invalid; 0 is reserved for background")
        if cid in classes:
            raise DataError(f"duplicate class id {cid}")
        classes[cid] = str(entry["name"])
    images = []
    seen = set()
    for entry in manifest["images"]:
        img_id = entry["id"]
        if img_id in seen:
            raise DataError(f"duplicate image id {img_id!r}")
        seen.add(img_id)
        image = tensorio.load_tensor(root / entry["image"])
        if image.shape != (1, h, w):
            raise DataError(
                f"{img_id}: image shape {image.shape} != (1, {h}, {w})")
        if image.min() < 0.0 or image.max() > 1.0:
            raise DataError(f"{img_id}: intensities outside [0, 1]")
        masks = {}
        union = np.zeros((h, w), dtype=np.float32)
        for cid_str, rel in entry["masks"].items():
            cid = int(cid_str)
            if cid not in classes:
                raise DataError(f"{img_id}: mask for unknown class {cid}")
            mask = tensorio.load_tensor(root / rel)
            if mask.shape != (h, w):
                raise DataError(f"{img_id}: mask shape {mask.shape} != ({h}, {w})")
            if not np.isin(mask, (0.0, 1.0)).all():
                raise DataError(f"{img_id}: mask for class {cid} is not binary")
            union += mask
            masks[cid] = mask
        if union.max() > 1.0:
            raise DataError(f"{img_id}: overlapping class masks")
        present = frozenset(c for c, m in masks.items() if m.any())
        listed = frozenset(int(c) for c in entry["classes_present"])
        if present != listed:
            raise DataError(
                f"{img_id}: manifest lists classes {sorted(listed)} but masks "
                f"show {sorted(present)}")
        if resize_to is not None and tuple(resize_to) != (w, h):
            rw, rh = int(resize_to[0]), int(resize_to[1])
            image = _resize_bilinear(image[0], rw, rh)[None]
            masks = {c: _resize_nearest(m, rw, rh) for c, m in masks.items()}
            present = frozenset(c for c, m in masks.items() if m.any())
        images.append(LabeledImage(img_id, image, masks, present))
    size = tuple(resize_to) if resize_to is not None else (w, h)
    return Dataset((int(size[0]), int(size[1])), classes, tuple(images))


def _source_coords(out_len: int, in_len: int) -> np.ndarray:
    # Pixel-center alignment: output center u maps to input (u + .5) * scale - .5
    return (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5


def _resize_nearest(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    in_h, in_w = arr.shape
    ys = np.clip(np.rint(_source_coords(out_h, in_h)), 0, in_h - 1).astype(int)
    xs = np.clip(np.rint(_source_coords(out_w, in_w)), 0, in_w - 1).astype(int)
    return arr[np.ix_(ys, xs)].astype(np.float32)


def _resize_bilinear(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    in_h, in_w = arr.shape
    ys = np.clip(_source_coords(out_h, in_h), 0, in_h - 1)
    xs = np.clip(_source_coords(out_w, in_w), 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)
