"""Local prototype extraction and grid-based matching.

Prototypes are masked average pools of support features restricted to one
grid window, per class (0 is background) and per shot, averaged over the
shots that actually have mask weight inside the window. A class/grid pair
with no weight anywhere stays absent (zero vector). Query pixels score each
class by the maximum cosine similarity over the covering grids' present
prototypes; pixels no present grid covers get ``SCORE_ABSENT``.

The builders here accept either plain float32 arrays (inference) or graph
Nodes (training); the arithmetic is identical because both routes go
through the same autodiff primitives.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .autodiff import Node, add, cosine_map, masked_max, masked_window_mean, scale
from .errors import DataError, GraphError
from .geometry import GridSet, gridset_from_boxes

SCORE_ABSENT = -1.0
# Soft weights from average-pooled masks make exact-zero tests fragile;
# anything at or below this in-window weight sum counts as an empty mask.
WEIGHT_EPS = 1e-6

PROTOTYPE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Prototype:
    class_id: int
    grid_id: int
    vector: np.ndarray
    present: bool


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    vectors: np.ndarray  # (n_classes + 1, n_g, d) float32
    present: np.ndarray  # (n_classes + 1, n_g) bool
    n_classes: int
    gridset: GridSet

    @property
    def depth(self) -> int:
        return self.vectors.shape[2]

    def prototype(self, class_id: int, grid_id: int) -> Prototype:
        return Prototype(class_id, grid_id, self.vectors[class_id, grid_id],
                         bool(self.present[class_id, grid_id]))


def background_mask(foreground_masks, shape=None) -> np.ndarray:
    """Complement of the union of disjoint binary foreground masks."""
    masks = list(foreground_masks)
    if not masks:
        if shape is None:
            raise DataError("background_mask needs a shape when no foreground given")
        return np.ones(shape, dtype=np.float32)
    total = np.zeros_like(masks[0], dtype=np.float32)
    for m in masks:
        m = np.asarray(m, dtype=np.float32)
        if m.shape != total.shape:
            raise DataError(f"mask shape {m.shape} != {total.shape}")
        if not np.isin(m, (0.0, 1.0)).all():
            raise DataError("foreground masks must be binary")
        total += m
    if total.max() > 1.0:
        raise DataError("foreground masks overlap; classes must be disjoint")
    return (1.0 - total).astype(np.float32)


def downsample_mask(mask: np.ndarray, feature_shape) -> np.ndarray:
    """Average-pool a mask to feature resolution; values are coverage fractions."""
    mask = np.asarray(mask, dtype=np.float32)
    h, w = mask.shape
    fw, fh = int(feature_shape[0]), int(feature_shape[1])
    if fw < 1 or fh < 1 or w % fw or h % fh:
        raise DataError(
            f"feature shape ({fw}, {fh}) is not an integral downsample of ({w}, {h})")
    fy, fx = h // fh, w // fw
    return mask.reshape(fh, fy, fw, fx).mean(axis=(1, 3), dtype=np.float32)


def _grid_window(grid):
    x0, y0, gw, gh = grid.box
    return slice(y0, y0 + gh), slice(x0, x0 + gw)


def prototype_table(features, class_weights, gridset: GridSet,
                    shot_average: str = "valid") -> dict:
    """Masked-mean prototype for every (class, grid) with in-window weight.

    ``features`` is a list of k (d, H, W) arrays or Nodes; ``class_weights``
    is indexed [class][shot] with (H, W) float32 weight maps (class 0 is
    background). Returns {(class_id, grid_id): vector}, omitting absent
    pairs. ``shot_average`` picks the handling of shots whose in-window
    weight is empty: "valid" averages the remaining shots, "strict" keeps
    the 1/k factor so empty shots pull the prototype toward zero.
    """
    if shot_average not in ("valid", "strict"):
        raise GraphError(f"unknown shot_average mode {shot_average!r}")
    k = len(features)
    if k < 1:
        raise GraphError("need at least one support shot")
    for shots in class_weights:
        if len(shots) != k:
            raise GraphError("class_weights must have one weight map per shot")
    table = {}
    for c, shots in enumerate(class_weights):
        for grid in gridset.grids:
            ys, xs = _grid_window(grid)
            valid = [i for i in range(k)
                     if float(shots[i][ys, xs].sum()) > WEIGHT_EPS]
            if not valid:
                continue
            vecs = [masked_window_mean(features[i], shots[i], grid.box,
                                       name=f"proto.c{c}.g{grid.id}.s{i}")
                    for i in valid]
            total = vecs[0]
            for v in vecs[1:]:
                total = add(total, v)
            denom = k if shot_average == "strict" else len(valid)
            table[(c, grid.id)] = total if denom == 1 else scale(total, 1.0 / denom)
    return table


def extract_prototypes(features, class_weights, gridset: GridSet,
                       n_classes: int, shot_average: str = "valid") -> PrototypeSet:
    """Eager prototype extraction into a dense (n_classes+1, n_g, d) table."""
    feats = [np.asarray(f, dtype=np.float32) for f in features]
    shape = feats[0].shape
    for f in feats:
        if f.shape != shape:
            raise GraphError(f"support features disagree on shape: {f.shape} vs {shape}")
    for shots in class_weights:
        for wmap in shots:
            if wmap.shape != shape[1:]:
                raise GraphError(
                    f"weight map shape {wmap.shape} != feature spatial {shape[1:]}")
    if len(class_weights) != n_classes + 1:
        raise GraphError(
            f"expected {n_classes + 1} weight classes, got {len(class_weights)}")
    table = prototype_table(feats, class_weights, gridset, shot_average)
    d = shape[0]
    vectors = np.zeros((n_classes + 1, gridset.n_g, d), dtype=np.float32)
    present = np.zeros((n_classes + 1, gridset.n_g), dtype=bool)
    for (c, m), vec in table.items():
        vectors[c, m] = vec
        present[c, m] = True
    return PrototypeSet(vectors, present, n_classes, gridset)


def class_score_maps(query_features, table: dict, gridset: GridSet,
                     n_classes: int, absent: float = SCORE_ABSENT) -> list:
    """Per-class max-over-covering-grids cosine score maps.

    ``table`` maps (class_id, grid_id) to a prototype vector (array or
    Node). Ties between equal cosines go to the lowest grid id. Returns one
    (H, W) map per class 0..n_classes.
    """
    w, h = gridset.image_shape
    on_graph = isinstance(query_features, Node)
    maps = []
    for c in range(n_classes + 1):
        entries = [(m, table[(c, m)]) for m in range(gridset.n_g) if (c, m) in table]
        if not entries:
            const = np.full((h, w), absent, dtype=np.float32)
            maps.append(query_features.graph.input(const, name=f"scores.c{c}.absent")
                        if on_graph else const)
            continue
        cos_maps = [cosine_map(query_features, vec, box=gridset.grids[m].box,
                               name=f"cos.c{c}.g{m}")
                    for m, vec in entries]
        boxes = [gridset.grids[m].box for m, _ in entries]
        maps.append(masked_max(cos_maps, boxes, (h, w), absent,
                               name=f"scores.c{c}"))
    return maps


def similarity_map(query_features: np.ndarray, protos: PrototypeSet,
                   gridset: GridSet = None) -> np.ndarray:
    """Eager (n_classes+1, H, W) score map for a query feature tensor."""
    gridset = gridset or protos.gridset
    query = np.asarray(query_features, dtype=np.float32)
    if query.shape[0] != protos.depth:
        raise GraphError(
            f"query depth {query.shape[0]} != prototype depth {protos.depth}")
    w, h = gridset.image_shape
    if query.shape[1:] != (h, w):
        raise GraphError(
            f"query spatial {query.shape[1:]} != grid image shape ({h}, {w})")
    table = {(c, m): protos.vectors[c, m]
             for c in range(protos.n_classes + 1)
             for m in range(gridset.n_g)
             if protos.present[c, m]}
    return np.stack(class_score_maps(query, table, gridset, protos.n_classes))


def probability_map(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Per-pixel softmax over the class axis of temperature-scaled scores."""
    if temperature <= 0:
        raise GraphError(f"temperature must be positive, got {temperature}")
    z = np.asarray(scores, dtype=np.float32) * np.float32(temperature)
    z = z - z.max(axis=0)
    e = np.exp(z)
    return e / e.sum(axis=0)


def predict_labels(probs: np.ndarray, image_shape=None) -> np.ndarray:
    """Per-pixel argmax (ties to the lowest class id), optionally upsampled
    to image resolution by nearest neighbor."""
    labels = np.argmax(probs, axis=0).astype(np.int32)
    if image_shape is None:
        return labels
    w, h = int(image_shape[0]), int(image_shape[1])
    fh, fw = labels.shape
    if w % fw or h % fh:
        raise DataError(
            f"image shape ({w}, {h}) is not an integral upsample of ({fw}, {fh})")
    return np.repeat(np.repeat(labels, h // fh, axis=0), w // fw, axis=1)


# --------------------------------------------------------------------------
# Prototype export for debugging and test fixtures: one tensor file for the
# vector table and a JSON sidecar with ids, presence flags, and the
# feature-space grid geometry needed to reattach a matching GridSet.
# --------------------------------------------------------------------------

def save_prototypes(protos: PrototypeSet, prefix) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(prefix.with_suffix(".lslp"), protos.vectors)
    gs = protos.gridset
    sidecar = {
        "schema_version": PROTOTYPE_SCHEMA_VERSION,
        "n_classes": protos.n_classes,
        "class_ids": list(range(protos.n_classes + 1)),
        "grid_ids": [g.id for g in gs.grids],
        "present": protos.present.astype(int).tolist(),
        "gridset": {
            "image_shape": list(gs.image_shape),
            "alpha": gs.alpha,
            "stride_fraction": gs.stride_fraction,
            "boxes": [list(g.box) for g in gs.grids],
        },
    }
    prefix.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_prototypes(prefix) -> PrototypeSet:
    prefix = Path(prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    if sidecar.get("schema_version") != PROTOTYPE_SCHEMA_VERSION:
        raise DataError(f"unsupported prototype schema in {prefix}.json")
    vectors = tensorio.load_tensor(prefix.with_suffix(".lslp"))
    present = np.asarray(sidecar["present"], dtype=bool)
    gsdoc = sidecar["gridset"]
    gridset = gridset_from_boxes(gsdoc["boxes"], gsdoc["image_shape"],
                                 gsdoc["alpha"], gsdoc["stride_fraction"])
    if vectors.shape[:2] != present.shape or vectors.shape[1] != gridset.n_g:
        raise DataError(f"inconsistent prototype table in {prefix}")
    vectors = vectors * present[:, :, None]  # absent rows must stay all-zero
    return PrototypeSet(vectors.astype(np.float32), present,
                        sidecar["n_classes"], gridset)
