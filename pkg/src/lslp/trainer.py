"""Episodic training loop: encoder -> grid prototypes -> matching -> loss.

Each iteration builds one graph holding ``batch_size`` episode losses that
share the parameter nodes, so a single backward pass yields the batch-mean
gradient directly; SGD with step decay applies it. Everything is keyed off
the config seed: episode i of iteration t always samples identically, which
is what makes checkpoint resume bit-exact.
"""

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import serde
from .autodiff import Graph, add, scale, softmax_xent, stack_maps
from .encoder import (ArchConfig, EncoderParams, config_fingerprint, encode,
                      feature_shape, init_params, load_checkpoint,
                      register_params, save_checkpoint)
from .episodes import (AugmentParams, Episode, augment, load_dataset,
                       rng_from_seed, sample_episode, split_classes)
from .errors import ConfigError, NumericError
from .geometry import build_grid_set, project_to_feature_space
from .optim import OptimizerState, sgd_step
from .protonet import background_mask, class_score_maps, downsample_mask, prototype_table

log = logging.getLogger("lslp.trainer")

# Seeds for distinct episodes are spread out by a fixed step so that a base
# seed and an episode counter always map to one stream.
SEED_STRIDE = 1_000_000


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    n: int = 1
    k: int = 1
    n_q: int = 1
    alpha: float = 0.125
    stride_fraction: float = 0.5
    temperature: float = 20.0
    batch_size: int = 4
    total_iterations: int = 10000
    base_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 2500
    seed: int = 0
    image_size: tuple = (64, 64)
    test_classes: tuple = (5, 6)
    train_classes: tuple = ()      # empty -> all dataset classes minus test_classes
    arch: ArchConfig = ArchConfig()
    augment: AugmentParams = AugmentParams()
    shot_average: str = "valid"
    checkpoint_every: int = 1000


def semantic_settings(doc: dict) -> dict:
    """The subset of a train-config document that fixes model semantics at
    evaluation time (anything else only shapes the training run)."""
    return {key: doc[key] for key in
            ("image_size", "alpha", "stride_fraction", "temperature",
             "shot_average", "arch")}


def semantic_fingerprint(doc: dict) -> str:
    return config_fingerprint(semantic_settings(doc))


@lru_cache(maxsize=32)
def _feature_gridset(image_size, alpha, stride_fraction, feat_size):
    grids = build_grid_set(image_size, alpha, stride_fraction)
    return project_to_feature_space(grids, feat_size)


def episode_class_weights(episode: Episode, shots, feat_size) -> list:
    """Per-class, per-shot soft weight maps at feature resolution; index 0
    is the background complement."""
    weights = [[] for _ in range(len(episode.classes) + 1)]
    for img in shots:
        fg = [img.mask_for(c) for c in episode.classes]
        weights[0].append(downsample_mask(background_mask(fg, fg[0].shape if fg else None),
                                          feat_size))
        for j, mask in enumerate(fg, start=1):
            weights[j].append(downsample_mask(mask, feat_size))
    return weights


def episode_targets(query_img, classes, feat_size) -> np.ndarray:
    """(n+1, fh, fw) per-pixel class distribution from average-pooled masks,
    background absorbing the residual mass, renormalized per pixel."""
    fg = [query_img.mask_for(c) for c in classes]
    maps = [downsample_mask(background_mask(fg), feat_size)]
    maps += [downsample_mask(m, feat_size) for m in fg]
    t = np.stack(maps)
    return t / t.sum(axis=0, keepdims=True)


def episode_loss(episode: Episode, params: EncoderParams, config: TrainConfig,
                 graph: Graph, param_nodes=None, augment_rng=None):
    """Mean query-pixel cross-entropy for one episode, recorded on ``graph``.

    With ``augment_rng`` the support and query images pass through the
    photometric augmentations first (masks never change).
    """
    n = len(episode.classes)
    if n != config.n:
        raise ConfigError(f"episode has {n} classes, config.n is {config.n}")
    w, h = config.image_size
    feat_size = feature_shape(config.arch, (w, h))
    gridset = _feature_gridset((w, h), config.alpha, config.stride_fraction,
                               feat_size)

    def prep(img_arr):
        if img_arr.shape != (config.arch.in_channels, h, w):
            raise ConfigError(
                f"episode image shape {img_arr.shape} != configured "
                f"({config.arch.in_channels}, {h}, {w})")
        if augment_rng is not None:
            return augment(img_arr, augment_rng, config.augment)
        return img_arr

    support_feats = [encode(prep(img.image), params, graph, param_nodes)
                     for img in episode.support]
    weights = episode_class_weights(episode, episode.support, feat_size)
    table = prototype_table(support_feats, weights, gridset,
                            config.shot_average)

    q_losses = []
    for q in episode.query:
        qf = encode(prep(q.image), params, graph, param_nodes)
        maps = class_score_maps(qf, table, gridset, n)
        scores = scale(stack_maps(maps, name="scores"), config.temperature,
                       name="tempered")
        targets = episode_targets(q, episode.classes, feat_size)
        q_losses.append(softmax_xent(scores, targets, name="xent"))
    total = q_losses[0]
    for extra in q_losses[1:]:
        total = add(total, extra)
    if len(q_losses) > 1:
        total = scale(total, 1.0 / len(q_losses))
    return total


@dataclass
class TrainResult:
    checkpoint_dir: Path
    curve_path: Path
    curve: list  # (iteration, lr, loss)
    params: EncoderParams
    optimizer: OptimizerState


def _write_curve(path, rows, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in rows:
            writer.writerow([it, repr(float(lr)), repr(float(loss))])


def train(config: TrainConfig, out_dir, resume_from=None) -> TrainResult:
    """Run the episodic loop; write checkpoints and the loss curve CSV.

    Aborts with NumericError on a non-finite loss or gradient, keeping the
    last checkpoint and the curve rows gathered so far.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_doc = serde.to_doc(config)
    if config.batch_size < 1 or config.total_iterations < 0:
        raise ConfigError("batch_size must be >= 1 and total_iterations >= 0")

    dataset = load_dataset(config.dataset, resize_to=config.image_size)
    split = split_classes(dataset.class_ids, config.test_classes)
    train_classes = tuple(sorted(config.train_classes or split.train_classes))
    overlap = set(train_classes) & set(config.test_classes)
    if overlap:
        raise ConfigError(f"train/test class overlap: {sorted(overlap)}")

    params = init_params(config.arch, config.seed)
    opt = OptimizerState(config.base_lr, config.decay_factor,
                         config.decay_every, 0)
    start = 0
    if resume_from is not None:
        params, manifest = load_checkpoint(resume_from)
        if manifest["train_config"] != config_doc:
            raise ConfigError(
                "resume checkpoint was trained under a different config "
                f"(fingerprint {manifest['fingerprint']})")
        opt = OptimizerState(**manifest["optimizer"])
        start = int(manifest["iteration"])
        log.info("resuming at iteration %d from %s", start, resume_from)

    curve_path = out_dir / "loss_curve.csv"
    ckpt_dir = out_dir / "checkpoint"
    curve = []

    def checkpoint(tag=None):
        target = ckpt_dir if tag is None else out_dir / "checkpoints" / tag
        save_checkpoint(
            target, params,
            {"base_lr": opt.base_lr, "decay_factor": opt.decay_factor,
             "decay_every": opt.decay_every, "iteration": opt.iteration},
            config_doc, opt.iteration,
            {"master_seed": config.seed,
             "next_episode_counter": opt.iteration * config.batch_size})
        return target

    try:
        for it in range(start, config.total_iterations):
            lr_now = opt.current_lr
            graph = Graph()
            param_nodes = register_params(graph, params)
            losses = []
            for slot in range(config.batch_size):
                counter = it * config.batch_size + slot
                ep_seed = config.seed * SEED_STRIDE + counter
                ep = sample_episode(dataset, train_classes, config.n, config.k,
                                    config.n_q, seed=ep_seed)
                aug_rng = (rng_from_seed(ep_seed, 1)
                           if config.augment.enabled else None)
                losses.append(episode_loss(ep, params, config, graph,
                                           param_nodes, aug_rng))
            total = losses[0]
            for extra in losses[1:]:
                total = add(total, extra)
            if config.batch_size > 1:
                total = scale(total, 1.0 / config.batch_size)
            loss_val = float(total.value)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at iteration {it}; last checkpoint retained")
            graph.backward()
            grads = {name: node.grad for name, node in param_nodes.items()}
            for name, g in grads.items():
                if not np.isfinite(g).all():
                    raise NumericError(
                        f"non-finite gradient for {name} at iteration {it}; "
                        "last checkpoint retained")
            curve.append((it, lr_now, loss_val))
            sgd_step(params.named_parameters(), grads, opt)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                checkpoint(tag=f"iter_{it + 1:06d}")
            if (it + 1) % 100 == 0 or it + 1 == config.total_iterations:
                log.info("iter %d/%d lr %.2e loss %.4f",
                         it + 1, config.total_iterations, lr_now, loss_val)
    finally:
        _write_curve(curve_path, curve, append=start > 0)
    checkpoint()
    return TrainResult(ckpt_dir, curve_path, curve, params, opt)
