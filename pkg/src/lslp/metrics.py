"""Dice evaluation, the episodic test protocol, ablations, and plots.

Evaluation samples test episodes, runs the graph-free inference path
(encode -> prototypes -> matching -> argmax), and reports per-class
segmentation Dice next to the support/query alignment Dice (how much the
ground-truth masks themselves overlap). The ablation sweep retrains or
re-evaluates per grid configuration under a shared seed.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import serde
from .encoder import encode, feature_shape, load_checkpoint
from .episodes import load_dataset, sample_episode
from .errors import ConfigError, DataError
from .protonet import (extract_prototypes, predict_labels, probability_map,
                       similarity_map)
from .trainer import (SEED_STRIDE, TrainConfig, episode_class_weights,
                      semantic_fingerprint, semantic_settings, train,
                      _feature_gridset)

log = logging.getLogger("lslp.metrics")

PNG_METADATA = {"Software": "lslp"}


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(pred_mask)
    b = np.asarray(gt_mask)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 200
    seed: int = 1000
    n: int = 1
    k: int = 1
    n_q: int = 1
    classes: tuple = ()          # episode class pool; empty -> checkpoint's test classes
    alpha: float = None          # None -> checkpoint setting
    stride_fraction: float = None
    temperature: float = None
    shot_average: str = None
    threads: int = 1
    allow_mismatch: bool = False
    overlays: int = 0


@dataclass(eq=False)
class EvalReport:
    rows: list        # (episode_seed, class_id, alignment_dice, segmentation_dice)
    per_class: dict   # class_id -> {"mean", "std", "count"}
    fingerprint: str
    settings: dict

    @property
    def mean_dice(self) -> float:
        """Macro average: per-class means averaged over classes."""
        means = [v["mean"] for v in self.per_class.values() if v["count"]]
        return float(np.mean(means)) if means else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode_seed", "class_id",
                             "alignment_dice", "segmentation_dice"])
            for row in self.rows:
                writer.writerow([row[0], row[1], repr(row[2]), repr(row[3])])

    def write_summary(self, path) -> None:
        doc = {
            "fingerprint": self.fingerprint,
            "settings": self.settings,
            "mean_dice": self.mean_dice,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "episodes": len({r[0] for r in self.rows}),
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def report_from_rows(rows, fingerprint="", settings=None) -> EvalReport:
    per_class = {}
    for _, cid, _, seg in rows:
        per_class.setdefault(cid, []).append(seg)
    summary = {cid: {"mean": float(np.mean(v)), "std": float(np.std(v)),
                     "count": len(v)}
               for cid, v in sorted(per_class.items())}
    return EvalReport(list(rows), summary, fingerprint, settings or {})


def load_report_csv(path) -> EvalReport:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expect = ["episode_seed", "class_id", "alignment_dice", "segmentation_dice"]
        if reader.fieldnames != expect:
            raise DataError(f"{path}: unexpected report header {reader.fieldnames}")
        for rec in reader:
            rows.append((int(rec["episode_seed"]), int(rec["class_id"]),
                         float(rec["alignment_dice"]),
                         float(rec["segmentation_dice"])))
    return report_from_rows(rows)


@dataclass(frozen=True)
class _EvalSettings:
    image_size: tuple
    alpha: float
    stride_fraction: float
    temperature: float
    shot_average: str


def evaluate_episode(params, episode, settings: _EvalSettings):
    """Per-class (alignment_dice, segmentation_dice) for one episode,
    averaged over queries (and shots, for alignment)."""
    w, h = settings.image_size
    feat_size = feature_shape(params.arch, (w, h))
    gridset = _feature_gridset((w, h), settings.alpha,
                               settings.stride_fraction, feat_size)
    support_feats = [encode(img.image, params) for img in episode.support]
    weights = episode_class_weights(episode, episode.support, feat_size)
    protos = extract_prototypes(support_feats, weights, gridset,
                                len(episode.classes), settings.shot_average)
    per_class = {}
    labelmaps = []
    for q in episode.query:
        scores = similarity_map(encode(q.image, params), protos)
        probs = probability_map(scores, settings.temperature)
        labels = predict_labels(probs, (w, h))
        labelmaps.append(labels)
        for j, cid in enumerate(episode.classes, start=1):
            gt = q.mask_for(cid).astype(bool)
            seg = dice(labels == j, gt)
            aligns = [dice(s.mask_for(cid), gt) for s in episode.support]
            entry = per_class.setdefault(cid, {"seg": [], "align": []})
            entry["seg"].append(seg)
            entry["align"].extend(aligns)
    results = {cid: (float(np.mean(v["align"])), float(np.mean(v["seg"])))
               for cid, v in per_class.items()}
    return results, labelmaps


def _effective_settings(manifest: dict, cfg: EvalConfig) -> _EvalSettings:
    doc = manifest["train_config"]
    return _EvalSettings(
        image_size=tuple(doc["image_size"]),
        alpha=doc["alpha"] if cfg.alpha is None else cfg.alpha,
        stride_fraction=(doc["stride_fraction"] if cfg.stride_fraction is None
                         else cfg.stride_fraction),
        temperature=(doc["temperature"] if cfg.temperature is None
                     else cfg.temperature),
        shot_average=(doc["shot_average"] if cfg.shot_average is None
                      else cfg.shot_average),
    )


def evaluate(checkpoint_dir, dataset_path, cfg: EvalConfig,
             out_dir=None) -> EvalReport:
    """Sample test episodes, run inference, and assemble an EvalReport.

    The checkpoint's semantic settings (grid geometry, temperature, ...) are
    used unless explicitly overridden; an override that changes them is a
    fingerprint mismatch and needs ``allow_mismatch``.
    """
    params, manifest = load_checkpoint(checkpoint_dir)
    settings = _effective_settings(manifest, cfg)
    train_doc = manifest["train_config"]
    effective_doc = dict(semantic_settings(train_doc))
    effective_doc.update({"alpha": settings.alpha,
                          "stride_fraction": settings.stride_fraction,
                          "temperature": settings.temperature,
                          "shot_average": settings.shot_average,
                          "image_size": list(settings.image_size)})
    stored = semantic_fingerprint(train_doc)
    requested = semantic_fingerprint(effective_doc)
    if requested != stored and not cfg.allow_mismatch:
        raise ConfigError(
            f"evaluation settings (fingerprint {requested}) differ from the "
            f"checkpoint's ({stored}); pass allow_mismatch to override")

    dataset = load_dataset(dataset_path, resize_to=settings.image_size)
    pool = tuple(cfg.classes) if cfg.classes else tuple(train_doc["test_classes"])
    missing = set(pool) - set(dataset.class_ids)
    if missing:
        raise DataError(f"evaluation classes not in dataset: {sorted(missing)}")

    seeds = [cfg.seed * SEED_STRIDE + i for i in range(cfg.n_episodes)]
    episodes = [sample_episode(dataset, pool, cfg.n, cfg.k, cfg.n_q, seed=s)
                for s in seeds]

    def run(ep):
        return evaluate_episode(params, ep, settings)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool_exec:
            outcomes = list(pool_exec.map(run, episodes))
    else:
        outcomes = [run(ep) for ep in episodes]

    rows = []
    for ep, (results, _) in zip(episodes, outcomes):
        for cid in ep.classes:
            align, seg = results[cid]
            rows.append((ep.seed, cid, align, seg))
    report = report_from_rows(rows, fingerprint=requested,
                              settings=serde.to_doc(cfg) | {
                                  "checkpoint": str(checkpoint_dir),
                                  "dataset": str(dataset_path)})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "report.csv")
        report.write_summary(out_dir / "summary.json")
        if cfg.overlays:
            _write_overlays(out_dir, episodes[:cfg.overlays],
                            [o[1] for o in outcomes[:cfg.overlays]])
    return report


def _write_overlays(out_dir, episodes, labelmaps_per_episode) -> None:
    for ep, labelmaps in zip(episodes, labelmaps_per_episode):
        for qi, (q, labels) in enumerate(zip(ep.query, labelmaps)):
            fig, ax = plt.subplots(figsize=(3, 3))
            ax.imshow(q.image[0], cmap="gray", vmin=0, vmax=1)
            overlay = np.ma.masked_where(labels == 0, labels)
            ax.imshow(overlay, cmap="tab10", alpha=0.45, vmin=0, vmax=9,
                      interpolation="nearest")
            ax.set_title(f"ep {ep.seed} q{qi} classes {list(ep.classes)}",
                         fontsize=8)
            ax.axis("off")
            fig.savefig(out_dir / f"overlay_ep{ep.seed}_q{qi}.png", dpi=100,
                        metadata=PNG_METADATA)
            plt.close(fig)


def sweep_alpha(train_config: TrainConfig, alphas, overlap_flags, out_dir,
                eval_config: EvalConfig, mode: str = "train",
                checkpoint=None) -> list:
    """Mean test Dice per (alpha, overlap) setting; CSV plus a bar chart.

    mode="train" retrains each setting from the shared seed; mode="eval"
    reuses one checkpoint's encoder and only changes the grid geometry.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown sweep mode {mode!r}")
    if mode == "eval" and checkpoint is None:
        raise ConfigError("sweep mode 'eval' needs a checkpoint")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for alpha in alphas:
        for overlap in overlap_flags:
            sf = train_config.stride_fraction if overlap else 1.0
            tag = f"a{alpha:g}_{'overlap' if overlap else 'tiled'}"
            if mode == "train":
                cfg_i = replace(train_config, alpha=alpha, stride_fraction=sf)
                result = train(cfg_i, out_dir / f"run_{tag}")
                ckpt = result.checkpoint_dir
                eval_i = eval_config
            else:
                ckpt = checkpoint
                eval_i = replace(eval_config, alpha=alpha, stride_fraction=sf,
                                 allow_mismatch=True)
            report = evaluate(ckpt, train_config.dataset, eval_i,
                              out_dir=out_dir / f"eval_{tag}")
            rows.append({"alpha": float(alpha), "overlap": bool(overlap),
                         "mean_dice": report.mean_dice,
                         "episodes": eval_config.n_episodes})
            log.info("sweep %s: mean dice %.4f", tag, report.mean_dice)
    _write_sweep_outputs(out_dir, rows)
    return rows


def _write_sweep_outputs(out_dir, rows) -> None:
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["alpha", "overlap",
                                                "mean_dice", "episodes"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    labels = [f"a={r['alpha']:g}\n{'overlap' if r['overlap'] else 'tiled'}"
              for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 * max(4, len(rows)), 3.2))
    ax.bar(range(len(rows)), [r["mean_dice"] for r in rows], color="#4878a8")
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def misalignment_scatter(report: EvalReport, out_dir) -> Path:
    """(alignment Dice, segmentation Dice) pairs per class: CSV + scatter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "misalignment.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "alignment_dice", "segmentation_dice"])
        for _, cid, align, seg in report.rows:
            writer.writerow([cid, repr(align), repr(seg)])
    by_class = {}
    for _, cid, align, seg in report.rows:
        by_class.setdefault(cid, []).append((align, seg))
    fig, ax = plt.subplots(figsize=(4, 4))
    for cid, pairs in sorted(by_class.items()):
        if not pairs:
            continue
        xs, ys = zip(*pairs)
        ax.scatter(xs, ys, s=12, alpha=0.7, label=f"class {cid}")
    ax.set_xlabel("alignment Dice")
    ax.set_ylabel("segmentation Dice")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    if by_class:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "misalignment.png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return csv_path
