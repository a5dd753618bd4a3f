"""End-to-end phases on in-memory datasets; the command line wraps these.

Every function is deterministic given its inputs: all randomness is derived
from ``cfg.seed``.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .adaptation import SGD, accuracy, adapt_epochs, embed, smoothed_cross_entropy, train_source_epochs
from .checkpoint import Checkpoint, decode
from .config import RunConfig
from .data import DomainDataset, stratified_split
from .encoder import calibrate_encoder, head_logits, head_parameters, head_predict, init_encoder, init_head
from .errors import ConfigError
from .nc import nc_from_features
from .tensor import Tensor, no_grad

METRICS_SCHEMA = "eianet.metrics/1"
CALIBRATION_SAMPLES = 256
ARCH_FIELDS = ("K", "d", "image_size", "widths", "use_attention", "use_etf", "logit_scale")

Record = Dict[str, object]
Sink = Optional[Callable[[Record], None]]


def _emit(sink: Sink, record: Record) -> Record:
    record = {"schema": METRICS_SCHEMA, **record}
    if sink is not None:
        sink(record)
    return record


def check_compatible(cfg: RunConfig, ds: DomainDataset) -> None:
    """Raise ConfigError when a dataset cannot feed a model built from ``cfg``."""
    if ds.num_classes != cfg.K:
        raise ConfigError(f"dataset has {ds.num_classes} classes, config expects K={cfg.K}")
    if ds.images.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ConfigError(f"dataset images are {ds.images.shape[2:]}, config expects image_size={cfg.image_size}")


def source_split(cfg: RunConfig, source: DomainDataset) -> Tuple[np.ndarray, np.ndarray]:
    return stratified_split(source.labels, cfg.source_test_fraction, cfg.seed)


def _source_metrics(ckpt: Checkpoint, source: DomainDataset, train: np.ndarray, test: np.ndarray) -> Dict[str, float]:
    y = source.labels
    feats = embed(ckpt.model, source.images[train])
    with no_grad():
        ce = smoothed_cross_entropy(head_logits(ckpt.head, Tensor(feats)), y[train], ckpt.config.label_smoothing).item()
    nc = nc_from_features(feats, y[train], ckpt.head)
    return {
        "ce_loss": ce,
        "source_train_acc": float(np.mean(head_predict(ckpt.head, feats) == y[train])),
        "source_test_acc": accuracy(ckpt.model, ckpt.head, source.images[test], y[test]),
        "nc1": nc.nc1_variability,
        "nc2": nc.nc2_angle_spread,
        "nc3": nc.nc3_self_duality,
        "nc4": nc.nc4_agreement,
    }


def train_source(cfg: RunConfig, source: DomainDataset, sink: Sink = None) -> Tuple[Checkpoint, List[Record]]:
    """Supervised training on the source train split.

    Emits an ``epoch 0`` record at initialisation followed by one record per
    epoch. ``ce_loss`` in per-epoch records is the running mean over the
    epoch's mini-batches; at epoch 0 it is the full-split loss.
    """
    check_compatible(cfg, source)
    train, test = source_split(cfg, source)
    model = init_encoder(cfg, cfg.seed)
    calibrate_encoder(model, source.images[train[:CALIBRATION_SAMPLES]])
    head = init_head(cfg, cfg.seed)
    params = dict(model.parameters())
    params.update(head_parameters(head))
    opt = SGD(params, cfg.lr_source, cfg.momentum, cfg.weight_decay)
    ckpt = Checkpoint(cfg, model, head, opt.buffers, 0, "source")

    records = [_emit(sink, {"phase": "source", "epoch": 0, **_source_metrics(ckpt, source, train, test)})]
    y = source.labels
    for rec in train_source_epochs(model, head, opt, cfg, source.images[train], y[train]):
        metrics = _source_metrics(ckpt, source, train, test)
        metrics["ce_loss"] = rec["ce_loss"]
        ckpt.epoch = rec["epoch"]
        records.append(_emit(sink, {"phase": "source", "epoch": rec["epoch"], **metrics}))
    ckpt.momentum = dict(opt.buffers)
    return ckpt, records


def merge_adapt_config(ckpt_cfg: RunConfig, requested: Optional[RunConfig]) -> RunConfig:
    """Adaptation settings from ``requested``, architecture from the checkpoint."""
    if requested is None:
        return ckpt_cfg
    for name in ARCH_FIELDS:
        if getattr(requested, name) != getattr(ckpt_cfg, name):
            raise ConfigError(
                f"{name}={getattr(requested, name)!r} conflicts with the checkpoint's {getattr(ckpt_cfg, name)!r}"
            )
    return requested


def adapt(
    source_ckpt: Checkpoint,
    target: DomainDataset,
    cfg: Optional[RunConfig] = None,
    sink: Sink = None,
) -> Tuple[Checkpoint, List[Record]]:
    """Source-free adaptation of a copy of ``source_ckpt`` on unlabelled target images.

    ``target_acc`` uses held-out labels for reporting only, after each epoch's
    updates have been applied.
    """
    cfg = merge_adapt_config(source_ckpt.config, cfg)
    check_compatible(cfg, target)
    if len(target) <= cfg.M:
        raise ConfigError(f"M={cfg.M} must be smaller than the number of target samples {len(target)}")
    # private copy: the source checkpoint stays untouched
    work = decode(source_ckpt.to_bytes())
    model, head = work.model, work.head
    opt = SGD(model.parameters(), cfg.lr_adapt, cfg.momentum, cfg.weight_decay)
    y_eval = target.evaluation_labels()
    images = target.images

    records = [
        _emit(sink, {"phase": "adapt", "epoch": 0, "target_acc": accuracy(model, head, images, y_eval)})
    ]
    for rec in adapt_epochs(model, head, opt, cfg, images):
        rec = dict(rec)
        rec["target_acc"] = accuracy(model, head, images, y_eval)
        records.append(_emit(sink, {"phase": "adapt", **rec}))
    out = Checkpoint(cfg, model, head, dict(opt.buffers), cfg.epochs_adapt, "adapt")
    return out, records


def evaluate(ckpt: Checkpoint, ds: DomainDataset, split: str = "all") -> Dict[str, object]:
    """Accuracy of ``ckpt`` on ``ds``; ``split`` selects the seeded source split."""
    check_compatible(ckpt.config, ds)
    labels = ds.evaluation_labels()
    index = np.arange(len(ds))
    if split in ("train", "test"):
        train, test = stratified_split(labels, ckpt.config.source_test_fraction, ckpt.config.seed)
        index = train if split == "train" else test
    elif split != "all":
        raise ConfigError(f"split must be 'all', 'train' or 'test', got {split!r}")
    return {
        "accuracy": accuracy(ckpt.model, ckpt.head, ds.images[index], labels[index]),
        "n": int(len(index)),
        "split": split,
        "domain": ds.domain_tag,
    }


def nc_report(ckpt: Checkpoint, ds: DomainDataset) -> Dict[str, float]:
    check_compatible(ckpt.config, ds)
    return nc_from_features(embed(ckpt.model, ds.images), ds.evaluation_labels(), ckpt.head).to_dict()


__all__ = [
    "METRICS_SCHEMA",
    "train_source",
    "adapt",
    "evaluate",
    "nc_report",
    "merge_adapt_config",
    "check_compatible",
    "source_split",
]
