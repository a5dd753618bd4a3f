"""Source-phase supervised training and source-free target adaptation.

Target adaptation keeps a feature bank with one embedding and one softmax
prediction per target sample. Each training sample is pulled toward the mean
prediction of its ``M`` nearest bank neighbours (KL similarity loss) and pushed
away from the other predictions in its mini-batch (diversity loss). The
classifier head is never updated here; only the encoder and its attention
block are.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .encoder import EncoderModel, Head, forward, head_logits, head_predict
from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor, as_tensor, clamp_min, log, log_softmax, no_grad, softmax, square

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
_NORMALIZATION_SLACK = 1e-6


# -- optimiser ---------------------------------------------------------------------
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics).

    ``buf = momentum * buf + (grad + weight_decay * p)``; ``p -= lr * buf``.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data = p.data - self.lr * buf


# -- source phase ------------------------------------------------------------------
def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / K`` targets."""
    labels = np.asarray(labels)
    K = logits.shape[1]
    if labels.ndim != 1 or len(labels) != logits.shape[0]:
        raise DataError(f"need one label per logit row, got {labels.shape} for {logits.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K - 1}], got range [{labels.min()}, {labels.max()}]")
    targets = np.full(logits.shape, smoothing / K)
    targets[np.arange(len(labels)), labels] += 1.0 - smoothing
    return -(log_softmax(logits, axis=1) * targets).sum(axis=1).mean()


def source_train_step(
    model: EncoderModel,
    head: Head,
    images: np.ndarray,
    labels: np.ndarray,
    optimizer: SGD,
    smoothing: float = 0.1,
) -> float:
    """One supervised SGD step; returns the batch loss before the update."""
    optimizer.zero_grad()
    loss = smoothed_cross_entropy(head_logits(head, forward(model, images)), labels, smoothing)
    loss.backward()
    optimizer.step()
    return loss.item()


# -- feature bank ------------------------------------------------------------------
@dataclass
class FeatureBank:
    embeddings: np.ndarray  # N x d, unit rows
    predictions: np.ndarray  # N x K, softmax rows
    sample_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if len(self.sample_ids) == 0:
            self.sample_ids = np.arange(len(self.embeddings))

    def __len__(self) -> int:
        return len(self.embeddings)

    def update(self, ids: np.ndarray, embeddings: np.ndarray, predictions: np.ndarray) -> None:
        ids = np.asarray(ids)
        if len(ids) and (ids.min() < 0 or ids.max() >= len(self)):
            raise DataError(f"sample ids outside the bank range [0, {len(self) - 1}]")
        self.embeddings[ids] = embeddings
        self.predictions[ids] = predictions


def eval_threads() -> int:
    """Evaluation parallelism from ``EIANET_THREADS`` (default 1)."""
    raw = os.environ.get("EIANET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"EIANET_THREADS must be an integer, got {raw!r}") from None


def _batches(n: int, batch_size: int) -> List[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def embed(model: EncoderModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Embeddings of ``images`` without recording a tape.

    Batches may run on up to ``EIANET_THREADS`` threads; results are always
    assembled in sample order.
    """

    def run(sl: slice) -> np.ndarray:
        return forward(model, images[sl]).data

    with no_grad():
        chunks = _batches(len(images), batch_size)
        threads = min(eval_threads(), len(chunks))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(sl) for sl in chunks]
    return np.concatenate(parts, axis=0)


def predict_probabilities(head: Head, embeddings: np.ndarray) -> np.ndarray:
    with no_grad():
        return softmax(head_logits(head, Tensor(embeddings)), axis=1).data


def build_bank(model: EncoderModel, head: Head, images: np.ndarray, batch_size: int = 256) -> FeatureBank:
    """One evaluation pass over every target image."""
    if len(images) == 0:
        raise ConfigError("cannot build a feature bank from an empty dataset")
    emb = embed(model, images, batch_size)
    return FeatureBank(emb, predict_probabilities(head, emb), np.arange(len(images)))


def find_neighbors(bank: FeatureBank, query_ids: Sequence[int], M: int) -> np.ndarray:
    """``len(query_ids) x M`` ids of the most cosine-similar other bank rows.

    Ties go to the lower id.
    """
    n = len(bank)
    if M >= n:
        raise ConfigError(f"M={M} must be smaller than the bank size {n}")
    query_ids = np.asarray(query_ids, dtype=np.int64)
    if len(query_ids) and (query_ids.min() < 0 or query_ids.max() >= n):
        raise DataError(f"query ids outside the bank range [0, {n - 1}]")
    emb = bank.embeddings
    norms = np.linalg.norm(emb, axis=1)
    unit = np.divide(emb, norms[:, None], out=np.zeros_like(emb), where=norms[:, None] >= 1e-12)
    sim = unit[query_ids] @ unit.T
    sim[np.arange(len(query_ids)), query_ids] = -np.inf
    # stable sort on the negated similarity keeps lower ids first among equals
    return np.argsort(-sim, axis=1, kind="stable")[:, :M]


# -- losses ----------------------------------------------------------------------------
def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < -_NORMALIZATION_SLACK) or np.any(np.abs(p.sum(axis=-1) - 1.0) > _NORMALIZATION_SLACK):
        raise ContractError(f"{name} rows must be probability vectors (within {_NORMALIZATION_SLACK})")


def kl_rows(p: Tensor, q) -> Tensor:
    """Per-row ``KL(p || q)`` with both sides floored at ``PROB_FLOOR`` before the log."""
    q = as_tensor(q)
    return (p * (log(clamp_min(p, PROB_FLOOR)) - log(clamp_min(q, PROB_FLOOR)))).sum(axis=-1)


def similarity_loss(pred_x, neighbor_preds) -> Tensor:
    """KL divergence of one prediction from the mean of its neighbours' predictions."""
    pred_x, neighbor_preds = as_tensor(pred_x), as_tensor(neighbor_preds)
    _check_distribution(pred_x.data, "pred_x")
    _check_distribution(neighbor_preds.data, "neighbor_preds")
    return kl_rows(pred_x, neighbor_preds.mean(axis=0))


def diversity_loss(pred_x, batch_preds, sign: str = "negated") -> Tensor:
    """Mean squared distance from ``pred_x`` to the other batch predictions.

    With ``sign="negated"`` (default) the value is ``<= 0`` so minimising it
    spreads predictions apart; ``"literal"`` returns the positive distance.
    """
    pred_x, batch_preds = as_tensor(pred_x), as_tensor(batch_preds)
    _check_distribution(pred_x.data, "pred_x")
    if batch_preds.shape[0] == 0:
        logger.warning("diversity loss over an empty set of other samples; returning 0")
        return Tensor(0.0)
    _check_distribution(batch_preds.data, "batch_preds")
    dist = square(batch_preds - pred_x).sum(axis=1).mean()
    return dist * (-1.0 if sign == "negated" else 1.0)


def batch_diversity(preds: Tensor, sign: str = "negated") -> Tensor:
    """Per-sample diversity loss where every other batch row is a negative."""
    B = preds.shape[0]
    if B < 2:
        logger.warning("mini-batch of size 1 has no negatives; diversity loss is 0")
        return Tensor(np.zeros(B))
    K = preds.shape[1]
    diff = preds.reshape(B, 1, K) - preds.reshape(1, B, K)
    pair_sum = square(diff).sum(axis=2).sum(axis=1)
    mean_dist = pair_sum * (1.0 / (B - 1))
    return mean_dist * (-1.0 if sign == "negated" else 1.0)


@dataclass
class AdaptStepReport:
    l_sim: float
    l_div: float
    l_t: float
    neighbor_ids: np.ndarray


def adapt_step(
    model: EncoderModel,
    head: Head,
    bank: FeatureBank,
    batch_ids: np.ndarray,
    images: np.ndarray,
    optimizer: SGD,
    cfg: RunConfig,
) -> AdaptStepReport:
    """One target-phase update on a mini-batch.

    The bank rows of the batch are overwritten with this forward pass's
    (pre-update) values, then neighbours are retrieved from the refreshed
    bank. Neighbour predictions are constants.
    """
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    if len(batch_ids) != len(images):
        raise DataError(f"{len(batch_ids)} sample ids for {len(images)} images")
    if len(batch_ids) and (batch_ids.min() < 0 or batch_ids.max() >= len(bank)):
        raise DataError(f"sample ids outside the bank range [0, {len(bank) - 1}]")

    optimizer.zero_grad()
    features = forward(model, images)
    probs = softmax(head_logits(head, features), axis=1)
    bank.update(batch_ids, features.data, probs.data)

    neighbors = find_neighbors(bank, batch_ids, cfg.M)
    neighbor_mean = bank.predictions[neighbors].mean(axis=1)
    l_sim = kl_rows(probs, neighbor_mean).mean()
    l_div = batch_diversity(probs, cfg.div_sign).mean()
    l_t = l_sim + l_div * cfg.alpha
    l_t.backward()
    optimizer.step()
    return AdaptStepReport(l_sim.item(), l_div.item(), l_t.item(), neighbors)


# -- loops ---------------------------------------------------------------------------------
def accuracy(model: EncoderModel, head: Head, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return float("nan")
    return float(np.mean(head_predict(head, embed(model, images)) == labels))


def train_source_epochs(
    model: EncoderModel,
    head: Head,
    optimizer: SGD,
    cfg: RunConfig,
    images: np.ndarray,
    labels: np.ndarray,
    start_epoch: int = 0,
    epochs: Optional[int] = None,
) -> Iterator[Dict[str, float]]:
    """Yield ``{"epoch", "ce_loss"}`` after each epoch of shuffled mini-batch SGD."""
    epochs = cfg.epochs_source if epochs is None else epochs
    n = len(images)
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)
        losses, sizes = [], []
        for sl in _batches(n, cfg.batch_size):
            idx = order[sl]
            losses.append(source_train_step(model, head, images[idx], labels[idx], optimizer, cfg.label_smoothing))
            sizes.append(len(idx))
        yield {"epoch": epoch + 1, "ce_loss": float(np.average(losses, weights=sizes))}


def adapt_epochs(
    model: EncoderModel,
    head: Head,
    optimizer: SGD,
    cfg: RunConfig,
    images: np.ndarray,
    bank: Optional[FeatureBank] = None,
    epochs: Optional[int] = None,
) -> Iterator[Dict[str, float]]:
    """Yield ``{"epoch", "l_sim", "l_div", "l_t"}`` epoch means of adaptation.

    Only target images are consumed; labels never enter this loop.
    """
    epochs = cfg.epochs_adapt if epochs is None else epochs
    if bank is None:
        bank = build_bank(model, head, images)
    n = len(images)
    if cfg.M >= n:
        raise ConfigError(f"M={cfg.M} must be smaller than the number of target samples {n}")
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, 2000 + epoch]).permutation(n)
        sums = np.zeros(3)
        count = 0
        for sl in _batches(n, cfg.batch_size):
            ids = order[sl]
            report = adapt_step(model, head, bank, ids, images[ids], optimizer, cfg)
            sums += np.array([report.l_sim, report.l_div, report.l_t]) * len(ids)
            count += len(ids)
        l_sim, l_div, l_t = sums / count
        yield {"epoch": epoch + 1, "l_sim": float(l_sim), "l_div": float(l_div), "l_t": float(l_t)}
