"""Neural-collapse diagnostics on a labelled evaluation set.

* ``nc1_variability``: mean within-class feature variance divided by the
  variance of the class means around the global mean. This ratio is used
  instead of ``tr(S_W S_B^+)`` because ``S_B`` is badly conditioned when the
  class count is small relative to ``d``; it is zero under full collapse.
* ``nc2_angle_spread``: standard deviation of the pairwise cosines between
  centred class means (zero for a simplex ETF).
* ``nc3_self_duality``: mean cosine between each class mean and its classifier
  column.
* ``nc4_agreement``: fraction of samples whose nearest class mean (Euclidean)
  agrees with the classifier's prediction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .adaptation import embed
from .encoder import EncoderModel, Head, head_matrix, head_predict
from .errors import DataError

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class NcReport:
    nc1_variability: float
    nc2_angle_spread: float
    nc3_self_duality: float
    nc4_agreement: float

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(v: np.ndarray, axis: int) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n >= 1e-12)


def nc_from_features(features: np.ndarray, labels: np.ndarray, head: Head) -> NcReport:
    """Collapse metrics for precomputed ``N x d`` features.

    Raises:
        DataError: some class has fewer than two samples.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    K = head.K
    counts = np.bincount(labels, minlength=K)
    if len(counts) > K or np.any(counts < 2):
        missing = [k for k in range(K) if k >= len(counts) or counts[k] < 2]
        raise DataError(f"every class needs at least two samples; short classes: {missing}")

    means = np.stack([features[labels == k].mean(axis=0) for k in range(K)])
    within = np.array([((features[labels == k] - means[k]) ** 2).sum(axis=1).mean() for k in range(K)])
    global_mean = means.mean(axis=0)
    between = ((means - global_mean) ** 2).sum(axis=1).mean()
    nc1 = float(within.mean() / (between + VARIANCE_FLOOR))

    centred = _unit(means - global_mean, axis=1)
    cos = centred @ centred.T
    nc2 = float(np.std(cos[np.triu_indices(K, k=1)]))

    W = head_matrix(head).data
    nc3 = float(np.mean(np.sum(_unit(means, axis=1) * _unit(W, axis=0).T, axis=1)))

    dist = ((features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    ncc = np.argmin(dist, axis=1)
    nc4 = float(np.mean(ncc == head_predict(head, features)))
    return NcReport(nc1, nc2, nc3, nc4)


def measure_nc(model: EncoderModel, head: Head, images: np.ndarray, labels: np.ndarray) -> NcReport:
    return nc_from_features(embed(model, images), labels, head)
