"""Fixed simplex equiangular tight frame (ETF) prototype classifier.

The classifier is a ``d x K`` matrix whose columns are unit vectors with
pairwise inner product ``-1/(K-1)``. It is built once from a seeded random
rotation and never trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, l2_normalize, matmul, orthonormal_columns


@dataclass(frozen=True)
class EtfClassifier:
    E: Tensor
    K: int
    d: int
    seed: int
    logit_scale: float = 16.0

    @property
    def prototypes(self) -> np.ndarray:
        """Read-only view of the prototype matrix (one column per class)."""
        view = self.E.data.view()
        view.flags.writeable = False
        return view


@dataclass(frozen=True)
class EtfValidationReport:
    max_norm_deviation: float
    max_offdiag_deviation: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "max_norm_deviation": self.max_norm_deviation,
            "max_offdiag_deviation": self.max_offdiag_deviation,
            "passed": self.passed,
        }


def simplex_etf_matrix(rotation: np.ndarray) -> np.ndarray:
    """Map a ``d x K`` matrix with orthonormal columns onto a simplex ETF."""
    K = rotation.shape[1]
    centering = np.eye(K) - np.full((K, K), 1.0 / K)
    return np.sqrt(K / (K - 1)) * rotation @ centering


def build_etf(K: int, d: int, seed: int, logit_scale: float = 16.0) -> EtfClassifier:
    """Construct the frozen ETF classifier for ``K`` classes in ``R^d``.

    Raises:
        ContractError: ``K < 2``.
        DimensionError: ``K > d``.
    """
    if K < 2:
        raise ContractError(f"a simplex ETF needs at least 2 classes, got K={K}")
    if K > d:
        raise DimensionError(f"feature dimension d={d} must be >= class count K={K}")
    if logit_scale <= 0:
        raise ContractError(f"logit_scale must be positive, got {logit_scale}")
    rotation = orthonormal_columns(d, K, seed).data
    E = Tensor(simplex_etf_matrix(rotation), requires_grad=False)
    E.data.flags.writeable = False
    return EtfClassifier(E=E, K=K, d=d, seed=seed, logit_scale=float(logit_scale))


def validate_etf(c: EtfClassifier, tolerance: float = 1e-9) -> EtfValidationReport:
    E = c.E.data
    K = E.shape[1]
    gram = E.T @ E
    norm_dev = float(np.max(np.abs(np.sqrt(np.diag(gram)) - 1.0)))
    if K > 1:
        off = gram[~np.eye(K, dtype=bool)]
        offdiag_dev = float(np.max(np.abs(off + 1.0 / (K - 1))))
    else:
        offdiag_dev = 0.0
    passed = norm_dev <= tolerance and offdiag_dev <= tolerance
    return EtfValidationReport(norm_dev, offdiag_dev, passed)


def cosine_logits(features, prototypes, scale: float) -> Tensor:
    """``scale * cos(feature_b, column_i)``; zero-norm rows give zero logits."""
    f = l2_normalize(as_tensor(features), axis=1)
    return matmul(f, as_tensor(prototypes)) * scale


def logits(c: EtfClassifier, features) -> Tensor:
    """Scaled cosine similarity of each feature row to every prototype."""
    features = as_tensor(features)
    if features.ndim != 2 or features.shape[1] != c.d:
        raise DimensionError(f"features must be B x {c.d}, got {features.shape}")
    # columns are unit norm, so a dot product with the normalized row is the cosine
    return cosine_logits(features, c.E, c.logit_scale)


TIE_TOLERANCE = 1e-12


def nearest_prototype(features, prototypes) -> np.ndarray:
    """Argmax cosine over columns of ``prototypes``.

    Cosines within ``TIE_TOLERANCE`` of the row maximum count as ties, which
    go to the lowest class index.
    """
    f = as_tensor(features).data
    P = as_tensor(prototypes).data
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms >= 1e-12)
    pnorms = np.linalg.norm(P, axis=0, keepdims=True)
    cos = unit @ np.divide(P, pnorms, out=np.zeros_like(P), where=pnorms >= 1e-12)
    best = cos.max(axis=1, keepdims=True)
    return np.argmax(cos >= best - TIE_TOLERANCE, axis=1)


def predict(c: EtfClassifier, features) -> np.ndarray:
    """Class index (0-based) of the most cosine-similar prototype per row."""
    return nearest_prototype(features, c.E)
