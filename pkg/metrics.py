"""
Collapse diagnostics for representation matrices.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from numerics import (
    ContractViolationError,
    DegenerateInputError,
    Spectrum,
    as_matrix,
    singular_values,
)

logger = logging.getLogger(__name__)

ZERO_SPECTRUM = 1e-300
ZERO_NORM = 1e-12


@dataclass
class LayerDiagnostics:
    """Per-layer measurements; None marks a measurement that is undefined at this layer"""
    layer_index: int
    variance: float
    effective_rank: Optional[float]
    uniformity_loss: float
    vicreg_exp_loss: float
    dim_loss: float
    feature_similarity: Optional[float]
    attention_similarity: Optional[float]
    singular_values: Spectrum = field(default_factory=lambda: Spectrum(()))

    FIELDS = (
        'layer_index', 'variance', 'effective_rank', 'uniformity_loss',
        'vicreg_exp_loss', 'dim_loss', 'feature_similarity', 'attention_similarity',
    )

    def to_record(self, include_spectrum: bool = True) -> Dict[str, Any]:
        record = {name: getattr(self, name) for name in self.FIELDS}
        record['singular_values'] = self.singular_values.as_list() if include_spectrum else None
        return record


def variance(h) -> float:
    """Squared Frobenius norm of H after subtracting the column means"""
    h = as_matrix(h, "representations")
    centered = h - h.mean(axis=0, keepdims=True)
    return float(np.sum(centered * centered))


def effective_rank_from_spectrum(values: Sequence[float]) -> float:
    """exp of the Shannon entropy (natural log) of the L1-normalized spectrum"""
    sigma = np.asarray(list(values), dtype=np.float64)
    if sigma.size == 0 or np.any(sigma < 0):
        raise ContractViolationError("effective rank needs a non-empty, non-negative spectrum")
    total = float(np.sum(sigma))
    if not np.any(sigma > ZERO_SPECTRUM):
        raise DegenerateInputError("effective rank is undefined for an all-zero spectrum")
    p = sigma / total
    p = p[p > 0]
    entropy = -float(np.sum(p * np.log(p)))
    return float(np.exp(entropy))


def effective_rank(h) -> float:
    return effective_rank_from_spectrum(singular_values(h).values)


def uniformity_loss(h, tau: float) -> float:
    """
    sum_i log sum_j exp(h_i^T h_j / tau), self-term j = i included.
    """
    if not tau > 0:
        raise ContractViolationError(f"tau must be positive, got {tau}")
    h = as_matrix(h, "representations")
    return float(np.sum(logsumexp((h @ h.T) / tau, axis=1)))


def vicreg_exp_loss(h) -> float:
    """Feature-decorrelation dual of the uniformity loss, taken over columns"""
    h = as_matrix(h, "representations")
    return uniformity_loss(h.T, 1.0)


def dim_loss(h) -> float:
    """tr((I - HH^T)^2) / 4"""
    h = as_matrix(h, "representations")
    m = np.eye(h.shape[0]) - h @ h.T
    return float(np.einsum('ij,ji->', m, m)) / 4.0


def dim_loss_gradient(h) -> np.ndarray:
    """Gradient of dim_loss, -(I - HH^T) H; its negation is the descent direction"""
    h = as_matrix(h, "representations")
    m = np.eye(h.shape[0]) - h @ h.T
    return -(m @ h)


def _mean_pairwise_cosine(vectors: np.ndarray, what: str) -> float:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms <= ZERO_NORM):
        raise DegenerateInputError(f"cosine similarity undefined: {what} with zero norm")
    unit = vectors / norms[:, None]
    cos = unit @ unit.T
    upper = np.triu_indices(vectors.shape[0], k=1)
    return float(np.mean(cos[upper]))


def feature_similarity(h) -> float:
    """Mean cosine similarity over unordered pairs of rows"""
    h = as_matrix(h, "representations")
    if h.shape[0] < 2:
        raise DegenerateInputError("feature similarity needs at least two rows")
    return _mean_pairwise_cosine(h, "row")


def attention_similarity(attn: Sequence) -> float:
    """Column-wise mean pairwise cosine, averaged over heads"""
    if len(attn) == 0:
        raise ContractViolationError("attention similarity needs at least one head")
    heads = [as_matrix(a, "attention head") for a in attn]
    shape = heads[0].shape
    for a in heads:
        if a.shape != shape:
            raise ContractViolationError(f"attention heads differ in shape: {a.shape} vs {shape}")
    if shape[0] != shape[1]:
        raise ContractViolationError(f"attention head must be square, got {shape}")
    if shape[0] < 2:
        raise DegenerateInputError("attention similarity needs n >= 2")
    return float(np.mean([_mean_pairwise_cosine(a.T, "column") for a in heads]))


def near_zero_count(spectrum: Spectrum, fraction: float = 0.01) -> int:
    """Number of singular values below ``fraction`` times the largest one"""
    values = spectrum.as_array()
    if values.size == 0:
        return 0
    return int(np.sum(values < fraction * values[0]))


def diagnostics(h, attn: Optional[List] = None, tau: float = 1.0,
                layer_index: int = 0) -> LayerDiagnostics:
    """
    Bundle every measurement for one layer. Effective rank and the similarity
    metrics are recorded as absent when undefined instead of aborting.
    """
    h = as_matrix(h, "representations")
    spectrum = singular_values(h)

    try:
        erank = effective_rank_from_spectrum(spectrum.values)
    except DegenerateInputError:
        logger.warning(f"Layer {layer_index}: all-zero spectrum, effective rank recorded as absent")
        erank = None

    try:
        feat_sim = feature_similarity(h)
    except DegenerateInputError as e:
        logger.warning(f"Layer {layer_index}: {e}; feature similarity recorded as absent")
        feat_sim = None

    attn_sim = None
    if attn:
        try:
            attn_sim = attention_similarity(attn)
        except DegenerateInputError as e:
            logger.warning(f"Layer {layer_index}: {e}; attention similarity recorded as absent")

    return LayerDiagnostics(
        layer_index=layer_index,
        variance=variance(h),
        effective_rank=erank,
        uniformity_loss=uniformity_loss(h, tau),
        vicreg_exp_loss=vicreg_exp_loss(h),
        dim_loss=dim_loss(h),
        feature_similarity=feat_sim,
        attention_similarity=attn_sim,
        singular_values=spectrum,
    )
