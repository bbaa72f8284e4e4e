"""
Representation-update (normalization) layers.

ContraNorm family: one gradient-descent step on the uniformity loss of the
representations, in its full, stop-gradient, norm-regularized, LayerNorm
and dual (feature-correlation) forms, plus the LayerNorm and PairNorm
baselines. Every layer is a pure function of (H, NormalizerConfig).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from numerics import ContractViolationError, as_matrix, softmax_cols, softmax_rows

logger = logging.getLogger(__name__)

PAIRNORM_ZERO_NORM = 1e-12


class NormVariant(str, Enum):
    NONE = "none"
    LAYER_NORM = "layernorm"
    PAIR_NORM = "pairnorm"
    CONTRANORM_FULL = "contranorm-full"
    CONTRANORM_SG = "contranorm-sg"
    CONTRANORM_AD = "contranorm-ad"
    CONTRANORM_REG = "contranorm-reg"
    CONTRANORM = "contranorm"
    CONTRANORM_D = "contranorm-d"


class PairNormMode(str, Enum):
    PN = "pn"
    PN_SI = "pn-si"
    PN_SCS = "pn-scs"


@dataclass(frozen=True)
class NormalizerConfig:
    """
    Which normalization layer to apply and with which constants.

    gamma/beta are either None (identity affine), a scalar broadcast to every
    feature, or a per-feature tuple whose length must match d.
    """
    variant: NormVariant = NormVariant.CONTRANORM
    scale: float = 1.0
    tau: float = 1.0
    gamma: Optional[Tuple[float, ...]] = None
    beta: Optional[Tuple[float, ...]] = None
    layernorm_eps: float = 1e-5
    pairnorm_scale: float = 1.0
    pairnorm_mode: PairNormMode = PairNormMode.PN_SI
    temper_logits: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'variant', NormVariant(self.variant))
        object.__setattr__(self, 'pairnorm_mode', PairNormMode(self.pairnorm_mode))
        for name in ('gamma', 'beta'):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(x) for x in np.atleast_1d(value))
                if not all(np.isfinite(value)):
                    raise ContractViolationError(f"{name} must be finite")
                object.__setattr__(self, name, value)
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ContractViolationError(f"temperature tau must be positive, got {self.tau}")
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ContractViolationError(f"scale s must be non-negative, got {self.scale}")
        if not self.layernorm_eps > 0:
            raise ContractViolationError(f"layernorm_eps must be positive, got {self.layernorm_eps}")
        if not self.pairnorm_scale > 0:
            raise ContractViolationError(f"pairnorm_scale must be positive, got {self.pairnorm_scale}")

    def resolve_affine(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-feature (gamma, beta) vectors of length d"""
        return self._affine_vector(self.gamma, d, 1.0, 'gamma'), self._affine_vector(self.beta, d, 0.0, 'beta')

    @staticmethod
    def _affine_vector(value, d: int, default: float, name: str) -> np.ndarray:
        if value is None:
            return np.full(d, default)
        if len(value) == 1:
            return np.full(d, value[0])
        if len(value) != d:
            raise ContractViolationError(f"{name} has length {len(value)}, feature dimension is {d}")
        return np.array(value)

    def to_dict(self) -> Dict:
        return {
            'variant': self.variant.value,
            'scale': self.scale,
            'tau': self.tau,
            'gamma': list(self.gamma) if self.gamma is not None else None,
            'beta': list(self.beta) if self.beta is not None else None,
            'layernorm_eps': self.layernorm_eps,
            'pairnorm_scale': self.pairnorm_scale,
            'pairnorm_mode': self.pairnorm_mode.value,
            'temper_logits': self.temper_logits,
        }


def _similarity_logits(h: np.ndarray, cfg: NormalizerConfig) -> np.ndarray:
    # the printed stop-gradient forms use raw HH^T; temper_logits divides by tau
    gram = h @ h.T
    return gram / cfg.tau if cfg.temper_logits else gram


def layer_norm(h, cfg: NormalizerConfig) -> np.ndarray:
    """Per-row standardization with population variance, then gamma * x + beta"""
    h = as_matrix(h, "representations")
    gamma, beta = cfg.resolve_affine(h.shape[1])
    mean = h.mean(axis=1, keepdims=True)
    var = h.var(axis=1, keepdims=True)
    return (h - mean) / np.sqrt(var + cfg.layernorm_eps) * gamma + beta


def contranorm_full(h, cfg: NormalizerConfig) -> np.ndarray:
    """
    Full gradient step on the uniformity loss:
    H - (s/tau) * (D^-1 A + A D^-1) H with A = exp(HH^T / tau).

    Both stochastic factors always use tempered logits, so the update equals
    H - s * grad of the uniformity loss at temperature tau.
    """
    h = as_matrix(h, "representations")
    logits = (h @ h.T) / cfg.tau
    both = softmax_rows(logits) + softmax_cols(logits)
    return h - (cfg.scale / cfg.tau) * (both @ h)


def contranorm_sg(h, cfg: NormalizerConfig) -> np.ndarray:
    """Stop-gradient step: H - (s/tau) * softmax(HH^T) H"""
    h = as_matrix(h, "representations")
    return h - (cfg.scale / cfg.tau) * (softmax_rows(_similarity_logits(h, cfg)) @ h)


def contranorm_ad(h, cfg: NormalizerConfig) -> np.ndarray:
    """The column-normalized A D^-1 term alone, followed by LayerNorm"""
    h = as_matrix(h, "representations")
    step = h - (cfg.scale / cfg.tau) * (softmax_cols(_similarity_logits(h, cfg)) @ h)
    return layer_norm(step, cfg)


def contranorm_reg(h, cfg: NormalizerConfig) -> np.ndarray:
    """Feature-norm regularized step: (1 + s) H - (s/tau) * softmax(HH^T) H"""
    h = as_matrix(h, "representations")
    return (1.0 + cfg.scale) * h - (cfg.scale / cfg.tau) * (softmax_rows(_similarity_logits(h, cfg)) @ h)


def contranorm(h, cfg: NormalizerConfig) -> np.ndarray:
    """Default ContraNorm: LayerNorm appended to the stop-gradient step"""
    return layer_norm(contranorm_sg(h, cfg), cfg)


def dual_step(h, cfg: NormalizerConfig) -> np.ndarray:
    """H - (s/tau) * H softmax(H^T H), the pre-LayerNorm part of ContraNorm-D"""
    h = as_matrix(h, "representations")
    corr = h.T @ h
    if cfg.temper_logits:
        corr = corr / cfg.tau
    return h - (cfg.scale / cfg.tau) * (h @ softmax_rows(corr))


def contranorm_dual(h, cfg: NormalizerConfig) -> np.ndarray:
    """
    ContraNorm-D. The d x d feature-correlation matrix replaces the n x n
    similarity matrix, so the cost is O(n d^2), linear in n.
    """
    return layer_norm(dual_step(h, cfg), cfg)


def center_columns(h) -> np.ndarray:
    """Subtract the column means (PairNorm's centering step)"""
    h = as_matrix(h, "representations")
    return h - h.mean(axis=0, keepdims=True)


def _safe_row_scale(x: np.ndarray, norms: np.ndarray, target: float) -> np.ndarray:
    out = np.zeros_like(x)
    live = norms[:, 0] >= PAIRNORM_ZERO_NORM
    out[live] = target * x[live] / norms[live]
    return out


def pair_norm(h, cfg: NormalizerConfig) -> np.ndarray:
    """
    PairNorm baseline. Default mode rescales every centered row to norm
    ``pairnorm_scale``; rows whose centered norm is below 1e-12 stay zero.
    """
    h = as_matrix(h, "representations")
    col_mean = h.mean(axis=0, keepdims=True)
    if cfg.pairnorm_mode == PairNormMode.PN_SCS:
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        return _safe_row_scale(h, norms, cfg.pairnorm_scale) - col_mean

    centered = h - col_mean
    if cfg.pairnorm_mode == PairNormMode.PN_SI:
        norms = np.linalg.norm(centered, axis=1, keepdims=True)
        return _safe_row_scale(centered, norms, cfg.pairnorm_scale)

    rms_norm = float(np.sqrt(np.mean(np.sum(centered * centered, axis=1))))
    if rms_norm < PAIRNORM_ZERO_NORM:
        return np.zeros_like(centered)
    return cfg.pairnorm_scale * centered / rms_norm


def _identity(h, cfg: NormalizerConfig) -> np.ndarray:
    return np.array(as_matrix(h, "representations"))


LAYERS: Dict[NormVariant, Callable[[np.ndarray, NormalizerConfig], np.ndarray]] = {
    NormVariant.NONE: _identity,
    NormVariant.LAYER_NORM: layer_norm,
    NormVariant.PAIR_NORM: pair_norm,
    NormVariant.CONTRANORM_FULL: contranorm_full,
    NormVariant.CONTRANORM_SG: contranorm_sg,
    NormVariant.CONTRANORM_AD: contranorm_ad,
    NormVariant.CONTRANORM_REG: contranorm_reg,
    NormVariant.CONTRANORM: contranorm,
    NormVariant.CONTRANORM_D: contranorm_dual,
}


def apply(h, cfg: NormalizerConfig) -> np.ndarray:
    """Dispatch on cfg.variant; never mutates the input"""
    return LAYERS[cfg.variant](h, cfg)
