"""
Machine checks of the ContraNorm propositions, lemmas and gradient.

Each ``check_*`` function evaluates one instance and returns a report whose
``passed`` property is False only for a counterexample. ``run_suite`` draws
seeded random instances and collects the failures with everything needed
to reproduce them.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

import norms
from metrics import effective_rank_from_spectrum, uniformity_loss, variance
from norms import NormalizerConfig, NormVariant
from numerics import (
    ContractViolationError,
    DegenerateInputError,
    Spectrum,
    as_matrix,
    center_projector,
    singular_values,
    softmax_cols,
    softmax_rows,
    sym_eigen,
)

logger = logging.getLogger(__name__)

CLAIM_SLACK = 1e-9
ERANK_SLACK = 1e-10
EIGEN_MAP_TOLERANCE = 1e-8
GRADIENT_TOLERANCE = 1e-5
FD_STEP = 1e-6
STOCHASTIC_TOLERANCE = 1e-9
EQUAL_SPECTRUM_TOLERANCE = 1e-9

SUITES = ('prop1', 'prop2', 'eigenmap', 'lemma1', 'lemma3', 'diagdom', 'grad')


@dataclass
class PropositionReport:
    instance_seed: Optional[int]
    n: int
    d: int
    s: float
    sigma: float
    sigma_kind: str
    lhs: float
    rhs: float
    condition_held: bool
    claim_held: bool
    slack: float
    alternative_rhs: Optional[float] = None
    boundary: bool = False

    @property
    def passed(self) -> bool:
        return self.claim_held or not self.condition_held or self.boundary

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EigenMapReport:
    s: float
    expected: List[float]
    observed: List[float]
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Lemma3Report:
    ratio_increasing: bool
    erank_a: float
    erank_b: float
    implication_held: bool

    @property
    def passed(self) -> bool:
        return self.implication_held

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DiagDominanceReport:
    n: int
    condition_held: bool
    diagonally_dominant: bool
    sigma_min: float
    claim_held: bool

    @property
    def passed(self) -> bool:
        return self.claim_held or not self.condition_held

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class GradientReport:
    n: int
    d: int
    tau: float
    max_rel_error: float
    tolerance: float = GRADIENT_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Lemma1Report:
    lam: float
    top_eigenvalue: float
    condition_held: bool
    var_before: float
    var_after: float
    claim_held: bool

    @property
    def passed(self) -> bool:
        return self.claim_held or not self.condition_held

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SuiteResult:
    name: str
    seed: int
    instances: int
    applicable: int = 0
    boundary: int = 0
    counterexamples: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name}: {status} instances={self.instances} applicable={self.applicable} "
                f"boundary={self.boundary} counterexamples={len(self.counterexamples)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'seed': self.seed,
            'instances': self.instances,
            'applicable': self.applicable,
            'boundary': self.boundary,
            'passed': self.passed,
            'counterexamples': self.counterexamples,
        }


def _check_row_stochastic(attn: np.ndarray) -> None:
    if attn.shape[0] != attn.shape[1]:
        raise ContractViolationError(f"attention matrix must be square, got {attn.shape}")
    if np.any(attn < 0) or np.max(np.abs(attn.sum(axis=1) - 1.0)) > STOCHASTIC_TOLERANCE:
        raise ContractViolationError("attention matrix is not row-stochastic")


def build_P(attn) -> np.ndarray:
    """P = (I - ee^T)(I - A) + (I - A)^T (I - ee^T)"""
    attn = as_matrix(attn, "attention")
    _check_row_stochastic(attn)
    n = attn.shape[0]
    q = center_projector(n) @ (np.eye(n) - attn)
    p = q + q.T
    assert np.max(np.abs(p - p.T)) <= 1e-12
    return p


def _contranorm_attention(h: np.ndarray) -> np.ndarray:
    # the propositions use softmax(HH^T) with no temperature in the logits
    return np.array(softmax_rows(h @ h.T))


def check_prop1(h, s: float, instance_seed: Optional[int] = None,
                bound_shift: float = 0.0) -> PropositionReport:
    """
    Var(H_t) >= (1 + s * sigma_min) Var(H_b) for H_t = ((1+s)I - sA)H_b.
    The alternative form Var(H_b) / (1 - s * sigma_min) is recorded when defined.
    """
    if not s > 0:
        raise ContractViolationError(f"s must be positive, got {s}")
    h = as_matrix(h, "representations")
    n, d = h.shape
    attn = _contranorm_attention(h)
    spectrum, _ = sym_eigen(build_P(attn))
    sigma_min = spectrum[-1]

    h_t = norms.contranorm_reg(h, NormalizerConfig(NormVariant.CONTRANORM_REG, scale=s, tau=1.0))
    var_b = variance(h)
    lhs = variance(h_t)
    rhs = (1.0 + s * sigma_min) * var_b + bound_shift
    alternative_rhs = var_b / (1.0 - s * sigma_min) if s * sigma_min < 1.0 else None
    return PropositionReport(
        instance_seed=instance_seed, n=n, d=d, s=s,
        sigma=sigma_min, sigma_kind='sigma_min',
        lhs=lhs, rhs=rhs,
        condition_held=True,
        claim_held=lhs >= rhs - CLAIM_SLACK * (1.0 + abs(rhs)),
        slack=lhs - rhs,
        alternative_rhs=alternative_rhs,
    )


def prop2_update(h: np.ndarray, s: float) -> np.ndarray:
    """(1 + s) H - s (HH^T) H"""
    return (1.0 + s) * h - s * ((h @ h.T) @ h)


def _equal_spectrum(sigma: np.ndarray) -> bool:
    # all non-zero singular values equal: erank cannot move under a scalar map
    if sigma.size == 0 or sigma[0] <= 0:
        return True
    live = sigma[sigma > EQUAL_SPECTRUM_TOLERANCE * sigma[0]]
    return bool(live[0] - live[-1] <= EQUAL_SPECTRUM_TOLERANCE * live[0])


def _gram_spectra(h: np.ndarray, s: float) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of HH^T and of H_t H_t^T, one Jacobi solve each"""
    lam, _ = sym_eigen(h @ h.T)
    h_t = prop2_update(h, s)
    observed, _ = sym_eigen(h_t @ h_t.T)
    return lam.as_array(), observed.as_array()


def _singular_from_gram(eigvals: np.ndarray, q: int) -> np.ndarray:
    return np.sqrt(np.maximum(eigvals[:q], 0.0))


def _prop2_report(h: np.ndarray, s: float, lam: np.ndarray, observed: np.ndarray,
                  instance_seed: Optional[int], bound_shift: float) -> PropositionReport:
    n, d = h.shape
    q = min(n, d)
    sigma_b = _singular_from_gram(lam, q)
    if not np.any(sigma_b > 0):
        raise DegenerateInputError("effective-rank growth is undefined for an all-zero matrix")
    sigma_max = float(sigma_b[0])
    erank_b = effective_rank_from_spectrum(sigma_b)
    erank_t = effective_rank_from_spectrum(_singular_from_gram(observed, q))
    rhs = erank_b + bound_shift
    condition = 1.0 + (1.0 - sigma_max ** 2) * s > 0
    return PropositionReport(
        instance_seed=instance_seed, n=n, d=d, s=s,
        sigma=sigma_max, sigma_kind='sigma_max',
        lhs=erank_t, rhs=rhs,
        condition_held=condition,
        claim_held=erank_t > rhs - ERANK_SLACK,
        slack=erank_t - rhs,
        boundary=_equal_spectrum(sigma_b),
    )


def _eigen_map_report(s: float, lam: np.ndarray, observed: np.ndarray) -> EigenMapReport:
    expected = np.sort((lam * s - (1.0 + s)) ** 2 * lam)[::-1]
    error = float(np.max(np.abs(expected - observed)))
    tolerance = EIGEN_MAP_TOLERANCE * max(1.0, float(np.max(np.abs(expected))))
    return EigenMapReport(s=s, expected=expected.tolist(), observed=observed.tolist(),
                          max_error=error, tolerance=tolerance)


def check_prop2(h, s: float, instance_seed: Optional[int] = None,
                bound_shift: float = 0.0) -> PropositionReport:
    """
    erank(H_t) > erank(H_b) when 1 + (1 - sigma_max^2) s > 0. Inputs whose
    non-zero singular values are all equal are reported as boundary cases.
    """
    if not s > 0:
        raise ContractViolationError(f"s must be positive, got {s}")
    h = as_matrix(h, "representations")
    lam, observed = _gram_spectra(h, s)
    return _prop2_report(h, s, lam, observed, instance_seed, bound_shift)


def check_eigen_map(h, s: float) -> EigenMapReport:
    """Eigenvalues of H_t H_t^T equal (lambda s - (1 + s))^2 lambda as multisets"""
    if s < 0:
        raise ContractViolationError(f"s must be non-negative, got {s}")
    h = as_matrix(h, "representations")
    lam, observed = _gram_spectra(h, s)
    return _eigen_map_report(s, lam, observed)


def check_lemma3(spec_a: Spectrum, spec_b: Spectrum) -> Lemma3Report:
    """
    If the eigenvalue ratio sigma_i / lambda_i (BB^T over AA^T, both sorted
    descending) is non-decreasing in i, then erank(B) >= erank(A). Effective
    ranks come from the square roots of the eigenvalues.
    """
    lam = np.asarray(list(spec_a), dtype=np.float64)
    sig = np.asarray(list(spec_b), dtype=np.float64)
    if lam.size != sig.size:
        raise ContractViolationError(f"spectra differ in length: {lam.size} vs {sig.size}")
    if np.any(lam <= 0):
        raise ContractViolationError("lemma 3 needs strictly positive eigenvalues of AA^T")
    ratio = sig / lam
    increasing = bool(np.all(np.diff(ratio) >= -1e-15 * np.abs(ratio[1:])))
    erank_a = effective_rank_from_spectrum(np.sqrt(lam))
    erank_b = effective_rank_from_spectrum(np.sqrt(np.maximum(sig, 0.0)))
    held = (not increasing) or erank_b >= erank_a - 1e-12
    return Lemma3Report(ratio_increasing=increasing, erank_a=erank_a, erank_b=erank_b,
                        implication_held=held)


def check_diag_dominance(attn) -> DiagDominanceReport:
    """
    Sufficient condition sum_k a_kj <= 1 + n a_ij for every i, j; when it holds
    the smallest eigenvalue of P must be non-negative (up to 1e-9).
    """
    attn = as_matrix(attn, "attention")
    p = build_P(attn)
    n = attn.shape[0]
    col_sums = attn.sum(axis=0)
    condition = bool(np.all(col_sums[None, :] <= 1.0 + n * attn + 1e-12))
    off_diag = np.sum(np.abs(p), axis=0) - np.abs(np.diag(p))
    dominant = bool(np.all(np.abs(np.diag(p)) >= off_diag - 1e-12))
    spectrum, _ = sym_eigen(p)
    sigma_min = spectrum[-1]
    return DiagDominanceReport(n=n, condition_held=condition, diagonally_dominant=dominant,
                               sigma_min=sigma_min, claim_held=sigma_min >= -1e-9)


def uniformity_gradient(h, tau: float) -> np.ndarray:
    """(D^-1 A + A D^-1) H / tau with A = exp(HH^T / tau)"""
    h = as_matrix(h, "representations")
    logits = (h @ h.T) / tau
    return (softmax_rows(logits) + softmax_cols(logits)) @ h / tau


def numeric_gradient(func: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = FD_STEP) -> np.ndarray:
    """Central finite differences, one coordinate at a time"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + step
        f_plus = func(x)
        x.flat[i] = orig - step
        f_minus = func(x)
        x.flat[i] = orig
        grad.flat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradient_check(h, tau: float) -> GradientReport:
    """
    Analytic uniformity-loss gradient against central differences. The input
    is rescaled to unit RMS first; error is |analytic - numeric| / max(1, |analytic|).
    """
    if not tau > 0:
        raise ContractViolationError(f"tau must be positive, got {tau}")
    h = np.array(as_matrix(h, "representations"))
    rms = float(np.sqrt(np.mean(h * h)))
    if rms > 0:
        h = h / rms
    analytic = uniformity_gradient(h, tau)
    numeric = numeric_gradient(lambda x: uniformity_loss(x, tau), h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return GradientReport(n=h.shape[0], d=h.shape[1], tau=tau, max_rel_error=float(np.max(rel)))


def check_lemma1(x0, p, lam: float, bound_shift: float = 0.0) -> Lemma1Report:
    """
    If (I - ee^T) - lam P^T (I - ee^T) P has no positive eigenvalue, then
    Var(P X0) >= Var(X0) / lam.
    """
    if not lam > 0:
        raise ContractViolationError(f"lambda must be positive, got {lam}")
    x0 = as_matrix(x0, "X0")
    p = as_matrix(p, "P")
    n = x0.shape[0]
    if p.shape != (n, n):
        raise ContractViolationError(f"P must be {n}x{n}, got {p.shape}")
    c = center_projector(n)
    sigma = c - lam * (p.T @ c @ p)
    spectrum, _ = sym_eigen((sigma + sigma.T) / 2.0)
    top = spectrum[0]
    condition = top <= 1e-12
    var_before = variance(x0)
    var_after = variance(p @ x0)
    bound = var_before / lam + bound_shift
    return Lemma1Report(lam=lam, top_eigenvalue=top, condition_held=condition,
                        var_before=var_before, var_after=var_after,
                        claim_held=var_after >= bound - CLAIM_SLACK * (1.0 + abs(bound)))


# ---------------------------------------------------------------------------
# randomized suites

def _random_shape(rng: np.random.Generator, max_n: int = 16, max_d: int = 8):
    return int(rng.integers(2, max_n + 1)), int(rng.integers(1, max_d + 1))


def _instance_prop1(index: int, seed: int, bound_shift: float):
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    n, d = _random_shape(rng)
    h = rng.standard_normal((n, d))
    s = (0.1, 0.5, 1.0)[index % 3]
    report = check_prop1(h, s, instance_seed, bound_shift)
    return report, {'seed': instance_seed, 'H': h.tolist(), 's': s}


def _prop2_instance(rng: np.random.Generator):
    n, d = _random_shape(rng)
    h = rng.standard_normal((n, d))
    sigma_max = singular_values(h)[0]
    h = h * (rng.uniform(0.1, 1.0) / sigma_max)
    s = float(rng.uniform(0.01, 0.99))
    return h, s


def _instance_prop2(index: int, seed: int, bound_shift: float):
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    h, s = _prop2_instance(rng)
    lam, observed = _gram_spectra(h, s)
    report = _prop2_report(h, s, lam, observed, instance_seed, bound_shift)
    eigen_report = _eigen_map_report(s, lam, observed)
    if report.passed and not eigen_report.passed:
        # the eigenvalue identity on the same instance is part of the suite
        report.claim_held = False
        report.boundary = False
    detail = {'seed': instance_seed, 'H': h.tolist(), 's': s, 'eigen_map': eigen_report.to_dict()}
    return report, detail


def _instance_eigenmap(index: int, seed: int, bound_shift: float):
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    h, _ = _prop2_instance(rng)
    s = (0.0, 0.1, 0.5, 1.0)[index % 4]
    report = check_eigen_map(h, s)
    report.max_error += bound_shift
    return report, {'seed': instance_seed, 'H': h.tolist(), 's': s}


def _instance_lemma1(index: int, seed: int, bound_shift: float):
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    n, d = _random_shape(rng, max_n=8)
    x0 = rng.standard_normal((n, d))
    p = rng.uniform(1.0, 3.0) * np.eye(n) + 0.3 * rng.standard_normal((n, n))
    lam = float(rng.choice([0.5, 1.0, 2.0, 5.0, 10.0]))
    report = check_lemma1(x0, p, lam, bound_shift)
    return report, {'seed': instance_seed, 'X0': x0.tolist(), 'P': p.tolist(), 'lambda': lam}


def _instance_lemma3(index: int, seed: int, bound_shift: float):
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    q = int(rng.integers(1, 9))
    sig = np.sort(rng.uniform(0.01, 10.0, q))[::-1]
    ratio = np.sort(rng.uniform(0.1, 5.0, q))
    lam = sig / ratio
    report = check_lemma3(Spectrum(tuple(lam), kind="eigen"), Spectrum(tuple(sig), kind="eigen"))
    if bound_shift:
        report.implication_held = report.erank_b >= report.erank_a + bound_shift
    return report, {'seed': instance_seed, 'lambda': lam.tolist(), 'sigma': sig.tolist()}


def sinkhorn(matrix: np.ndarray, iterations: int = 500) -> np.ndarray:
    """Alternate column/row normalization; ends on rows so the result is row-stochastic"""
    a = np.array(matrix, dtype=np.float64)
    for _ in range(iterations):
        a = a / a.sum(axis=0, keepdims=True)
        a = a / a.sum(axis=1, keepdims=True)
        if np.max(np.abs(a.sum(axis=0) - 1.0)) < 1e-14:
            break
    return a


def _instance_diagdom(index: int, seed: int, bound_shift: float):
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    n = int(rng.integers(2, 13))
    if index % 2 == 0:
        attn = sinkhorn(np.exp(rng.standard_normal((n, n))))
    else:
        attn = np.array(softmax_rows(0.1 * rng.standard_normal((n, n))))
    report = check_diag_dominance(attn)
    if bound_shift:
        report.claim_held = report.sigma_min >= bound_shift
    return report, {'seed': instance_seed, 'A': attn.tolist()}


GRADIENT_GRID = [(n, d, tau) for n in (2, 4, 8) for d in (1, 3, 8) for tau in (0.5, 1.0, 2.0)]


def _instance_grad(index: int, seed: int, bound_shift: float):
    n, d, tau = GRADIENT_GRID[index % len(GRADIENT_GRID)]
    instance_seed = seed + index
    rng = np.random.default_rng(instance_seed)
    h = rng.standard_normal((n, d))
    report = gradient_check(h, tau)
    report.max_rel_error += bound_shift
    return report, {'seed': instance_seed, 'H': h.tolist(), 'tau': tau}


_INSTANCES = {
    'prop1': _instance_prop1,
    'prop2': _instance_prop2,
    'eigenmap': _instance_eigenmap,
    'lemma1': _instance_lemma1,
    'lemma3': _instance_lemma3,
    'diagdom': _instance_diagdom,
    'grad': _instance_grad,
}


def _is_applicable(report) -> bool:
    if isinstance(report, (PropositionReport, DiagDominanceReport, Lemma1Report)):
        return report.condition_held
    if isinstance(report, Lemma3Report):
        return report.ratio_increasing
    return True


def run_suite(name: str, instances: int, seed: int = 0, workers: int = 1,
              bound_shift: float = 0.0, progress: bool = False) -> SuiteResult:
    """
    Check ``instances`` random instances of suite ``name``. Instance i uses
    seed + i; results are merged in instance order whatever the worker count.
    ``bound_shift`` tightens the asserted bound (harness self-test).
    """
    if name not in _INSTANCES:
        raise ContractViolationError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    if instances < 1:
        raise ContractViolationError(f"instances must be positive, got {instances}")
    make = _INSTANCES[name]
    result = SuiteResult(name=name, seed=seed, instances=instances)

    def _one(index: int):
        return make(index, seed, bound_shift)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = tqdm(pool.map(_one, range(instances)), total=instances,
                        desc=name, disable=not progress, leave=False)
        for report, detail in outcomes:
            if _is_applicable(report):
                result.applicable += 1
            if getattr(report, 'boundary', False):
                result.boundary += 1
            if not report.passed:
                detail = dict(detail, report=report.to_dict())
                result.counterexamples.append(detail)
                logger.warning(f"{name}: counterexample at seed {detail['seed']}")

    logger.info(result.summary())
    return result


def scaling_ratio(variant: NormVariant, n_small: int, n_large: int, d: int,
                  seed: int = 0, repeats: int = 3, scale: float = 1.0, tau: float = 1.0) -> Dict[str, float]:
    """Best-of-``repeats`` wall-clock of one norm layer at two sizes, and their ratio"""
    cfg = NormalizerConfig(variant, scale=scale, tau=tau)
    rng = np.random.default_rng(seed)
    timings = {}
    for label, n in (('small', n_small), ('large', n_large)):
        h = rng.standard_normal((n, d)) / np.sqrt(d)
        best = float('inf')
        for _ in range(max(1, repeats)):
            started = time.perf_counter()
            norms.apply(h, cfg)
            best = min(best, time.perf_counter() - started)
        timings[label] = best
    return {
        'variant': NormVariant(variant).value,
        'n_small': n_small,
        'n_large': n_large,
        'd': d,
        'seconds_small': timings['small'],
        'seconds_large': timings['large'],
        'ratio': timings['large'] / max(timings['small'], 1e-12),
    }
