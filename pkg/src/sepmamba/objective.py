"""Separation metrics and the utterance-level permutation-invariant loss.

All ratios carry ``eps = 1e-8`` in numerator and denominator, so perfect
reconstruction and orthogonal estimates give large finite values instead of
infinities.  The absolute eps costs exact gain invariance only for
estimates whose projected or residual energy is within a few decades of
eps, far below audio scale.  SI-SNR is the same quantity as SI-SDR here; one implementation
backs both names.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DomainError, ShapeError
from .numerics import Tensor

EPS = 1e-8
DEFAULT_CLAMP_DB = 30.0
_DB = 10.0 / math.log(10.0)


@dataclass(frozen=True)
class MetricValue:
    value: float
    clamped: bool = False

    @classmethod
    def clamp(cls, value: float, threshold: float = DEFAULT_CLAMP_DB) -> "MetricValue":
        if value >= threshold:
            return cls(float(threshold), True)
        return cls(float(value), False)


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est.data if isinstance(est, Tensor) else est, dtype=np.float64)
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"estimate {est.shape} and reference {ref.shape} differ in shape")
    if not np.any(ref):
        raise DomainError("reference is identically zero; SI-SDR is undefined")
    return est, ref


def _si_sdr_parts(est: np.ndarray, ref: np.ndarray, eps: float):
    rr = float(ref @ ref)
    alpha = float(est @ ref) / (rr + eps)
    noise = alpha * ref - est
    return rr, alpha, noise, alpha * alpha * rr, float(noise @ noise)


def si_sdr(estimate, reference, eps: float = EPS) -> float:
    """Scale-invariant SDR in dB between two 1-D signals."""
    est, ref = _pair(estimate, reference)
    _, _, _, ps, pn = _si_sdr_parts(est, ref, eps)
    return 10.0 * math.log10((ps + eps) / (pn + eps))


si_snr = si_sdr


def sdr(estimate, reference, eps: float = EPS) -> float:
    """Plain (non scale-invariant) signal-to-distortion ratio in dB."""
    est, ref = _pair(estimate, reference)
    err = ref - est
    return 10.0 * math.log10((float(ref @ ref) + eps) / (float(err @ err) + eps))


def _si_sdr_grad(est: np.ndarray, ref: np.ndarray, eps: float) -> np.ndarray:
    rr, alpha, noise, ps, pn = _si_sdr_parts(est, ref, eps)
    dalpha = ref / (rr + eps)
    dps = (2.0 * alpha * rr) * dalpha
    dpn = (2.0 * float(noise @ ref)) * dalpha - 2.0 * noise
    return _DB * (dps / (ps + eps) - dpn / (pn + eps))


def pairwise_si_sdr(estimates, references, eps: float = EPS) -> Tensor:
    """Differentiable matrix ``S[i, j] = si_sdr(estimates[i], references[j])``."""
    est_t = nx.as_tensor(estimates)
    ref = np.asarray(references.data if isinstance(references, Tensor) else references)
    if est_t.ndim != 2 or ref.ndim != 2:
        raise ShapeError(f"expected [n_src, L] arrays, got {est_t.shape} and {ref.shape}")
    if est_t.shape[0] != ref.shape[0]:
        raise ShapeError(f"{est_t.shape[0]} estimates for {ref.shape[0]} references")
    if est_t.shape[1] != ref.shape[1]:
        raise ShapeError(f"estimate length {est_t.shape[1]} != reference length {ref.shape[1]}")
    n = ref.shape[0]
    est = est_t.data.astype(np.float64)
    refs = ref.astype(np.float64)
    S = np.array([[si_sdr(est[i], refs[j], eps) for j in range(n)] for i in range(n)])

    def bw(g):
        d = np.zeros_like(est)
        for i in range(n):
            for j in range(n):
                if g[i, j] != 0.0:
                    d[i] += g[i, j] * _si_sdr_grad(est[i], refs[j], eps)
        return [d.astype(est_t.dtype, copy=False)]

    return nx.custom_op(S.astype(est_t.dtype), [est_t], bw)


def permutations(n: int) -> list[tuple[int, ...]]:
    """All assignments in lexicographic order; ``n!`` of them."""
    return list(itertools.permutations(range(n)))


def best_permutation(scores: np.ndarray, maximize: bool = True) -> tuple[int, ...]:
    """Exhaustive search over ``scores[i, j]`` (estimate i for reference j).

    Returns ``perm`` with ``perm[j]`` the estimate assigned to reference ``j``.
    Ties go to the lowest-index permutation.
    """
    n = scores.shape[0]
    best, best_val = None, None
    for p in permutations(n):
        v = sum(scores[p[j], j] for j in range(n)) / n
        if best is None or (v > best_val if maximize else v < best_val):
            best, best_val = p, v
    return best


def upit_loss(estimates, references, clamp_db: float = DEFAULT_CLAMP_DB, eps: float = EPS) -> tuple[Tensor, tuple[int, ...]]:
    """Utterance-level PIT loss on negative SI-SDR, floored at ``-clamp_db``.

    Returns the scalar loss and the selected permutation.  The search is
    exhaustive, so cost grows as ``n_src!``; two sources is the design point.
    """
    S = pairwise_si_sdr(estimates, references, eps)
    n = S.shape[0]
    neg = nx.maximum(nx.neg(S), -clamp_db)
    per = neg.data.astype(np.float64)
    perm = best_permutation(-per, maximize=True)
    idx = (np.array(perm), np.arange(n))
    return nx.mean(nx.getitem(neg, idx)), perm


def _mean_best(scores: np.ndarray, clamp_db: float | None) -> float:
    if clamp_db is not None:
        scores = np.minimum(scores, clamp_db)
    perm = best_permutation(scores)
    return float(np.mean([scores[perm[j], j] for j in range(scores.shape[0])]))


def _improvement(metric, estimates, references, mixture, clamp_db):
    est = np.asarray(estimates.data if isinstance(estimates, Tensor) else estimates, dtype=np.float64)
    ref = np.asarray(references.data if isinstance(references, Tensor) else references, dtype=np.float64)
    mix = np.asarray(mixture.data if isinstance(mixture, Tensor) else mixture, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape or est.ndim != 2:
        raise ShapeError(f"estimates {est.shape} and references {ref.shape} must both be [n_src, L]")
    if mix.shape[0] != ref.shape[1]:
        raise ShapeError(f"mixture length {mix.shape[0]} != reference length {ref.shape[1]}")
    n = ref.shape[0]
    scores = np.array([[metric(est[i], ref[j]) for j in range(n)] for i in range(n)])
    base = np.array([metric(mix, ref[j]) for j in range(n)])
    if clamp_db is not None:
        base = np.minimum(base, clamp_db)
    return _mean_best(scores, clamp_db) - float(base.mean())


def si_sdr_improvement(estimates, references, mixture, clamp_db: float | None = None) -> float:
    """Best-permutation mean SI-SDR of the estimates minus that of the mixture."""
    return _improvement(si_sdr, estimates, references, mixture, clamp_db)


si_snr_improvement = si_sdr_improvement


def sdr_improvement(estimates, references, mixture, clamp_db: float | None = None) -> float:
    """As :func:`si_sdr_improvement` with the projection scale fixed to one."""
    return _improvement(sdr, estimates, references, mixture, clamp_db)
