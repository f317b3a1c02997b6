"""Shared numerical primitives.

Jittered Cholesky with an escalation schedule, physicists' Gauss-Hermite
quadrature, Gaussian expectations, the closed-form Gaussian KL, and a
shift-stable logsumexp.  Everything here is pure and reentrant.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .errors import NotPositiveDefinite, UsageError

SQRT_PI = math.sqrt(math.pi)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for the weight function exp(-x^2)."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class JitterSchedule:
    """Diagonal jitter levels tried in order until Cholesky succeeds."""

    initial: float = 1e-8
    escalated: float = 1e-6
    max_attempts: int = 2

    def __post_init__(self):
        if not (0.0 < self.initial <= self.escalated):
            raise UsageError("jitter schedule requires 0 < initial <= escalated")
        if self.max_attempts < 1:
            raise UsageError("jitter schedule needs at least one attempt")

    def levels(self):
        if self.max_attempts == 1 or self.initial == self.escalated:
            return [self.initial]
        return list(np.geomspace(self.initial, self.escalated, self.max_attempts))


DEFAULT_JITTER = JitterSchedule()


def cholesky_jittered(a, schedule=DEFAULT_JITTER):
    """Lower Cholesky factor of ``a + jitter*I`` at the smallest workable jitter.

    Returns ``(L, jitter_used)``.  Raises :class:`NotPositiveDefinite` when
    every level in the schedule fails.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError("cholesky_jittered expects a square matrix")
    eye = np.eye(a.shape[0])
    for jitter in schedule.levels():
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"matrix not positive definite at any jitter level {schedule.levels()}"
    )


@functools.lru_cache(maxsize=None)
def _gh_cached(order):
    # Golub-Welsch: eigen-decomposition of the symmetric Jacobi matrix for
    # the Hermite recurrence; weights from the first eigenvector components.
    k = np.arange(1, order)
    off = np.sqrt(k / 2.0)
    nodes, vecs = scipy.linalg.eigh_tridiagonal(np.zeros(order), off)
    weights = SQRT_PI * vecs[0, :] ** 2
    # enforce exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


def gh_nodes(order):
    """Physicists' Gauss-Hermite rule, exact for polynomials up to 2Q-1."""
    if order < 2:
        raise UsageError("quadrature order must be at least 2")
    nodes, weights = _gh_cached(int(order))
    return QuadratureRule(order=int(order), nodes=nodes, weights=weights)


def expect_gh(fn, mean, variance, rule):
    """Approximate E[fn(z)] for z ~ N(mean, variance) with a GH rule.

    ``fn`` is applied to the whole node vector at once when it vectorizes,
    falling back to a scalar loop otherwise.
    """
    if variance < 0:
        raise UsageError("variance must be nonnegative")
    z = mean + math.sqrt(2.0 * variance) * rule.nodes
    try:
        vals = np.asarray(fn(z), dtype=np.float64)
        if vals.shape != z.shape:
            raise TypeError
    except (TypeError, ValueError):
        vals = np.array([fn(v) for v in z], dtype=np.float64)
    return float(np.sum(rule.weights * vals) / SQRT_PI)


def _chol_exact_or_jittered(a, schedule):
    # exact factorization when the matrix allows it, jitter only as rescue
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return cholesky_jittered(a, schedule)[0]


def kl_gaussians(m1, s1, m2, s2, schedule=DEFAULT_JITTER):
    """KL[N(m1, S1) || N(m2, S2)] via Cholesky factors, never inverses."""
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    m2 = np.atleast_1d(np.asarray(m2, dtype=np.float64))
    s1 = np.atleast_2d(np.asarray(s1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
    k = m1.shape[0]
    if m2.shape[0] != k or s1.shape != (k, k) or s2.shape != (k, k):
        raise UsageError("dimension mismatch in kl_gaussians")
    l1 = _chol_exact_or_jittered(s1, schedule)
    l2 = _chol_exact_or_jittered(s2, schedule)
    # trace(S2^{-1} S1) = ||L2^{-1} L1||_F^2
    a = scipy.linalg.solve_triangular(l2, l1, lower=True, check_finite=False)
    trace = np.sum(a * a)
    d = scipy.linalg.solve_triangular(l2, m2 - m1, lower=True, check_finite=False)
    maha = float(d @ d)
    logdet = 2.0 * (np.sum(np.log(np.diag(l2))) - np.sum(np.log(np.diag(l1))))
    return 0.5 * (trace + maha - k + logdet)


def logsumexp(values):
    """log(sum(exp(values))) computed shift-stably."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise UsageError("logsumexp of an empty collection")
    return float(scipy.special.logsumexp(values))


def mvn_logpdf(x, mean, chol_lower):
    """Log-density of N(mean, L L^T) at x, given the lower factor L."""
    x = np.asarray(x, dtype=np.float64)
    d = scipy.linalg.solve_triangular(chol_lower, x - mean, lower=True, check_finite=False)
    k = x.shape[-1] if x.ndim else 1
    return float(-0.5 * (d @ d) - np.sum(np.log(np.diag(chol_lower))) - 0.5 * k * LOG_2PI)
