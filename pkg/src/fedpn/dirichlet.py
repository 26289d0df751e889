"""Dirichlet posteriors, uncertainty measures and training losses.

The numpy functions operate on concentration arrays of shape ``(..., K)``
and reduce over the last axis.  The ``*_graph`` variants build the same
quantities on an autodiff :class:`~fedpn.numerics.Graph` for training.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .numerics import autodiff as ad
from .numerics.special import digamma, lgamma

__all__ = [
    "DirichletParams",
    "EvidenceTerm",
    "LossWeights",
    "PosteriorNode",
    "posterior_update",
    "epistemic_entropy",
    "aleatoric_expected_entropy",
    "uce_loss",
    "bayesian_loss",
    "loss_decomposition_check",
    "posterior_graph",
    "uce_graph",
    "entropy_graph",
    "fedpn_loss",
    "bayesian_loss_graph",
]


@dataclass(frozen=True)
class DirichletParams:
    alpha_prior: np.ndarray
    alpha_post: np.ndarray

    @property
    def alpha0(self):
        return np.sum(self.alpha_post, axis=-1)

    @property
    def num_classes(self):
        return self.alpha_post.shape[-1]


@dataclass(frozen=True)
class EvidenceTerm:
    """Evidence ``density * class_probs`` added to the prior pseudo-counts."""

    density: float
    class_probs: np.ndarray
    stopgrad_density: bool = True


@dataclass(frozen=True)
class LossWeights:
    entropy: float = 0.0
    log_prob: float = 0.001

    def __post_init__(self):
        if self.entropy < 0 or self.log_prob < 0:
            raise ContractError("loss weights must be non-negative")


def _alpha(d):
    a = np.asarray(d.alpha_post if isinstance(d, DirichletParams) else d, dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise DomainError("Dirichlet concentrations must be finite and positive")
    return a


def posterior_update(prior, evidence):
    """Pseudo-count update ``alpha_post = alpha_prior + density * probs``."""
    prior = np.asarray(prior, dtype=np.float64)
    if np.any(prior <= 0):
        raise ContractError("prior concentrations must be positive")
    density = np.asarray(evidence.density, dtype=np.float64)
    if np.any(density < 0):
        raise ContractError("density must be non-negative")
    probs = np.asarray(evidence.class_probs, dtype=np.float64)
    post = prior + density[..., None] * probs
    return DirichletParams(prior, post)


def epistemic_entropy(d):
    """Differential entropy of Dir(alpha); higher means less knowledge."""
    a = _alpha(d)
    a0 = np.sum(a, axis=-1)
    log_norm = np.sum(lgamma(a), axis=-1) - lgamma(a0)
    return log_norm - np.sum((a - 1.0) * (digamma(a) - np.expand_dims(digamma(a0), -1)), axis=-1)


def aleatoric_expected_entropy(d):
    """Expected entropy of Cat(mu) for mu ~ Dir(alpha), in [0, ln K]."""
    a = _alpha(d)
    a0 = np.sum(a, axis=-1)
    inner = digamma(a + 1.0) - np.expand_dims(digamma(a0 + 1.0), -1)
    return -np.sum(a / np.expand_dims(a0, -1) * inner, axis=-1)


def uce_loss(d, y):
    """Expected cross-entropy ``digamma(alpha0) - digamma(alpha_y)``."""
    a = _alpha(d)
    k = a.shape[-1]
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= k):
        raise ContractError(f"class index out of range for K={k}")
    a_y = np.take_along_axis(a, np.expand_dims(y, -1).astype(np.intp), axis=-1)[..., 0]
    return digamma(np.sum(a, axis=-1)) - digamma(a_y)


def bayesian_loss(d, y, lam):
    if lam < 0:
        raise ContractError("entropy weight must be non-negative")
    return uce_loss(d, y) - lam * epistemic_entropy(d)


def loss_decomposition_check(density, correct_prob, num_classes):
    """Exact UCE against its log-space approximation under an all-ones prior.

    Returns ``(exact, approx, gap, slack)`` where ``approx`` is
    ``ln K + ln(1 + p (1/K - f_y) / (1 + p f_y))`` and ``slack`` is the
    largest ``|gap|`` allowed by ``ln x - 1/x <= digamma(x) <= ln x - 1/(2x)``.
    """
    p = np.asarray(density, dtype=np.float64)
    f = np.asarray(correct_prob, dtype=np.float64)
    k = float(num_classes)
    a0 = k + p
    a_y = 1.0 + p * f
    exact = digamma(a0) - digamma(a_y)
    approx = np.log(k) + np.log1p(p * (1.0 / k - f) / (1.0 + p * f))
    gap = exact - approx
    slack = 1.0 / a_y - 0.5 / a0
    return exact, approx, gap, slack


# -- graph versions ---------------------------------------------------------


@dataclass(frozen=True)
class PosteriorNode:
    """Graph-side Dirichlet posterior for a batch."""

    alpha_post: ad.Var
    log_density: ad.Var
    density_stopped: bool


def posterior_graph(log_density, probs, alpha_prior=1.0, stop_density=True, log_budget=0.0):
    """Build ``alpha_post = alpha_prior + N p(z) f(z)`` on the graph.

    ``log_density`` has shape ``(N,)`` and ``probs`` shape ``(N, K)``.  With
    ``stop_density`` the density factor is cut from the backward pass while
    the returned ``log_density`` keeps its gradient path.  ``log_budget`` is
    ``ln N``, a constant evidence scale (0 gives the plain ``p(z) f(z)``).
    """
    ld = ad.stop_gradient(log_density) if stop_density else log_density
    if log_budget:
        ld = ld + log_budget
    density = ad.reshape(ad.exp(ld), (-1, 1))
    alpha = density * probs + np.asarray(alpha_prior, dtype=np.float64)
    return PosteriorNode(alpha, log_density, stop_density)


def uce_graph(alpha, y):
    k = alpha.shape[-1]
    onehot = np.eye(k)[np.asarray(y, dtype=np.intp)]
    a0 = ad.sum(alpha, axis=1)
    a_y = ad.sum(alpha * onehot, axis=1)
    return ad.digamma(a0) - ad.digamma(a_y)


def entropy_graph(alpha):
    a0 = ad.sum(alpha, axis=1)
    log_norm = ad.sum(ad.lgamma(alpha), axis=1) - ad.lgamma(a0)
    spread = ad.digamma(alpha) - ad.reshape(ad.digamma(a0), (-1, 1))
    return log_norm - ad.sum((alpha - 1.0) * spread, axis=1)


def fedpn_loss(post, y, weights):
    """Batch-mean of UCE(stop-grad density) - gamma log p - lambda H[Dir]."""
    if not post.density_stopped:
        raise ContractError("fedpn_loss requires the density factor to be stop-gradded")
    total = ad.mean(uce_graph(post.alpha_post, y))
    if weights.log_prob:
        total = total - weights.log_prob * ad.mean(post.log_density)
    if weights.entropy:
        total = total - weights.entropy * ad.mean(entropy_graph(post.alpha_post))
    return total


def bayesian_loss_graph(post, y, lam=0.0):
    """Batch-mean of UCE - lambda H[Dir] with the density left differentiable."""
    total = ad.mean(uce_graph(post.alpha_post, y))
    if lam:
        total = total - lam * ad.mean(entropy_graph(post.alpha_post))
    return total
