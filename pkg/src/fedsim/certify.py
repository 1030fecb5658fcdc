"""Randomized parameter smoothing certificates for the final model.

The global parameter vector is norm-clipped, perturbed M times with
Gaussian noise, and the vote histogram over classes yields an exact
binomial lower bound on the top-class probability and upper bound on
the runner-up. When the bounds separate, a radius follows from a
pluggable rule (the default is the Gaussian-smoothing expression); ties
abstain with radius zero.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import norm

from . import learner, params
from .rng import stream

ABSTAIN = -1


@dataclass
class SmoothingConfig:
    rho: float = 20.0  # parameter-norm clip bound
    sigma: float = 0.02  # noise scale per coordinate
    samples: int = 200  # M
    alpha: float = 0.05  # one-sided confidence level

    def __post_init__(self):
        if self.rho <= 0 or self.sigma < 0:
            raise ValueError("rho must be positive and sigma nonnegative")
        if self.samples < 2:
            raise ValueError("need at least two noise samples")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class Certificate:
    prediction: int  # class index or ABSTAIN
    radius: float
    p_a_lower: float
    p_b_upper: float


def smooth_predict(w: np.ndarray, spec: learner.ModelSpec, X: np.ndarray,
                   cfg: SmoothingConfig, seed: int) -> np.ndarray:
    """Class-vote counts for each example under M noisy copies of the
    clipped parameter vector. Returns an (n_examples, n_classes) array
    whose rows sum to M."""
    w_clipped = params.clip_by_norm(w, cfg.rho)
    counts = np.zeros((X.shape[0], spec.num_classes), dtype=np.int64)
    for k in range(cfg.samples):
        rng = stream(seed, f"certify/sample{k}")
        noisy = w_clipped + rng.normal(0.0, cfg.sigma, size=w_clipped.shape)
        preds = learner.predict(noisy, spec, X)
        counts[np.arange(X.shape[0]), preds] += 1
    return counts


def clopper_pearson(count: int, total: int, alpha: float, side: str) -> float:
    """Exact binomial confidence bound at level alpha.

    side="lower": largest p with P(X >= count | p) <= alpha is bounded
    below by the Beta(alpha; count, total-count+1) quantile.
    side="upper": mirrored.
    """
    if not 0 <= count <= total:
        raise ValueError(f"count {count} outside [0, {total}]")
    if side == "lower":
        if count == 0:
            return 0.0
        return float(beta_dist.ppf(alpha, count, total - count + 1))
    if side == "upper":
        if count == total:
            return 1.0
        return float(beta_dist.ppf(1.0 - alpha, count + 1, total - count))
    raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")


def gaussian_radius(p_a_lower: float, p_b_upper: float, sigma: float) -> float:
    """Default radius rule: (sigma/2) * (Phi^-1(pA) - Phi^-1(pB))."""
    return float(0.5 * sigma * (norm.ppf(p_a_lower) - norm.ppf(p_b_upper)))


def certify_example(counts: np.ndarray, cfg: SmoothingConfig,
                    radius_rule: Optional[Callable[[float, float, float], float]] = None
                    ) -> Certificate:
    """Certificate from one example's vote histogram.

    Abstains (radius 0) unless the lower bound on the top class
    strictly exceeds the upper bound on the runner-up.
    """
    rule = radius_rule or gaussian_radius
    order = np.argsort(counts, kind="stable")[::-1]
    top, runner = int(order[0]), int(order[1])
    m = int(counts.sum())
    p_a = clopper_pearson(int(counts[top]), m, cfg.alpha, "lower")
    p_b = clopper_pearson(int(counts[runner]), m, cfg.alpha, "upper")
    if p_a > p_b:
        return Certificate(top, max(rule(p_a, p_b, cfg.sigma), 0.0), p_a, p_b)
    return Certificate(ABSTAIN, 0.0, p_a, p_b)


def certify_dataset(w: np.ndarray, spec: learner.ModelSpec, X: np.ndarray,
                    cfg: SmoothingConfig, seed: int):
    """Certificates for every example; deterministic given the seed."""
    counts = smooth_predict(w, spec, X, cfg, seed)
    return [certify_example(c, cfg) for c in counts]


def certified_accuracy_curve(certs, y: np.ndarray, radii) -> np.ndarray:
    """Fraction of examples certified correct at each radius threshold:
    prediction matches the label and the certified radius covers r."""
    preds = np.array([c.prediction for c in certs])
    rads = np.array([c.radius for c in certs])
    good = preds == y
    return np.array([float(np.mean(good & (rads >= r))) for r in radii])
