"""Solvers for the attack scaling factor gamma.

Two interchangeable routes:

* an iterative halving search driven by a feasibility oracle
  (targeted attacks shrink gamma toward the smallest feasible value,
  untargeted attacks grow it toward the largest), and
* a direct solution of the per-constraint quadratics for attacks whose
  feasibility condition is a Euclidean-distance bound on an
  interpolated gradient.

The oracle passed to the iterative solver must be monotone: its True
region is an interval touching gamma=0 from above (maximize) or
extending upward (minimize).
"""

import math
from typing import Callable, Optional, Sequence

import numpy as np


def solve_gamma_iterative(
    oracle: Callable[[float], bool],
    gamma_init: float,
    epsilon: float,
    direction: str = "minimize",
) -> Optional[float]:
    """Halving search for the best feasible gamma.

    Starts at ``gamma_init``; each probe moves by the current step
    toward feasibility ("minimize": down when feasible, up when not;
    "maximize": mirrored), and the step halves from ``gamma_init / 2``
    after every probe. The search keeps the best feasible gamma seen,
    stops once the running optimum and the probe point are within
    ``epsilon``, and never issues more than ceil(log2(gamma_init /
    epsilon)) oracle calls. Returns None when no probe was feasible.

    On a monotone threshold oracle the result is within 2 * epsilon of
    the true optimum and is itself feasible.
    """
    if not gamma_init > epsilon > 0:
        raise ValueError(f"need gamma_init > epsilon > 0, got {gamma_init}, {epsilon}")
    if direction not in ("minimize", "maximize"):
        raise ValueError(f"unknown direction {direction!r}")
    minimize = direction == "minimize"

    max_calls = math.ceil(math.log2(gamma_init / epsilon))
    step = gamma_init / 2.0
    gamma = gamma_init
    gamma_succ = None

    for _ in range(max_calls):
        if oracle(gamma):
            if gamma_succ is None:
                gamma_succ = gamma
            else:
                gamma_succ = min(gamma_succ, gamma) if minimize else max(gamma_succ, gamma)
            gamma = gamma - step if minimize else gamma + step
        else:
            gamma = gamma + step if minimize else gamma - step
        if gamma_succ is not None and abs(gamma_succ - gamma) <= epsilon:
            break
        step /= 2.0

    return gamma_succ


def quadratic_feasible_interval(a: float, b: float, c: float):
    """Solution interval of a*x^2 + b*x + c <= 0, or None when empty.

    Returns (lo, hi) with infinities for unbounded sides. Roots are
    computed in the cancellation-safe form.
    """
    if a == 0.0:
        if b == 0.0:
            return (-math.inf, math.inf) if c <= 0.0 else None
        bound = -c / b
        return (bound, math.inf) if b < 0.0 else (-math.inf, bound)
    if a < 0.0:
        raise ValueError("expected a nonnegative quadratic coefficient")
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    sqrt_disc = math.sqrt(disc)
    if b >= 0.0:
        q = -0.5 * (b + sqrt_disc)
    else:
        q = -0.5 * (b - sqrt_disc)
    r1 = q / a
    r2 = c / q if q != 0.0 else 0.0
    return (min(r1, r2), max(r1, r2))


def constraint_intervals(
    g_p: np.ndarray,
    g_b: np.ndarray,
    benign: Sequence[np.ndarray],
    bound: float,
):
    """Per-benign-gradient feasible gamma intervals.

    Constraint j asks the interpolation g_p + gamma*(g_b - g_p) to sit
    within ``bound`` of g_j; squaring both sides turns each into a
    quadratic in gamma. An entry is None when the constraint has no
    real solution.
    """
    move = g_b - g_p
    a = float(move @ move)
    out = []
    for g_j in benign:
        offset = g_p - g_j
        b = 2.0 * float(offset @ move)
        c = float(offset @ offset) - bound * bound
        out.append(quadratic_feasible_interval(a, b, c))
    return out


def solve_gamma_analytic(
    g_p: np.ndarray,
    g_b: np.ndarray,
    benign: Sequence[np.ndarray],
    bound: float,
    required_count: Optional[int] = None,
    upper: Optional[float] = None,
) -> Optional[float]:
    """Smallest gamma >= 0 meeting the distance bound directly.

    With the default ``required_count`` every benign constraint must
    hold; passing a smaller count solves the relaxed form where only
    the nearest ``required_count`` constraints need to hold (the
    minimum-diameter filter only requires closeness to some benign
    subset). Returns None when no gamma in [0, upper] qualifies.
    """
    intervals = constraint_intervals(g_p, g_b, benign, bound)
    k = len(intervals) if required_count is None else required_count
    if k <= 0:
        return 0.0

    live = [iv for iv in intervals if iv is not None]
    if len(live) < k:
        return None

    # Coverage only increases at interval lower endpoints, so the
    # optimum is 0 or one of them.
    candidates = sorted({0.0, *(max(lo, 0.0) for lo, _ in live)})
    for gamma in candidates:
        if upper is not None and gamma > upper:
            return None
        covered = sum(1 for lo, hi in live if lo <= gamma <= hi)
        if covered >= k:
            return gamma
    return None


def max_norm_bounded_gamma(g_b: np.ndarray, atk_tau: float) -> Optional[float]:
    """Largest gamma >= 0 with ||g_b - gamma*sign(g_b)|| <= atk_tau.

    Closed form: the norm is a quadratic in gamma with leading
    coefficient the number of nonzero coordinates. Returns None when no
    nonnegative gamma satisfies the bound; returns 0.0 for an all-zero
    g_b (the perturbation direction vanishes).
    """
    if atk_tau <= 0:
        raise ValueError(f"atk_tau must be positive, got {atk_tau}")
    s = np.sign(g_b)
    nnz = float(s @ s)
    if nnz == 0.0:
        return 0.0
    b = -2.0 * float(np.abs(g_b).sum())
    c = float(g_b @ g_b) - atk_tau * atk_tau
    interval = quadratic_feasible_interval(nnz, b, c)
    if interval is None:
        return None
    _, hi = interval
    if hi < 0.0:
        return None
    return hi
