"""Server-side aggregation rules.

Every aggregator consumes the round's client updates (with no
visibility into which are malicious) and returns the aggregate plus a
per-client trace recording accept/clip/score decisions for the test
harness. State that persists across rounds (momenta, gradient history)
lives on the aggregator instance.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import params
from .clustering import gap_statistic, hdbscan, kmeans
from .rng import child_seed, stream

MDAM_EXACT_LIMIT = 200_000


class NoBenignClusterError(RuntimeError):
    """Density clustering produced no cluster of the required size."""


@dataclass
class ClientTrace:
    accepted: bool = True
    clipped_factor: float = 1.0
    suspicious_score: Optional[float] = None
    cluster_label: Optional[int] = None


@dataclass
class RoundInfo:
    """Per-round context handed to an aggregator."""

    round_index: int
    w_prev: np.ndarray
    seed: int = 0


def fedavg(updates) -> np.ndarray:
    """Dimension-wise mean."""
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    return np.mean(np.asarray(updates, dtype=np.float64), axis=0)


class FedAvg:
    name = "fedavg"

    def aggregate(self, updates, info: RoundInfo):
        return fedavg(updates), [ClientTrace() for _ in updates]


class Flame:
    """Density filtering plus median-referenced clipping plus noise.

    ``clip_reference`` picks what the per-client distance e_i measures:
    "global-distance" is the literal rule (Euclidean distance between
    the previous global parameters and the update), "update-norm" reads
    the clipping bound against the update's own norm.
    """

    name = "flame"

    def __init__(self, noise_sigma: float = 0.0, clip_reference: str = "global-distance",
                 min_samples: int = 1):
        if clip_reference not in ("global-distance", "update-norm"):
            raise ValueError(f"unknown clip_reference {clip_reference!r}")
        self.noise_sigma = noise_sigma
        self.clip_reference = clip_reference
        # density parameter for the clustering stage; the published
        # defense runs single-linkage densities (min_samples=1)
        self.min_samples = min_samples

    def distances(self, updates, w_prev):
        if self.clip_reference == "global-distance":
            return np.array([params.l2_norm(w_prev - g) for g in updates])
        return np.array([params.l2_norm(g) for g in updates])

    def aggregate(self, updates, info: RoundInfo):
        n = len(updates)
        if n < 3:
            raise ValueError(f"need at least 3 updates, got {n}")
        cosd = params.pairwise_cosine_distance_matrix(updates)
        labels = hdbscan(cosd, n // 2 + 1, min_samples=self.min_samples,
                         allow_single_cluster=True)

        kept_labels = labels[labels >= 0]
        if kept_labels.size == 0:
            raise NoBenignClusterError("no cluster of size > n/2")
        majority = np.bincount(kept_labels).argmax()
        admitted = np.where(labels == majority)[0]

        e = self.distances(updates, info.w_prev)
        q = float(np.median(e))
        factors = np.minimum(1.0, np.divide(q, e, out=np.ones_like(e), where=e > 0))

        agg = np.mean([updates[i] * factors[i] for i in admitted], axis=0)
        if self.noise_sigma > 0:
            rng = stream(info.seed, f"round{info.round_index}/flame-noise")
            agg = agg + rng.normal(0.0, self.noise_sigma, size=agg.shape)

        admitted_set = set(admitted.tolist())
        trace = [
            ClientTrace(accepted=i in admitted_set, clipped_factor=float(factors[i]),
                        cluster_label=int(labels[i]))
            for i in range(n)
        ]
        return agg, trace


class Mdam:
    """Momentum folding plus minimum-diameter subset averaging."""

    name = "mdam"

    def __init__(self, beta: float = 0.9, f_assumed: int = 1):
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {beta}")
        if f_assumed < 0:
            raise ValueError("f_assumed must be nonnegative")
        self.beta = beta
        self.f_assumed = f_assumed
        self.momenta = None

    def aggregate(self, updates, info: RoundInfo):
        n = len(updates)
        if n <= 2 * self.f_assumed:
            raise ValueError(f"need n > 2*f, got n={n}, f={self.f_assumed}")
        if self.momenta is None:
            self.momenta = [np.zeros_like(u) for u in updates]
        self.momenta = [self.beta * m + (1.0 - self.beta) * g
                        for m, g in zip(self.momenta, updates)]

        selected = min_diameter_subset(self.momenta, self.f_assumed)
        agg = np.mean([self.momenta[i] for i in selected], axis=0)
        chosen = set(selected)
        return agg, [ClientTrace(accepted=i in chosen) for i in range(n)]


def min_diameter_subset(vectors, f: int):
    """Indices of the (n - f)-subset with the smallest max pairwise
    Euclidean distance.

    Exhaustive over all C(n, f) exclusions while that count stays below
    MDAM_EXACT_LIMIT; beyond it, greedily drops the point with the
    largest distance to any survivor, f times. Ties resolve to the
    lexicographically first subset (exact) or lowest index (greedy).
    """
    n = len(vectors)
    if f == 0:
        return tuple(range(n))
    dist = params.pairwise_distance_matrix(vectors)

    if math.comb(n, f) <= MDAM_EXACT_LIMIT:
        best, best_diam = None, np.inf
        for excluded in itertools.combinations(range(n), f):
            kept = np.array([i for i in range(n) if i not in excluded])
            diam = dist[np.ix_(kept, kept)].max()
            if diam < best_diam:
                best_diam, best = diam, tuple(kept)
        return best

    kept = list(range(n))
    for _ in range(f):
        sub = dist[np.ix_(kept, kept)]
        worst = kept[int(np.argmax(sub.max(axis=1)))]
        kept.remove(worst)
    return tuple(kept)


class FLDetector:
    """Consistency scoring of client updates against a quasi-Newton
    prediction, with gap-statistic gated k-means filtering.

    For the first ``window`` rounds the rule averages everything while
    it accumulates (parameter delta, aggregate delta) pairs and
    per-round normalized prediction errors.
    """

    name = "fldetector"

    def __init__(self, window: int = 10, k_max: int = 5):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.k_max = k_max
        self.prev_w = None
        self.prev_updates = None
        self.prev_agg = None
        self.deltas_w = []
        self.deltas_agg = []
        self.error_history = []
        self.rounds_seen = 0

    def aggregate(self, updates, info: RoundInfo):
        n = len(updates)
        updates = [np.asarray(u, dtype=np.float64) for u in updates]
        scores = None

        if self.prev_w is not None and self.deltas_w:
            delta_w = info.w_prev - self.prev_w
            hv = lbfgs_hessian_vector(self.deltas_w, self.deltas_agg, delta_w)
            predicted = [g_prev + hv for g_prev in self.prev_updates]
            d = np.array([params.l2_norm(p - g) for p, g in zip(predicted, updates)])
            total = d.sum()
            if total > 0:
                self.error_history.append(d / total)
                self.error_history = self.error_history[-self.window:]
        if self.error_history:
            scores = np.mean(self.error_history, axis=0)

        benign = list(range(n))
        filtering = self.rounds_seen >= self.window and scores is not None
        if filtering:
            k = gap_statistic(scores, k_max=min(self.k_max, n),
                              seed=child_seed(info.seed, f"round{info.round_index}/gap"))
            if k > 1:
                labels = kmeans(scores, 2,
                                seed=child_seed(info.seed, f"round{info.round_index}/kmeans"))
                means = [scores[labels == c].mean() for c in (0, 1)]
                benign_cluster = int(np.argmin(means))
                benign = [i for i in range(n) if labels[i] == benign_cluster]

        agg = fedavg([updates[i] for i in benign])

        if self.prev_w is not None:
            delta_w = info.w_prev - self.prev_w
            if self.prev_agg is not None:
                self.deltas_w.append(delta_w)
                self.deltas_agg.append(agg - self.prev_agg)
                self.deltas_w = self.deltas_w[-self.window:]
                self.deltas_agg = self.deltas_agg[-self.window:]
        self.prev_w = info.w_prev.copy()
        self.prev_updates = updates
        self.prev_agg = agg
        self.rounds_seen += 1

        chosen = set(benign)
        return agg, [
            ClientTrace(accepted=i in chosen,
                        suspicious_score=None if scores is None else float(scores[i]))
            for i in range(n)
        ]


def lbfgs_hessian_vector(deltas_w, deltas_grad, v: np.ndarray) -> np.ndarray:
    """Quasi-Newton Hessian-vector product from (dw, dg) pairs.

    Compact limited-memory form: B = sigma*I - [sigma*S, Y] M^-1
    [sigma*S, Y]^T with M built from S^T S and the triangular parts of
    S^T Y. Degenerate curvature falls back to least squares.
    """
    S = np.column_stack(deltas_w)
    Y = np.column_stack(deltas_grad)
    sts = S.T @ S
    sty = S.T @ Y
    upper = np.triu(sty)
    lower = sty - upper

    denom = float(S[:, -1] @ S[:, -1])
    sigma = float(Y[:, -1] @ S[:, -1]) / denom if denom > 0 else 1.0

    m = S.shape[1]
    M = np.empty((2 * m, 2 * m))
    M[:m, :m] = sigma * sts
    M[:m, m:] = lower
    M[m:, :m] = lower.T
    M[m:, m:] = -np.diag(np.diag(sty))

    p = np.concatenate([sigma * (S.T @ v), Y.T @ v])
    try:
        coeff = np.linalg.solve(M, p)
    except np.linalg.LinAlgError:
        coeff = np.linalg.lstsq(M, p, rcond=None)[0]
    hv = sigma * v - np.column_stack([sigma * S, Y]) @ coeff
    if not np.all(np.isfinite(hv)):
        return np.zeros_like(v)
    return hv


class CenteredClipping:
    """Norm clipping at a fixed threshold, then averaging."""

    name = "cc"

    def __init__(self, tau: float = 10.0):
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.tau = tau

    def aggregate(self, updates, info: RoundInfo):
        clipped, trace = [], []
        for g in updates:
            norm = params.l2_norm(g)
            factor = min(1.0, self.tau / norm) if norm > 0 else 1.0
            clipped.append(g * factor)
            trace.append(ClientTrace(clipped_factor=float(factor)))
        return fedavg(clipped), trace


class BucketedClipping:
    """Random bucketing to homogenize contributions, then clipping.

    A seeded permutation groups the n updates into ceil(n/s) buckets of
    up to s consecutive entries; bucket means feed the clipping rule.
    Each client's trace reports its bucket's clip factor. s=1 delegates
    to plain clipping so the two rules agree bitwise.
    """

    name = "ccb"

    def __init__(self, tau: float = 10.0, s: int = 2):
        if s < 1:
            raise ValueError(f"bucket size must be >= 1, got {s}")
        self.tau = tau
        self.s = s
        self._cc = CenteredClipping(tau)

    def aggregate(self, updates, info: RoundInfo):
        n = len(updates)
        if self.s == 1:
            return self._cc.aggregate(updates, info)
        perm = stream(info.seed, f"round{info.round_index}/ccb-permutation").permutation(n)
        bucket_of = np.empty(n, dtype=np.int64)
        means = []
        for b, start in enumerate(range(0, n, self.s)):
            members = perm[start:start + self.s]
            bucket_of[members] = b
            means.append(np.mean([updates[i] for i in members], axis=0))
        agg, bucket_trace = self._cc.aggregate(means, info)
        trace = [ClientTrace(clipped_factor=bucket_trace[bucket_of[i]].clipped_factor)
                 for i in range(n)]
        return agg, trace


def make_aggregator(kind: str, **kwargs):
    """Aggregator factory used by the config layer."""
    table = {
        "fedavg": FedAvg,
        "flame": Flame,
        "mdam": Mdam,
        "fldetector": FLDetector,
        "cc": CenteredClipping,
        "ccb": BucketedClipping,
    }
    if kind not in table:
        raise ValueError(f"unknown aggregator {kind!r}; expected one of {sorted(table)}")
    return table[kind](**kwargs)
