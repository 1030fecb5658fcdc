"""Clustering primitives: HDBSCAN over precomputed distances, seeded
1-D k-means, and the gap statistic for choosing k.

The HDBSCAN here is a self-contained numpy implementation of the
standard pipeline (core distances -> mutual reachability -> MST ->
single-linkage hierarchy -> condensed tree -> stability-based
excess-of-mass extraction). Ties on MST edge weights break toward the
lower (i, j) index pair, which pins the output for any input.
"""

from dataclasses import dataclass

import numpy as np

from .rng import child_seed, stream

NOISE = -1


class TooFewPointsError(ValueError):
    """Fewer points than the requested minimum cluster size."""


def _check_distance_matrix(dist: np.ndarray) -> np.ndarray:
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {d.shape}")
    if not np.allclose(d, d.T, atol=1e-12):
        raise ValueError("distance matrix must be symmetric")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    if np.any(np.diag(d) != 0):
        raise ValueError("distance matrix must have a zero diagonal")
    return d


def _mutual_reachability(dist: np.ndarray, min_samples: int) -> np.ndarray:
    # Core distance of a point is its min_samples-th smallest row entry,
    # counting the zero self-distance.
    core = np.partition(dist, min_samples - 1, axis=1)[:, min_samples - 1]
    return np.maximum(np.maximum.outer(core, core), dist)


def _mst_edges(graph: np.ndarray) -> np.ndarray:
    """Prim's algorithm on a dense graph; edges as (u, v, weight) rows.

    Records each new node against the most recently added one, with
    ties on the frontier going to the lowest remaining index. Combined
    with the weight sort in :func:`_single_linkage` this reproduces the
    merge order of the reference implementation, so tied reachability
    values (which core distances make common) resolve identically.
    """
    n = graph.shape[0]
    edges = np.empty((n - 1, 3))
    remaining = np.arange(n)
    min_reach = np.full(n, np.inf)
    current = 0
    for i in range(n - 1):
        keep = remaining != current
        remaining = remaining[keep]
        min_reach = np.minimum(min_reach[keep], graph[current][remaining])
        idx = int(np.argmin(min_reach))
        nxt = int(remaining[idx])
        edges[i] = (current, nxt, min_reach[idx])
        current = nxt
    return edges


def _single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Merge sorted MST edges into a scipy-style hierarchy.

    Row i holds (left, right, distance, size) where left/right are
    cluster ids (points are 0..n-1, merges create ids n, n+1, ...).
    """
    edges = edges[np.argsort(edges[:, 2])]

    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    size = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n - 1, dtype=np.int64)])
    hierarchy = np.zeros((n - 1, 4))

    def find(x: int) -> int:
        root = x
        while parent[root] != -1:
            root = parent[root]
        while parent[x] != -1:
            parent[x], x = root, parent[x]
        return root

    next_label = n
    for i in range(n - 1):
        ru = find(int(edges[i, 0]))
        rv = find(int(edges[i, 1]))
        merged = size[ru] + size[rv]
        hierarchy[i] = (ru, rv, edges[i, 2], merged)
        parent[ru] = parent[rv] = next_label
        size[next_label] = merged
        next_label += 1
    return hierarchy


def _bfs_from_hierarchy(hierarchy: np.ndarray, root: int, n: int):
    queue = [root]
    out = []
    while queue:
        out.extend(queue)
        internal = [x - n for x in queue if x >= n]
        queue = []
        for node in internal:
            queue.append(int(hierarchy[node, 0]))
            queue.append(int(hierarchy[node, 1]))
    return out


@dataclass
class _CondensedTree:
    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    size: np.ndarray


def _condense_tree(hierarchy: np.ndarray, min_cluster_size: int, n: int) -> _CondensedTree:
    """Prune sub-min_cluster_size splits, recording the density level
    (lambda = 1/distance) at which points and clusters leave a cluster."""
    root = 2 * (n - 1)
    relabel = np.empty(root + 1, dtype=np.int64)
    relabel[root] = n
    next_label = n + 1
    ignore = np.zeros(root + 1, dtype=bool)
    rows = []

    for node in _bfs_from_hierarchy(hierarchy, root, n):
        if ignore[node] or node < n:
            continue
        left, right, distance, _ = hierarchy[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / distance if distance > 0.0 else np.inf
        left_count = int(hierarchy[left - n, 3]) if left >= n else 1
        right_count = int(hierarchy[right - n, 3]) if right >= n else 1

        if left_count >= min_cluster_size and right_count >= min_cluster_size:
            relabel[left] = next_label
            next_label += 1
            rows.append((relabel[node], relabel[left], lam, left_count))
            relabel[right] = next_label
            next_label += 1
            rows.append((relabel[node], relabel[right], lam, right_count))
        elif left_count < min_cluster_size and right_count < min_cluster_size:
            for side in (left, right):
                for sub in _bfs_from_hierarchy(hierarchy, side, n):
                    if sub < n:
                        rows.append((relabel[node], sub, lam, 1))
                    ignore[sub] = True
        else:
            keep, drop = (right, left) if left_count < min_cluster_size else (left, right)
            relabel[keep] = relabel[node]
            for sub in _bfs_from_hierarchy(hierarchy, drop, n):
                if sub < n:
                    rows.append((relabel[node], sub, lam, 1))
                ignore[sub] = True

    arr = np.array(rows)
    return _CondensedTree(
        parent=arr[:, 0].astype(np.int64),
        child=arr[:, 1].astype(np.int64),
        lam=arr[:, 2],
        size=arr[:, 3].astype(np.int64),
    )


def _compute_stability(tree: _CondensedTree) -> dict:
    root = int(tree.parent.min())
    births = {}
    for child, lam in zip(tree.child, tree.lam):
        births[int(child)] = lam
    births[root] = 0.0
    stability = {int(c): 0.0 for c in range(root, int(tree.parent.max()) + 1)}
    for parent, lam, size in zip(tree.parent, tree.lam, tree.size):
        stability[int(parent)] += (lam - births[int(parent)]) * size
    return stability


def _bfs_from_cluster_tree(parent: np.ndarray, child: np.ndarray, start: int):
    out = []
    queue = [start]
    while queue:
        out.extend(queue)
        mask = np.isin(parent, queue)
        queue = child[mask].tolist()
    return out


def _select_clusters_eom(tree: _CondensedTree, stability: dict,
                         allow_single_cluster: bool) -> set:
    node_list = sorted(stability.keys(), reverse=True)
    if not allow_single_cluster:
        node_list = node_list[:-1]  # the root is never a cluster on its own

    cluster_mask = tree.size > 1
    ct_parent = tree.parent[cluster_mask]
    ct_child = tree.child[cluster_mask]

    stability = dict(stability)
    is_cluster = {node: True for node in node_list}
    for node in node_list:
        children = ct_child[ct_parent == node]
        subtree = float(sum(stability[int(c)] for c in children))
        if subtree > stability[node]:
            is_cluster[node] = False
            stability[node] = subtree
        else:
            for sub in _bfs_from_cluster_tree(ct_parent, ct_child, node):
                if sub != node:
                    is_cluster[sub] = False
    return {c for c, keep in is_cluster.items() if keep}


def _label_points(tree: _CondensedTree, clusters: set, n: int,
                  allow_single_cluster: bool) -> np.ndarray:
    root = int(tree.parent.min())
    label_map = {c: i for i, c in enumerate(sorted(clusters))}

    parent_of = np.arange(int(tree.parent.max()) + 1, dtype=np.int64)

    def find(x: int) -> int:
        root_ = x
        while parent_of[root_] != root_:
            root_ = parent_of[root_]
        while parent_of[x] != root_:
            parent_of[x], x = root_, parent_of[x]
        return root_

    for parent, child in zip(tree.parent, tree.child):
        if int(child) not in clusters:
            parent_of[find(int(child))] = find(int(parent))

    labels = np.full(n, NOISE, dtype=np.int64)
    if len(clusters) == 1 and allow_single_cluster:
        # Points attach to a lone root cluster only at or above the
        # densest level at which anything leaves the root directly.
        threshold = tree.lam[tree.parent == root].max()
    else:
        threshold = None

    point_lambda = np.zeros(n)
    point_lambda[tree.child[tree.size == 1]] = tree.lam[tree.size == 1]

    for point in range(n):
        cluster = find(point)
        if cluster != root:
            labels[point] = label_map[cluster]
        elif threshold is not None and point_lambda[point] >= threshold:
            labels[point] = label_map[cluster]
    return labels


def hdbscan(
    dist: np.ndarray,
    min_cluster_size: int,
    min_samples: int = None,
    allow_single_cluster: bool = True,
) -> np.ndarray:
    """Cluster points given a precomputed distance matrix.

    Returns one label per point; -1 marks noise. ``min_samples``
    defaults to ``min_cluster_size``. ``allow_single_cluster`` permits
    the hierarchy root itself as a cluster, which the majority-cluster
    filtering use case requires (with min_cluster_size > n/2 at most
    one cluster can exist at all).
    """
    d = _check_distance_matrix(dist)
    n = d.shape[0]
    if min_cluster_size < 2:
        raise ValueError(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    if n < min_cluster_size:
        raise TooFewPointsError(f"{n} points but min_cluster_size={min_cluster_size}")
    if min_samples is None:
        min_samples = min_cluster_size
    if not 1 <= min_samples <= n:
        raise ValueError(f"min_samples must be in [1, {n}], got {min_samples}")

    reach = _mutual_reachability(d, min_samples)
    hierarchy = _single_linkage(_mst_edges(reach), n)
    tree = _condense_tree(hierarchy, min_cluster_size, n)
    stability = _compute_stability(tree)
    clusters = _select_clusters_eom(tree, stability, allow_single_cluster)
    return _label_points(tree, clusters, n, allow_single_cluster)


def kmeans(scores, k: int, seed: int, restarts: int = 8):
    """Seeded 1-D k-means. Returns labels ordered by ascending center.

    Runs Lloyd's iteration from several k-means++ initializations drawn
    from the seed and keeps the lowest within-cluster sum of squares,
    which at these problem sizes reliably lands on the optimum.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    n = x.size
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if k == 1:
        return np.zeros(n, dtype=np.int64)

    best_labels, best_wcss = None, np.inf
    for r in range(restarts):
        rng = stream(seed, f"kmeans/restart{r}")
        centers = _kmeanspp_init(x, k, rng)
        labels, wcss = _lloyd(x, centers)
        if wcss < best_wcss - 1e-12:
            best_wcss, best_labels = wcss, labels
    return best_labels


def _kmeanspp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [x[rng.integers(x.size)]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total == 0.0:
            centers.append(x[rng.integers(x.size)])
            continue
        centers.append(x[rng.choice(x.size, p=d2 / total)])
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    labels = None
    for _ in range(max_iter):
        assign = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if labels is not None and np.array_equal(assign, labels):
            break
        labels = assign
        for j in range(centers.size):
            members = x[labels == j]
            if members.size:
                centers[j] = members.mean()
    order = np.argsort(centers, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    labels = rank[labels]
    centers = centers[order]
    wcss = float(np.sum((x - centers[labels]) ** 2))
    return labels.astype(np.int64), wcss


def within_cluster_ss(x: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for j in np.unique(labels):
        members = x[labels == j]
        total += float(np.sum((members - members.mean()) ** 2))
    return total


def gap_statistic(scores, k_max: int, B: int = 10, seed: int = 0) -> int:
    """Number of clusters by the gap criterion.

    Compares log within-cluster dispersion against B reference draws
    uniform on [min, max] of the scores and returns the smallest k with
    Gap(k) >= Gap(k+1) - s_{k+1}; when no k qualifies, returns 1.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    if k_max < 2:
        raise ValueError(f"k_max must be >= 2, got {k_max}")
    if x.size < 2 or np.all(x == x[0]):
        return 1
    k_max = min(k_max, x.size)

    lo, hi = x.min(), x.max()
    ks = range(1, k_max + 1)
    log_w = np.array([_log_dispersion(x, k, seed, "data") for k in ks])

    log_w_ref = np.empty((B, k_max))
    for b in range(B):
        ref = stream(seed, f"gap/ref{b}").uniform(lo, hi, size=x.size)
        log_w_ref[b] = [_log_dispersion(ref, k, seed, f"ref{b}") for k in ks]

    gap = log_w_ref.mean(axis=0) - log_w
    sk = log_w_ref.std(axis=0) * np.sqrt(1.0 + 1.0 / B)

    for k in range(1, k_max):
        if gap[k - 1] >= gap[k] - sk[k]:
            return k
    return 1


def _log_dispersion(x: np.ndarray, k: int, seed: int, tag: str) -> float:
    labels = kmeans(x, k, seed=child_seed(seed, f"gap/{tag}"))
    return float(np.log(max(within_cluster_ss(x, labels), 1e-300)))
