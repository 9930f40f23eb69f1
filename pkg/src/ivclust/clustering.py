"""Agglomerative hierarchical clustering of point estimates.

The main entry point is :func:`ward_merge_path`, which greedily merges the
pair of clusters with the smallest Ward cost

.. math:: \\frac{|S_k||S_l|}{|S_k| + |S_l|} \\lVert \\bar S_k - \\bar S_l \\rVert^2

at every step, recorded bottom-up as a :class:`Dendrogram`.  The Ward costs
are propagated with the Lance-Williams recurrence, which reproduces the
direct formula exactly.  :func:`generic_merge_path` runs the same greedy
loop under alternative dissimilarities (Manhattan, Minkowski) and linkage
rules (complete, median, centroid).
"""

from dataclasses import dataclass

import numpy as np

_METRICS = ("euclidean", "manhattan", "minkowski")
_LINKAGES = ("ward", "complete", "median", "centroid")


@dataclass(frozen=True)
class MetricSpec:
    """Dissimilarity metric and linkage rule for the agglomeration loop.

    Ward linkage is derived from squared Euclidean geometry and is only
    offered with the Euclidean metric.  A Minkowski exponent below 1 is
    accepted but yields a dissimilarity that violates the triangle
    inequality; the merge path is still well defined.
    """

    metric: str = "euclidean"
    p: float = 2.0
    linkage: str = "ward"

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ValueError(f"unknown metric {self.metric!r}, choose from {_METRICS}")
        if self.linkage not in _LINKAGES:
            raise ValueError(f"unknown linkage {self.linkage!r}, choose from {_LINKAGES}")
        if self.metric == "minkowski" and not self.p > 0:
            raise ValueError("minkowski exponent must be positive")
        if self.linkage == "ward" and self.metric != "euclidean":
            raise ValueError("ward linkage requires the euclidean metric")

    @property
    def exponent(self):
        if self.metric == "euclidean":
            return 2.0
        if self.metric == "manhattan":
            return 1.0
        return float(self.p)


class Dendrogram:
    """Full merge path of an agglomerative clustering run.

    Parameters
    ----------
    n_leaves: int
        Number of clustered points; leaf ids are ``0 .. n_leaves - 1``.
    merges: sequence of (a, b, new_id, height)
        One entry per merge, ``n_leaves - 1`` in total.  ``a < b`` are the
        merged cluster ids, ``new_id`` is the id of the created cluster
        (``n_leaves``, ``n_leaves + 1``, ...), and ``height`` is the linkage
        cost of the merge (the Ward cost under Ward linkage, not a running
        total).
    """

    def __init__(self, n_leaves, merges):
        merges = tuple((int(a), int(b), int(c), float(h)) for a, b, c, h in merges)
        if len(merges) != n_leaves - 1:
            raise ValueError(
                f"expected {n_leaves - 1} merges for {n_leaves} leaves, got {len(merges)}"
            )
        self.n_leaves = int(n_leaves)
        self.merges = merges
        members = {i: (i,) for i in range(self.n_leaves)}
        for a, b, cid, _ in merges:
            members[cid] = members[a] + members[b]
        self._members = {k: tuple(sorted(v)) for k, v in members.items()}

    @property
    def leaves(self):
        return tuple(range(self.n_leaves))

    @property
    def heights(self):
        return np.array([m[3] for m in self.merges])

    def partition_at(self, K):
        """Partition of the leaves into ``K`` clusters.

        Obtained by undoing the last ``K - 1`` merges.  Cells are sorted
        tuples, ordered by their smallest member.
        """
        if not 1 <= K <= self.n_leaves:
            raise ValueError(f"K must be in [1, {self.n_leaves}], got {K}")
        alive = set(range(self.n_leaves))
        for a, b, cid, _ in self.merges[: self.n_leaves - K]:
            alive.discard(a)
            alive.discard(b)
            alive.add(cid)
        return tuple(sorted((self._members[i] for i in alive), key=lambda c: c[0]))

    def memberships(self):
        """Partitions for every cluster count, keyed by K."""
        return {K: self.partition_at(K) for K in range(1, self.n_leaves + 1)}


def partition_at(dendrogram, K):
    """Module-level alias for :meth:`Dendrogram.partition_at`."""
    return dendrogram.partition_at(K)


def _check_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least 2 points of equal dimension")
    bad = np.nonzero(~np.isfinite(pts).all(axis=1))[0]
    if bad.size:
        raise ValueError(
            f"non-finite coordinate in point (estimate combination) {bad[0]}"
        )
    return pts


def _minkowski(diff, exponent):
    # diff: |x - y| along the last axis
    if exponent == 2.0:
        return np.sqrt((diff**2).sum(axis=-1))
    if exponent == 1.0:
        return diff.sum(axis=-1)
    return (diff**exponent).sum(axis=-1) ** (1.0 / exponent)


def pairwise_distances(points, metric=MetricSpec()):
    """Symmetric dissimilarity matrix between points under the given metric.

    Raises if any coordinate is non-finite, naming the offending point.
    """
    pts = _check_points(points)
    out = _minkowski(np.abs(pts[:, None, :] - pts[None, :, :]), metric.exponent)
    np.fill_diagonal(out, 0.0)
    return out


def _agglomerate(D, L, update, monotone_tol=None):
    """Greedy merge loop over the mutable cost matrix ``D``.

    ``D`` has capacity ``2L - 1`` per side with the leaf block filled in and
    ``inf`` on the diagonal.  ``update(a, b, cid, rest)`` returns the costs
    between the freshly merged cluster and every cluster id in ``rest``.
    Ties on the minimal cost are broken by the lexicographically smallest
    (a, b) id pair, so the merge sequence is fully deterministic.
    """
    active = np.zeros(D.shape[0], dtype=bool)
    active[:L] = True
    # nn_dist[i] is the row minimum of D[i, j] over active j > i, nn_idx[i]
    # the smallest such j attaining it.
    nn_dist = np.full(D.shape[0], np.inf)
    nn_idx = np.full(D.shape[0], -1, dtype=np.int64)

    def recompute_row(i):
        ids = np.nonzero(active)[0]
        js = ids[ids > i]
        if js.size == 0:
            nn_dist[i], nn_idx[i] = np.inf, -1
            return
        vals = D[i, js]
        k = int(np.argmin(vals))
        nn_dist[i], nn_idx[i] = vals[k], int(js[k])

    for i in range(L):
        recompute_row(i)

    merges = []
    prev_h = -np.inf
    for step in range(L - 1):
        ids = np.nonzero(active)[0]
        a = int(ids[np.argmin(nn_dist[ids])])
        b = int(nn_idx[a])
        h = float(nn_dist[a])
        if monotone_tol is not None:
            if h < prev_h - monotone_tol * max(abs(prev_h), 1.0):
                raise RuntimeError(f"merge heights decreased at step {step}")
            prev_h = max(prev_h, h)
        cid = L + step
        merges.append((a, b, cid, h))
        active[a] = active[b] = False
        rest = np.nonzero(active)[0]
        if rest.size:
            newd = update(a, b, cid, rest)
            D[cid, rest] = newd
            D[rest, cid] = newd
        active[cid] = True
        nn_dist[cid], nn_idx[cid] = np.inf, -1
        for i in rest:
            if nn_idx[i] == a or nn_idx[i] == b:
                recompute_row(i)
            else:
                v = D[i, cid]
                if v < nn_dist[i]:
                    nn_dist[i], nn_idx[i] = v, cid
    return Dendrogram(L, merges)


def _matrix_with_capacity(init, L):
    D = np.full((2 * L - 1, 2 * L - 1), np.inf)
    D[:L, :L] = init
    np.fill_diagonal(D, np.inf)
    return D


def ward_merge_path(points):
    """Ward dendrogram over the points.

    Initial costs between singletons are half the squared Euclidean
    distance; the Lance-Williams recurrence with Ward coefficients then
    yields the exact Ward cost of every later merge.  Heights are checked
    to be nondecreasing, a property Ward linkage guarantees.
    """
    pts = _check_points(points)
    L = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    D = _matrix_with_capacity(0.5 * (diff**2).sum(axis=-1), L)
    size = np.zeros(2 * L - 1)
    size[:L] = 1.0

    def update(a, b, cid, rest):
        size[cid] = size[a] + size[b]
        sk = size[rest]
        tot = size[a] + size[b] + sk
        return ((size[a] + sk) * D[a, rest] + (size[b] + sk) * D[b, rest] - sk * D[a, b]) / tot

    return _agglomerate(D, L, update, monotone_tol=1e-9)


def generic_merge_path(points, spec):
    """Merge path under a configurable metric and linkage.

    Ward linkage dispatches to :func:`ward_merge_path`.  Complete linkage
    propagates the maximum pairwise dissimilarity; median and centroid
    linkage measure the metric distance between cluster medians or means,
    recomputed from the member points after every merge.
    """
    if spec.linkage == "ward":
        return ward_merge_path(points)
    pts = _check_points(points)
    L = pts.shape[0]
    exponent = spec.exponent
    D = _matrix_with_capacity(pairwise_distances(pts, spec), L)

    if spec.linkage == "complete":

        def update(a, b, cid, rest):
            return np.maximum(D[a, rest], D[b, rest])

    else:
        center = np.median if spec.linkage == "median" else np.mean
        members = {i: [i] for i in range(L)}
        reps = {i: pts[i] for i in range(L)}

        def update(a, b, cid, rest):
            members[cid] = members.pop(a) + members.pop(b)
            reps[cid] = center(pts[members[cid]], axis=0)
            others = np.array([reps[k] for k in rest])
            return _minkowski(np.abs(others - reps[cid]), exponent)

    return _agglomerate(D, L, update)
