"""Downward-testing selection of valid instruments over a merge path.

The pipeline clusters every just-identified point estimate, then walks the
dendrogram from one cluster upward: at each cluster count K the largest
cluster nominates a candidate valid set (the union of instruments over its
member combinations), and selection stops at the first K whose candidate
the Sargan test does not reject.  For several endogenous regressors a
cluster holds P-combinations rather than single instruments, so the
bookkeeping goes through families of combinations.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .clustering import generic_merge_path, ward_merge_path
from .data import partial_out_controls, validate
from .estimation import just_identified_all, post_selection_tsls, sargan


class InvalidDatasetError(ValueError):
    """Dataset failed validation; diagnostics are in the message."""


@dataclass(frozen=True)
class FamilySelection:
    """The candidate model nominated by the largest cluster at one K.

    ``cluster_members`` are estimate indices, ``family`` their instrument
    combinations, ``valid_ivs`` the union of instruments over the family
    and ``invalid_ivs`` its complement.
    """

    K: int
    cluster_members: tuple
    family: tuple
    valid_ivs: tuple
    invalid_ivs: tuple
    sargan: object


@dataclass(frozen=True, eq=False)
class SelectionResult:
    """Outcome of the full downward-testing selection.

    When no candidate along the path passes, ``all_rejected`` is set and
    ``valid`` holds the candidate with the largest Sargan p-value rather
    than an accepted model; callers must treat that case as flagged, not
    clean.
    """

    valid: tuple
    invalid: tuple
    stop_K: int
    path: tuple
    fit: object
    all_rejected: bool


@dataclass(frozen=True, eq=False)
class LATEGroup:
    """One effect group: its instruments, cluster center and fit."""

    iv_indices: tuple
    center: np.ndarray
    fit: object
    sargan: object


@dataclass(frozen=True, eq=False)
class LATEResult:
    """All effect groups found at the first K where every cluster passes."""

    K: int
    groups: tuple


def _family_of(cell, estimates):
    family = tuple(estimates[i].combo for i in cell)
    valid = tuple(sorted(set(itertools.chain.from_iterable(c.indices for c in family))))
    return family, valid


def largest_family(partition, estimates, dataset, config):
    """Nominate the candidate model from a partition of the estimates.

    Among clusters with the most estimates, prefer the one whose family
    spans the most distinct instruments; break remaining ties by the
    smaller Sargan statistic of the implied valid set, then
    lexicographically on the sorted valid indices.
    """
    J = dataset.J
    cells = list(partition)
    info = []
    for cell in cells:
        family, valid = _family_of(cell, estimates)
        info.append((cell, family, valid))
    max_size = max(len(cell) for cell, _, _ in info)
    cands = [t for t in info if len(t[0]) == max_size]
    if len(cands) > 1:
        max_ivs = max(len(valid) for _, _, valid in cands)
        cands = [t for t in cands if len(t[2]) == max_ivs]
    sargans = {}
    if len(cands) > 1:
        for cell, _, valid in cands:
            sargans[valid] = sargan(dataset, valid, config)
        best_stat = min(sargans[valid].statistic for _, _, valid in cands)
        cands = [t for t in cands if sargans[t[2]].statistic == best_stat]
    if len(cands) > 1:
        cands.sort(key=lambda t: t[2])
    cell, family, valid = cands[0]
    outcome = sargans.get(valid) or sargan(dataset, valid, config)
    invalid = tuple(j for j in range(J) if j not in set(valid))
    return FamilySelection(
        K=len(partition),
        cluster_members=tuple(cell),
        family=family,
        valid_ivs=valid,
        invalid_ivs=invalid,
        sargan=outcome,
    )


def downward_test(dataset, estimates, dendrogram, config):
    """Walk K = 1, 2, ... and stop at the first unrejected candidate.

    K runs to one below the number of leaves, so the last tested candidate
    still carries at least one overidentifying restriction.  If every
    candidate is rejected, the one with the largest p-value is returned
    with ``all_rejected`` set.
    """
    path = []
    for K in range(1, dendrogram.n_leaves):
        fs = largest_family(dendrogram.partition_at(K), estimates, dataset, config)
        path.append(fs)
        if fs.sargan.passed:
            fit = post_selection_tsls(dataset, fs.valid_ivs)
            return SelectionResult(
                valid=fs.valid_ivs,
                invalid=fs.invalid_ivs,
                stop_K=K,
                path=tuple(path),
                fit=fit,
                all_rejected=False,
            )
    best = max(path, key=lambda f: (f.sargan.p_value, -f.K))
    fit = post_selection_tsls(dataset, best.valid_ivs)
    return SelectionResult(
        valid=best.valid_ivs,
        invalid=best.invalid_ivs,
        stop_K=best.K,
        path=tuple(path),
        fit=fit,
        all_rejected=True,
    )


def prepare(dataset, config):
    """Validate, partial out controls, estimate and cluster.

    Returns the control-free dataset, the just-identified estimates and
    the dendrogram over their point estimates.  This is the shared front
    half of :func:`select_valid` and :func:`late_groups`; callers that need
    the intermediate artifacts (diagnostics, dendrogram export) use it
    directly.
    """
    diags = validate(dataset)
    if diags:
        raise InvalidDatasetError("; ".join(diags))
    ds = dataset
    if ds.m > 0 or ds.intercept:
        ds = partial_out_controls(ds)
    estimates = just_identified_all(ds, config)
    points = np.array([e.beta for e in estimates])
    spec = config.metric_spec()
    if spec.linkage == "ward":
        dendrogram = ward_merge_path(points)
    else:
        dendrogram = generic_merge_path(points, spec)
    return ds, estimates, dendrogram


def select_valid(dataset, config):
    """Full pipeline: estimates, Ward path, downward testing.

    Deterministic given the configuration; permuting instrument columns
    permutes the selected sets accordingly.
    """
    ds, estimates, dendrogram = prepare(dataset, config)
    return downward_test(ds, estimates, dendrogram, config)


def late_groups(dataset, config):
    """Recover every effect group instead of only the largest.

    At each K the Sargan test runs on every cluster's family, with the
    cluster's complement as controls; the walk stops at the first K where
    no cluster is rejected (clusters without overidentifying restrictions
    pass vacuously).  Each group reports the union of its instruments, its
    cluster mean and a post-selection fit on its instruments.
    """
    ds, estimates, dendrogram = prepare(dataset, config)
    points = np.array([e.beta for e in estimates])
    for K in range(1, dendrogram.n_leaves + 1):
        partition = dendrogram.partition_at(K)
        outcomes = []
        ok = True
        for cell in partition:
            _, valid = _family_of(cell, estimates)
            out = sargan(ds, valid, config)
            outcomes.append((cell, valid, out))
            if not out.passed:
                ok = False
                break
        if not ok:
            continue
        groups = []
        for cell, valid, out in outcomes:
            center = points[list(cell)].mean(axis=0)
            fit = post_selection_tsls(ds, valid)
            groups.append(
                LATEGroup(iv_indices=valid, center=center, fit=fit, sargan=out)
            )
        return LATEResult(K=K, groups=tuple(groups))
    raise RuntimeError("unreachable: singleton clusters pass vacuously")


def union_ci_for_result(clean_dataset, result, config, level):
    """Union of just-identified confidence intervals over the selected set.

    For every P-combination within the selected valid set, the
    just-identified 2SLS fit yields a per-coordinate normal interval at
    ``1 - level``; the intervals' convex hull per coordinate is returned as
    an array of shape (P, 2).
    """
    P = clean_dataset.P
    z = float(stats.norm.ppf(1.0 - level / 2.0))
    lo = np.full(P, np.inf)
    hi = np.full(P, -np.inf)
    for combo in itertools.combinations(sorted(result.valid), P):
        fit = post_selection_tsls(clean_dataset, combo)
        half = z * fit.se
        lo = np.minimum(lo, fit.beta - half)
        hi = np.maximum(hi, fit.beta + half)
    return np.column_stack([lo, hi])


def plausibly_exogenous_union_ci(dataset, config, level):
    """Selection-then-union interval for locally violated exclusion.

    Runs the full selection, then unions the just-identified confidence
    intervals of the combinations inside the selected valid set.  The union
    has conservative coverage when the selected set contains at least one
    valid instrument, and screens out strongly invalid instruments that
    would otherwise blow up the interval.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    ds, estimates, dendrogram = prepare(dataset, config)
    result = downward_test(ds, estimates, dendrogram, config)
    return union_ci_for_result(ds, result, config, level)
